#include "core/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "core/rng.hpp"

namespace headgate::model {

void ModelConfig::validate() const {
    require(layers >= 1 && heads >= 1 && head_dim >= 1 && ffn_dim >= 1 && vocab >= 2 &&
                max_seq >= 1,
            errc::shape, "model config: all counts must be >= 1 (vocab >= 2)");
    require(dim == heads * head_dim, errc::shape,
            "model config: dim must equal heads * head_dim");
}

namespace {
constexpr std::array<const char*, kTapPositionCount> kTapNames = {
    "layer_input",         "pre_attn_norm_out", "q_proj_out",   "k_proj_out",
    "v_proj_out",          "attn_probs_last_row", "attn_head_output", "attn_concat_out",
    "attn_o_proj_out",     "residual_post_attn", "pre_ffn_norm_out", "ffn_up_out",
    "ffn_act_out",         "ffn_down_out",      "residual_post_ffn",
};
} // namespace

const char* tap_position_name(TapPosition p) { return kTapNames[static_cast<int>(p)]; }

TapPosition tap_position_from_name(const std::string& name) {
    for (int i = 0; i < kTapPositionCount; ++i)
        if (name == kTapNames[i]) return static_cast<TapPosition>(i);
    fail(errc::input, "unknown tap position '" + name + "'");
}

bool tap_position_per_head(TapPosition p) {
    switch (p) {
        case TapPosition::q_proj_out:
        case TapPosition::k_proj_out:
        case TapPosition::v_proj_out:
        case TapPosition::attn_probs_last_row:
        case TapPosition::attn_head_output:
            return true;
        default:
            return false;
    }
}

std::string TapPoint::to_string() const {
    std::string s = "L" + std::to_string(layer) + "." + tap_position_name(position);
    if (head >= 0) s += ".h" + std::to_string(head);
    return s;
}

std::vector<TapPoint> list_tap_points(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<TapPoint> out;
    out.reserve(static_cast<size_t>(cfg.layers) * kTapPositionCount);
    for (int l = 0; l < cfg.layers; ++l)
        for (int p = 0; p < kTapPositionCount; ++p)
            out.push_back({l, static_cast<TapPosition>(p), -1});
    return out;
}

std::vector<TapPoint> expand_tap(const TapPoint& tmpl, const ModelConfig& cfg) {
    if (!tap_position_per_head(tmpl.position)) return {tmpl};
    std::vector<TapPoint> out;
    for (int h = 0; h < cfg.heads; ++h) out.push_back({tmpl.layer, tmpl.position, h});
    return out;
}

std::vector<TapPoint> all_taps(const ModelConfig& cfg) {
    std::vector<TapPoint> out;
    for (const TapPoint& t : list_tap_points(cfg))
        for (const TapPoint& c : expand_tap(t, cfg)) out.push_back(c);
    return out;
}

const char* role_name(TokenRole r) {
    switch (r) {
        case TokenRole::system: return "system";
        case TokenRole::content: return "content";
        case TokenRole::structural: return "structural";
        case TokenRole::generated: return "generated";
    }
    return "content";
}

TokenRole role_from_name(const std::string& s) {
    if (s == "system") return TokenRole::system;
    if (s == "content") return TokenRole::content;
    if (s == "structural") return TokenRole::structural;
    if (s == "generated") return TokenRole::generated;
    fail(errc::format, "unknown token role '" + s + "'");
}

const Matrix& ActivationTrace::at(const TapPoint& tp) const {
    auto it = taps.find(tp);
    if (it == taps.end()) fail(errc::tap, "trace is missing tap " + tp.to_string());
    return it->second;
}

void ModelWeights::validate() const {
    cfg.validate();
    auto check = [](bool ok, const std::string& name) {
        require(ok, errc::shape, "weights: bad shape for " + name);
    };
    check(token_embed.rows == cfg.vocab && token_embed.cols == cfg.dim, "token_embed");
    check(pos_embed.rows == cfg.max_seq && pos_embed.cols == cfg.dim, "pos_embed");
    check(static_cast<int>(layers.size()) == cfg.layers, "layers");
    for (const LayerWeights& lw : layers) {
        check(static_cast<int>(lw.wq.size()) == cfg.heads, "wq");
        for (int h = 0; h < cfg.heads; ++h) {
            check(lw.wq[h].rows == cfg.dim && lw.wq[h].cols == cfg.head_dim, "wq");
            check(lw.wk[h].rows == cfg.dim && lw.wk[h].cols == cfg.head_dim, "wk");
            check(lw.wv[h].rows == cfg.dim && lw.wv[h].cols == cfg.head_dim, "wv");
        }
        check(lw.wo.rows == cfg.dim && lw.wo.cols == cfg.dim, "wo");
        check(lw.ln1_gain.dim() == cfg.dim && lw.ln1_bias.dim() == cfg.dim, "ln1");
        check(lw.w_up.rows == cfg.dim && lw.w_up.cols == cfg.ffn_dim, "w_up");
        check(lw.w_down.rows == cfg.ffn_dim && lw.w_down.cols == cfg.dim, "w_down");
        check(lw.ln2_gain.dim() == cfg.dim && lw.ln2_bias.dim() == cfg.dim, "ln2");
    }
    check(final_gain.dim() == cfg.dim && final_bias.dim() == cfg.dim, "final_norm");
    check(w_out.rows == cfg.dim && w_out.cols == cfg.vocab, "w_out");
}

namespace {

void fill_normal(Rng& rng, Matrix& m, float stddev) {
    for (float& x : m.data) x = rng.next_normal_f(stddev);
}

} // namespace

ModelWeights init_weights(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    ModelWeights w;
    w.cfg = cfg;
    const float proj_std = 1.0f / std::sqrt(static_cast<float>(cfg.dim));
    const float down_std = 1.0f / std::sqrt(static_cast<float>(cfg.ffn_dim));

    w.token_embed = Matrix(cfg.vocab, cfg.dim);
    fill_normal(rng, w.token_embed, 0.02f);
    w.pos_embed = Matrix(cfg.max_seq, cfg.dim);
    fill_normal(rng, w.pos_embed, 0.02f);

    w.layers.resize(cfg.layers);
    for (LayerWeights& lw : w.layers) {
        lw.wq.resize(cfg.heads);
        lw.wk.resize(cfg.heads);
        lw.wv.resize(cfg.heads);
        for (int h = 0; h < cfg.heads; ++h) {
            lw.wq[h] = Matrix(cfg.dim, cfg.head_dim);
            lw.wk[h] = Matrix(cfg.dim, cfg.head_dim);
            lw.wv[h] = Matrix(cfg.dim, cfg.head_dim);
            fill_normal(rng, lw.wq[h], proj_std);
            fill_normal(rng, lw.wk[h], proj_std);
            fill_normal(rng, lw.wv[h], proj_std);
        }
        lw.wo = Matrix(cfg.dim, cfg.dim);
        fill_normal(rng, lw.wo, proj_std);
        lw.ln1_gain = Vector(cfg.dim);
        lw.ln1_bias = Vector(cfg.dim);
        std::fill(lw.ln1_gain.data.begin(), lw.ln1_gain.data.end(), 1.0f);
        lw.w_up = Matrix(cfg.dim, cfg.ffn_dim);
        fill_normal(rng, lw.w_up, proj_std);
        lw.w_down = Matrix(cfg.ffn_dim, cfg.dim);
        fill_normal(rng, lw.w_down, down_std);
        lw.ln2_gain = Vector(cfg.dim);
        lw.ln2_bias = Vector(cfg.dim);
        std::fill(lw.ln2_gain.data.begin(), lw.ln2_gain.data.end(), 1.0f);
    }
    w.final_gain = Vector(cfg.dim);
    w.final_bias = Vector(cfg.dim);
    std::fill(w.final_gain.data.begin(), w.final_gain.data.end(), 1.0f);
    w.w_out = Matrix(cfg.dim, cfg.vocab);
    fill_normal(rng, w.w_out, proj_std);
    return w;
}

namespace {

Matrix layer_norm_rows(const Matrix& x, const Vector& gain, const Vector& bias) {
    Matrix out(x.rows, x.cols);
    for (int t = 0; t < x.rows; ++t) {
        Vector row(x.cols);
        std::copy(x.row(t), x.row(t) + x.cols, row.data.begin());
        Vector y = layer_norm(row, gain, bias, kLayerNormEps);
        std::copy(y.data.begin(), y.data.end(), out.row(t));
    }
    return out;
}

// causal row softmax over keys 0..t; columns beyond t stay zero
Matrix causal_softmax(const Matrix& scores) {
    Matrix out(scores.rows, scores.cols);
    for (int t = 0; t < scores.rows; ++t) {
        const float* src = scores.row(t);
        float* dst = out.row(t);
        float mx = src[0];
        for (int u = 1; u <= t; ++u) mx = std::max(mx, src[u]);
        float sum = 0.0f;
        for (int u = 0; u <= t; ++u) {
            dst[u] = std::exp(src[u] - mx);
            sum += dst[u];
        }
        const float inv = 1.0f / sum;
        for (int u = 0; u <= t; ++u) dst[u] *= inv;
    }
    return out;
}

} // namespace

ForwardResult forward(const ModelWeights& w, std::span<const int32_t> tokens,
                      const std::vector<TapPoint>& taps, std::span<const TokenRole> roles) {
    const ModelConfig& cfg = w.cfg;
    const int n = static_cast<int>(tokens.size());
    require(n >= 1, errc::input, "forward: empty token sequence");
    require(n <= cfg.max_seq, errc::length,
            "forward: sequence length " + std::to_string(n) + " exceeds max_seq");
    for (int32_t t : tokens)
        require(t >= 0 && t < cfg.vocab, errc::range,
                "forward: token id " + std::to_string(t) + " outside vocab");
    if (!roles.empty())
        require(static_cast<int>(roles.size()) == n, errc::input,
                "forward: roles length must match tokens");
    for (const TapPoint& tp : taps) {
        require(tp.layer >= 0 && tp.layer < cfg.layers, errc::range,
                "forward: tap layer out of range");
        if (tap_position_per_head(tp.position))
            require(tp.head >= 0 && tp.head < cfg.heads, errc::range,
                    "forward: tap " + std::string(tap_position_name(tp.position)) +
                        " needs a head index in range");
        else
            require(tp.head < 0, errc::input, "forward: tap " +
                        std::string(tap_position_name(tp.position)) + " is not per-head");
    }

    ForwardResult res;
    res.trace.tokens.assign(tokens.begin(), tokens.end());
    if (roles.empty())
        res.trace.roles.assign(static_cast<size_t>(n), TokenRole::content);
    else
        res.trace.roles.assign(roles.begin(), roles.end());

    auto want = [&](int layer, TapPosition p, int head) {
        return std::find(taps.begin(), taps.end(), TapPoint{layer, p, head}) != taps.end();
    };
    auto capture = [&](int layer, TapPosition p, int head, const Matrix& m) {
        if (want(layer, p, head)) res.trace.taps[{layer, p, head}] = m;
    };

    Matrix x(n, cfg.dim);
    for (int t = 0; t < n; ++t) {
        const float* te = w.token_embed.row(tokens[static_cast<size_t>(t)]);
        const float* pe = w.pos_embed.row(t);
        float* dst = x.row(t);
        for (int j = 0; j < cfg.dim; ++j) dst[j] = te[j] + pe[j];
    }

    const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        capture(l, TapPosition::layer_input, -1, x);

        Matrix xn = layer_norm_rows(x, lw.ln1_gain, lw.ln1_bias);
        capture(l, TapPosition::pre_attn_norm_out, -1, xn);

        Matrix concat(n, cfg.dim);
        for (int h = 0; h < cfg.heads; ++h) {
            Matrix q = matmul(xn, lw.wq[h]);
            Matrix k = matmul(xn, lw.wk[h]);
            Matrix v = matmul(xn, lw.wv[h]);
            capture(l, TapPosition::q_proj_out, h, q);
            capture(l, TapPosition::k_proj_out, h, k);
            capture(l, TapPosition::v_proj_out, h, v);

            Matrix scores(n, n);
            for (int t = 0; t < n; ++t)
                for (int u = 0; u <= t; ++u) {
                    float acc = 0.0f;
                    const float* qr = q.row(t);
                    const float* kr = k.row(u);
                    for (int c = 0; c < cfg.head_dim; ++c) acc += qr[c] * kr[c];
                    scores.at(t, u) = acc * scale;
                }
            Matrix probs = causal_softmax(scores);
            capture(l, TapPosition::attn_probs_last_row, h, probs);

            Matrix head_out(n, cfg.head_dim);
            for (int t = 0; t < n; ++t) {
                float* orow = head_out.row(t);
                for (int u = 0; u <= t; ++u) {
                    const float p = probs.at(t, u);
                    const float* vr = v.row(u);
                    for (int c = 0; c < cfg.head_dim; ++c) orow[c] += p * vr[c];
                }
            }
            capture(l, TapPosition::attn_head_output, h, head_out);
            for (int t = 0; t < n; ++t)
                std::copy(head_out.row(t), head_out.row(t) + cfg.head_dim,
                          concat.row(t) + h * cfg.head_dim);
        }
        capture(l, TapPosition::attn_concat_out, -1, concat);

        Matrix attn_out = matmul(concat, lw.wo);
        capture(l, TapPosition::attn_o_proj_out, -1, attn_out);

        Matrix resid1(n, cfg.dim);
        for (size_t i = 0; i < x.data.size(); ++i) resid1.data[i] = x.data[i] + attn_out.data[i];
        capture(l, TapPosition::residual_post_attn, -1, resid1);

        Matrix xn2 = layer_norm_rows(resid1, lw.ln2_gain, lw.ln2_bias);
        capture(l, TapPosition::pre_ffn_norm_out, -1, xn2);

        Matrix up = matmul(xn2, lw.w_up);
        capture(l, TapPosition::ffn_up_out, -1, up);
        Matrix act(n, cfg.ffn_dim);
        for (size_t i = 0; i < up.data.size(); ++i) act.data[i] = gelu_scalar(up.data[i]);
        capture(l, TapPosition::ffn_act_out, -1, act);
        Matrix down = matmul(act, lw.w_down);
        capture(l, TapPosition::ffn_down_out, -1, down);

        Matrix resid2(n, cfg.dim);
        for (size_t i = 0; i < resid1.data.size(); ++i)
            resid2.data[i] = resid1.data[i] + down.data[i];
        capture(l, TapPosition::residual_post_ffn, -1, resid2);
        x = std::move(resid2);
    }

    Matrix xf = layer_norm_rows(x, w.final_gain, w.final_bias);
    res.logits = matmul(xf, w.w_out);
    check_finite(res.logits, "forward logits");
    return res;
}

std::vector<TensorRef> tensor_refs(ModelWeights& w) {
    std::vector<TensorRef> refs;
    auto m = [&](const std::string& name, Matrix& mat) { refs.push_back({name, &mat, nullptr}); };
    auto v = [&](const std::string& name, Vector& vec) { refs.push_back({name, nullptr, &vec}); };
    m("token_embed", w.token_embed);
    m("pos_embed", w.pos_embed);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& lw = w.layers[l];
        v(p + "ln1.gain", lw.ln1_gain);
        v(p + "ln1.bias", lw.ln1_bias);
        for (size_t h = 0; h < lw.wq.size(); ++h) {
            const std::string hp = p + "attn.h" + std::to_string(h) + ".";
            m(hp + "wq", lw.wq[h]);
            m(hp + "wk", lw.wk[h]);
            m(hp + "wv", lw.wv[h]);
        }
        m(p + "attn.wo", lw.wo);
        v(p + "ln2.gain", lw.ln2_gain);
        v(p + "ln2.bias", lw.ln2_bias);
        m(p + "ffn.w_up", lw.w_up);
        m(p + "ffn.w_down", lw.w_down);
    }
    v("final_norm.gain", w.final_gain);
    v("final_norm.bias", w.final_bias);
    m("w_out", w.w_out);
    return refs;
}

} // namespace headgate::model
