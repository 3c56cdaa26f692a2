#include "core/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "core/rng.hpp"

namespace headgate::model {

void TrainConfig::validate() const {
    require(steps >= 0 && batch_size >= 1, errc::input, "train config: bad steps/batch");
    require(lr_max > 0.0f && lr_min >= 0.0f && lr_min <= lr_max, errc::input,
            "train config: bad learning rates");
    require(momentum >= 0.0f && momentum < 1.0f, errc::input, "train config: bad momentum");
    require(clip_norm > 0.0f, errc::input, "train config: bad clip norm");
    require(holdout_fraction >= 0.0 && holdout_fraction < 1.0, errc::input,
            "train config: holdout fraction must be in [0,1)");
}

namespace {

struct RowStats {
    float mean;
    float inv; // 1/sqrt(var + eps)
};

// layer norm over rows, caching the per-row statistics needed for backward
Matrix ln_rows(const Matrix& x, const Vector& gain, const Vector& bias,
               std::vector<RowStats>& stats) {
    const int n = x.rows, d = x.cols;
    Matrix out(n, d);
    stats.resize(static_cast<size_t>(n));
    for (int t = 0; t < n; ++t) {
        const float* src = x.row(t);
        float mean = 0.0f;
        for (int j = 0; j < d; ++j) mean += src[j];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (int j = 0; j < d; ++j) {
            const float dv = src[j] - mean;
            var += dv * dv;
        }
        var /= static_cast<float>(d);
        const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
        stats[static_cast<size_t>(t)] = {mean, inv};
        float* dst = out.row(t);
        for (int j = 0; j < d; ++j) dst[j] = (src[j] - mean) * inv * gain[j] + bias[j];
    }
    return out;
}

// dx for y = gain * (x-mean)*inv + bias; accumulates dgain/dbias
void ln_rows_backward(const Matrix& dout, const Matrix& x, const std::vector<RowStats>& stats,
                      const Vector& gain, Matrix& dx, Vector& dgain, Vector& dbias) {
    const int n = x.rows, d = x.cols;
    for (int t = 0; t < n; ++t) {
        const RowStats st = stats[static_cast<size_t>(t)];
        const float* xr = x.row(t);
        const float* dor = dout.row(t);
        float* dxr = dx.row(t);
        float sum_dy = 0.0f, sum_dyy = 0.0f;
        for (int j = 0; j < d; ++j) {
            const float y = (xr[j] - st.mean) * st.inv;
            const float dy = dor[j] * gain[j];
            sum_dy += dy;
            sum_dyy += dy * y;
            dgain[j] += dor[j] * y;
            dbias[j] += dor[j];
        }
        const float m_dy = sum_dy / static_cast<float>(d);
        const float m_dyy = sum_dyy / static_cast<float>(d);
        for (int j = 0; j < d; ++j) {
            const float y = (xr[j] - st.mean) * st.inv;
            const float dy = dor[j] * gain[j];
            dxr[j] += st.inv * (dy - m_dy - y * m_dyy);
        }
    }
}

// g += a^T * b
void accum_at_b(const Matrix& a, const Matrix& b, Matrix& g) {
    for (int i = 0; i < a.rows; ++i) {
        const float* ar = a.row(i);
        const float* br = b.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const float aik = ar[k];
            float* gr = g.row(k);
            for (int j = 0; j < b.cols; ++j) gr[j] += aik * br[j];
        }
    }
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
    return t;
}

struct LayerCache {
    Matrix x_in, xn1;
    std::vector<RowStats> ln1_stats;
    std::vector<Matrix> q, k, v, probs;
    Matrix concat, resid1, xn2;
    std::vector<RowStats> ln2_stats;
    Matrix up, act;
};

struct SeqCache {
    std::vector<LayerCache> layers;
    Matrix x_final, xf;
    std::vector<RowStats> lnf_stats;
    Matrix logits;
};

// transposed weight copies, rebuilt once per optimizer step
struct TransposedWeights {
    std::vector<std::vector<Matrix>> wq_t, wk_t, wv_t; // [layer][head]
    std::vector<Matrix> wo_t, w_up_t, w_down_t;
    Matrix w_out_t;

    void rebuild(const ModelWeights& w) {
        const int L = w.cfg.layers, H = w.cfg.heads;
        wq_t.assign(L, {});
        wk_t.assign(L, {});
        wv_t.assign(L, {});
        wo_t.clear();
        w_up_t.clear();
        w_down_t.clear();
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < H; ++h) {
                wq_t[l].push_back(transpose(w.layers[l].wq[h]));
                wk_t[l].push_back(transpose(w.layers[l].wk[h]));
                wv_t[l].push_back(transpose(w.layers[l].wv[h]));
            }
            wo_t.push_back(transpose(w.layers[l].wo));
            w_up_t.push_back(transpose(w.layers[l].w_up));
            w_down_t.push_back(transpose(w.layers[l].w_down));
        }
        w_out_t = transpose(w.w_out);
    }
};

Matrix embed_sequence(const ModelWeights& w, std::span<const int32_t> tokens) {
    const int n = static_cast<int>(tokens.size());
    Matrix x(n, w.cfg.dim);
    for (int t = 0; t < n; ++t) {
        const float* te = w.token_embed.row(tokens[static_cast<size_t>(t)]);
        const float* pe = w.pos_embed.row(t);
        float* dst = x.row(t);
        for (int j = 0; j < w.cfg.dim; ++j) dst[j] = te[j] + pe[j];
    }
    return x;
}

// forward pass with every intermediate cached for backward
void forward_cached(const ModelWeights& w, std::span<const int32_t> tokens, SeqCache& c) {
    const ModelConfig& cfg = w.cfg;
    const int n = static_cast<int>(tokens.size());
    const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));

    Matrix x = embed_sequence(w, tokens);
    c.layers.assign(static_cast<size_t>(cfg.layers), {});
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        LayerCache& lc = c.layers[static_cast<size_t>(l)];
        lc.x_in = x;
        lc.xn1 = ln_rows(lc.x_in, lw.ln1_gain, lw.ln1_bias, lc.ln1_stats);

        lc.q.resize(cfg.heads);
        lc.k.resize(cfg.heads);
        lc.v.resize(cfg.heads);
        lc.probs.resize(cfg.heads);
        lc.concat = Matrix(n, cfg.dim);
        for (int h = 0; h < cfg.heads; ++h) {
            lc.q[h] = matmul(lc.xn1, lw.wq[h]);
            lc.k[h] = matmul(lc.xn1, lw.wk[h]);
            lc.v[h] = matmul(lc.xn1, lw.wv[h]);
            Matrix& probs = lc.probs[h];
            probs = Matrix(n, n);
            for (int t = 0; t < n; ++t) {
                const float* qr = lc.q[h].row(t);
                float mx = -std::numeric_limits<float>::infinity();
                for (int u = 0; u <= t; ++u) {
                    const float* kr = lc.k[h].row(u);
                    float acc = 0.0f;
                    for (int cidx = 0; cidx < cfg.head_dim; ++cidx) acc += qr[cidx] * kr[cidx];
                    probs.at(t, u) = acc * scale;
                    mx = std::max(mx, acc * scale);
                }
                float sum = 0.0f;
                for (int u = 0; u <= t; ++u) {
                    const float e = std::exp(probs.at(t, u) - mx);
                    probs.at(t, u) = e;
                    sum += e;
                }
                const float inv = 1.0f / sum;
                for (int u = 0; u <= t; ++u) probs.at(t, u) *= inv;
            }
            for (int t = 0; t < n; ++t) {
                float* orow = lc.concat.row(t) + h * cfg.head_dim;
                for (int u = 0; u <= t; ++u) {
                    const float p = probs.at(t, u);
                    const float* vr = lc.v[h].row(u);
                    for (int cidx = 0; cidx < cfg.head_dim; ++cidx) orow[cidx] += p * vr[cidx];
                }
            }
        }

        Matrix attn_out = matmul(lc.concat, lw.wo);
        lc.resid1 = Matrix(n, cfg.dim);
        for (size_t i = 0; i < attn_out.data.size(); ++i)
            lc.resid1.data[i] = lc.x_in.data[i] + attn_out.data[i];

        lc.xn2 = ln_rows(lc.resid1, lw.ln2_gain, lw.ln2_bias, lc.ln2_stats);
        lc.up = matmul(lc.xn2, lw.w_up);
        lc.act = Matrix(n, cfg.ffn_dim);
        for (size_t i = 0; i < lc.up.data.size(); ++i) lc.act.data[i] = gelu_scalar(lc.up.data[i]);
        Matrix down = matmul(lc.act, lw.w_down);

        Matrix resid2(n, cfg.dim);
        for (size_t i = 0; i < down.data.size(); ++i)
            resid2.data[i] = lc.resid1.data[i] + down.data[i];
        x = std::move(resid2);
    }
    c.x_final = x;
    c.xf = ln_rows(c.x_final, w.final_gain, w.final_bias, c.lnf_stats);
    c.logits = matmul(c.xf, w.w_out);
}

// cross entropy over next-token targets; returns summed loss and fills
// dlogits (softmax - onehot, unscaled)
double ce_loss_and_dlogits(const Matrix& logits, std::span<const int32_t> tokens,
                           Matrix& dlogits) {
    const int n = logits.rows, vocab = logits.cols;
    dlogits = Matrix(n, vocab);
    double loss = 0.0;
    for (int t = 0; t + 1 < n; ++t) {
        const float* lr = logits.row(t);
        float* dr = dlogits.row(t);
        float mx = lr[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
        float sum = 0.0f;
        for (int j = 0; j < vocab; ++j) {
            dr[j] = std::exp(lr[j] - mx);
            sum += dr[j];
        }
        const float inv = 1.0f / sum;
        const int target = tokens[static_cast<size_t>(t) + 1];
        for (int j = 0; j < vocab; ++j) dr[j] *= inv;
        loss -= std::log(static_cast<double>(dr[target]));
        dr[target] -= 1.0f;
    }
    return loss;
}

// full backward pass; grads accumulated into g (same shapes as the model)
void backward(const ModelWeights& w, const TransposedWeights& tw,
              std::span<const int32_t> tokens, const SeqCache& c, float loss_scale,
              ModelWeights& g) {
    const ModelConfig& cfg = w.cfg;
    const int n = static_cast<int>(tokens.size());
    const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));

    Matrix dlogits;
    ce_loss_and_dlogits(c.logits, tokens, dlogits);
    for (float& x : dlogits.data) x *= loss_scale;

    accum_at_b(c.xf, dlogits, g.w_out);
    Matrix dxf = matmul(dlogits, tw.w_out_t);

    Matrix dx(n, cfg.dim);
    ln_rows_backward(dxf, c.x_final, c.lnf_stats, w.final_gain, dx, g.final_gain, g.final_bias);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        LayerWeights& gl = g.layers[static_cast<size_t>(l)];
        const LayerCache& lc = c.layers[static_cast<size_t>(l)];

        // dx is d(resid2); resid2 = resid1 + w_down(gelu(w_up(ln2(resid1))))
        Matrix& ddown = dx;
        accum_at_b(lc.act, ddown, gl.w_down);
        Matrix dact = matmul(ddown, tw.w_down_t[static_cast<size_t>(l)]);
        for (size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_deriv(lc.up.data[i]);
        accum_at_b(lc.xn2, dact, gl.w_up);
        Matrix dxn2 = matmul(dact, tw.w_up_t[static_cast<size_t>(l)]);

        Matrix dresid1 = dx; // the residual shortcut
        ln_rows_backward(dxn2, lc.resid1, lc.ln2_stats, lw.ln2_gain, dresid1, gl.ln2_gain,
                         gl.ln2_bias);

        // resid1 = x_in + wo(concat)
        accum_at_b(lc.concat, dresid1, gl.wo);
        Matrix dconcat = matmul(dresid1, tw.wo_t[static_cast<size_t>(l)]);

        Matrix dxn1(n, cfg.dim);
        for (int h = 0; h < cfg.heads; ++h) {
            Matrix dhead(n, cfg.head_dim);
            for (int t = 0; t < n; ++t)
                std::copy(dconcat.row(t) + h * cfg.head_dim,
                          dconcat.row(t) + (h + 1) * cfg.head_dim, dhead.row(t));

            const Matrix& probs = lc.probs[h];
            Matrix dv(n, cfg.head_dim);
            Matrix dscores(n, n);
            for (int t = 0; t < n; ++t) {
                const float* dhr = dhead.row(t);
                // dprobs[t,u] = dhead[t,:] . v[u,:]
                float sum_dp_p = 0.0f;
                for (int u = 0; u <= t; ++u) {
                    const float* vr = lc.v[h].row(u);
                    float acc = 0.0f;
                    for (int cidx = 0; cidx < cfg.head_dim; ++cidx) acc += dhr[cidx] * vr[cidx];
                    dscores.at(t, u) = acc; // holds dprobs for now
                    sum_dp_p += acc * probs.at(t, u);
                }
                for (int u = 0; u <= t; ++u) {
                    const float p = probs.at(t, u);
                    // dv[u,:] += p * dhead[t,:]
                    float* dvr = dv.row(u);
                    for (int cidx = 0; cidx < cfg.head_dim; ++cidx) dvr[cidx] += p * dhr[cidx];
                    dscores.at(t, u) = p * (dscores.at(t, u) - sum_dp_p);
                }
            }

            Matrix dq(n, cfg.head_dim);
            Matrix dk(n, cfg.head_dim);
            for (int t = 0; t < n; ++t) {
                const float* qr = lc.q[h].row(t);
                float* dqr = dq.row(t);
                for (int u = 0; u <= t; ++u) {
                    const float ds = dscores.at(t, u) * scale;
                    const float* kr = lc.k[h].row(u);
                    float* dkr = dk.row(u);
                    for (int cidx = 0; cidx < cfg.head_dim; ++cidx) {
                        dqr[cidx] += ds * kr[cidx];
                        dkr[cidx] += ds * qr[cidx];
                    }
                }
            }

            accum_at_b(lc.xn1, dq, gl.wq[h]);
            accum_at_b(lc.xn1, dk, gl.wk[h]);
            accum_at_b(lc.xn1, dv, gl.wv[h]);
            Matrix tmp = matmul(dq, tw.wq_t[static_cast<size_t>(l)][h]);
            for (size_t i = 0; i < dxn1.data.size(); ++i) dxn1.data[i] += tmp.data[i];
            tmp = matmul(dk, tw.wk_t[static_cast<size_t>(l)][h]);
            for (size_t i = 0; i < dxn1.data.size(); ++i) dxn1.data[i] += tmp.data[i];
            tmp = matmul(dv, tw.wv_t[static_cast<size_t>(l)][h]);
            for (size_t i = 0; i < dxn1.data.size(); ++i) dxn1.data[i] += tmp.data[i];
        }

        Matrix dx_in = dresid1; // shortcut branch of resid1 = x_in + attn
        ln_rows_backward(dxn1, lc.x_in, lc.ln1_stats, lw.ln1_gain, dx_in, gl.ln1_gain,
                         gl.ln1_bias);
        dx = std::move(dx_in);
    }

    // embeddings
    for (int t = 0; t < n; ++t) {
        const float* dr = dx.row(t);
        float* te = g.token_embed.row(tokens[static_cast<size_t>(t)]);
        float* pe = g.pos_embed.row(t);
        for (int j = 0; j < cfg.dim; ++j) {
            te[j] += dr[j];
            pe[j] += dr[j];
        }
    }
}

ModelWeights zero_like(const ModelWeights& w) {
    ModelWeights z = w;
    auto refs = tensor_refs(z);
    for (TensorRef& r : refs) {
        if (r.mat) std::fill(r.mat->data.begin(), r.mat->data.end(), 0.0f);
        if (r.vec) std::fill(r.vec->data.begin(), r.vec->data.end(), 0.0f);
    }
    return z;
}

} // namespace

double corpus_loss(const ModelWeights& w, const std::vector<std::vector<int32_t>>& seqs) {
    double total = 0.0;
    long tokens = 0;
    for (const auto& s : seqs) {
        if (s.size() < 2) continue;
        SeqCache cache;
        forward_cached(w, s, cache);
        Matrix dl;
        total += ce_loss_and_dlogits(cache.logits, s, dl);
        tokens += static_cast<long>(s.size()) - 1;
    }
    require(tokens > 0, errc::input, "corpus loss: no scorable tokens");
    return total / static_cast<double>(tokens);
}

TrainResult train_toy_lm(const Corpus& corpus, const ModelConfig& cfg, const TrainConfig& tc) {
    cfg.validate();
    tc.validate();
    require(!corpus.sequences.empty(), errc::input, "train: empty corpus");
    for (const auto& s : corpus.sequences) {
        require(!s.empty(), errc::input, "train: empty sequence in corpus");
        require(static_cast<int>(s.size()) <= cfg.max_seq, errc::length,
                "train: corpus sequence longer than max_seq");
        for (int32_t t : s)
            require(t >= 0 && t < cfg.vocab, errc::range, "train: corpus token outside vocab");
    }

    const int total = static_cast<int>(corpus.sequences.size());
    int holdout = static_cast<int>(std::ceil(tc.holdout_fraction * total));
    holdout = std::min(holdout, total - 1);
    if (tc.holdout_fraction > 0.0 && total >= 2) holdout = std::max(holdout, 1);
    const int train_n = total - holdout;

    std::vector<std::vector<int32_t>> holdout_seqs(corpus.sequences.end() - holdout,
                                                   corpus.sequences.end());
    if (holdout == 0) holdout_seqs.assign(corpus.sequences.begin(), corpus.sequences.end());

    TrainResult res;
    res.weights = init_weights(cfg);
    res.report.train_sequences = train_n;
    res.report.holdout_sequences = holdout;
    res.report.init_holdout_loss = corpus_loss(res.weights, holdout_seqs);

    ModelWeights grads = zero_like(res.weights);
    ModelWeights vel = zero_like(res.weights);
    TransposedWeights tw;
    Rng rng(tc.seed);

    std::vector<int> order(static_cast<size_t>(train_n));
    for (int i = 0; i < train_n; ++i) order[static_cast<size_t>(i)] = i;
    size_t cursor = order.size();

    const double pi = 3.14159265358979323846;
    for (int step = 0; step < tc.steps; ++step) {
        const float lr =
            tc.steps <= 1
                ? tc.lr_max
                : static_cast<float>(tc.lr_min +
                                     0.5 * (tc.lr_max - tc.lr_min) *
                                         (1.0 + std::cos(pi * step / (tc.steps - 1))));

        auto grefs = tensor_refs(grads);
        for (TensorRef& r : grefs) {
            if (r.mat) std::fill(r.mat->data.begin(), r.mat->data.end(), 0.0f);
            if (r.vec) std::fill(r.vec->data.begin(), r.vec->data.end(), 0.0f);
        }
        tw.rebuild(res.weights);

        // draw the batch from a reshuffled epoch order
        std::vector<int> batch;
        long batch_tokens = 0;
        for (int b = 0; b < tc.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const int idx = order[cursor++];
            batch.push_back(idx);
            batch_tokens +=
                static_cast<long>(corpus.sequences[static_cast<size_t>(idx)].size()) - 1;
        }
        require(batch_tokens > 0, errc::input, "train: batch has no scorable tokens");

        double batch_loss = 0.0;
        const float loss_scale = 1.0f / static_cast<float>(batch_tokens);
        for (int idx : batch) {
            const auto& seq = corpus.sequences[static_cast<size_t>(idx)];
            if (seq.size() < 2) continue;
            SeqCache cache;
            forward_cached(res.weights, seq, cache);
            Matrix dl;
            batch_loss += ce_loss_and_dlogits(cache.logits, seq, dl);
            backward(res.weights, tw, seq, cache, loss_scale, grads);
        }
        batch_loss /= static_cast<double>(batch_tokens);
        if (!std::isfinite(batch_loss))
            fail(errc::training, "loss diverged at step " + std::to_string(step) + " (lr " +
                                     std::to_string(lr) + ", loss " + std::to_string(batch_loss) +
                                     ")");
        if (step % 25 == 0 || step == tc.steps - 1)
            res.report.loss_curve.emplace_back(step, batch_loss);

        // clip by global norm, then momentum update
        double norm_sq = 0.0;
        for (TensorRef& r : grefs) {
            const std::vector<float>& d = r.mat ? r.mat->data : r.vec->data;
            for (float x : d) norm_sq += static_cast<double>(x) * x;
        }
        const double norm = std::sqrt(norm_sq);
        const float gscale =
            norm > tc.clip_norm ? static_cast<float>(tc.clip_norm / norm) : 1.0f;

        auto wrefs = tensor_refs(res.weights);
        auto vrefs = tensor_refs(vel);
        for (size_t i = 0; i < wrefs.size(); ++i) {
            std::vector<float>& wd = wrefs[i].mat ? wrefs[i].mat->data : wrefs[i].vec->data;
            std::vector<float>& gd = grefs[i].mat ? grefs[i].mat->data : grefs[i].vec->data;
            std::vector<float>& vd = vrefs[i].mat ? vrefs[i].mat->data : vrefs[i].vec->data;
            for (size_t j = 0; j < wd.size(); ++j) {
                vd[j] = tc.momentum * vd[j] + gd[j] * gscale;
                wd[j] -= lr * vd[j];
            }
        }
        res.report.steps_run = step + 1;
    }

    res.report.final_holdout_loss = corpus_loss(res.weights, holdout_seqs);
    return res;
}

} // namespace headgate::model
