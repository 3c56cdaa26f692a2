#include "core/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include "core/rng.hpp"
#include "core/weights_io.hpp"

#include <json.hpp>

namespace headgate::probe {

using model::ActivationTrace;
using model::ModelWeights;
using model::TapPoint;
using model::TapPosition;
using ordered_json = nlohmann::ordered_json;

void ProbeTrainConfig::validate() const {
    require(lr > 0.0f, errc::input, "probe config: lr must be positive");
    require(epochs >= 1, errc::input, "probe config: epochs must be positive");
    require(batch_size >= 1, errc::input, "probe config: batch size must be positive");
    require(patience >= 1, errc::input, "probe config: patience must be positive");
}

long ProbeBank::parameter_count() const {
    return static_cast<long>(probes.size()) * (model_cfg.head_dim + 1);
}

long ProbeBank::active_parameter_count() const {
    return static_cast<long>(selected.size()) * (model_cfg.head_dim + 1);
}

void ProbeBank::validate() const {
    model_cfg.validate();
    require(k == static_cast<int>(selected.size()), errc::format, "bank: |S_K| must equal K");
    require(k >= 1 && k <= static_cast<int>(probes.size()), errc::format,
            "bank: K outside [1, head count]");
    require(static_cast<int>(probes.size()) == model_cfg.layers * model_cfg.heads, errc::format,
            "bank: probe map must cover every head");
    for (const auto& [id, p] : probes) {
        require(id.first >= 0 && id.first < model_cfg.layers && id.second >= 0 &&
                    id.second < model_cfg.heads,
                errc::format, "bank: probe head id out of range");
        require(p.w.dim() == model_cfg.head_dim, errc::format,
                "bank: probe weight dim must equal head_dim");
        require(p.val_acc >= 0.0 && p.val_acc <= 1.0, errc::format,
                "bank: val_acc outside [0,1]");
    }
    for (size_t i = 0; i < selected.size(); ++i) {
        require(probes.count(selected[i]) == 1, errc::format,
                "bank: selected head missing from probe map");
        if (i > 0)
            require(selected[i - 1] < selected[i], errc::format,
                    "bank: S_K must be sorted by (layer, head)");
    }
}

Vector extract_activation(const ActivationTrace& trace, int layer, int head) {
    require(head >= 0, errc::range, "extract_activation: head index must be nonnegative");
    const Matrix& m = trace.at({layer, TapPosition::attn_head_output, head});
    require(m.rows >= 1, errc::input, "extract_activation: empty trace");
    Vector out(m.cols);
    std::copy(m.row(m.rows - 1), m.row(m.rows - 1) + m.cols, out.data.begin());
    return out;
}

namespace {

// inverse-frequency example weights, normalized to sum to n
std::vector<double> class_weights(const std::vector<int>& y) {
    const double n = static_cast<double>(y.size());
    double n1 = 0.0;
    for (int v : y) n1 += v;
    const double n0 = n - n1;
    std::vector<double> wt(y.size());
    for (size_t i = 0; i < y.size(); ++i)
        wt[i] = y[i] == 1 ? n / (2.0 * n1) : n / (2.0 * n0);
    return wt;
}

double stable_bce(double z, int y) {
    // softplus(z) - y*z, evaluated without overflow
    const double sp = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    return sp - static_cast<double>(y) * z;
}

} // namespace

BceResult bce_loss_and_grad(const std::vector<Vector>& x, const std::vector<int>& y,
                            std::span<const double> w, double b, bool with_grad) {
    require(x.size() == y.size() && !x.empty(), errc::input, "bce: bad inputs");
    const int d = x[0].dim();
    require(static_cast<int>(w.size()) == d, errc::shape, "bce: weight dim mismatch");
    const std::vector<double> wt = class_weights(y);
    double wsum = 0.0;
    for (double v : wt) wsum += v;

    BceResult res;
    if (with_grad) res.dw.assign(static_cast<size_t>(d), 0.0);
    for (size_t i = 0; i < x.size(); ++i) {
        require(x[i].dim() == d, errc::shape, "bce: inconsistent feature dims");
        double z = b;
        for (int j = 0; j < d; ++j) z += w[static_cast<size_t>(j)] * x[i][j];
        res.loss += wt[i] * stable_bce(z, y[i]);
        if (with_grad) {
            const double err = wt[i] * (sigmoid(z) - static_cast<double>(y[i]));
            for (int j = 0; j < d; ++j) res.dw[static_cast<size_t>(j)] += err * x[i][j];
            res.db += err;
        }
    }
    res.loss /= wsum;
    if (with_grad) {
        for (double& g : res.dw) g /= wsum;
        res.db /= wsum;
    }
    return res;
}

TrainedProbe train_probe(const std::vector<Vector>& features, const std::vector<int>& labels,
                         const ProbeTrainConfig& cfg, const std::vector<Vector>& val_features,
                         const std::vector<int>& val_labels) {
    cfg.validate();
    require(features.size() == labels.size(), errc::input,
            "train_probe: features/labels length mismatch");
    require(features.size() >= 2, errc::degenerate_data, "train_probe: need at least 2 examples");
    int ones = 0;
    for (int v : labels) {
        require(v == 0 || v == 1, errc::input, "train_probe: labels must be 0/1");
        ones += v;
    }
    require(ones > 0 && ones < static_cast<int>(labels.size()), errc::degenerate_data,
            "train_probe: both classes must be present");
    require(val_features.size() == val_labels.size(), errc::input,
            "train_probe: val features/labels length mismatch");

    const int d = features[0].dim();
    const int n = static_cast<int>(features.size());
    const bool has_val = !val_features.empty();
    const int batch = std::min(cfg.batch_size, n);

    std::vector<double> w(static_cast<size_t>(d), 0.0);
    double b = 0.0;
    std::vector<double> best_w = w;
    double best_b = b;
    double best_monitor = std::numeric_limits<double>::infinity();
    int since_best = 0;
    int epochs_run = 0;

    Rng rng(cfg.seed);
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (batch >= n) {
            const BceResult g = bce_loss_and_grad(features, labels, w, b);
            for (int j = 0; j < d; ++j)
                w[static_cast<size_t>(j)] -= cfg.lr * g.dw[static_cast<size_t>(j)];
            b -= cfg.lr * g.db;
        } else {
            rng.shuffle(order);
            for (int start = 0; start < n; start += batch) {
                const int end = std::min(start + batch, n);
                std::vector<Vector> bx;
                std::vector<int> by;
                for (int i = start; i < end; ++i) {
                    bx.push_back(features[static_cast<size_t>(order[static_cast<size_t>(i)])]);
                    by.push_back(labels[static_cast<size_t>(order[static_cast<size_t>(i)])]);
                }
                int bones = 0;
                for (int v : by) bones += v;
                if (bones == 0 || bones == static_cast<int>(by.size())) continue;
                const BceResult g = bce_loss_and_grad(bx, by, w, b);
                for (int j = 0; j < d; ++j)
                    w[static_cast<size_t>(j)] -= cfg.lr * g.dw[static_cast<size_t>(j)];
                b -= cfg.lr * g.db;
            }
        }
        epochs_run = epoch + 1;

        const BceResult monitor =
            has_val ? bce_loss_and_grad(val_features, val_labels, w, b, false)
                    : bce_loss_and_grad(features, labels, w, b, false);
        if (monitor.loss < best_monitor) {
            best_monitor = monitor.loss;
            best_w = w;
            best_b = b;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }

    TrainedProbe out;
    out.w = Vector(d);
    for (int j = 0; j < d; ++j) out.w[j] = static_cast<float>(best_w[static_cast<size_t>(j)]);
    out.b = static_cast<float>(best_b);
    out.best_monitor_bce = best_monitor;
    out.epochs_run = epochs_run;
    return out;
}

double probe_predict(const LinearProbe& probe, std::span<const float> a) {
    require(static_cast<int>(a.size()) == probe.w.dim(), errc::shape,
            "probe_predict: activation dim mismatch");
    return sigmoid(dot(probe.w.data, a) + static_cast<double>(probe.b));
}

std::vector<HeadId> rank_heads(const std::map<HeadId, double>& acc_map, int k) {
    require(k >= 1 && k <= static_cast<int>(acc_map.size()), errc::range,
            "rank_heads: K outside [1, |heads|]");
    std::vector<std::pair<double, HeadId>> ranked;
    for (const auto& [id, acc] : acc_map) ranked.emplace_back(acc, id);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<HeadId> out;
    for (int i = 0; i < k; ++i) out.push_back(ranked[static_cast<size_t>(i)].second);
    std::sort(out.begin(), out.end());
    return out;
}

double aggregate_score(std::span<const double> probs) {
    require(!probs.empty(), errc::input, "aggregate_score: empty probability list");
    double sum = 0.0;
    for (double p : probs) {
        require(p >= 0.0 && p <= 1.0, errc::range, "aggregate_score: p outside [0,1]");
        sum += p;
    }
    return sum / static_cast<double>(probs.size());
}

namespace {

using harness::Intent;
using harness::LabeledDataset;
using harness::PromptItem;

// feature at the final token for an arbitrary tap; attention-prob rows are
// padded to max_seq so every prompt yields the same dimensionality
Vector tap_feature(const ActivationTrace& trace, const TapPoint& tp, int max_seq) {
    const Matrix& m = trace.at(tp);
    if (tp.position == TapPosition::attn_probs_last_row) {
        Vector out(max_seq);
        for (int j = 0; j < m.cols; ++j) out[j] = m.at(m.rows - 1, j);
        return out;
    }
    Vector out(m.cols);
    std::copy(m.row(m.rows - 1), m.row(m.rows - 1) + m.cols, out.data.begin());
    return out;
}

std::vector<int> split_labels(const std::vector<PromptItem>& items) {
    std::vector<int> y;
    for (const PromptItem& it : items) y.push_back(it.label == Intent::malicious ? 1 : 0);
    return y;
}

double probe_val_accuracy(const TrainedProbe& tp, const std::vector<Vector>& xv,
                          const std::vector<int>& yv) {
    LinearProbe p;
    p.w = tp.w;
    p.b = tp.b;
    int correct = 0;
    for (size_t i = 0; i < xv.size(); ++i) {
        const int pred = probe_predict(p, xv[i].data) > 0.5 ? 1 : 0;
        correct += pred == yv[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(xv.size());
}

} // namespace

SweepResult spatial_sweep(const ModelWeights& w, const LabeledDataset& ds,
                          const ProbeTrainConfig& cfg) {
    const model::ModelConfig& mc = w.cfg;
    require(!ds.train.items.empty() && !ds.val.items.empty(), errc::input,
            "sweep: train and val splits must be nonempty");
    const std::vector<TapPoint> taps = model::all_taps(mc);

    // gather features for every cell over both splits
    std::map<TapPoint, std::vector<Vector>> feat_train, feat_val;
    auto collect = [&](const std::vector<PromptItem>& items,
                       std::map<TapPoint, std::vector<Vector>>& out) {
        for (const PromptItem& it : items) {
            const model::ForwardResult fr = model::forward(w, it.tokens, taps, it.roles);
            for (const TapPoint& tp : taps)
                out[tp].push_back(tap_feature(fr.trace, tp, mc.max_seq));
        }
    };
    collect(ds.train.items, feat_train);
    collect(ds.val.items, feat_val);

    const std::vector<int> y_train = split_labels(ds.train.items);
    const std::vector<int> y_val = split_labels(ds.val.items);

    SweepResult res;
    for (const TapPoint& tp : taps) {
        SweepCell cell;
        cell.layer = tp.layer;
        cell.position = tp.position;
        cell.head = tp.head;
        try {
            const TrainedProbe p = train_probe(feat_train[tp], y_train, cfg, feat_val[tp], y_val);
            cell.val_acc = probe_val_accuracy(p, feat_val[tp], y_val);
        } catch (const Error& e) {
            cell.ok = false;
            cell.error = e.what();
        }
        res.cells.push_back(std::move(cell));
    }

    // per-(layer, position) summaries: all-head mean and top-4-head mean
    for (int l = 0; l < mc.layers; ++l) {
        for (int pi = 0; pi < model::kTapPositionCount; ++pi) {
            const auto pos = static_cast<TapPosition>(pi);
            std::vector<double> accs;
            for (const SweepCell& c : res.cells)
                if (c.layer == l && c.position == pos && c.ok) accs.push_back(c.val_acc);
            if (accs.empty()) continue;
            std::sort(accs.begin(), accs.end(), std::greater<>());
            SweepSummaryRow row;
            row.layer = l;
            row.position = pos;
            double sum = 0.0;
            for (double a : accs) sum += a;
            row.mean_acc = sum / static_cast<double>(accs.size());
            const size_t top = std::min<size_t>(4, accs.size());
            double tsum = 0.0;
            for (size_t i = 0; i < top; ++i) tsum += accs[i];
            row.top_acc = tsum / static_cast<double>(top);
            res.summary.push_back(row);
        }
    }
    return res;
}

ProbeBank build_bank(const ModelWeights& w, const LabeledDataset& ds, int k,
                     const ProbeTrainConfig& cfg) {
    cfg.validate();
    const model::ModelConfig& mc = w.cfg;
    require(!ds.train.items.empty() && !ds.val.items.empty(), errc::input,
            "build_bank: train and val splits must be nonempty");

    std::vector<TapPoint> taps;
    for (int l = 0; l < mc.layers; ++l)
        for (int h = 0; h < mc.heads; ++h)
            taps.push_back({l, TapPosition::attn_head_output, h});

    auto features = [&](const std::vector<PromptItem>& items) {
        std::map<HeadId, std::vector<Vector>> out;
        for (const PromptItem& it : items) {
            const model::ForwardResult fr = model::forward(w, it.tokens, taps, it.roles);
            for (int l = 0; l < mc.layers; ++l)
                for (int h = 0; h < mc.heads; ++h)
                    out[{l, h}].push_back(extract_activation(fr.trace, l, h));
        }
        return out;
    };
    std::map<HeadId, std::vector<Vector>> x_train = features(ds.train.items);
    std::map<HeadId, std::vector<Vector>> x_val = features(ds.val.items);
    const std::vector<int> y_train = split_labels(ds.train.items);
    const std::vector<int> y_val = split_labels(ds.val.items);

    ProbeBank bank;
    bank.model_fingerprint = model::fingerprint(w);
    bank.model_cfg = mc;
    bank.train_cfg = cfg;

    std::map<HeadId, double> acc_map;
    for (int l = 0; l < mc.layers; ++l) {
        for (int h = 0; h < mc.heads; ++h) {
            const HeadId id{l, h};
            const TrainedProbe tp = train_probe(x_train[id], y_train, cfg, x_val[id], y_val);
            LinearProbe p;
            p.layer = l;
            p.head = h;
            p.w = tp.w;
            p.b = tp.b;
            p.val_acc = probe_val_accuracy(tp, x_val[id], y_val);
            acc_map[id] = p.val_acc;
            bank.probes[id] = std::move(p);
        }
    }
    bank.k = std::min(k, static_cast<int>(bank.probes.size()));
    require(bank.k >= 1, errc::range, "build_bank: K must be at least 1");
    bank.selected = rank_heads(acc_map, bank.k);
    bank.validate();
    return bank;
}

ScoreResult score_prompt(const ModelWeights& w, const ProbeBank& bank,
                         std::span<const int32_t> tokens) {
    require(model::fingerprint(w) == bank.model_fingerprint, errc::compatibility,
            "score_prompt: bank was built for a different model (fingerprint mismatch)");
    std::vector<TapPoint> taps;
    for (const HeadId& id : bank.selected)
        taps.push_back({id.first, TapPosition::attn_head_output, id.second});
    const model::ForwardResult fr = model::forward(w, tokens, taps);

    ScoreResult res;
    for (const HeadId& id : bank.selected) {
        const Vector a = extract_activation(fr.trace, id.first, id.second);
        res.heads.push_back(id);
        res.probs.push_back(probe_predict(bank.probes.at(id), a.data));
    }
    res.q = aggregate_score(res.probs);
    return res;
}

std::string bank_to_text(const ProbeBank& bank) {
    // float32 values are widened to double; nlohmann emits the shortest
    // representation that parses back to the same double, so a save/load
    // cycle re-serializes byte-identically
    ordered_json j;
    j["format_version"] = 1;
    j["model_fingerprint"] = bank.model_fingerprint;
    ordered_json mc;
    mc["layers"] = bank.model_cfg.layers;
    mc["heads"] = bank.model_cfg.heads;
    mc["head_dim"] = bank.model_cfg.head_dim;
    mc["dim"] = bank.model_cfg.dim;
    mc["ffn_dim"] = bank.model_cfg.ffn_dim;
    mc["vocab"] = bank.model_cfg.vocab;
    mc["max_seq"] = bank.model_cfg.max_seq;
    mc["seed"] = bank.model_cfg.seed;
    j["model_config"] = mc;
    ordered_json tc;
    tc["lr"] = static_cast<double>(bank.train_cfg.lr);
    tc["epochs"] = bank.train_cfg.epochs;
    tc["batch_size"] = bank.train_cfg.batch_size;
    tc["patience"] = bank.train_cfg.patience;
    tc["seed"] = bank.train_cfg.seed;
    j["train_config"] = tc;
    j["parameter_count"] = bank.parameter_count();
    j["active_parameter_count"] = bank.active_parameter_count();
    ordered_json probes = ordered_json::array();
    for (const auto& [id, p] : bank.probes) {
        ordered_json pj;
        pj["layer"] = id.first;
        pj["head"] = id.second;
        pj["b"] = static_cast<double>(p.b);
        ordered_json wj = ordered_json::array();
        for (float v : p.w.data) wj.push_back(static_cast<double>(v));
        pj["w"] = wj;
        pj["val_acc"] = p.val_acc;
        probes.push_back(pj);
    }
    j["probes"] = probes;
    ordered_json sel = ordered_json::array();
    for (const HeadId& id : bank.selected) sel.push_back(ordered_json::array({id.first, id.second}));
    j["selected"] = sel;
    j["k"] = bank.k;
    return j.dump(2) + "\n";
}

ProbeBank bank_from_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(errc::format, std::string("bank: ") + e.what());
    }
    try {
        require(j.at("format_version").get<int>() == 1, errc::format,
                "bank: unsupported format version");
        ProbeBank bank;
        bank.model_fingerprint = j.at("model_fingerprint").get<std::string>();
        const ordered_json& mc = j.at("model_config");
        bank.model_cfg.layers = mc.at("layers").get<int>();
        bank.model_cfg.heads = mc.at("heads").get<int>();
        bank.model_cfg.head_dim = mc.at("head_dim").get<int>();
        bank.model_cfg.dim = mc.at("dim").get<int>();
        bank.model_cfg.ffn_dim = mc.at("ffn_dim").get<int>();
        bank.model_cfg.vocab = mc.at("vocab").get<int>();
        bank.model_cfg.max_seq = mc.at("max_seq").get<int>();
        bank.model_cfg.seed = mc.at("seed").get<uint64_t>();
        const ordered_json& tc = j.at("train_config");
        bank.train_cfg.lr = static_cast<float>(tc.at("lr").get<double>());
        bank.train_cfg.epochs = tc.at("epochs").get<int>();
        bank.train_cfg.batch_size = tc.at("batch_size").get<int>();
        bank.train_cfg.patience = tc.at("patience").get<int>();
        bank.train_cfg.seed = tc.at("seed").get<uint64_t>();
        for (const ordered_json& pj : j.at("probes")) {
            LinearProbe p;
            p.layer = pj.at("layer").get<int>();
            p.head = pj.at("head").get<int>();
            p.b = static_cast<float>(pj.at("b").get<double>());
            for (const ordered_json& wv : pj.at("w"))
                p.w.data.push_back(static_cast<float>(wv.get<double>()));
            p.val_acc = pj.at("val_acc").get<double>();
            bank.probes[{p.layer, p.head}] = std::move(p);
        }
        for (const ordered_json& sj : j.at("selected"))
            bank.selected.emplace_back(sj.at(0).get<int>(), sj.at(1).get<int>());
        bank.k = j.at("k").get<int>();
        bank.validate();
        return bank;
    } catch (const nlohmann::json::exception& e) {
        fail(errc::format, std::string("bank: ") + e.what());
    }
}

void save_bank(const ProbeBank& bank, const std::string& path) {
    bank.validate();
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), errc::io, "cannot open '" + path + "' for writing");
    f << bank_to_text(bank);
    require(f.good(), errc::io, "short write to '" + path + "'");
}

ProbeBank load_bank(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), errc::io, "cannot open bank file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bank_from_text(text);
}

} // namespace headgate::probe
