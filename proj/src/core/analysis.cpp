#include "core/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "core/weights_io.hpp"

namespace headgate::analysis {

using model::TapPoint;
using model::TapPosition;
using probe::HeadId;
using probe::ProbeBank;

Trajectory temporal_trajectory(const model::ModelWeights& w, const ProbeBank& bank,
                               std::span<const int32_t> tokens, bool all_heads,
                               std::span<const model::TokenRole> roles) {
    require(model::fingerprint(w) == bank.model_fingerprint, errc::compatibility,
            "temporal_trajectory: bank was built for a different model");
    std::vector<HeadId> heads;
    if (all_heads) {
        for (const auto& [id, p] : bank.probes) heads.push_back(id);
    } else {
        heads = bank.selected;
    }
    std::vector<TapPoint> taps;
    for (const HeadId& id : heads)
        taps.push_back({id.first, TapPosition::attn_head_output, id.second});

    const model::ForwardResult fr = model::forward(w, tokens, taps, roles);
    const int n = static_cast<int>(tokens.size());

    Trajectory traj;
    traj.tokens.assign(tokens.begin(), tokens.end());
    traj.roles = fr.trace.roles;
    traj.heads = heads;
    for (const HeadId& id : heads) {
        const Matrix& m = fr.trace.at({id.first, TapPosition::attn_head_output, id.second});
        const probe::LinearProbe& p = bank.probes.at(id);
        std::vector<double> row(static_cast<size_t>(n));
        for (int t = 0; t < n; ++t)
            row[static_cast<size_t>(t)] = probe::probe_predict(p, m.row_span(t));
        traj.probs.push_back(std::move(row));
    }
    return traj;
}

std::vector<double> convergence_entropy(const Trajectory& traj) {
    require(!traj.probs.empty() && !traj.tokens.empty(), errc::input,
            "convergence_entropy: empty trajectory");
    const size_t n = traj.tokens.size();
    std::vector<double> curve(n, 0.0);
    for (size_t t = 0; t < n; ++t) {
        double sum = 0.0;
        for (const std::vector<double>& row : traj.probs) sum += binary_entropy(row[t]);
        curve[t] = sum / static_cast<double>(traj.probs.size());
    }
    return curve;
}

EntropySummary entropy_summary(const model::ModelWeights& w, const ProbeBank& bank,
                               const std::vector<harness::PromptItem>& items) {
    require(!items.empty(), errc::input, "entropy_summary: no prompts");
    EntropySummary s;
    double final_sum = 0.0, content_sum = 0.0;
    long content_n = 0;
    for (const harness::PromptItem& it : items) {
        const Trajectory traj = temporal_trajectory(w, bank, it.tokens, false, it.roles);
        const std::vector<double> curve = convergence_entropy(traj);
        final_sum += curve.back();
        for (size_t t = 0; t < curve.size(); ++t) {
            if (traj.roles[t] == model::TokenRole::content) {
                content_sum += curve[t];
                ++content_n;
            }
        }
        ++s.prompts;
    }
    require(content_n > 0, errc::input, "entropy_summary: prompts have no content tokens");
    s.final_structural_mean = final_sum / static_cast<double>(s.prompts);
    s.content_mean = content_sum / static_cast<double>(content_n);
    s.margin = s.content_mean - s.final_structural_mean;
    return s;
}

std::vector<TopkPoint> topk_curve(const model::ModelWeights& w, const ProbeBank& bank,
                                  const std::vector<harness::PromptItem>& val_items,
                                  std::span<const int> k_values) {
    require(!val_items.empty(), errc::input, "topk_curve: empty validation split");
    const int head_count = static_cast<int>(bank.probes.size());
    for (int k : k_values)
        require(k >= 1 && k <= head_count, errc::range,
                "topk_curve: K value " + std::to_string(k) + " outside [1, head count]");

    // per-item per-head predictions, one tapped forward pass per item
    std::map<HeadId, double> acc_map;
    for (const auto& [id, p] : bank.probes) acc_map[id] = p.val_acc;

    std::vector<TapPoint> taps;
    for (const auto& [id, p] : bank.probes)
        taps.push_back({id.first, TapPosition::attn_head_output, id.second});

    std::vector<std::map<HeadId, double>> preds;
    std::vector<int> labels;
    for (const harness::PromptItem& it : val_items) {
        const model::ForwardResult fr = model::forward(w, it.tokens, taps, it.roles);
        std::map<HeadId, double> row;
        for (const auto& [id, p] : bank.probes) {
            const Vector a = probe::extract_activation(fr.trace, id.first, id.second);
            row[id] = probe::probe_predict(p, a.data);
        }
        preds.push_back(std::move(row));
        labels.push_back(it.label == harness::Intent::malicious ? 1 : 0);
    }

    std::vector<TopkPoint> out;
    for (int k : k_values) {
        const std::vector<HeadId> sel = probe::rank_heads(acc_map, k);
        int correct = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            std::vector<double> ps;
            for (const HeadId& id : sel) ps.push_back(preds[i].at(id));
            const double q = probe::aggregate_score(ps);
            const int pred = q > 0.5 ? 1 : 0;
            correct += pred == labels[i] ? 1 : 0;
        }
        out.push_back({k, static_cast<double>(correct) / static_cast<double>(preds.size())});
    }
    return out;
}

std::vector<TopkPoint> topk_curve(const model::ModelWeights& w,
                                  const harness::LabeledDataset& ds,
                                  std::span<const int> k_values,
                                  const probe::ProbeTrainConfig& cfg) {
    const ProbeBank bank = probe::build_bank(w, ds, w.cfg.layers * w.cfg.heads, cfg);
    return topk_curve(w, bank, ds.val.items, k_values);
}

double significance_threshold(int head_dim) {
    require(head_dim >= 1, errc::range, "significance_threshold: head_dim must be >= 1");
    return std::min(1.0, 3.0 / std::sqrt(static_cast<double>(head_dim)));
}

SimilarityReport awareness_similarity(const ProbeBank& a, const ProbeBank& b) {
    require(a.model_cfg.head_dim == b.model_cfg.head_dim, errc::compatibility,
            "awareness_similarity: banks have different head dims");
    SimilarityReport rep;
    for (const auto& [id, p] : a.probes) rep.heads_a.push_back(id);
    for (const auto& [id, p] : b.probes) rep.heads_b.push_back(id);
    rep.rows = static_cast<int>(rep.heads_a.size());
    rep.cols = static_cast<int>(rep.heads_b.size());
    rep.threshold = significance_threshold(a.model_cfg.head_dim);
    rep.sim.resize(static_cast<size_t>(rep.rows) * rep.cols);
    rep.significant.resize(rep.sim.size());
    for (int r = 0; r < rep.rows; ++r) {
        const probe::LinearProbe& pa = a.probes.at(rep.heads_a[static_cast<size_t>(r)]);
        for (int c = 0; c < rep.cols; ++c) {
            const probe::LinearProbe& pb = b.probes.at(rep.heads_b[static_cast<size_t>(c)]);
            const double s = cosine_similarity(pa.w.data, pb.w.data);
            rep.sim[static_cast<size_t>(r) * rep.cols + c] = s;
            rep.significant[static_cast<size_t>(r) * rep.cols + c] =
                std::abs(s) > rep.threshold ? 1 : 0;
        }
    }
    auto mark = [](const std::vector<HeadId>& heads, const std::vector<HeadId>& selected) {
        std::vector<uint8_t> out(heads.size(), 0);
        for (size_t i = 0; i < heads.size(); ++i)
            out[i] = std::find(selected.begin(), selected.end(), heads[i]) != selected.end();
        return out;
    };
    rep.selected_a = mark(rep.heads_a, a.selected);
    rep.selected_b = mark(rep.heads_b, b.selected);
    return rep;
}

} // namespace headgate::analysis
