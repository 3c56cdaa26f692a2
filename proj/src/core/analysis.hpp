#pragma once

// Mechanistic analyses: per-token probe trajectories, convergence entropy
// at structural tokens, accuracy-versus-K curves, and the classifier-weight
// cosine-similarity matrix with its 3-sigma significance threshold.

#include <cstdint>
#include <span>
#include <vector>

#include "core/probe.hpp"

namespace headgate::analysis {

struct Trajectory {
    std::vector<int32_t> tokens;
    std::vector<model::TokenRole> roles;
    std::vector<probe::HeadId> heads;
    std::vector<std::vector<double>> probs; // probs[h][t], heads x token positions
};

// probe predictions at every token position for the selected heads
// (or all heads when all_heads is set)
Trajectory temporal_trajectory(const model::ModelWeights& w, const probe::ProbeBank& bank,
                               std::span<const int32_t> tokens, bool all_heads = false,
                               std::span<const model::TokenRole> roles = {});

// per token position, the mean binary entropy (bits) of the head predictions
std::vector<double> convergence_entropy(const Trajectory& traj);

struct EntropySummary {
    double final_structural_mean = 0.0;
    double content_mean = 0.0;
    double margin = 0.0; // content_mean - final_structural_mean
    int prompts = 0;
};

EntropySummary entropy_summary(const model::ModelWeights& w, const probe::ProbeBank& bank,
                               const std::vector<harness::PromptItem>& items);

struct TopkPoint {
    int k = 0;
    double accuracy = 0.0;
};

// detection accuracy of the thresholded mean score (q > 0.5) as a function
// of how many top-ranked heads are aggregated
std::vector<TopkPoint> topk_curve(const model::ModelWeights& w, const probe::ProbeBank& bank,
                                  const std::vector<harness::PromptItem>& val_items,
                                  std::span<const int> k_values);

// convenience form that trains the probes itself
std::vector<TopkPoint> topk_curve(const model::ModelWeights& w,
                                  const harness::LabeledDataset& ds,
                                  std::span<const int> k_values,
                                  const probe::ProbeTrainConfig& cfg);

// 3-sigma bound on the cosine of two independent isotropic directions:
// min(1, 3/sqrt(head_dim))
double significance_threshold(int head_dim);

struct SimilarityReport {
    int rows = 0, cols = 0;
    std::vector<probe::HeadId> heads_a, heads_b;
    std::vector<double> sim;          // row-major rows x cols
    std::vector<uint8_t> significant; // |sim| > threshold
    double threshold = 0.0;
    std::vector<uint8_t> selected_a, selected_b; // S_K membership per axis

    double at(int r, int c) const { return sim[static_cast<size_t>(r) * cols + c]; }
};

SimilarityReport awareness_similarity(const probe::ProbeBank& a, const probe::ProbeBank& b);

} // namespace headgate::analysis
