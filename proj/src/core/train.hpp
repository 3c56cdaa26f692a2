#pragma once

// Next-token LM training: SGD with momentum 0.9, cosine-decayed learning
// rate, gradient clipping at a global-norm ceiling. Single-threaded and
// fully determined by (corpus, model config, train config).

#include <cstdint>
#include <utility>
#include <vector>

#include "core/model.hpp"

namespace headgate::model {

struct Corpus {
    std::vector<std::vector<int32_t>> sequences;
    std::vector<std::vector<TokenRole>> roles; // parallel to sequences, may be empty
};

struct TrainConfig {
    int steps = 1200;
    int batch_size = 16;
    float lr_max = 0.2f;
    float lr_min = 0.02f;
    float momentum = 0.9f;
    float clip_norm = 1.0f;
    double holdout_fraction = 0.1;
    uint64_t seed = 7;

    void validate() const;
};

struct TrainReport {
    int steps_run = 0;
    int train_sequences = 0;
    int holdout_sequences = 0;
    double init_holdout_loss = 0.0;  // nats per token, before any update
    double final_holdout_loss = 0.0; // after the last update
    std::vector<std::pair<int, double>> loss_curve; // sampled (step, batch loss)
};

struct TrainResult {
    ModelWeights weights;
    TrainReport report;
};

TrainResult train_toy_lm(const Corpus& corpus, const ModelConfig& cfg, const TrainConfig& tc);

// mean next-token cross entropy (nats/token) of the model on the sequences
double corpus_loss(const ModelWeights& w, const std::vector<std::vector<int32_t>>& seqs);

} // namespace headgate::model
