#pragma once

// Per-head linear probes on attention-head outputs: extraction at the final
// token, weighted binary cross-entropy training by full-batch gradient
// descent, top-K head selection by validation accuracy, and the aggregated
// prompt risk score q.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "core/dataset.hpp"
#include "core/model.hpp"

namespace headgate::probe {

using HeadId = std::pair<int, int>; // (layer, head)

struct LinearProbe {
    int layer = 0;
    int head = 0;
    Vector w;
    float b = 0.0f;
    double val_acc = 0.0;
};

struct ProbeTrainConfig {
    float lr = 0.1f;
    int epochs = 500;
    int batch_size = 1 << 30; // clamped to the dataset size: full batch
    int patience = 25;
    uint64_t seed = 99;

    void validate() const;
};

struct ProbeBank {
    std::string model_fingerprint;
    model::ModelConfig model_cfg;
    ProbeTrainConfig train_cfg;
    std::map<HeadId, LinearProbe> probes; // all layers x heads
    std::vector<HeadId> selected;         // S_K, sorted by (layer, head)
    int k = 0;

    long parameter_count() const;        // |H| * (head_dim + 1)
    long active_parameter_count() const; // K * (head_dim + 1)
    void validate() const;
};

// row of the attn_head_output tap at the final token position
Vector extract_activation(const model::ActivationTrace& trace, int layer, int head);

// weighted mean BCE of sigmoid(w.x + b) and its analytic gradient; class
// weights are inverse-frequency so imbalanced data trains balanced
struct BceResult {
    double loss = 0.0;
    std::vector<double> dw;
    double db = 0.0;
};
BceResult bce_loss_and_grad(const std::vector<Vector>& x, const std::vector<int>& y,
                            std::span<const double> w, double b, bool with_grad = true);

struct TrainedProbe {
    Vector w;
    float b = 0.0f;
    double best_monitor_bce = 0.0; // validation BCE when a val set is given, else train BCE
    int epochs_run = 0;
};

// Full-batch gradient descent from zero init, early-stopped on the monitor
// BCE with the configured patience; returns the best iterate. When val data
// is empty the training BCE is monitored instead.
TrainedProbe train_probe(const std::vector<Vector>& features, const std::vector<int>& labels,
                         const ProbeTrainConfig& cfg, const std::vector<Vector>& val_features = {},
                         const std::vector<int>& val_labels = {});

double probe_predict(const LinearProbe& probe, std::span<const float> a);

// the K highest accuracies; ties broken toward lower layer then lower head;
// result sorted by (layer, head)
std::vector<HeadId> rank_heads(const std::map<HeadId, double>& acc_map, int k);

double aggregate_score(std::span<const double> probs);

struct SweepCell {
    int layer = 0;
    model::TapPosition position = model::TapPosition::layer_input;
    int head = -1;
    double val_acc = 0.0;
    bool ok = true;
    std::string error;
};

struct SweepSummaryRow {
    int layer = 0;
    model::TapPosition position = model::TapPosition::layer_input;
    double mean_acc = 0.0; // mean over heads (the cell itself when not per-head)
    double top_acc = 0.0;  // mean over the best 4 heads
};

struct SweepResult {
    std::vector<SweepCell> cells;
    std::vector<SweepSummaryRow> summary;
};

// probes every tap position at every layer; failed cells are marked, not fatal
SweepResult spatial_sweep(const model::ModelWeights& w, const harness::LabeledDataset& ds,
                          const ProbeTrainConfig& cfg);

// trains a probe for every head at attn_head_output and selects S_K;
// k is clamped to the head count
ProbeBank build_bank(const model::ModelWeights& w, const harness::LabeledDataset& ds, int k,
                     const ProbeTrainConfig& cfg);

struct ScoreResult {
    double q = 0.0;
    std::vector<HeadId> heads;
    std::vector<double> probs; // parallel to heads
};

ScoreResult score_prompt(const model::ModelWeights& w, const ProbeBank& bank,
                         std::span<const int32_t> tokens);

void save_bank(const ProbeBank& bank, const std::string& path);
ProbeBank load_bank(const std::string& path);
std::string bank_to_text(const ProbeBank& bank);
ProbeBank bank_from_text(const std::string& text);

} // namespace headgate::probe
