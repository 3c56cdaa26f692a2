#pragma once

// End-to-end orchestration: config handling, detection/defense evaluation,
// configured analyses, and the reproducible artifact tree written by `run`.
// Every artifact except timing.txt is a pure function of (config, seed).

#include <string>
#include <vector>

#include "core/analysis.hpp"
#include "core/dataset.hpp"
#include "core/metrics.hpp"
#include "core/probe.hpp"
#include "core/steer.hpp"
#include "core/train.hpp"

namespace headgate::harness {

struct ExperimentConfig {
    uint64_t seed = 42;
    SyntheticSpec dataset;
    model::ModelConfig model;
    model::TrainConfig lm_train;
    probe::ProbeTrainConfig probe_train;
    int k = 16;
    steer::SteeringPolicy policy; // empty template: filled from the vocab layout
    bool run_detection = true;
    bool run_defense = true;
    bool analyze_trajectory = true;
    bool analyze_entropy = true;
    bool analyze_topk = true;
    bool analyze_similarity = true;
    bool run_sweep = false;
    std::vector<int> topk_values; // empty: 1..head count

    // derive unset sub-seeds from the master seed, fill the default refusal
    // template, and validate the whole bundle
    void finalize();

    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
};

struct DetectionEval {
    int n = 0;
    double acc = 0.0;
    double balanced_acc = 0.0;
    double auc = 0.0;
    RocResult roc;
    std::vector<double> scores;
    std::vector<int> labels;
};

DetectionEval eval_detection(const model::ModelWeights& w, const probe::ProbeBank& bank,
                             const std::vector<PromptItem>& items);

struct DefenseEval {
    int benign_n = 0;
    int malicious_n = 0;
    int frc_defended = 0;
    int frc_undefended = 0;
    double sr_defended_mean = 0.0;
    double sr_undefended_mean = 0.0;
    double sr_drop_rel = 0.0; // relative drop of the malicious-set mean
    std::vector<int> sr_defended;   // per malicious item
    std::vector<int> sr_undefended; // per malicious item
    std::vector<steer::DecisionRecord> records; // defended, all items
    std::vector<Intent> record_labels;
};

DefenseEval eval_defense(const model::ModelWeights& w, const probe::ProbeBank& bank,
                         const std::vector<PromptItem>& items,
                         const steer::SteeringPolicy& policy, const VocabLayout& layout);

struct EvalReport {
    ExperimentConfig config;
    int train_items = 0, val_items = 0, test_items = 0;
    double lm_init_holdout_loss = 0.0;
    double lm_final_holdout_loss = 0.0;
    std::string weights_fingerprint;
    long bank_parameter_count = 0;
    long bank_active_parameter_count = 0;
    double best_probe_val_acc = 0.0;
    DetectionEval det_val, det_test;
    DefenseEval defense;
    analysis::EntropySummary entropy_malicious, entropy_benign;
    std::vector<analysis::TopkPoint> topk;
    double wall_clock_seconds = 0.0; // written to timing.txt only

    std::string to_json_text() const; // canonical, excludes wall clock
};

// gen-data -> train-lm -> build-bank -> detection -> defense -> analyses,
// writing the artifact tree under out_dir
EvalReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

// csv serializers (LF lines, '.' decimal point, round-trip float precision)
std::string roc_csv(const RocResult& roc);
std::string scores_csv(std::span<const double> scores, std::span<const int> labels);
std::string topk_csv(std::span<const analysis::TopkPoint> points);
std::string trajectory_csv(const analysis::Trajectory& traj);
std::string entropy_curves_csv(const model::ModelWeights& w, const probe::ProbeBank& bank,
                               const std::vector<PromptItem>& items);
std::string similarity_csv(const analysis::SimilarityReport& rep);
std::string sweep_csv(const probe::SweepResult& res);
std::string sweep_summary_csv(const probe::SweepResult& res);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

} // namespace headgate::harness
