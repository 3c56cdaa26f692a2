#include "core/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "core/weights_io.hpp"

#include <json.hpp>

namespace headgate::harness {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

ordered_json spec_json(const SyntheticSpec& s) {
    ordered_json j;
    j["vocab"] = s.vocab;
    j["system_tokens"] = s.system_tokens;
    j["benign_tokens"] = s.benign_tokens;
    j["malicious_tokens"] = s.malicious_tokens;
    j["shared_tokens"] = s.shared_tokens;
    j["compliance_tokens"] = s.compliance_tokens;
    j["refusal_tokens"] = s.refusal_tokens;
    j["prompt_len_min"] = s.prompt_len_min;
    j["prompt_len_max"] = s.prompt_len_max;
    j["system_prefix_len"] = s.system_prefix_len;
    j["response_len_min"] = s.response_len_min;
    j["response_len_max"] = s.response_len_max;
    j["ambiguity"] = s.ambiguity;
    j["malicious_compliance_rate"] = s.malicious_compliance_rate;
    j["ratio_train"] = s.ratio_train;
    j["ratio_val"] = s.ratio_val;
    j["ratio_test"] = s.ratio_test;
    j["benign_count"] = s.benign_count;
    j["malicious_count"] = s.malicious_count;
    j["seed"] = s.seed;
    return j;
}

void spec_merge(SyntheticSpec& s, const ordered_json& j) {
    s.vocab = j.value("vocab", s.vocab);
    s.system_tokens = j.value("system_tokens", s.system_tokens);
    s.benign_tokens = j.value("benign_tokens", s.benign_tokens);
    s.malicious_tokens = j.value("malicious_tokens", s.malicious_tokens);
    s.shared_tokens = j.value("shared_tokens", s.shared_tokens);
    s.compliance_tokens = j.value("compliance_tokens", s.compliance_tokens);
    s.refusal_tokens = j.value("refusal_tokens", s.refusal_tokens);
    s.prompt_len_min = j.value("prompt_len_min", s.prompt_len_min);
    s.prompt_len_max = j.value("prompt_len_max", s.prompt_len_max);
    s.system_prefix_len = j.value("system_prefix_len", s.system_prefix_len);
    s.response_len_min = j.value("response_len_min", s.response_len_min);
    s.response_len_max = j.value("response_len_max", s.response_len_max);
    s.ambiguity = j.value("ambiguity", s.ambiguity);
    s.malicious_compliance_rate =
        j.value("malicious_compliance_rate", s.malicious_compliance_rate);
    s.ratio_train = j.value("ratio_train", s.ratio_train);
    s.ratio_val = j.value("ratio_val", s.ratio_val);
    s.ratio_test = j.value("ratio_test", s.ratio_test);
    s.benign_count = j.value("benign_count", s.benign_count);
    s.malicious_count = j.value("malicious_count", s.malicious_count);
}

ordered_json model_json(const model::ModelConfig& c) {
    ordered_json j;
    j["layers"] = c.layers;
    j["heads"] = c.heads;
    j["head_dim"] = c.head_dim;
    j["dim"] = c.dim;
    j["ffn_dim"] = c.ffn_dim;
    j["vocab"] = c.vocab;
    j["max_seq"] = c.max_seq;
    j["seed"] = c.seed;
    return j;
}

void model_merge(model::ModelConfig& c, const ordered_json& j) {
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.vocab = j.value("vocab", c.vocab);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.dim = j.value("dim", c.heads * c.head_dim);
}

ordered_json train_json(const model::TrainConfig& c) {
    ordered_json j;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["lr_max"] = static_cast<double>(c.lr_max);
    j["lr_min"] = static_cast<double>(c.lr_min);
    j["momentum"] = static_cast<double>(c.momentum);
    j["clip_norm"] = static_cast<double>(c.clip_norm);
    j["holdout_fraction"] = c.holdout_fraction;
    j["seed"] = c.seed;
    return j;
}

void train_merge(model::TrainConfig& c, const ordered_json& j) {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_max = static_cast<float>(j.value("lr_max", static_cast<double>(c.lr_max)));
    c.lr_min = static_cast<float>(j.value("lr_min", static_cast<double>(c.lr_min)));
    c.momentum = static_cast<float>(j.value("momentum", static_cast<double>(c.momentum)));
    c.clip_norm = static_cast<float>(j.value("clip_norm", static_cast<double>(c.clip_norm)));
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
}

ordered_json probe_json(const probe::ProbeTrainConfig& c) {
    ordered_json j;
    j["lr"] = static_cast<double>(c.lr);
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["patience"] = c.patience;
    j["seed"] = c.seed;
    return j;
}

void probe_merge(probe::ProbeTrainConfig& c, const ordered_json& j) {
    c.lr = static_cast<float>(j.value("lr", static_cast<double>(c.lr)));
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patience = j.value("patience", c.patience);
}

ordered_json policy_json(const steer::SteeringPolicy& p) {
    ordered_json j;
    j["theta_low"] = p.theta_low;
    j["theta_high"] = p.theta_high;
    j["boost"] = steer::boost_name(p.boost);
    j["gain"] = p.gain;
    j["beam_width"] = p.beam_width;
    j["max_new_tokens"] = p.max_new_tokens;
    j["template"] = p.template_tokens;
    j["eos_token"] = p.eos_token;
    j["active_boost"] = p.active_boost;
    return j;
}

void policy_merge(steer::SteeringPolicy& p, const ordered_json& j) {
    p.theta_low = j.value("theta_low", p.theta_low);
    p.theta_high = j.value("theta_high", p.theta_high);
    if (j.contains("boost")) p.boost = steer::boost_from_name(j.at("boost").get<std::string>());
    p.gain = j.value("gain", p.gain);
    p.beam_width = j.value("beam_width", p.beam_width);
    p.max_new_tokens = j.value("max_new_tokens", p.max_new_tokens);
    if (j.contains("template")) p.template_tokens = j.at("template").get<std::vector<int32_t>>();
    p.eos_token = j.value("eos_token", p.eos_token);
    p.active_boost = j.value("active_boost", p.active_boost);
}

ordered_json config_json(const ExperimentConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["dataset"] = spec_json(c.dataset);
    j["model"] = model_json(c.model);
    j["lm_train"] = train_json(c.lm_train);
    j["probe_train"] = probe_json(c.probe_train);
    j["k"] = c.k;
    j["policy"] = policy_json(c.policy);
    j["run_detection"] = c.run_detection;
    j["run_defense"] = c.run_defense;
    j["analyze_trajectory"] = c.analyze_trajectory;
    j["analyze_entropy"] = c.analyze_entropy;
    j["analyze_topk"] = c.analyze_topk;
    j["analyze_similarity"] = c.analyze_similarity;
    j["run_sweep"] = c.run_sweep;
    j["topk_values"] = c.topk_values;
    return j;
}

} // namespace

void ExperimentConfig::finalize() {
    // sub-seeds stream off the master seed so one value pins the whole run
    dataset.seed = seed + 1;
    model.seed = seed + 2;
    lm_train.seed = seed + 3;
    probe_train.seed = seed + 4;
    dataset.validate();
    model.validate();
    require(dataset.vocab == model.vocab, errc::spec,
            "config: dataset vocab must equal model vocab");
    require(dataset.prompt_len_max + policy.max_new_tokens <= model.max_seq, errc::spec,
            "config: prompt_len_max plus max_new_tokens must fit max_seq");
    const VocabLayout lay = dataset.layout();
    if (policy.template_tokens.empty())
        policy.template_tokens = lay.refusal_template(std::min(6, lay.refusal_count));
    policy.eos_token = lay.eos;
    policy.validate();
    require(k >= 1, errc::input, "config: k must be >= 1");
    if (topk_values.empty())
        for (int i = 1; i <= model.layers * model.heads; ++i) topk_values.push_back(i);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(errc::format, std::string("config: ") + e.what());
    }
    ExperimentConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        if (j.contains("dataset")) spec_merge(c.dataset, j.at("dataset"));
        if (j.contains("model")) model_merge(c.model, j.at("model"));
        if (j.contains("lm_train")) train_merge(c.lm_train, j.at("lm_train"));
        if (j.contains("probe_train")) probe_merge(c.probe_train, j.at("probe_train"));
        c.k = j.value("k", c.k);
        if (j.contains("policy")) policy_merge(c.policy, j.at("policy"));
        c.run_detection = j.value("run_detection", c.run_detection);
        c.run_defense = j.value("run_defense", c.run_defense);
        c.analyze_trajectory = j.value("analyze_trajectory", c.analyze_trajectory);
        c.analyze_entropy = j.value("analyze_entropy", c.analyze_entropy);
        c.analyze_topk = j.value("analyze_topk", c.analyze_topk);
        c.analyze_similarity = j.value("analyze_similarity", c.analyze_similarity);
        c.run_sweep = j.value("run_sweep", c.run_sweep);
        if (j.contains("topk_values")) c.topk_values = j.at("topk_values").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        fail(errc::format, std::string("config: ") + e.what());
    }
    c.finalize();
    return c;
}

std::string ExperimentConfig::to_json_text() const { return config_json(*this).dump(2) + "\n"; }

DetectionEval eval_detection(const model::ModelWeights& w, const probe::ProbeBank& bank,
                             const std::vector<PromptItem>& items) {
    require(!items.empty(), errc::input, "eval_detection: no items");
    DetectionEval ev;
    std::vector<int> preds;
    for (const PromptItem& it : items) {
        const probe::ScoreResult sr = probe::score_prompt(w, bank, it.tokens);
        ev.scores.push_back(sr.q);
        ev.labels.push_back(it.label == Intent::malicious ? 1 : 0);
        preds.push_back(sr.q > 0.5 ? 1 : 0);
    }
    ev.n = static_cast<int>(items.size());
    ev.acc = accuracy(preds, ev.labels);
    ev.balanced_acc = balanced_accuracy(preds, ev.labels);
    ev.roc = roc_auc(ev.scores, ev.labels);
    ev.auc = ev.roc.auc;
    return ev;
}

DefenseEval eval_defense(const model::ModelWeights& w, const probe::ProbeBank& bank,
                         const std::vector<PromptItem>& items,
                         const steer::SteeringPolicy& policy, const VocabLayout& layout) {
    require(!items.empty(), errc::input, "eval_defense: no items");
    DefenseEval ev;
    std::vector<steer::DecisionRecord> undefended_records;
    for (const PromptItem& it : items) {
        // undefended: plain greedy decoding, recorded as a passive run
        std::vector<int32_t> und_tokens;
        steer::DecisionRecord und_rec;
        und_rec.region = steer::Region::passive;
        for (const steer::GreedyStep& gs :
             steer::greedy_decode(w, it.tokens, policy.max_new_tokens, policy.eos_token)) {
            und_rec.steps.push_back({static_cast<int>(und_tokens.size()), gs.token, gs.logit,
                                     gs.logit, 0.0});
            und_tokens.push_back(gs.token);
        }
        undefended_records.push_back(und_rec);

        const steer::GenerateResult def = steer::generate(w, bank, it.tokens, policy);
        ev.records.push_back(def.record);
        ev.record_labels.push_back(it.label);

        if (it.label == Intent::malicious) {
            ++ev.malicious_n;
            ev.sr_undefended.push_back(sr_proxy(und_tokens, policy, layout));
            ev.sr_defended.push_back(sr_proxy(def.tokens, policy, layout));
        } else {
            ++ev.benign_n;
        }
    }

    std::vector<steer::DecisionRecord> benign_def, benign_und;
    for (size_t i = 0; i < items.size(); ++i) {
        if (items[i].label == Intent::benign) {
            benign_def.push_back(ev.records[i]);
            benign_und.push_back(undefended_records[i]);
        }
    }
    ev.frc_defended = frc(benign_def);
    ev.frc_undefended = frc(benign_und);

    auto mean = [](const std::vector<int>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (int x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    ev.sr_defended_mean = mean(ev.sr_defended);
    ev.sr_undefended_mean = mean(ev.sr_undefended);
    ev.sr_drop_rel = ev.sr_undefended_mean > 0.0
                         ? (ev.sr_undefended_mean - ev.sr_defended_mean) / ev.sr_undefended_mean
                         : 0.0;
    return ev;
}

namespace {

ordered_json detection_json(const DetectionEval& ev) {
    ordered_json j;
    j["n"] = ev.n;
    j["acc"] = ev.acc;
    j["balanced_acc"] = ev.balanced_acc;
    j["auc"] = ev.auc;
    return j;
}

ordered_json report_json(const EvalReport& r) {
    ordered_json j;
    j["format_version"] = 1;
    j["config"] = config_json(r.config);
    ordered_json sizes;
    sizes["train"] = r.train_items;
    sizes["val"] = r.val_items;
    sizes["test"] = r.test_items;
    j["split_sizes"] = sizes;
    ordered_json lm;
    lm["init_holdout_loss"] = r.lm_init_holdout_loss;
    lm["final_holdout_loss"] = r.lm_final_holdout_loss;
    j["lm_train"] = lm;
    j["weights_fingerprint"] = r.weights_fingerprint;
    ordered_json bank;
    bank["parameter_count"] = r.bank_parameter_count;
    bank["active_parameter_count"] = r.bank_active_parameter_count;
    bank["best_probe_val_acc"] = r.best_probe_val_acc;
    j["bank"] = bank;
    ordered_json det;
    det["val"] = detection_json(r.det_val);
    det["test"] = detection_json(r.det_test);
    j["detection"] = det;
    ordered_json def;
    def["benign_n"] = r.defense.benign_n;
    def["malicious_n"] = r.defense.malicious_n;
    def["frc_defended"] = r.defense.frc_defended;
    def["frc_undefended"] = r.defense.frc_undefended;
    def["sr_defended_mean"] = r.defense.sr_defended_mean;
    def["sr_undefended_mean"] = r.defense.sr_undefended_mean;
    def["sr_drop_rel"] = r.defense.sr_drop_rel;
    j["defense"] = def;
    ordered_json ent;
    auto ent_json = [](const analysis::EntropySummary& s) {
        ordered_json e;
        e["final_structural_mean"] = s.final_structural_mean;
        e["content_mean"] = s.content_mean;
        e["margin"] = s.margin;
        e["prompts"] = s.prompts;
        return e;
    };
    ent["malicious"] = ent_json(r.entropy_malicious);
    ent["benign"] = ent_json(r.entropy_benign);
    j["entropy"] = ent;
    ordered_json topk = ordered_json::array();
    for (const analysis::TopkPoint& p : r.topk)
        topk.push_back(ordered_json{{"k", p.k}, {"accuracy", p.accuracy}});
    j["topk"] = topk;
    return j;
}

struct Manifest {
    std::string path;
    ordered_json stages = ordered_json::array();
    ordered_json artifacts = ordered_json::array();
    ordered_json fingerprints = ordered_json::object();
    ordered_json config;
    uint64_t seed = 0;

    void write() const {
        ordered_json j;
        j["format_version"] = 1;
        j["seed"] = seed;
        j["config"] = config;
        j["stages"] = stages;
        j["artifacts"] = artifacts;
        j["fingerprints"] = fingerprints;
        write_text_file(path, j.dump(2) + "\n");
    }

    void ok(const std::string& name) {
        stages.push_back(ordered_json{{"name", name}, {"status", "ok"}});
        write();
    }
    void failed(const std::string& name, const std::string& error) {
        stages.push_back(ordered_json{{"name", name}, {"status", "failed"}, {"error", error}});
        write();
    }
    void artifact(const std::string& rel) {
        artifacts.push_back(rel);
    }
};

std::vector<PromptItem> filter_items(const std::vector<PromptItem>& items, Intent label) {
    std::vector<PromptItem> out;
    for (const PromptItem& it : items)
        if (it.label == label) out.push_back(it);
    return out;
}

} // namespace

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), errc::io, "cannot open '" + path + "' for writing");
    f << text;
    require(f.good(), errc::io, "short write to '" + path + "'");
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), errc::io, "cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string roc_csv(const RocResult& roc) {
    std::string out = "fpr,tpr,threshold\n";
    for (const RocPoint& p : roc.curve)
        out += fmt(p.fpr) + "," + fmt(p.tpr) + "," + fmt(p.threshold) + "\n";
    return out;
}

std::string scores_csv(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), errc::input, "scores_csv: length mismatch");
    std::string out = "index,label,q\n";
    for (size_t i = 0; i < scores.size(); ++i)
        out += std::to_string(i) + "," + std::to_string(labels[i]) + "," + fmt(scores[i]) + "\n";
    return out;
}

std::string topk_csv(std::span<const analysis::TopkPoint> points) {
    std::string out = "k,accuracy\n";
    for (const analysis::TopkPoint& p : points)
        out += std::to_string(p.k) + "," + fmt(p.accuracy) + "\n";
    return out;
}

std::string trajectory_csv(const analysis::Trajectory& traj) {
    std::string out = "layer,head";
    for (size_t t = 0; t < traj.tokens.size(); ++t) out += ",t" + std::to_string(t);
    out += "\ntoken,";
    for (size_t t = 0; t < traj.tokens.size(); ++t)
        out += "," + std::to_string(traj.tokens[t]);
    out += "\nrole,";
    for (size_t t = 0; t < traj.tokens.size(); ++t)
        out += std::string(",") + model::role_name(traj.roles[t]);
    out += "\n";
    for (size_t h = 0; h < traj.heads.size(); ++h) {
        out += std::to_string(traj.heads[h].first) + "," + std::to_string(traj.heads[h].second);
        for (double p : traj.probs[h]) out += "," + fmt(p);
        out += "\n";
    }
    return out;
}

std::string entropy_curves_csv(const model::ModelWeights& w, const probe::ProbeBank& bank,
                               const std::vector<PromptItem>& items) {
    std::string out = "prompt,position,role,entropy\n";
    for (size_t i = 0; i < items.size(); ++i) {
        const analysis::Trajectory traj =
            analysis::temporal_trajectory(w, bank, items[i].tokens, false, items[i].roles);
        const std::vector<double> curve = analysis::convergence_entropy(traj);
        for (size_t t = 0; t < curve.size(); ++t)
            out += std::to_string(i) + "," + std::to_string(t) + "," +
                   model::role_name(traj.roles[t]) + "," + fmt(curve[t]) + "\n";
    }
    return out;
}

std::string similarity_csv(const analysis::SimilarityReport& rep) {
    std::string out = "layer_a,head_a,selected_a,layer_b,head_b,selected_b,cosine,significant\n";
    for (int r = 0; r < rep.rows; ++r) {
        for (int c = 0; c < rep.cols; ++c) {
            const size_t idx = static_cast<size_t>(r) * rep.cols + c;
            out += std::to_string(rep.heads_a[static_cast<size_t>(r)].first) + "," +
                   std::to_string(rep.heads_a[static_cast<size_t>(r)].second) + "," +
                   std::to_string(static_cast<int>(rep.selected_a[static_cast<size_t>(r)])) + "," +
                   std::to_string(rep.heads_b[static_cast<size_t>(c)].first) + "," +
                   std::to_string(rep.heads_b[static_cast<size_t>(c)].second) + "," +
                   std::to_string(static_cast<int>(rep.selected_b[static_cast<size_t>(c)])) + "," +
                   fmt(rep.sim[idx]) + "," + std::to_string(static_cast<int>(rep.significant[idx])) +
                   "\n";
        }
    }
    return out;
}

std::string sweep_csv(const probe::SweepResult& res) {
    std::string out = "layer,position,head,val_acc,status\n";
    for (const probe::SweepCell& c : res.cells) {
        out += std::to_string(c.layer) + "," + model::tap_position_name(c.position) + "," +
               (c.head >= 0 ? std::to_string(c.head) : std::string("-")) + "," +
               (c.ok ? fmt(c.val_acc) : std::string("")) + "," +
               (c.ok ? std::string("ok") : "failed: " + c.error) + "\n";
    }
    return out;
}

std::string sweep_summary_csv(const probe::SweepResult& res) {
    std::string out = "layer,position,mean_acc,top4_acc\n";
    for (const probe::SweepSummaryRow& r : res.summary)
        out += std::to_string(r.layer) + "," + model::tap_position_name(r.position) + "," +
               fmt(r.mean_acc) + "," + fmt(r.top_acc) + "\n";
    return out;
}

std::string EvalReport::to_json_text() const { return report_json(*this).dump(2) + "\n"; }

EvalReport run_experiment(const ExperimentConfig& cfg_in, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig cfg = cfg_in;
    cfg.finalize();

    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    fs::create_directories(out_dir + "/dataset");

    Manifest manifest;
    manifest.path = out_dir + "/manifest.json";
    manifest.seed = cfg.seed;
    manifest.config = ordered_json::parse(cfg.to_json_text());
    manifest.write();
    write_text_file(out_dir + "/config.json", cfg.to_json_text());
    manifest.artifact("config.json");

    EvalReport report;
    report.config = cfg;

    auto stage = [&](const std::string& name, auto&& fn) {
        try {
            fn();
            manifest.ok(name);
        } catch (const Error& e) {
            manifest.failed(name, e.what());
            throw Error(e.code(), "stage '" + name + "': " + e.what());
        } catch (const std::exception& e) {
            manifest.failed(name, e.what());
            throw Error(errc::internal, "stage '" + name + "': " + e.what());
        }
    };

    const VocabLayout layout = cfg.dataset.layout();
    LabeledDataset ds;
    stage("gen-data", [&] {
        ds = gen_synthetic(cfg.dataset);
        save_dataset(ds, out_dir + "/dataset");
        manifest.artifact("dataset/");
        report.train_items = static_cast<int>(ds.train.items.size());
        report.val_items = static_cast<int>(ds.val.items.size());
        report.test_items = static_cast<int>(ds.test.items.size());
    });

    model::ModelWeights weights;
    stage("train-lm", [&] {
        const model::TrainResult tr = model::train_toy_lm(ds.corpus, cfg.model, cfg.lm_train);
        weights = tr.weights;
        report.lm_init_holdout_loss = tr.report.init_holdout_loss;
        report.lm_final_holdout_loss = tr.report.final_holdout_loss;
        model::save_weights(weights, out_dir + "/weights.bin");
        manifest.artifact("weights.bin");
        std::string log = "step,loss\n";
        for (const auto& [step, loss] : tr.report.loss_curve)
            log += std::to_string(step) + "," + fmt(loss) + "\n";
        write_text_file(out_dir + "/train_log.csv", log);
        manifest.artifact("train_log.csv");
        report.weights_fingerprint = model::fingerprint(weights);
        manifest.fingerprints["weights"] = report.weights_fingerprint;
    });

    probe::ProbeBank bank;
    stage("build-bank", [&] {
        bank = probe::build_bank(weights, ds, cfg.k, cfg.probe_train);
        probe::save_bank(bank, out_dir + "/bank.json");
        manifest.artifact("bank.json");
        report.bank_parameter_count = bank.parameter_count();
        report.bank_active_parameter_count = bank.active_parameter_count();
        for (const auto& [id, p] : bank.probes)
            report.best_probe_val_acc = std::max(report.best_probe_val_acc, p.val_acc);
    });

    if (cfg.run_detection) {
        stage("detection", [&] {
            report.det_val = eval_detection(weights, bank, ds.val.items);
            report.det_test = eval_detection(weights, bank, ds.test.items);
            std::string csv = "split,n,acc,balanced_acc,auc\n";
            csv += "val," + std::to_string(report.det_val.n) + "," + fmt(report.det_val.acc) +
                   "," + fmt(report.det_val.balanced_acc) + "," + fmt(report.det_val.auc) + "\n";
            csv += "test," + std::to_string(report.det_test.n) + "," + fmt(report.det_test.acc) +
                   "," + fmt(report.det_test.balanced_acc) + "," + fmt(report.det_test.auc) +
                   "\n";
            write_text_file(out_dir + "/detection.csv", csv);
            write_text_file(out_dir + "/roc_val.csv", roc_csv(report.det_val.roc));
            write_text_file(out_dir + "/roc_test.csv", roc_csv(report.det_test.roc));
            write_text_file(out_dir + "/scores_val.csv",
                            scores_csv(report.det_val.scores, report.det_val.labels));
            write_text_file(out_dir + "/scores_test.csv",
                            scores_csv(report.det_test.scores, report.det_test.labels));
            manifest.artifact("detection.csv");
            manifest.artifact("roc_val.csv");
            manifest.artifact("roc_test.csv");
            manifest.artifact("scores_val.csv");
            manifest.artifact("scores_test.csv");
        });
    }

    if (cfg.run_defense) {
        stage("defense", [&] {
            report.defense = eval_defense(weights, bank, ds.test.items, cfg.policy, layout);
            std::string csv =
                "benign_n,malicious_n,frc_defended,frc_undefended,sr_defended_mean,"
                "sr_undefended_mean,sr_drop_rel\n";
            csv += std::to_string(report.defense.benign_n) + "," +
                   std::to_string(report.defense.malicious_n) + "," +
                   std::to_string(report.defense.frc_defended) + "," +
                   std::to_string(report.defense.frc_undefended) + "," +
                   fmt(report.defense.sr_defended_mean) + "," +
                   fmt(report.defense.sr_undefended_mean) + "," +
                   fmt(report.defense.sr_drop_rel) + "\n";
            write_text_file(out_dir + "/defense.csv", csv);
            manifest.artifact("defense.csv");

            std::string dist = "tier,defended,undefended\n";
            for (int tier = 1; tier <= 5; ++tier) {
                const auto count = [tier](const std::vector<int>& v) {
                    return std::count(v.begin(), v.end(), tier);
                };
                dist += std::to_string(tier) + "," +
                        std::to_string(count(report.defense.sr_defended)) + "," +
                        std::to_string(count(report.defense.sr_undefended)) + "\n";
            }
            write_text_file(out_dir + "/sr_dist.csv", dist);
            manifest.artifact("sr_dist.csv");

            std::string records;
            for (size_t i = 0; i < report.defense.records.size(); ++i) {
                ordered_json rj = ordered_json::parse(
                    steer::record_to_text(report.defense.records[i]));
                ordered_json line;
                line["index"] = i;
                line["label"] = report.defense.record_labels[i] == Intent::malicious
                                    ? "malicious"
                                    : "benign";
                line.update(rj);
                records += line.dump() + "\n";
            }
            write_text_file(out_dir + "/records.jsonl", records);
            manifest.artifact("records.jsonl");
        });
    }

    const std::vector<PromptItem> val_malicious = filter_items(ds.val.items, Intent::malicious);
    const std::vector<PromptItem> val_benign = filter_items(ds.val.items, Intent::benign);

    if (cfg.analyze_trajectory) {
        stage("analyze-trajectory", [&] {
            if (!val_malicious.empty()) {
                const analysis::Trajectory traj = analysis::temporal_trajectory(
                    weights, bank, val_malicious[0].tokens, false, val_malicious[0].roles);
                write_text_file(out_dir + "/trajectory_malicious.csv", trajectory_csv(traj));
                manifest.artifact("trajectory_malicious.csv");
            }
            if (!val_benign.empty()) {
                const analysis::Trajectory traj = analysis::temporal_trajectory(
                    weights, bank, val_benign[0].tokens, false, val_benign[0].roles);
                write_text_file(out_dir + "/trajectory_benign.csv", trajectory_csv(traj));
                manifest.artifact("trajectory_benign.csv");
            }
        });
    }

    if (cfg.analyze_entropy) {
        stage("analyze-entropy", [&] {
            report.entropy_malicious = analysis::entropy_summary(weights, bank, val_malicious);
            report.entropy_benign = analysis::entropy_summary(weights, bank, val_benign);
            write_text_file(out_dir + "/entropy_malicious.csv",
                            entropy_curves_csv(weights, bank, val_malicious));
            write_text_file(out_dir + "/entropy_benign.csv",
                            entropy_curves_csv(weights, bank, val_benign));
            std::string csv = "class,prompts,final_structural_mean,content_mean,margin\n";
            csv += "malicious," + std::to_string(report.entropy_malicious.prompts) + "," +
                   fmt(report.entropy_malicious.final_structural_mean) + "," +
                   fmt(report.entropy_malicious.content_mean) + "," +
                   fmt(report.entropy_malicious.margin) + "\n";
            csv += "benign," + std::to_string(report.entropy_benign.prompts) + "," +
                   fmt(report.entropy_benign.final_structural_mean) + "," +
                   fmt(report.entropy_benign.content_mean) + "," +
                   fmt(report.entropy_benign.margin) + "\n";
            write_text_file(out_dir + "/entropy_summary.csv", csv);
            manifest.artifact("entropy_malicious.csv");
            manifest.artifact("entropy_benign.csv");
            manifest.artifact("entropy_summary.csv");
        });
    }

    if (cfg.analyze_topk) {
        stage("analyze-topk", [&] {
            report.topk = analysis::topk_curve(weights, bank, ds.val.items, cfg.topk_values);
            write_text_file(out_dir + "/topk.csv", topk_csv(report.topk));
            manifest.artifact("topk.csv");
        });
    }

    if (cfg.analyze_similarity) {
        stage("analyze-similarity", [&] {
            const analysis::SimilarityReport rep = analysis::awareness_similarity(bank, bank);
            write_text_file(out_dir + "/similarity.csv", similarity_csv(rep));
            manifest.artifact("similarity.csv");
        });
    }

    if (cfg.run_sweep) {
        stage("sweep", [&] {
            const probe::SweepResult res = probe::spatial_sweep(weights, ds, cfg.probe_train);
            write_text_file(out_dir + "/sweep.csv", sweep_csv(res));
            write_text_file(out_dir + "/sweep_summary.csv", sweep_summary_csv(res));
            manifest.artifact("sweep.csv");
            manifest.artifact("sweep_summary.csv");
        });
    }

    stage("report", [&] {
        write_text_file(out_dir + "/report.json", report.to_json_text());
        manifest.artifact("report.json");
    });

    const auto t1 = std::chrono::steady_clock::now();
    report.wall_clock_seconds = std::chrono::duration<double>(t1 - t0).count();
    // timing is real wall clock; it lives outside the deterministic artifact set
    write_text_file(out_dir + "/timing.txt",
                    "wall_clock_seconds " + fmt(report.wall_clock_seconds) + "\n");
    return report;
}

} // namespace headgate::harness
