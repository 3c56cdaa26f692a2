#include "headgate/headgate.h"

#include <cstring>
#include <string>

#include "core/analysis.hpp"
#include "core/dataset.hpp"
#include "core/experiment.hpp"
#include "core/metrics.hpp"
#include "core/model.hpp"
#include "core/probe.hpp"
#include "core/steer.hpp"
#include "core/train.hpp"
#include "core/weights_io.hpp"

using namespace headgate;

struct hg_model {
    model::ModelWeights weights;
};

struct hg_bank {
    probe::ProbeBank bank;
};

struct hg_dataset {
    harness::LabeledDataset ds;
};

namespace {

thread_local std::string g_last_error;

hg_status status_of(errc c) {
    switch (c) {
        case errc::shape: return HG_ERR_SHAPE;
        case errc::range: return HG_ERR_RANGE;
        case errc::input: return HG_ERR_INPUT;
        case errc::format: return HG_ERR_FORMAT;
        case errc::training: return HG_ERR_TRAINING;
        case errc::degenerate_data: return HG_ERR_DEGENERATE;
        case errc::tap: return HG_ERR_TAP;
        case errc::compatibility: return HG_ERR_COMPAT;
        case errc::region: return HG_ERR_REGION;
        case errc::length: return HG_ERR_LENGTH;
        case errc::spec: return HG_ERR_SPEC;
        case errc::io: return HG_ERR_IO;
        case errc::internal: return HG_ERR_INTERNAL;
    }
    return HG_ERR_INTERNAL;
}

template <typename F>
hg_status wrap(F&& fn) {
    try {
        fn();
        g_last_error.clear();
        return HG_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_of(e.code());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return HG_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return HG_ERR_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

std::string or_empty(const char* s) { return s ? std::string(s) : std::string(); }

void check_out(const void* p, const char* what) {
    require(p != nullptr, errc::input, std::string(what) + " must not be NULL");
}

// parse one section of the experiment config schema by wrapping it into a
// full document and reusing the config parser
harness::ExperimentConfig section_config(const std::string& section, const std::string& body) {
    std::string text = "{}";
    if (!body.empty() && body != "{}")
        text = "{\"" + section + "\": " + body + "}";
    return harness::ExperimentConfig::from_json_text(text);
}

steer::SteeringPolicy policy_from_json(const std::string& body, int model_vocab) {
    harness::ExperimentConfig cfg = section_config("policy", body);
    steer::SteeringPolicy p = cfg.policy;
    require(!p.template_tokens.empty(), errc::input, "policy: refusal template required");
    for (int32_t t : p.template_tokens)
        require(t >= 0 && t < model_vocab, errc::range,
                "policy: template token outside model vocab");
    return p;
}

const std::vector<harness::PromptItem>& pick_split(const harness::LabeledDataset& ds,
                                                   const std::string& name) {
    if (name == "train") return ds.train.items;
    if (name == "val" || name.empty()) return ds.val.items;
    if (name == "test") return ds.test.items;
    fail(errc::input, "unknown split '" + name + "'");
}

} // namespace

extern "C" {

const char* hg_version(void) { return "1.0.0"; }

const char* hg_status_name(hg_status s) {
    switch (s) {
        case HG_OK: return "ok";
        case HG_ERR_SHAPE: return "shape";
        case HG_ERR_RANGE: return "range";
        case HG_ERR_INPUT: return "input";
        case HG_ERR_FORMAT: return "format";
        case HG_ERR_TRAINING: return "training";
        case HG_ERR_DEGENERATE: return "degenerate data";
        case HG_ERR_TAP: return "tap";
        case HG_ERR_COMPAT: return "compatibility";
        case HG_ERR_REGION: return "region";
        case HG_ERR_LENGTH: return "length";
        case HG_ERR_SPEC: return "spec";
        case HG_ERR_IO: return "io";
        case HG_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* hg_last_error(void) { return g_last_error.c_str(); }

void hg_string_free(char* s) { delete[] s; }
void hg_tokens_free(int32_t* tokens) { delete[] tokens; }

hg_status hg_dataset_generate(const char* spec_json, hg_dataset** out) {
    return wrap([&] {
        check_out(out, "out");
        harness::ExperimentConfig cfg = section_config("dataset", or_empty(spec_json));
        auto* ds = new hg_dataset{harness::gen_synthetic(cfg.dataset)};
        *out = ds;
    });
}

hg_status hg_dataset_save(const hg_dataset* ds, const char* dir) {
    return wrap([&] {
        check_out(ds, "dataset");
        harness::save_dataset(ds->ds, or_empty(dir));
    });
}

hg_status hg_dataset_load(const char* dir, hg_dataset** out) {
    return wrap([&] {
        check_out(out, "out");
        *out = new hg_dataset{harness::load_dataset(or_empty(dir))};
    });
}

void hg_dataset_free(hg_dataset* ds) { delete ds; }

hg_status hg_model_train(const hg_dataset* ds, const char* model_json, const char* train_json,
                         hg_model** out) {
    return wrap([&] {
        check_out(ds, "dataset");
        check_out(out, "out");
        harness::ExperimentConfig mc = section_config("model", or_empty(model_json));
        harness::ExperimentConfig tc = section_config("lm_train", or_empty(train_json));
        const model::TrainResult tr = model::train_toy_lm(ds->ds.corpus, mc.model, tc.lm_train);
        *out = new hg_model{tr.weights};
    });
}

hg_status hg_model_save(const hg_model* m, const char* path) {
    return wrap([&] {
        check_out(m, "model");
        model::save_weights(m->weights, or_empty(path));
    });
}

hg_status hg_model_load(const char* path, hg_model** out) {
    return wrap([&] {
        check_out(out, "out");
        *out = new hg_model{model::load_weights(or_empty(path))};
    });
}

void hg_model_free(hg_model* m) { delete m; }

hg_status hg_model_fingerprint(const hg_model* m, char** out) {
    return wrap([&] {
        check_out(m, "model");
        check_out(out, "out");
        *out = dup_string(model::fingerprint(m->weights));
    });
}

hg_status hg_model_tap_points(const hg_model* m, char** out) {
    return wrap([&] {
        check_out(m, "model");
        check_out(out, "out");
        std::string text;
        for (const model::TapPoint& tp : model::list_tap_points(m->weights.cfg))
            text += tp.to_string() + "\n";
        *out = dup_string(text);
    });
}

hg_status hg_bank_build(const hg_model* m, const hg_dataset* ds, int k, const char* probe_json,
                        hg_bank** out) {
    return wrap([&] {
        check_out(m, "model");
        check_out(ds, "dataset");
        check_out(out, "out");
        harness::ExperimentConfig pc = section_config("probe_train", or_empty(probe_json));
        *out = new hg_bank{probe::build_bank(m->weights, ds->ds, k, pc.probe_train)};
    });
}

hg_status hg_bank_save(const hg_bank* b, const char* path) {
    return wrap([&] {
        check_out(b, "bank");
        probe::save_bank(b->bank, or_empty(path));
    });
}

hg_status hg_bank_load(const char* path, hg_bank** out) {
    return wrap([&] {
        check_out(out, "out");
        *out = new hg_bank{probe::load_bank(or_empty(path))};
    });
}

void hg_bank_free(hg_bank* b) { delete b; }

int hg_bank_selected_count(const hg_bank* b) {
    return b ? static_cast<int>(b->bank.selected.size()) : 0;
}

hg_status hg_score(const hg_model* m, const hg_bank* b, const int32_t* tokens, size_t n_tokens,
                   double* q_out, double* head_probs) {
    return wrap([&] {
        check_out(m, "model");
        check_out(b, "bank");
        check_out(tokens, "tokens");
        check_out(q_out, "q_out");
        const probe::ScoreResult sr =
            probe::score_prompt(m->weights, b->bank, {tokens, n_tokens});
        *q_out = sr.q;
        if (head_probs)
            for (size_t i = 0; i < sr.probs.size(); ++i) head_probs[i] = sr.probs[i];
    });
}

hg_status hg_generate(const hg_model* m, const hg_bank* b, const int32_t* tokens,
                      size_t n_tokens, const char* policy_json, int32_t** out_tokens,
                      size_t* out_len, char** record_json) {
    return wrap([&] {
        check_out(m, "model");
        check_out(b, "bank");
        check_out(tokens, "tokens");
        check_out(out_tokens, "out_tokens");
        check_out(out_len, "out_len");
        const steer::SteeringPolicy policy =
            policy_from_json(or_empty(policy_json), m->weights.cfg.vocab);
        const steer::GenerateResult res =
            steer::generate(m->weights, b->bank, {tokens, n_tokens}, policy);
        auto* buf = new int32_t[res.tokens.size()];
        std::memcpy(buf, res.tokens.data(), res.tokens.size() * sizeof(int32_t));
        *out_tokens = buf;
        *out_len = res.tokens.size();
        if (record_json) *record_json = dup_string(steer::record_to_text(res.record));
    });
}

hg_status hg_sweep(const hg_model* m, const hg_dataset* ds, const char* probe_json,
                   char** cells_csv, char** summary_csv) {
    return wrap([&] {
        check_out(m, "model");
        check_out(ds, "dataset");
        check_out(cells_csv, "cells_csv");
        harness::ExperimentConfig pc = section_config("probe_train", or_empty(probe_json));
        const probe::SweepResult res = probe::spatial_sweep(m->weights, ds->ds, pc.probe_train);
        *cells_csv = dup_string(harness::sweep_csv(res));
        if (summary_csv) *summary_csv = dup_string(harness::sweep_summary_csv(res));
    });
}

hg_status hg_analyze_trajectory(const hg_model* m, const hg_bank* b, const int32_t* tokens,
                                size_t n_tokens, int all_heads, char** csv_out) {
    return wrap([&] {
        check_out(m, "model");
        check_out(b, "bank");
        check_out(tokens, "tokens");
        check_out(csv_out, "csv_out");
        const analysis::Trajectory traj = analysis::temporal_trajectory(
            m->weights, b->bank, {tokens, n_tokens}, all_heads != 0);
        *csv_out = dup_string(harness::trajectory_csv(traj));
    });
}

hg_status hg_analyze_entropy(const hg_model* m, const hg_bank* b, const hg_dataset* ds,
                             const char* split, char** curves_csv, char** summary_csv) {
    return wrap([&] {
        check_out(m, "model");
        check_out(b, "bank");
        check_out(ds, "dataset");
        check_out(curves_csv, "curves_csv");
        const std::vector<harness::PromptItem>& items = pick_split(ds->ds, or_empty(split));
        std::string curves = "class,prompt,position,role,entropy\n";
        std::string summary = "class,prompts,final_structural_mean,content_mean,margin\n";
        for (const harness::Intent label : {harness::Intent::malicious, harness::Intent::benign}) {
            std::vector<harness::PromptItem> subset;
            for (const harness::PromptItem& it : items)
                if (it.label == label) subset.push_back(it);
            if (subset.empty()) continue;
            const char* cls = label == harness::Intent::malicious ? "malicious" : "benign";
            const std::string part = harness::entropy_curves_csv(m->weights, b->bank, subset);
            // re-prefix each data line with the class column
            size_t pos = part.find('\n') + 1;
            while (pos < part.size()) {
                const size_t end = part.find('\n', pos);
                curves += std::string(cls) + "," + part.substr(pos, end - pos) + "\n";
                pos = end + 1;
            }
            const analysis::EntropySummary s =
                analysis::entropy_summary(m->weights, b->bank, subset);
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%s,%d,%.17g,%.17g,%.17g\n", cls, s.prompts,
                          s.final_structural_mean, s.content_mean, s.margin);
            summary += buf;
        }
        *curves_csv = dup_string(curves);
        if (summary_csv) *summary_csv = dup_string(summary);
    });
}

hg_status hg_analyze_topk(const hg_model* m, const hg_bank* b, const hg_dataset* ds,
                          const int* k_values, size_t n_k, char** csv_out) {
    return wrap([&] {
        check_out(m, "model");
        check_out(b, "bank");
        check_out(ds, "dataset");
        check_out(csv_out, "csv_out");
        std::vector<int> ks;
        if (k_values && n_k > 0)
            ks.assign(k_values, k_values + n_k);
        else
            for (int i = 1; i <= static_cast<int>(b->bank.probes.size()); ++i) ks.push_back(i);
        const std::vector<analysis::TopkPoint> pts =
            analysis::topk_curve(m->weights, b->bank, ds->ds.val.items, ks);
        *csv_out = dup_string(harness::topk_csv(pts));
    });
}

hg_status hg_analyze_similarity(const hg_bank* a, const hg_bank* b, char** csv_out) {
    return wrap([&] {
        check_out(a, "bank a");
        check_out(b, "bank b");
        check_out(csv_out, "csv_out");
        const analysis::SimilarityReport rep = analysis::awareness_similarity(a->bank, b->bank);
        *csv_out = dup_string(harness::similarity_csv(rep));
    });
}

hg_status hg_eval(const hg_model* m, const hg_bank* b, const hg_dataset* ds,
                  const char* policy_json, const char* out_dir, char** report_json) {
    return wrap([&] {
        check_out(m, "model");
        check_out(b, "bank");
        check_out(ds, "dataset");
        const steer::SteeringPolicy policy =
            policy_from_json(or_empty(policy_json), m->weights.cfg.vocab);
        const harness::VocabLayout layout = ds->ds.spec.layout();
        const harness::DetectionEval det_val =
            harness::eval_detection(m->weights, b->bank, ds->ds.val.items);
        const harness::DetectionEval det_test =
            harness::eval_detection(m->weights, b->bank, ds->ds.test.items);
        const harness::DefenseEval def =
            harness::eval_defense(m->weights, b->bank, ds->ds.test.items, policy, layout);

        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "{\n"
                      "  \"detection\": {\n"
                      "    \"val\": {\"n\": %d, \"acc\": %.17g, \"balanced_acc\": %.17g, "
                      "\"auc\": %.17g},\n"
                      "    \"test\": {\"n\": %d, \"acc\": %.17g, \"balanced_acc\": %.17g, "
                      "\"auc\": %.17g}\n"
                      "  },\n",
                      det_val.n, det_val.acc, det_val.balanced_acc, det_val.auc, det_test.n,
                      det_test.acc, det_test.balanced_acc, det_test.auc);
        std::string rep = buf;
        std::snprintf(buf, sizeof(buf),
                      "  \"defense\": {\"benign_n\": %d, \"malicious_n\": %d, "
                      "\"frc_defended\": %d, \"frc_undefended\": %d, "
                      "\"sr_defended_mean\": %.17g, \"sr_undefended_mean\": %.17g, "
                      "\"sr_drop_rel\": %.17g}\n}\n",
                      def.benign_n, def.malicious_n, def.frc_defended, def.frc_undefended,
                      def.sr_defended_mean, def.sr_undefended_mean, def.sr_drop_rel);
        rep += buf;

        if (out_dir && out_dir[0] != '\0') {
            std::string dir(out_dir);
            std::string csv = "split,n,acc,balanced_acc,auc\n";
            std::snprintf(buf, sizeof(buf), "val,%d,%.17g,%.17g,%.17g\n", det_val.n, det_val.acc,
                          det_val.balanced_acc, det_val.auc);
            csv += buf;
            std::snprintf(buf, sizeof(buf), "test,%d,%.17g,%.17g,%.17g\n", det_test.n,
                          det_test.acc, det_test.balanced_acc, det_test.auc);
            csv += buf;
            harness::write_text_file(dir + "/detection.csv", csv);
            harness::write_text_file(dir + "/roc_val.csv", harness::roc_csv(det_val.roc));
            harness::write_text_file(dir + "/roc_test.csv", harness::roc_csv(det_test.roc));
            harness::write_text_file(dir + "/eval_report.json", rep);
        }
        if (report_json) *report_json = dup_string(rep);
    });
}

hg_status hg_run(const char* config_json, int64_t seed, const char* out_dir,
                 char** report_json) {
    return wrap([&] {
        check_out(out_dir, "out_dir");
        std::string text = or_empty(config_json);
        if (text.empty()) text = "{}";
        harness::ExperimentConfig cfg = harness::ExperimentConfig::from_json_text(text);
        if (seed >= 0) {
            cfg.seed = static_cast<uint64_t>(seed);
            cfg.finalize();
        }
        const harness::EvalReport report = harness::run_experiment(cfg, out_dir);
        if (report_json) *report_json = dup_string(report.to_json_text());
    });
}

} // extern "C"
