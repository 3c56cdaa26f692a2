/*
 * headgate C API: attention-head risk probing and steered decoding for a
 * toy decoder-only transformer.
 *
 * All functions return hg_status; HG_OK is 0. On failure the thread-local
 * message from hg_last_error() describes the problem. Objects returned
 * through out-parameters are owned by the caller and released with the
 * matching hg_*_free. Strings returned through out-parameters are released
 * with hg_string_free, token buffers with hg_tokens_free.
 *
 * Structured parameters (specs, configs, policies) are JSON documents with
 * the same schema the CLI config file uses; pass NULL or "" for defaults.
 */

#ifndef HEADGATE_H
#define HEADGATE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define HG_API __declspec(dllexport)
#else
#define HG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum hg_status {
    HG_OK = 0,
    HG_ERR_SHAPE = 1,
    HG_ERR_RANGE = 2,
    HG_ERR_INPUT = 3,
    HG_ERR_FORMAT = 4,
    HG_ERR_TRAINING = 5,
    HG_ERR_DEGENERATE = 6,
    HG_ERR_TAP = 7,
    HG_ERR_COMPAT = 8,
    HG_ERR_REGION = 9,
    HG_ERR_LENGTH = 10,
    HG_ERR_SPEC = 11,
    HG_ERR_IO = 12,
    HG_ERR_INTERNAL = 13,
} hg_status;

typedef struct hg_model hg_model;     /* trained weights + architecture */
typedef struct hg_bank hg_bank;       /* per-head probes + selected set */
typedef struct hg_dataset hg_dataset; /* labeled splits + LM corpus */

HG_API const char* hg_version(void);
HG_API const char* hg_status_name(hg_status s);
HG_API const char* hg_last_error(void);

HG_API void hg_string_free(char* s);
HG_API void hg_tokens_free(int32_t* tokens);

/* ---- datasets ------------------------------------------------------- */

HG_API hg_status hg_dataset_generate(const char* spec_json, hg_dataset** out);
HG_API hg_status hg_dataset_save(const hg_dataset* ds, const char* dir);
HG_API hg_status hg_dataset_load(const char* dir, hg_dataset** out);
HG_API void hg_dataset_free(hg_dataset* ds);

/* ---- model ---------------------------------------------------------- */

/* trains the toy LM on the dataset's corpus; model_json and train_json
 * follow the "model" and "lm_train" config sections */
HG_API hg_status hg_model_train(const hg_dataset* ds, const char* model_json,
                                const char* train_json, hg_model** out);
HG_API hg_status hg_model_save(const hg_model* m, const char* path);
HG_API hg_status hg_model_load(const char* path, hg_model** out);
HG_API void hg_model_free(hg_model* m);
HG_API hg_status hg_model_fingerprint(const hg_model* m, char** out);

/* the 15 tap positions per layer, in forward order, as one name per line */
HG_API hg_status hg_model_tap_points(const hg_model* m, char** out);

/* ---- probe bank ----------------------------------------------------- */

HG_API hg_status hg_bank_build(const hg_model* m, const hg_dataset* ds, int k,
                               const char* probe_json, hg_bank** out);
HG_API hg_status hg_bank_save(const hg_bank* b, const char* path);
HG_API hg_status hg_bank_load(const char* path, hg_bank** out);
HG_API void hg_bank_free(hg_bank* b);

/* prompt risk score; head_probs (size hg_bank_selected_count) may be NULL */
HG_API hg_status hg_score(const hg_model* m, const hg_bank* b, const int32_t* tokens,
                          size_t n_tokens, double* q_out, double* head_probs);
HG_API int hg_bank_selected_count(const hg_bank* b);

/* ---- steering ------------------------------------------------------- */

/* policy_json follows the "policy" config section; out_tokens receives the
 * generated continuation and record_json the decision record */
HG_API hg_status hg_generate(const hg_model* m, const hg_bank* b, const int32_t* tokens,
                             size_t n_tokens, const char* policy_json, int32_t** out_tokens,
                             size_t* out_len, char** record_json);

/* ---- analyses (CSV results) ----------------------------------------- */

HG_API hg_status hg_sweep(const hg_model* m, const hg_dataset* ds, const char* probe_json,
                          char** cells_csv, char** summary_csv);
HG_API hg_status hg_analyze_trajectory(const hg_model* m, const hg_bank* b,
                                       const int32_t* tokens, size_t n_tokens,
                                       int all_heads, char** csv_out);
HG_API hg_status hg_analyze_entropy(const hg_model* m, const hg_bank* b, const hg_dataset* ds,
                                    const char* split, char** curves_csv, char** summary_csv);
HG_API hg_status hg_analyze_topk(const hg_model* m, const hg_bank* b, const hg_dataset* ds,
                                 const int* k_values, size_t n_k, char** csv_out);
HG_API hg_status hg_analyze_similarity(const hg_bank* a, const hg_bank* b, char** csv_out);

/* ---- evaluation and the full pipeline ------------------------------- */

/* detection + defense evaluation against a dataset; writes the metric files
 * under out_dir and returns the report JSON */
HG_API hg_status hg_eval(const hg_model* m, const hg_bank* b, const hg_dataset* ds,
                         const char* policy_json, const char* out_dir, char** report_json);

/* the whole pipeline from a config document; config_json may be NULL for
 * defaults; seed < 0 keeps the config's seed */
HG_API hg_status hg_run(const char* config_json, int64_t seed, const char* out_dir,
                        char** report_json);

#ifdef __cplusplus
}
#endif

#endif /* HEADGATE_H */
