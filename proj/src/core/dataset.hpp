#pragma once

// Synthetic intent-labeled prompts over a partitioned toy vocabulary.
//
// Prompt shape: [system tokens][content tokens][structural token].
// Content tokens come from the class pool (benign or malicious), each one
// swapped for a shared-pool token at the ambiguity rate. The LM corpus
// appends a response: benign prompts get compliance tokens, malicious
// prompts get a compliance/refusal mixture, then EOS.

#include <cstdint>
#include <string>
#include <vector>

#include "core/train.hpp"

namespace headgate::harness {

struct VocabLayout {
    int eos = 0;
    int structural = 1;
    int system_begin = 0, system_count = 0;
    int benign_begin = 0, benign_count = 0;
    int malicious_begin = 0, malicious_count = 0;
    int shared_begin = 0, shared_count = 0;
    int compliance_begin = 0, compliance_count = 0;
    int refusal_begin = 0, refusal_count = 0;
    int filler_begin = 0, filler_count = 0;

    bool is_compliance(int32_t t) const {
        return t >= compliance_begin && t < compliance_begin + compliance_count;
    }
    bool is_refusal(int32_t t) const {
        return t >= refusal_begin && t < refusal_begin + refusal_count;
    }
    // the canonical refusal sequence used as the steering template
    std::vector<int32_t> refusal_template(int length) const;
};

struct SyntheticSpec {
    int vocab = 128;
    int system_tokens = 8;
    int benign_tokens = 24;
    int malicious_tokens = 24;
    int shared_tokens = 16;
    int compliance_tokens = 8;
    int refusal_tokens = 8;
    int prompt_len_min = 8;  // total incl. system prefix and structural token
    int prompt_len_max = 24;
    int system_prefix_len = 4;
    int response_len_min = 6;
    int response_len_max = 10;
    double ambiguity = 0.15;
    double malicious_compliance_rate = 0.6;
    int ratio_train = 8, ratio_val = 3, ratio_test = 3;
    int benign_count = 700;
    int malicious_count = 700;
    uint64_t seed = 1234;

    void validate() const;
    VocabLayout layout() const;
};

enum class Intent : int { benign = 0, malicious = 1 };

struct PromptItem {
    std::vector<int32_t> tokens;
    std::vector<model::TokenRole> roles;
    Intent label = Intent::benign;
};

struct Split {
    std::vector<PromptItem> items;
    int count(Intent label) const;
};

struct LabeledDataset {
    SyntheticSpec spec;
    Split train, val, test;
    model::Corpus corpus; // train prompts with responses, for LM pre-training
};

LabeledDataset gen_synthetic(const SyntheticSpec& spec);

void save_dataset(const LabeledDataset& ds, const std::string& dir);
LabeledDataset load_dataset(const std::string& dir);

// corpus-format io: one space-separated id sequence per line in <path>,
// one role-label line per sequence in the sidecar <path_roles>
void save_token_file(const std::vector<std::vector<int32_t>>& seqs,
                     const std::vector<std::vector<model::TokenRole>>& roles,
                     const std::string& path, const std::string& roles_path);
std::pair<std::vector<std::vector<int32_t>>, std::vector<std::vector<model::TokenRole>>>
load_token_file(const std::string& path, const std::string& roles_path);

} // namespace headgate::harness
