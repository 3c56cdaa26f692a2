#include "core/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "core/rng.hpp"

#include <json.hpp>

namespace headgate::harness {

using ordered_json = nlohmann::ordered_json;

std::vector<int32_t> VocabLayout::refusal_template(int length) const {
    require(length >= 1 && length <= refusal_count, errc::spec,
            "refusal template length exceeds refusal pool");
    std::vector<int32_t> t;
    for (int i = 0; i < length; ++i) t.push_back(refusal_begin + i);
    return t;
}

void SyntheticSpec::validate() const {
    require(vocab >= 2, errc::spec, "spec: vocab too small");
    require(system_tokens >= 1 && benign_tokens >= 1 && malicious_tokens >= 1 &&
                shared_tokens >= 0 && compliance_tokens >= 1 && refusal_tokens >= 1,
            errc::spec, "spec: token pool counts must be positive");
    const int reserved = 2 + system_tokens + benign_tokens + malicious_tokens + shared_tokens +
                         compliance_tokens + refusal_tokens;
    require(reserved <= vocab, errc::spec,
            "spec: vocab " + std::to_string(vocab) + " cannot hold " + std::to_string(reserved) +
                " reserved tokens");
    require(system_prefix_len >= 0, errc::spec, "spec: bad system prefix length");
    require(prompt_len_min >= system_prefix_len + 2, errc::spec,
            "spec: prompt_len_min must leave room for content and the structural token");
    require(prompt_len_max >= prompt_len_min, errc::spec, "spec: bad prompt length range");
    require(response_len_min >= 1 && response_len_max >= response_len_min, errc::spec,
            "spec: bad response length range");
    require(ambiguity >= 0.0 && ambiguity <= 1.0, errc::spec, "spec: ambiguity outside [0,1]");
    require(malicious_compliance_rate >= 0.0 && malicious_compliance_rate <= 1.0, errc::spec,
            "spec: malicious compliance rate outside [0,1]");
    require(ratio_train > 0 && ratio_val > 0 && ratio_test > 0, errc::spec,
            "spec: split ratio components must be positive");
    require(benign_count >= 3 && malicious_count >= 3, errc::spec,
            "spec: need at least 3 prompts per class");
}

VocabLayout SyntheticSpec::layout() const {
    validate();
    VocabLayout v;
    int next = 0;
    v.eos = next++;
    v.structural = next++;
    v.system_begin = next;
    v.system_count = system_tokens;
    next += system_tokens;
    v.benign_begin = next;
    v.benign_count = benign_tokens;
    next += benign_tokens;
    v.malicious_begin = next;
    v.malicious_count = malicious_tokens;
    next += malicious_tokens;
    v.shared_begin = next;
    v.shared_count = shared_tokens;
    next += shared_tokens;
    v.compliance_begin = next;
    v.compliance_count = compliance_tokens;
    next += compliance_tokens;
    v.refusal_begin = next;
    v.refusal_count = refusal_tokens;
    next += refusal_tokens;
    v.filler_begin = next;
    v.filler_count = vocab - next;
    return v;
}

int Split::count(Intent label) const {
    int n = 0;
    for (const PromptItem& it : items) n += it.label == label ? 1 : 0;
    return n;
}

namespace {

using model::TokenRole;

PromptItem make_prompt(const SyntheticSpec& spec, const VocabLayout& lay, Intent label,
                       Rng& rng) {
    PromptItem item;
    item.label = label;
    const int total =
        spec.prompt_len_min +
        static_cast<int>(rng.next_below(
            static_cast<uint64_t>(spec.prompt_len_max - spec.prompt_len_min + 1)));
    const int content = total - spec.system_prefix_len - 1;
    for (int i = 0; i < spec.system_prefix_len; ++i) {
        item.tokens.push_back(lay.system_begin +
                              static_cast<int32_t>(rng.next_below(lay.system_count)));
        item.roles.push_back(TokenRole::system);
    }
    const int pool_begin = label == Intent::benign ? lay.benign_begin : lay.malicious_begin;
    const int pool_count = label == Intent::benign ? lay.benign_count : lay.malicious_count;
    for (int i = 0; i < content; ++i) {
        int32_t tok;
        if (lay.shared_count > 0 && rng.next_unit() < spec.ambiguity)
            tok = lay.shared_begin + static_cast<int32_t>(rng.next_below(lay.shared_count));
        else
            tok = pool_begin + static_cast<int32_t>(rng.next_below(pool_count));
        item.tokens.push_back(tok);
        item.roles.push_back(TokenRole::content);
    }
    item.tokens.push_back(lay.structural);
    item.roles.push_back(TokenRole::structural);
    return item;
}

std::vector<int32_t> make_response(const SyntheticSpec& spec, const VocabLayout& lay,
                                   Intent label, Rng& rng) {
    const int len =
        spec.response_len_min +
        static_cast<int>(rng.next_below(
            static_cast<uint64_t>(spec.response_len_max - spec.response_len_min + 1)));
    std::vector<int32_t> out;
    for (int i = 0; i < len; ++i) {
        bool comply = label == Intent::benign || rng.next_unit() < spec.malicious_compliance_rate;
        if (comply)
            out.push_back(lay.compliance_begin +
                          static_cast<int32_t>(rng.next_below(lay.compliance_count)));
        else
            out.push_back(lay.refusal_begin +
                          static_cast<int32_t>(rng.next_below(lay.refusal_count)));
    }
    out.push_back(lay.eos);
    return out;
}

void split_counts(int n, const SyntheticSpec& spec, int& n_train, int& n_val) {
    const int denom = spec.ratio_train + spec.ratio_val + spec.ratio_test;
    n_train = n * spec.ratio_train / denom;
    n_val = n * spec.ratio_val / denom;
    require(n_train >= 1 && n_val >= 1 && n - n_train - n_val >= 1, errc::spec,
            "spec: class count too small for the split ratio");
}

} // namespace

LabeledDataset gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const VocabLayout lay = spec.layout();
    Rng rng(spec.seed);

    LabeledDataset ds;
    ds.spec = spec;

    std::set<std::vector<int32_t>> seen;
    auto gen_class = [&](Intent label, int count) {
        std::vector<PromptItem> items;
        for (int i = 0; i < count; ++i) {
            PromptItem item;
            int attempts = 0;
            do {
                require(++attempts <= 1000, errc::spec,
                        "spec: cannot generate enough distinct prompts; enlarge pools or "
                        "lengths");
                item = make_prompt(spec, lay, label, rng);
            } while (!seen.insert(item.tokens).second);
            items.push_back(std::move(item));
        }
        return items;
    };

    const std::vector<PromptItem> benign = gen_class(Intent::benign, spec.benign_count);
    const std::vector<PromptItem> malicious = gen_class(Intent::malicious, spec.malicious_count);

    auto assign = [&](const std::vector<PromptItem>& items) {
        int n_train = 0, n_val = 0;
        split_counts(static_cast<int>(items.size()), spec, n_train, n_val);
        for (int i = 0; i < static_cast<int>(items.size()); ++i) {
            if (i < n_train)
                ds.train.items.push_back(items[static_cast<size_t>(i)]);
            else if (i < n_train + n_val)
                ds.val.items.push_back(items[static_cast<size_t>(i)]);
            else
                ds.test.items.push_back(items[static_cast<size_t>(i)]);
        }
    };
    assign(benign);
    assign(malicious);

    // LM corpus: train prompts with class-dependent responses appended
    for (const PromptItem& it : ds.train.items) {
        std::vector<int32_t> seq = it.tokens;
        std::vector<TokenRole> roles = it.roles;
        for (int32_t t : make_response(spec, lay, it.label, rng)) {
            seq.push_back(t);
            roles.push_back(TokenRole::generated);
        }
        ds.corpus.sequences.push_back(std::move(seq));
        ds.corpus.roles.push_back(std::move(roles));
    }
    return ds;
}

void save_token_file(const std::vector<std::vector<int32_t>>& seqs,
                     const std::vector<std::vector<model::TokenRole>>& roles,
                     const std::string& path, const std::string& roles_path) {
    require(seqs.size() == roles.size(), errc::input, "token file: roles must match sequences");
    std::ofstream tf(path, std::ios::trunc);
    require(tf.good(), errc::io, "cannot write '" + path + "'");
    std::ofstream rf(roles_path, std::ios::trunc);
    require(rf.good(), errc::io, "cannot write '" + roles_path + "'");
    for (size_t i = 0; i < seqs.size(); ++i) {
        require(seqs[i].size() == roles[i].size(), errc::input,
                "token file: role count must match token count");
        for (size_t j = 0; j < seqs[i].size(); ++j) {
            if (j) tf << ' ';
            tf << seqs[i][j];
        }
        tf << '\n';
        for (size_t j = 0; j < roles[i].size(); ++j) {
            if (j) rf << ' ';
            rf << model::role_name(roles[i][j]);
        }
        rf << '\n';
    }
    require(tf.good() && rf.good(), errc::io, "short write to token/role files");
}

std::pair<std::vector<std::vector<int32_t>>, std::vector<std::vector<model::TokenRole>>>
load_token_file(const std::string& path, const std::string& roles_path) {
    std::ifstream tf(path);
    require(tf.good(), errc::io, "cannot open '" + path + "'");
    std::ifstream rf(roles_path);
    require(rf.good(), errc::io, "cannot open '" + roles_path + "'");
    std::vector<std::vector<int32_t>> seqs;
    std::vector<std::vector<model::TokenRole>> roles;
    std::string tline, rline;
    size_t lineno = 0;
    while (std::getline(tf, tline)) {
        ++lineno;
        require(static_cast<bool>(std::getline(rf, rline)), errc::format,
                "roles sidecar shorter than token file at line " + std::to_string(lineno));
        std::vector<int32_t> seq;
        std::istringstream ts(tline);
        long v;
        while (ts >> v) seq.push_back(static_cast<int32_t>(v));
        std::vector<model::TokenRole> rs;
        std::istringstream rsx(rline);
        std::string word;
        while (rsx >> word) rs.push_back(model::role_from_name(word));
        require(seq.size() == rs.size(), errc::format,
                "line " + std::to_string(lineno) + ": role count differs from token count");
        require(!seq.empty(), errc::format, "line " + std::to_string(lineno) + ": empty sequence");
        seqs.push_back(std::move(seq));
        roles.push_back(std::move(rs));
    }
    return {std::move(seqs), std::move(roles)};
}

namespace {

ordered_json spec_to_json(const SyntheticSpec& s) {
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

SyntheticSpec spec_from_json(const ordered_json& j) {
    SyntheticSpec s;
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
    s.malicious_compliance_rate = j.value("malicious_compliance_rate", s.malicious_compliance_rate);
    s.ratio_train = j.value("ratio_train", s.ratio_train);
    s.ratio_val = j.value("ratio_val", s.ratio_val);
    s.ratio_test = j.value("ratio_test", s.ratio_test);
    s.benign_count = j.value("benign_count", s.benign_count);
    s.malicious_count = j.value("malicious_count", s.malicious_count);
    s.seed = j.value("seed", s.seed);
    return s;
}

void save_split(const Split& split, const std::string& dir, const std::string& name) {
    std::vector<std::vector<int32_t>> seqs;
    std::vector<std::vector<model::TokenRole>> roles;
    std::ofstream lf(dir + "/" + name + ".labels", std::ios::trunc);
    require(lf.good(), errc::io, "cannot write labels for split " + name);
    for (const PromptItem& it : split.items) {
        seqs.push_back(it.tokens);
        roles.push_back(it.roles);
        lf << (it.label == Intent::malicious ? "malicious" : "benign") << '\n';
    }
    save_token_file(seqs, roles, dir + "/" + name + ".tokens", dir + "/" + name + ".roles");
}

Split load_split(const std::string& dir, const std::string& name) {
    auto [seqs, roles] = load_token_file(dir + "/" + name + ".tokens", dir + "/" + name + ".roles");
    std::ifstream lf(dir + "/" + name + ".labels");
    require(lf.good(), errc::io, "cannot open labels for split " + name);
    Split split;
    for (size_t i = 0; i < seqs.size(); ++i) {
        std::string label;
        require(static_cast<bool>(std::getline(lf, label)), errc::format,
                "labels file shorter than split " + name);
        PromptItem item;
        item.tokens = std::move(seqs[i]);
        item.roles = std::move(roles[i]);
        if (label == "benign")
            item.label = Intent::benign;
        else if (label == "malicious")
            item.label = Intent::malicious;
        else
            fail(errc::format, "unknown label '" + label + "' in split " + name);
        split.items.push_back(std::move(item));
    }
    return split;
}

} // namespace

void save_dataset(const LabeledDataset& ds, const std::string& dir) {
    std::ofstream sf(dir + "/spec.json", std::ios::trunc);
    require(sf.good(), errc::io, "cannot write '" + dir + "/spec.json'");
    sf << spec_to_json(ds.spec).dump(2) << '\n';
    save_split(ds.train, dir, "train");
    save_split(ds.val, dir, "val");
    save_split(ds.test, dir, "test");
    save_token_file(ds.corpus.sequences, ds.corpus.roles, dir + "/corpus.tokens",
                    dir + "/corpus.roles");
}

LabeledDataset load_dataset(const std::string& dir) {
    std::ifstream sf(dir + "/spec.json");
    require(sf.good(), errc::io, "cannot open '" + dir + "/spec.json'");
    ordered_json j;
    try {
        j = ordered_json::parse(sf);
    } catch (const nlohmann::json::exception& e) {
        fail(errc::format, std::string("spec.json: ") + e.what());
    }
    LabeledDataset ds;
    ds.spec = spec_from_json(j);
    ds.spec.validate();
    ds.train = load_split(dir, "train");
    ds.val = load_split(dir, "val");
    ds.test = load_split(dir, "test");
    auto [seqs, roles] = load_token_file(dir + "/corpus.tokens", dir + "/corpus.roles");
    ds.corpus.sequences = std::move(seqs);
    ds.corpus.roles = std::move(roles);
    return ds;
}

} // namespace headgate::harness
