#include "core/steer.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace headgate::steer {

using model::ModelWeights;
using ordered_json = nlohmann::ordered_json;

const char* boost_name(BoostKind k) {
    return k == BoostKind::linear ? "linear" : "quadratic";
}

BoostKind boost_from_name(const std::string& s) {
    if (s == "linear") return BoostKind::linear;
    if (s == "quadratic") return BoostKind::quadratic;
    fail(errc::input, "unknown boost kind '" + s + "'");
}

const char* region_name(Region r) {
    switch (r) {
        case Region::passive: return "passive";
        case Region::modulated: return "modulated";
        case Region::active: return "active";
    }
    return "passive";
}

void SteeringPolicy::validate() const {
    require(0.0 <= theta_low && theta_low <= theta_high && theta_high <= 1.0, errc::input,
            "policy invariant violated: 0 <= theta_low <= theta_high <= 1 is required");
    require(!template_tokens.empty(), errc::input, "policy: refusal template must be nonempty");
    require(beam_width >= 1, errc::input, "policy: beam width must be >= 1");
    require(gain > 0.0, errc::input, "policy: gain must be positive");
    require(active_boost > 0.0, errc::input, "policy: active boost must be positive");
    require(max_new_tokens >= static_cast<int>(template_tokens.size()) + 1, errc::input,
            "policy: max_new_tokens must fit the template plus EOS");
    require(eos_token >= 0, errc::input, "policy: bad EOS token");
    for (int32_t t : template_tokens)
        require(t >= 0, errc::input, "policy: bad template token");
}

Region classify_region(double q, const SteeringPolicy& policy) {
    require(q >= 0.0 && q <= 1.0, errc::range, "classify_region: q outside [0,1]");
    if (q <= policy.theta_low) return Region::passive;
    if (q >= policy.theta_high) return Region::active;
    return Region::modulated;
}

double boost_shape(double q, const SteeringPolicy& policy) {
    if (policy.boost == BoostKind::linear)
        return policy.gain * (q - policy.theta_low) / (policy.theta_high - policy.theta_low);
    const double d = q - policy.theta_low;
    return policy.gain * std::clamp(4.0 * d * d, 0.0, 1.0);
}

double lambda_of(double q, const SteeringPolicy& policy) {
    require(classify_region(q, policy) == Region::modulated, errc::region,
            "lambda_of: q is outside the modulated region");
    return boost_shape(q, policy);
}

Vector build_safety_target(const SteeringPolicy& policy, int step, int vocab, const Vector& l) {
    require(step >= 0, errc::input, "build_safety_target: negative step");
    require(l.dim() == vocab && vocab >= 1, errc::shape,
            "build_safety_target: logits dim must equal vocab");
    float lo = l[0], hi = l[0];
    for (int i = 1; i < vocab; ++i) {
        lo = std::min(lo, l[i]);
        hi = std::max(hi, l[i]);
    }
    const int tlen = static_cast<int>(policy.template_tokens.size());
    const int idx = policy.template_tokens[static_cast<size_t>(std::min(step, tlen - 1))];
    require(idx < vocab, errc::range, "build_safety_target: template token outside vocab");
    Vector target(vocab);
    for (int i = 0; i < vocab; ++i) target[i] = lo;
    target[idx] = hi;
    if (step >= tlen) {
        require(policy.eos_token < vocab, errc::range,
                "build_safety_target: EOS token outside vocab");
        target[policy.eos_token] = hi;
    }
    return target;
}

Vector steer_logits(const Vector& l, double q, int step, const SteeringPolicy& policy) {
    const Region region = classify_region(q, policy);
    if (region == Region::passive) return l;
    if (region == Region::modulated) {
        const double lm = lambda_of(q, policy);
        const Vector target = build_safety_target(policy, step, l.dim(), l);
        Vector out(l.dim());
        for (int i = 0; i < l.dim(); ++i)
            out[i] = static_cast<float>(static_cast<double>(l[i]) +
                                        lm * (static_cast<double>(target[i]) - l[i]));
        return out;
    }
    // active: up-weight the scheduled template token (EOS once exhausted)
    const int tlen = static_cast<int>(policy.template_tokens.size());
    const int32_t idx =
        step < tlen ? policy.template_tokens[static_cast<size_t>(step)] : policy.eos_token;
    require(idx < l.dim(), errc::range, "steer_logits: scheduled token outside vocab");
    Vector out = l;
    out[idx] = static_cast<float>(static_cast<double>(out[idx]) + policy.active_boost);
    return out;
}

std::vector<GreedyStep> greedy_decode(const ModelWeights& w, std::span<const int32_t> prompt,
                                      int max_new_tokens, int32_t eos_token) {
    require(!prompt.empty(), errc::input, "greedy_decode: empty prompt");
    std::vector<int32_t> ctx(prompt.begin(), prompt.end());
    std::vector<GreedyStep> out;
    for (int step = 0; step < max_new_tokens; ++step) {
        const model::ForwardResult fr = model::forward(w, ctx, {});
        const float* row = fr.logits.row(fr.logits.rows - 1);
        int best = 0;
        for (int v = 1; v < fr.logits.cols; ++v)
            if (row[v] > row[best]) best = v;
        out.push_back({static_cast<int32_t>(best), row[best]});
        ctx.push_back(static_cast<int32_t>(best));
        if (best == eos_token) break;
    }
    return out;
}

bool begins_with_template(std::span<const int32_t> tokens, const SteeringPolicy& policy) {
    if (tokens.size() < policy.template_tokens.size()) return false;
    return std::equal(policy.template_tokens.begin(), policy.template_tokens.end(),
                      tokens.begin());
}

namespace {

std::vector<double> log_softmax(const Vector& l) {
    double mx = l[0];
    for (int i = 1; i < l.dim(); ++i) mx = std::max(mx, static_cast<double>(l[i]));
    double sum = 0.0;
    for (int i = 0; i < l.dim(); ++i) sum += std::exp(static_cast<double>(l[i]) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(static_cast<size_t>(l.dim()));
    for (int i = 0; i < l.dim(); ++i) out[static_cast<size_t>(i)] = static_cast<double>(l[i]) - lse;
    return out;
}

struct Beam {
    std::vector<int32_t> gen;
    double score = 0.0;
    bool done = false;
    std::vector<StepEntry> steps;
};

bool beam_better(const Beam& a, const Beam& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.gen < b.gen; // ties: lexicographically smaller sequence
}

GenerateResult decode_modulated(const ModelWeights& w, std::span<const int32_t> prompt,
                                const SteeringPolicy& policy, double q) {
    const double lm = lambda_of(q, policy);
    std::vector<Beam> pool{Beam{}};
    for (int step = 0; step < policy.max_new_tokens; ++step) {
        std::vector<Beam> next;
        bool expanded = false;
        for (const Beam& beam : pool) {
            if (beam.done) {
                next.push_back(beam);
                continue;
            }
            expanded = true;
            std::vector<int32_t> ctx(prompt.begin(), prompt.end());
            ctx.insert(ctx.end(), beam.gen.begin(), beam.gen.end());
            const model::ForwardResult fr = model::forward(w, ctx, {});
            Vector l(fr.logits.cols);
            std::copy(fr.logits.row(fr.logits.rows - 1),
                      fr.logits.row(fr.logits.rows - 1) + fr.logits.cols, l.data.begin());
            const Vector steered = steer_logits(l, q, step, policy);
            const std::vector<double> lp = log_softmax(steered);
            for (int v = 0; v < l.dim(); ++v) {
                Beam cand = beam;
                cand.gen.push_back(static_cast<int32_t>(v));
                cand.score += lp[static_cast<size_t>(v)];
                cand.steps.push_back({step, static_cast<int32_t>(v), l[v], steered[v], lm});
                cand.done = v == policy.eos_token;
                next.push_back(std::move(cand));
            }
        }
        if (!expanded) break;
        std::sort(next.begin(), next.end(), beam_better);
        if (static_cast<int>(next.size()) > policy.beam_width)
            next.resize(static_cast<size_t>(policy.beam_width));
        pool = std::move(next);
    }
    const Beam& best = *std::min_element(pool.begin(), pool.end(),
                                         [](const Beam& a, const Beam& b) {
                                             return beam_better(a, b);
                                         });
    GenerateResult res;
    res.tokens = best.gen;
    res.record.steps = best.steps;
    return res;
}

} // namespace

GenerateResult generate_with_score(const ModelWeights& w, std::span<const int32_t> prompt,
                                   const SteeringPolicy& policy, double q) {
    policy.validate();
    require(!prompt.empty(), errc::input, "generate: empty prompt");
    require(static_cast<int>(prompt.size()) + policy.max_new_tokens <= w.cfg.max_seq,
            errc::length, "generate: prompt plus max_new_tokens exceeds the context window");
    for (int32_t t : policy.template_tokens)
        require(t < w.cfg.vocab, errc::range, "generate: template token outside model vocab");
    require(policy.eos_token < w.cfg.vocab, errc::range,
            "generate: EOS token outside model vocab");

    const Region region = classify_region(q, policy);
    GenerateResult res;
    if (region == Region::passive) {
        for (const GreedyStep& gs :
             greedy_decode(w, prompt, policy.max_new_tokens, policy.eos_token)) {
            res.record.steps.push_back({static_cast<int>(res.tokens.size()), gs.token, gs.logit,
                                        gs.logit, 0.0});
            res.tokens.push_back(gs.token);
        }
        res.record.refusal_emitted = false;
    } else if (region == Region::active) {
        // forced adherence: the template then EOS, for any weights
        const int tlen = static_cast<int>(policy.template_tokens.size());
        std::vector<int32_t> ctx(prompt.begin(), prompt.end());
        for (int step = 0; step <= tlen; ++step) {
            const model::ForwardResult fr = model::forward(w, ctx, {});
            Vector l(fr.logits.cols);
            std::copy(fr.logits.row(fr.logits.rows - 1),
                      fr.logits.row(fr.logits.rows - 1) + fr.logits.cols, l.data.begin());
            const Vector steered = steer_logits(l, q, step, policy);
            const int32_t tok =
                step < tlen ? policy.template_tokens[static_cast<size_t>(step)] : policy.eos_token;
            res.record.steps.push_back({step, tok, l[tok], steered[tok], 0.0});
            res.tokens.push_back(tok);
            ctx.push_back(tok);
        }
        res.record.refusal_emitted = true;
    } else {
        res = decode_modulated(w, prompt, policy, q);
        res.record.refusal_emitted = begins_with_template(res.tokens, policy);
    }
    res.record.q = q;
    res.record.region = region;
    return res;
}

GenerateResult generate(const ModelWeights& w, const probe::ProbeBank& bank,
                        std::span<const int32_t> prompt, const SteeringPolicy& policy) {
    const probe::ScoreResult sr = probe::score_prompt(w, bank, prompt);
    GenerateResult res = generate_with_score(w, prompt, policy, sr.q);
    res.record.heads = sr.heads;
    res.record.head_probs = sr.probs;
    return res;
}

std::string record_to_text(const DecisionRecord& rec) {
    ordered_json j;
    j["q"] = rec.q;
    j["region"] = region_name(rec.region);
    ordered_json heads = ordered_json::array();
    for (const probe::HeadId& id : rec.heads)
        heads.push_back(ordered_json::array({id.first, id.second}));
    j["heads"] = heads;
    j["head_probs"] = rec.head_probs;
    ordered_json steps = ordered_json::array();
    for (const StepEntry& s : rec.steps) {
        ordered_json sj;
        sj["step"] = s.step;
        sj["token"] = s.token;
        sj["logit_pre"] = static_cast<double>(s.logit_pre);
        sj["logit_post"] = static_cast<double>(s.logit_post);
        sj["lambda"] = s.lambda;
        steps.push_back(sj);
    }
    j["steps"] = steps;
    j["refusal_emitted"] = rec.refusal_emitted;
    return j.dump(2) + "\n";
}

} // namespace headgate::steer
