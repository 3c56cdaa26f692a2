#pragma once

// Risk-proportional logits steering. The prompt score q is computed once at
// the final token and fixes the region for the whole generation:
//   q <= theta_low   passive   -> untouched greedy decoding
//   in between       modulated -> logits blended toward the safety target,
//                                 beam search over the steered distribution
//   q >= theta_high  active    -> the refusal template then EOS, verbatim

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "core/probe.hpp"

namespace headgate::steer {

enum class BoostKind { linear, quadratic };
const char* boost_name(BoostKind k);
BoostKind boost_from_name(const std::string& s);

struct SteeringPolicy {
    double theta_low = 0.4;
    double theta_high = 0.85;
    BoostKind boost = BoostKind::linear;
    double gain = 1.0;
    int beam_width = 4;
    int max_new_tokens = 32;
    std::vector<int32_t> template_tokens; // C_safe
    int32_t eos_token = 0;
    double active_boost = 50.0;

    void validate() const;
};

enum class Region { passive, modulated, active };
const char* region_name(Region r);

Region classify_region(double q, const SteeringPolicy& policy);

// linear:    gain * (q - theta_low) / (theta_high - theta_low)
// quadratic: gain * clamp(4 * (q - theta_low)^2, 0, 1)
double lambda_of(double q, const SteeringPolicy& policy);

// the boost curve itself, without the modulated-region guard
double boost_shape(double q, const SteeringPolicy& policy);

// target logits for step tau: max(l) at the scheduled template token (and at
// EOS once the template is exhausted), min(l) everywhere else
Vector build_safety_target(const SteeringPolicy& policy, int step, int vocab, const Vector& l);

Vector steer_logits(const Vector& l, double q, int step, const SteeringPolicy& policy);

struct StepEntry {
    int step = 0;
    int32_t token = 0;
    float logit_pre = 0.0f;
    float logit_post = 0.0f;
    double lambda = 0.0;
};

struct DecisionRecord {
    double q = 0.0;
    Region region = Region::passive;
    std::vector<probe::HeadId> heads;
    std::vector<double> head_probs;
    std::vector<StepEntry> steps;
    bool refusal_emitted = false;
};

std::string record_to_text(const DecisionRecord& rec);

struct GenerateResult {
    std::vector<int32_t> tokens; // generated continuation, including EOS if emitted
    DecisionRecord record;
};

// undefended greedy decoding; ties resolved toward the lower token id
struct GreedyStep {
    int32_t token = 0;
    float logit = 0.0f;
};
std::vector<GreedyStep> greedy_decode(const model::ModelWeights& w,
                                      std::span<const int32_t> prompt, int max_new_tokens,
                                      int32_t eos_token);

// scores the prompt with the bank, then decodes under the fixed-q policy
GenerateResult generate(const model::ModelWeights& w, const probe::ProbeBank& bank,
                        std::span<const int32_t> prompt, const SteeringPolicy& policy);

// same decode loop with the score supplied directly
GenerateResult generate_with_score(const model::ModelWeights& w, std::span<const int32_t> prompt,
                                   const SteeringPolicy& policy, double q);

bool begins_with_template(std::span<const int32_t> tokens, const SteeringPolicy& policy);

} // namespace headgate::steer
