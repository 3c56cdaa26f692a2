#pragma once

// Toy decoder-only transformer with observational activation taps.
//
// Block layout is pre-norm: x -> LN -> per-head attention -> W_O -> +x
//                             -> LN -> W_up -> GeLU -> W_down -> +residual
// followed by a final layer norm and an untied output projection.
// Position information comes from learned absolute position embeddings.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace headgate::model {

struct ModelConfig {
    int layers = 4;
    int heads = 4;
    int head_dim = 16;
    int dim = 64; // must equal heads * head_dim
    int ffn_dim = 128;
    int vocab = 128;
    int max_seq = 64;
    uint64_t seed = 1;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

constexpr float kLayerNormEps = 1e-5f;

// The 15 per-layer capture positions, in forward-propagation order.
enum class TapPosition : int {
    layer_input = 0,
    pre_attn_norm_out,
    q_proj_out,          // per-head
    k_proj_out,          // per-head
    v_proj_out,          // per-head
    attn_probs_last_row, // per-head; n x n, row t = causal attention of query t
    attn_head_output,    // per-head
    attn_concat_out,
    attn_o_proj_out,
    residual_post_attn,
    pre_ffn_norm_out,
    ffn_up_out,
    ffn_act_out,
    ffn_down_out,
    residual_post_ffn,
};

constexpr int kTapPositionCount = 15;

const char* tap_position_name(TapPosition p);
TapPosition tap_position_from_name(const std::string& name);
bool tap_position_per_head(TapPosition p);

struct TapPoint {
    int layer = 0;
    TapPosition position = TapPosition::layer_input;
    int head = -1; // >= 0 iff position is per-head

    auto operator<=>(const TapPoint&) const = default;
    std::string to_string() const;
};

// every position (template form, head = -1) for every layer, forward order
std::vector<TapPoint> list_tap_points(const ModelConfig& cfg);

// expand per-head templates into concrete taps
std::vector<TapPoint> expand_tap(const TapPoint& tmpl, const ModelConfig& cfg);
std::vector<TapPoint> all_taps(const ModelConfig& cfg);

enum class TokenRole : uint8_t { system = 0, content, structural, generated };
const char* role_name(TokenRole r);
TokenRole role_from_name(const std::string& s);

struct ActivationTrace {
    std::vector<int32_t> tokens;
    std::vector<TokenRole> roles;
    std::map<TapPoint, Matrix> taps;

    const Matrix& at(const TapPoint& tp) const;
    bool has(const TapPoint& tp) const { return taps.count(tp) > 0; }
};

struct LayerWeights {
    std::vector<Matrix> wq, wk, wv; // one (dim x head_dim) per head
    Matrix wo;                      // dim x dim
    Vector ln1_gain, ln1_bias;
    Matrix w_up;   // dim x ffn_dim
    Matrix w_down; // ffn_dim x dim
    Vector ln2_gain, ln2_bias;
};

struct ModelWeights {
    ModelConfig cfg;
    Matrix token_embed; // vocab x dim
    Matrix pos_embed;   // max_seq x dim
    std::vector<LayerWeights> layers;
    Vector final_gain, final_bias;
    Matrix w_out; // dim x vocab

    void validate() const;
};

// random initialization, fully determined by cfg.seed
ModelWeights init_weights(const ModelConfig& cfg);

struct ForwardResult {
    Matrix logits; // n x vocab, row t depends only on tokens <= t
    ActivationTrace trace;
};

// Runs the causal forward pass and copies the requested taps into the trace.
// Taps never alter the computation; logits are identical for any tap set.
ForwardResult forward(const ModelWeights& w, std::span<const int32_t> tokens,
                      const std::vector<TapPoint>& taps,
                      std::span<const TokenRole> roles = {});

// enumerate every (name, shape, data) tensor in declaration order;
// the same order defines the weights file layout
struct TensorRef {
    std::string name;
    Matrix* mat = nullptr;
    Vector* vec = nullptr;
};
std::vector<TensorRef> tensor_refs(ModelWeights& w);

} // namespace headgate::model
