#pragma once

// Weights file layout (little-endian):
//   magic "HGWT" | u32 version | config as 7 x u32 + u64 seed |
//   per tensor, in tensor_refs order:
//     u32 name_len | name bytes | u32 ndim | u32 dims[ndim] | f32 values
// Round trips are bit-exact.

#include <cstdint>
#include <string>
#include <vector>

#include "core/model.hpp"

namespace headgate::model {

std::vector<uint8_t> serialize_weights(const ModelWeights& w);
ModelWeights deserialize_weights(const std::vector<uint8_t>& bytes);

void save_weights(const ModelWeights& w, const std::string& path);
ModelWeights load_weights(const std::string& path);

// FNV-1a 64 over the serialized byte stream, as a 16-digit hex string
std::string fingerprint(const ModelWeights& w);

} // namespace headgate::model
