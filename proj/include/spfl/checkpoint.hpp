#pragma once

#include <string>

#include "spfl/net.hpp"

namespace spfl {

// Binary checkpoint layout (all integers little-endian):
//   magic   "SPFL" (4 bytes)
//   version u32 = 1
//   count   u32, then per tensor:
//     name_len u16, name bytes, ndim u8, dims u32[ndim], offset u64
//   total   u64 (float count)
//   values  float32[total]
void save_checkpoint(const std::string& path, const Params<float>& params);
Params<float> load_checkpoint(const std::string& path);

// Throws ConfigError unless the checkpoint manifest matches the engine's.
void check_manifest_match(const Manifest& a, const Manifest& b);

}  // namespace spfl
