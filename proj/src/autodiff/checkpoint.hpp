#pragma once

#include <filesystem>
#include <string>

#include "autodiff/tensor.hpp"

// Named-tensor container:
//
//   magic  "NLIMBCKP" (8 bytes)
//   u32    format version
//   u64    record count
//   per record:
//     u32  name length, name bytes (UTF-8)
//     u32  rank, u64 dims[rank]
//     f64  values[prod(dims)]
//
// All integers and floats little-endian. Round trips are bit-exact.
namespace nlimb::ad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const ParamSet& tensors);
ParamSet decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamSet& tensors);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace nlimb::ad
