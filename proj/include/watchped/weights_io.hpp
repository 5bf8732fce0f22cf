#pragma once

#include "watchped/autodiff.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace watchped::ad {

// Binary container, all integers little-endian:
//   magic "WPWT", u32 format_version, u32 metadata_length, metadata bytes (UTF-8 JSON),
//   u32 tensor_count, then per tensor:
//   u32 name_length, name bytes, u32 rank, u64 dims[rank], f64 values[prod(dims)] (row-major)
inline constexpr std::uint32_t kWeightsFormatVersion = 1;

class WeightsFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct WeightsFile {
  std::uint32_t version = kWeightsFormatVersion;
  std::string metadata;
  std::vector<NamedTensor> tensors;
};

void write_weights(const std::filesystem::path& path, const WeightsFile& file);
WeightsFile read_weights(const std::filesystem::path& path);

std::string encode_weights(const WeightsFile& file);
WeightsFile decode_weights(const std::string& bytes);

WeightsFile snapshot(const ParamSet& params, std::string metadata);
/// Copies matching tensors into params; every parameter must be present with the same shape.
void restore(ParamSet& params, const WeightsFile& file);
/// Copies only the tensors whose names exist in params (shapes must match).
std::size_t restore_matching(ParamSet& params, const WeightsFile& file);

}  // namespace watchped::ad
