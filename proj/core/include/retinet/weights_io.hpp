#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "retinet/model.hpp"
#include "retinet/tensor.hpp"

namespace retinet {

// LWNN v1, little-endian, no padding:
//   "LWNN" | u32 version=1 | u32 tensor_count
//   per tensor: u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f32 values
//   u32 CRC-32 (zlib polynomial) of every preceding byte
inline constexpr std::uint32_t kLwnnVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<std::uint8_t> encode_lwnn(std::span<const NamedTensor> tensors);

// Throws WeightsError on bad magic, version, CRC, truncation or trailing bytes.
std::vector<NamedTensor> decode_lwnn(std::span<const std::uint8_t> bytes);

std::vector<NamedTensor> read_lwnn(const std::filesystem::path& path);

// All model parameters (including BN running statistics) in creation order.
std::vector<NamedTensor> model_tensors(const Model& model);

void save_weights(const Model& model, const std::filesystem::path& path);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;          // in the model, not in the file
  std::vector<std::string> extra;            // in the file, not in the model
  std::vector<std::string> shape_conflicts;  // same name, different shape (skipped)
};

// Strict: the file must contain exactly the model's tensors with matching
// shapes. Non-strict: matches by name and shape and reports the rest. The
// model is untouched unless the whole file validates.
LoadReport load_weights(Model& model, const std::filesystem::path& path, bool strict);
LoadReport apply_tensors(Model& model, std::span<const NamedTensor> tensors, bool strict);

}  // namespace retinet
