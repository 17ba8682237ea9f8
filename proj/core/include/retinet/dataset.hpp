#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "retinet/augment.hpp"
#include "retinet/image.hpp"
#include "retinet/rng.hpp"
#include "retinet/tensor.hpp"

namespace retinet {

enum class Split { train, test };

inline const std::vector<std::string> kDefaultClassNames{"Normal", "DR", "MH"};

struct Sample {
  std::filesystem::path path;  // resolved against the manifest directory
  int label = 0;
};

struct DatasetManifest {
  std::vector<std::string> class_names = kDefaultClassNames;
  std::vector<Sample> samples;
  Split split = Split::train;

  [[nodiscard]] std::vector<std::size_t> class_histogram() const;
};

// Manifest CSV:
//   #classes:Normal,DR,MH
//   path,label
//   images/a.png,DR
// Relative paths resolve against the manifest's directory. DataError names
// the offending line for unknown labels, duplicate paths or malformed rows.
DatasetManifest load_manifest(const std::filesystem::path& path, Split split = Split::train);
DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir,
                               Split split = Split::train, const std::string& source = "<manifest>");

// Writes a manifest with paths relative to base_dir where possible.
std::string format_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir);

// Per-class proportional split. The validation total is round(N * val_frac)
// distributed over classes by largest remainder (ties to the lower class
// index); members are drawn by a seeded shuffle. Both outputs keep manifest order.
std::pair<DatasetManifest, DatasetManifest> stratified_split(const DatasetManifest& manifest,
                                                             double val_frac, Xoshiro256pp& rng);

// Per-class validation counts stratified_split would produce.
std::vector<std::size_t> stratified_counts(const std::vector<std::size_t>& histogram, double val_frac);

struct Batch {
  Tensor images;  // [N,3,H,W], values in [0,1]
  std::vector<int> labels;
  std::vector<std::size_t> sample_ids;  // indices into the manifest
};

struct LoaderOptions {
  std::size_t batch_size = 32;
  bool shuffle = false;
  std::optional<AugmentConfig> augment;
  std::uint64_t seed = 42;
  std::size_t image_h = 224;
  std::size_t image_w = 224;
  // Keep decoded+resized 8-bit images in memory across epochs.
  bool cache_decoded = true;
};

// Deterministic batch stream. Epoch e's order is a Fisher-Yates shuffle from
// substream(seed, shuffle-tag|e, 0); sample k in epoch e is augmented from
// substream(seed, augment-tag|e, k). Parallel and serial assembly therefore
// produce identical batches.
class DataLoader {
 public:
  DataLoader(DatasetManifest manifest, LoaderOptions options);

  [[nodiscard]] std::size_t size() const noexcept { return manifest_.samples.size(); }
  [[nodiscard]] std::size_t num_batches() const noexcept;
  [[nodiscard]] const DatasetManifest& manifest() const noexcept { return manifest_; }
  [[nodiscard]] const LoaderOptions& options() const noexcept { return options_; }

  [[nodiscard]] std::vector<std::size_t> epoch_order(std::size_t epoch) const;

  Batch batch(std::size_t epoch, std::size_t index);

  void for_each_batch(std::size_t epoch, const std::function<void(const Batch&)>& fn);

  // normalize(resize(decode(path))) for one sample, augmented when configured.
  Tensor sample_tensor(std::size_t sample_id, std::size_t epoch);

 private:
  const Image8& resized(std::size_t sample_id, Image8& scratch);

  DatasetManifest manifest_;
  LoaderOptions options_;
  std::vector<std::optional<Image8>> cache_;
};

// Stream tags for substream derivation.
inline constexpr std::uint64_t kShuffleStreamTag = 1ULL << 40;
inline constexpr std::uint64_t kAugmentStreamTag = 2ULL << 40;

}  // namespace retinet
