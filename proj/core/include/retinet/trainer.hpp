#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retinet/augment.hpp"
#include "retinet/dataset.hpp"
#include "retinet/metrics.hpp"
#include "retinet/model.hpp"
#include "retinet/rng.hpp"

namespace retinet {

struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::uint64_t seed = 42;
  bool freeze_backbone = true;
  double val_frac = 0.1;
  // Training-time augmentation; nullopt disables it.
  std::optional<AugmentConfig> augment = AugmentConfig{};

  // ConfigError naming the field.
  void validate() const;
};

struct AdamSlot {
  std::string name;
  Tensor m;
  Tensor v;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<AdamSlot> slots;  // updatable params only, in parameter order

  [[nodiscard]] const AdamSlot* find(std::string_view name) const;
};

// One bias-corrected Adam update of every updatable parameter, then all
// gradients are zeroed. A non-finite gradient throws NumericError naming the
// parameter before anything is modified.
void adam_step(NamedParams& params, AdamState& state, const TrainConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_acc;

  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

// One JSON object per line, fields in declaration order; absent validation
// values are written as null.
std::string to_json_line(const EpochLog& log);
EpochLog parse_epoch_log(std::string_view line);  // DataError on malformed input

// Parses every non-empty line; DataError names the first malformed line.
std::vector<EpochLog> read_epoch_logs(const std::filesystem::path& path);

struct EpochResult {
  double loss = 0.0;      // sample-weighted mean of per-batch mean losses
  double accuracy = 0.0;  // over the epoch's training-mode predictions
};

// forward(train) -> softmax cross-entropy -> backward -> adam_step per batch.
EpochResult train_epoch(Model& model, DataLoader& loader, std::size_t epoch, AdamState& adam,
                        const TrainConfig& cfg, Xoshiro256pp& rng);

struct EvalResult {
  double loss = 0.0;
  ConfusionMatrix confusion;
};

// Infer mode over the loader's full stream; mutates nothing.
EvalResult evaluate(const Model& model, DataLoader& loader, std::size_t epoch = 0);

// Index of the largest logit in each row (ties to the lower index).
std::vector<int> argmax_rows(const Tensor& logits);

struct TrainingCheckpoint {
  std::size_t epoch = 0;
  AdamState adam;
  Xoshiro256pp::State rng{};
};

// ".adam" sidecar: "LWAD" | u32 version | u64 epoch | u64 step | 4 x u64 rng
// | u32 slot_count | per slot: u16 name_len, name, u8 rank, rank x u32 dims,
// f32 m values, f32 v values | u32 CRC-32 of every preceding byte.
std::vector<std::uint8_t> encode_training_state(const TrainingCheckpoint& ckpt);
TrainingCheckpoint decode_training_state(std::span<const std::uint8_t> bytes);

std::filesystem::path checkpoint_weights_path(const std::filesystem::path& dir, std::size_t epoch);
std::filesystem::path checkpoint_state_path(const std::filesystem::path& dir, std::size_t epoch);

// Writes epoch_<k>.lwnn and epoch_<k>.adam atomically.
void checkpoint_save(const Model& model, const TrainingCheckpoint& ckpt, const std::filesystem::path& dir);

// Strict weight load plus training state; WeightsError / ShapeError on mismatch.
TrainingCheckpoint checkpoint_load(Model& model, const std::filesystem::path& dir, std::size_t epoch);

// Stream ids under the run seed.
inline constexpr std::uint64_t kSplitStream = 3ULL << 40;
inline constexpr std::uint64_t kDropoutStream = 4ULL << 40;

struct FitOptions {
  // Continue after this completed epoch, reading its checkpoint and the first
  // `resume_from` lines of log.jsonl from the output directory.
  std::optional<std::size_t> resume_from;
  std::function<void(const EpochLog&)> on_epoch;
};

struct FitResult {
  std::vector<EpochLog> logs;
  std::size_t best_epoch = 0;
  std::filesystem::path best_checkpoint;
};

// Carves a stratified validation split (stream kSplitStream), trains
// cfg.epochs epochs and writes epoch_<k>.lwnn, epoch_<k>.adam, log.jsonl and
// `best` into out_dir. The best epoch has the highest validation accuracy,
// ties to the lower epoch; without a validation set, training accuracy.
FitResult fit(Model& model, const DatasetManifest& train_manifest, const TrainConfig& cfg,
              const std::filesystem::path& out_dir, const FitOptions& options = {});

}  // namespace retinet
