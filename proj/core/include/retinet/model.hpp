#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "retinet/ops.hpp"
#include "retinet/rng.hpp"
#include "retinet/tensor.hpp"

namespace retinet {

enum class Arch { mobilenet_v2, nasnet_mobile };

std::string to_string(Arch arch);
Arch parse_arch(std::string_view name);  // ConfigError on unknown names

struct HeadConfig {
  std::size_t dense_units = 1024;
  double dropout_rate = 0.3;
};

// Simplified NASNet-Mobile: stem conv, a stem reduction cell, then
// [normal x cells_per_stage, reduction] for each of three stages. Reduction
// cells move to the next stage width; the last one doubles stage_widths[2].
struct NasNetConfig {
  std::size_t stem_filters = 32;
  std::size_t cells_per_stage = 4;
  std::array<std::size_t, 3> stage_widths{44, 88, 176};
};

struct ModelConfig {
  Arch arch = Arch::mobilenet_v2;
  std::size_t num_classes = 3;
  std::size_t input_h = 224;
  std::size_t input_w = 224;
  HeadConfig head;
  double width_multiplier = 1.0;
  NasNetConfig nasnet;

  // num_classes >= 2, input dims divisible by 32, sane head/width values.
  void validate() const;
};

// ---- graph ------------------------------------------------------------------

struct InputLayer {};
struct ConvLayer {
  ops::ConvSpec spec;
  bool bias = false;
};
struct DepthwiseLayer {
  ops::ConvSpec spec;  // groups/out_channels filled in from the input
};
struct BatchNormLayer {
  double momentum = 0.99;
  double epsilon = 1e-3;
};
struct ActivationLayer {
  ops::Activation kind = ops::Activation::relu;
};
struct GlobalAvgPoolLayer {};
struct FlattenLayer {};
struct DenseLayer {
  std::size_t units = 0;
};
struct DropoutLayer {
  double rate = 0.0;
};
struct AddLayer {};

using LayerSpec = std::variant<InputLayer, ConvLayer, DepthwiseLayer, BatchNormLayer,
                               ActivationLayer, GlobalAvgPoolLayer, FlattenLayer, DenseLayer,
                               DropoutLayer, AddLayer>;

enum class LayerKind { input, conv, depthwise, bn, act, gap, flatten, dense, dropout, add };

std::string_view to_string(LayerKind kind);

struct LayerNode {
  std::string name;
  LayerSpec spec;
  std::vector<std::size_t> inputs;  // indices of upstream nodes, all < own index
  Shape sample_shape;               // output shape without the batch dim
  std::vector<std::size_t> params;  // indices into NamedParams

  [[nodiscard]] LayerKind kind() const noexcept {
    return static_cast<LayerKind>(spec.index());
  }
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;
  // BN running statistics are persisted with the weights but never optimized.
  bool trainable = true;

  [[nodiscard]] bool updatable() const noexcept { return trainable && !frozen; }
};

// Parameters in creation order with lookup by name.
class NamedParams {
 public:
  Param& add(std::string name, Shape shape, bool trainable = true);

  [[nodiscard]] Param* find(std::string_view name);
  [[nodiscard]] const Param* find(std::string_view name) const;

  [[nodiscard]] std::size_t size() const noexcept { return items_.size(); }
  Param& operator[](std::size_t i) { return items_[i]; }
  const Param& operator[](std::size_t i) const { return items_[i]; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Param> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-call state of a forward pass: activations kept for backward, BN caches,
// dropout masks. Owned by the caller, so concurrent inference never shares it.
struct ForwardPass {
  Tensor logits;
  ops::Mode mode = ops::Mode::infer;
  std::size_t batch = 0;
  std::vector<Tensor> outputs;
  std::vector<ops::BatchNormCache<float>> bn;
  std::vector<Tensor> dropout_masks;
};

class Model {
 public:
  explicit Model(ModelConfig config);

  // Appends a node after validating its inputs' shapes; creates its params.
  // Returns the node index.
  std::size_t add_node(std::string name, LayerSpec spec, std::vector<std::size_t> inputs = {});

  [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<LayerNode>& nodes() const noexcept { return nodes_; }
  [[nodiscard]] std::size_t output_node() const { return nodes_.size() - 1; }
  [[nodiscard]] std::size_t find_node(std::string_view name) const;  // ShapeError if absent
  [[nodiscard]] NamedParams& params() noexcept { return params_; }
  [[nodiscard]] const NamedParams& params() const noexcept { return params_; }

  // He-uniform for conv/dense weights, zero biases, identity BN. Each tensor
  // draws from Xoshiro256pp(seed, fnv1a(name)).
  void init_weights(std::uint64_t seed);

  // Train mode uses batch statistics in BN layers whose params are not frozen
  // (and updates their running stats) and samples dropout masks. Dropout layer
  // k draws from Xoshiro256pp(key, k) with key = rng.next() taken once per call.
  ForwardPass forward(const Tensor& input, ops::Mode mode, Xoshiro256pp* rng = nullptr);

  // Infer-mode logits without caching or mutation; safe to call concurrently.
  [[nodiscard]] Tensor infer(const Tensor& input) const;

  // Accumulates gradients (+=) into every updatable parameter reachable from
  // the logits. Frozen subgraphs are skipped entirely.
  void backward(const ForwardPass& pass, const Tensor& grad_logits);

  void zero_grad();

  // Sets the frozen flag on every parameter whose name starts with prefix.
  void set_frozen(std::string_view prefix, bool frozen);

  [[nodiscard]] std::size_t param_count(bool trainable_only) const;

 private:
  Tensor execute(const Tensor& input, ops::Mode mode, Xoshiro256pp* rng, ForwardPass* pass,
                 NamedParams* mutable_params) const;
  [[nodiscard]] std::vector<bool> grad_plan() const;

  ModelConfig config_;
  std::vector<LayerNode> nodes_;
  NamedParams params_;
  std::unordered_map<std::string, std::size_t> node_index_;
};

// ---- architectures ----------------------------------------------------------

// Canonical MobileNetV2 inverted-residual stage table.
struct BottleneckStage {
  std::size_t expansion;
  std::size_t channels;
  std::size_t repeats;
  std::size_t stride;
};

inline constexpr std::array<BottleneckStage, 7> kMobileNetV2Stages{{
    {1, 16, 1, 1},
    {6, 24, 2, 2},
    {6, 32, 3, 2},
    {6, 64, 4, 2},
    {6, 96, 3, 1},
    {6, 160, 3, 2},
    {6, 320, 1, 1},
}};

// 17 inverted-residual bottlenecks (sum of repeats). Counting the 32-filter
// stem conv and the 1x1 top conv as boundary layers gives 19 layers.
inline constexpr std::size_t kMobileNetV2Bottlenecks = 17;
inline constexpr std::size_t kMobileNetV2BoundaryConvs = 2;

// Rounds channel counts the way the reference MobileNetV2 does.
std::size_t make_divisible(double value, std::size_t divisor = 8);

Model build_mobilenet_v2_backbone(const ModelConfig& config);
Model build_nasnet_mobile_backbone(const ModelConfig& config);
Model build_backbone(const ModelConfig& config);

// Appends GAP -> Flatten -> Dense(units) -> ReLU -> Dropout -> Dense(num_classes).
// Softmax is applied by the loss during training and by predict().
Model attach_classifier_head(Model backbone, std::size_t num_classes);

// Backbone + head + init_weights(seed).
Model build_model(const ModelConfig& config, std::uint64_t seed);

inline constexpr std::string_view kBackbonePrefix = "backbone/";
inline constexpr std::string_view kHeadPrefix = "head/";

void freeze_backbone(Model& model, bool frozen);

std::size_t param_count(const Model& model, bool trainable_only);

// Softmax probabilities for an input batch (infer mode).
Tensor predict(const Model& model, const Tensor& input);

// Number of inverted-residual blocks in a built MobileNetV2 graph (counted by
// their depthwise nodes).
std::size_t count_bottlenecks(const Model& model);

}  // namespace retinet
