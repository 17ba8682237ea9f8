#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "retinet/error.hpp"
#include "retinet/model.hpp"
#include "retinet/trainer.hpp"

using namespace retinet;
using namespace retinet::testing;

namespace {

ModelConfig mobilenet(std::size_t size = 224) {
  ModelConfig c;
  c.input_h = c.input_w = size;
  return c;
}

std::vector<Tensor> snapshot(const Model& m, std::string_view prefix) {
  std::vector<Tensor> out;
  for (const auto& p : m.params()) {
    if (std::string_view(p.name).substr(0, prefix.size()) == prefix) out.push_back(p.value);
  }
  return out;
}

}  // namespace

TEST(MobileNetV2, FeatureMapIs1280x7x7) {
  const Model backbone = build_backbone(mobilenet());
  EXPECT_EQ(backbone.nodes().back().sample_shape, (Shape{1280, 7, 7}));
  Xoshiro256pp rng(1);
  const Tensor x = random_tensor_f({1, 3, 224, 224}, rng, 0.0, 1.0);
  Model init = backbone;
  init.init_weights(3);
  EXPECT_EQ(init.infer(x).shape(), (Shape{1, 1280, 7, 7}));
}

TEST(MobileNetV2, BlockCountAndBoundaryLayers) {
  const Model m = build_model(mobilenet(), 42);
  EXPECT_EQ(count_bottlenecks(m), kMobileNetV2Bottlenecks);
  std::size_t repeats = 0;
  for (const auto& s : kMobileNetV2Stages) repeats += s.repeats;
  EXPECT_EQ(repeats, 17u);
  EXPECT_EQ(kMobileNetV2Bottlenecks + kMobileNetV2BoundaryConvs, 19u);
  EXPECT_NO_THROW((void)m.find_node("backbone/stem/conv"));
  EXPECT_NO_THROW((void)m.find_node("backbone/top/conv"));
  // t=1 in the first block: no expand conv.
  EXPECT_THROW((void)m.find_node("backbone/block_1/expand"), ShapeError);
  EXPECT_NO_THROW((void)m.find_node("backbone/block_2/expand"));
}

TEST(MobileNetV2, ParameterCounts) {
  Model m = build_model(mobilenet(), 42);
  // Closed form: Dense(1280 -> 1024) + Dense(1024 -> 3), weights plus biases.
  const std::size_t head = (1280 + 1) * 1024 + (1024 + 1) * 3;
  EXPECT_EQ(head, 1314819u);
  freeze_backbone(m, true);
  EXPECT_EQ(param_count(m, true), head);
  // Backbone total of the reference implementation: 2,257,984.
  EXPECT_EQ(param_count(m, false), 2257984u + head);
  freeze_backbone(m, false);
  // BN running statistics (2 x 17,056) are never trainable.
  EXPECT_EQ(param_count(m, true), 2257984u + head - 34112u);
}

TEST(MobileNetV2, MakeDivisible) {
  EXPECT_EQ(make_divisible(32 * 0.35), 16u);
  EXPECT_EQ(make_divisible(24 * 0.5), 16u);
  EXPECT_EQ(make_divisible(96.0), 96u);
  EXPECT_EQ(make_divisible(20.0), 24u);
}

TEST(NasNet, ShapesReachSevenBySeven) {
  ModelConfig c = mobilenet();
  c.arch = Arch::nasnet_mobile;
  const Model m = build_model(c, 1);
  const std::size_t last_backbone = m.find_node("head/gap") - 1;
  EXPECT_EQ(m.nodes()[last_backbone].sample_shape, (Shape{352, 7, 7}));
  EXPECT_EQ(m.nodes().back().sample_shape, (Shape{3}));
  Xoshiro256pp rng(2);
  const Tensor probs = predict(m, random_tensor_f({2, 3, 224, 224}, rng, 0.0, 1.0));
  EXPECT_EQ(probs.shape(), (Shape{2, 3}));
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.input_h = 225;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.head.dropout_rate = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_arch("nasnet_mobile"), Arch::nasnet_mobile);
  EXPECT_THROW(parse_arch("resnet"), ConfigError);
}

TEST(Model, AddNodeRejectsShapeMismatch) {
  Model m(ModelConfig{});
  const auto in = m.add_node("input", InputLayer{});
  const auto a = m.add_node("a", ConvLayer{{8, 3, 3, 1, 1, ops::Padding::same, 1}}, {in});
  const auto b = m.add_node("b", ConvLayer{{8, 3, 3, 2, 2, ops::Padding::same, 1}}, {in});
  EXPECT_THROW(m.add_node("sum", AddLayer{}, {a, b}), ShapeError);
  EXPECT_THROW(m.add_node("late", AddLayer{}, {a, 99}), ShapeError);
}

TEST(Model, SameSeedSameInit) {
  const Model a = build_model(mobilenet(32), 7);
  const Model b = build_model(mobilenet(32), 7);
  const Model c = build_model(mobilenet(32), 8);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    ASSERT_TRUE(bitwise_equal(a.params()[i].value, b.params()[i].value)) << a.params()[i].name;
    any_diff |= !bitwise_equal(a.params()[i].value, c.params()[i].value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, HeUniformBounds) {
  const Model m = build_model(mobilenet(32), 7);
  const Param* w = m.params().find("head/dense/weights");
  ASSERT_NE(w, nullptr);
  const double limit = std::sqrt(6.0 / 1280.0);
  double sumsq = 0.0;
  for (float v : w->value.data()) {
    ASSERT_LE(std::abs(v), limit);
    sumsq += static_cast<double>(v) * v;
  }
  // Variance of U(-l, l) is l^2 / 3 = 2 / fan_in.
  EXPECT_NEAR(sumsq / static_cast<double>(w->value.size()), 2.0 / 1280.0, 0.02 * 2.0 / 1280.0);
  EXPECT_EQ(m.params().find("head/dense/bias")->value, Tensor({1024}, 0.0f));
}

TEST(Model, InferIsPureAndPredictSumsToOne) {
  const Model m = build_model(mobilenet(64), 3);
  const Model before = m;
  Xoshiro256pp rng(4);
  const Tensor x = random_tensor_f({3, 3, 64, 64}, rng, 0.0, 1.0);
  const Tensor p = predict(m, x);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_NEAR(p.at(r, 0) + p.at(r, 1) + p.at(r, 2), 1.0, 1e-6);
  }
  EXPECT_TRUE(bitwise_equal(m.infer(x), m.infer(x)));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_TRUE(bitwise_equal(m.params()[i].value, before.params()[i].value));
  }
}

TEST(Model, FrozenBackboneUnchangedAfterTraining) {
  Model m = build_model(mobilenet(32), 5);
  freeze_backbone(m, true);
  const auto backbone = snapshot(m, kBackbonePrefix);
  const auto head = snapshot(m, kHeadPrefix);
  TrainConfig cfg;
  AdamState adam;
  Xoshiro256pp rng(6);
  const Tensor x = random_tensor_f({4, 3, 32, 32}, rng, 0.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 1};
  for (int step = 0; step < 5; ++step) {
    ForwardPass pass = m.forward(x, ops::Mode::train, &rng);
    const auto sce = ops::softmax_cross_entropy(pass.logits, labels);
    m.backward(pass, sce.grad_logits);
    adam_step(m.params(), adam, cfg);
  }
  const auto backbone_after = snapshot(m, kBackbonePrefix);
  for (std::size_t i = 0; i < backbone.size(); ++i) EXPECT_TRUE(bitwise_equal(backbone[i], backbone_after[i]));
  const auto head_after = snapshot(m, kHeadPrefix);
  bool changed = false;
  for (std::size_t i = 0; i < head.size(); ++i) changed |= !bitwise_equal(head[i], head_after[i]);
  EXPECT_TRUE(changed);
  EXPECT_EQ(adam.slots.size(), 4u);
}

// Whole-graph check in float: grad . d against a central difference of the
// loss along a random direction d over every trainable parameter.
TEST(Model, DirectionalDerivativeMatchesBackward) {
  ModelConfig c = mobilenet(32);
  c.width_multiplier = 0.35;
  c.head.dense_units = 16;
  c.head.dropout_rate = 0.0;
  Model m = build_model(c, 9);
  Xoshiro256pp rng(10);
  const Tensor x = random_tensor_f({4, 3, 32, 32}, rng, 0.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 0};
  const auto loss_at = [&](Model& model) {
    ForwardPass pass = model.forward(x, ops::Mode::train, &rng);
    return ops::softmax_cross_entropy(pass.logits, labels).loss;
  };
  {
    ForwardPass pass = m.forward(x, ops::Mode::train, &rng);
    m.backward(pass, ops::softmax_cross_entropy(pass.logits, labels).grad_logits);
  }
  std::vector<Tensor> dirs;
  double analytic = 0.0, norm = 0.0;
  for (const auto& p : m.params()) {
    Tensor d = random_tensor_f(p.value.shape(), rng);
    if (!p.updatable()) d.fill(0.0f);
    for (std::size_t i = 0; i < d.size(); ++i) {
      analytic += static_cast<double>(p.grad[i]) * d[i];
      norm += static_cast<double>(d[i]) * d[i];
    }
    dirs.push_back(std::move(d));
  }
  const double eps = 1e-3 / std::sqrt(norm);
  auto shifted = [&](double s) {
    Model copy = m;
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      auto& v = copy.params()[k].value;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += static_cast<float>(s * dirs[k][i]);
    }
    return loss_at(copy);
  };
  const double numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
  EXPECT_NEAR(numeric, analytic, 2e-2 * std::abs(analytic) + 1e-3);
}
