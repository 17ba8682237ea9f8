#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "retinet/error.hpp"
#include "retinet/fileio.hpp"
#include "retinet/trainer.hpp"
#include "retinet/weights_io.hpp"

using namespace retinet;
using namespace retinet::testing;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.input_h = c.input_w = 32;
  c.width_multiplier = 0.35;
  c.head.dense_units = 16;
  return c;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.val_frac = 0.25;
  return t;
}

}  // namespace

TEST(Adam, MatchesScalarOracle) {
  NamedParams params;
  Param& p = params.add("w", {1});
  p.value[0] = 0.5f;
  TrainConfig cfg;
  AdamState state;
  const double grads[] = {0.3, -1.2, 0.05, 2.0, 0.0};
  double m = 0.0, v = 0.0, w = 0.5;
  for (int t = 1; t <= 5; ++t) {
    const double g = static_cast<float>(grads[t - 1]);
    p.grad[0] = static_cast<float>(g);
    adam_step(params, state, cfg);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= 0.001 * mh / (std::sqrt(vh) + 1e-7);
    EXPECT_NEAR(p.value[0], w, 1e-7) << "step " << t;
    EXPECT_EQ(p.grad[0], 0.0f);
  }
  EXPECT_EQ(state.step, 5u);
  // First step moves by lr * sign(g) up to epsilon.
  NamedParams q;
  q.add("x", {2});
  q[0].grad = Tensor({2}, std::vector<float>{4.0f, -0.01f});
  AdamState s2;
  adam_step(q, s2, cfg);
  EXPECT_NEAR(q[0].value[0], -0.001, 1e-9);
  EXPECT_NEAR(q[0].value[1], 0.001 * 0.01 / (0.01 + 1e-7), 1e-10);
}

TEST(Adam, ZeroGradientIsNoOpAndFrozenIsSkipped) {
  NamedParams params;
  params.add("a", {3}).value.fill(1.0f);
  Param& frozen = params.add("b", {2});
  frozen.frozen = true;
  frozen.grad.fill(5.0f);
  params.add("stat", {2}, false).grad.fill(5.0f);
  AdamState state;
  adam_step(params, state, TrainConfig{});
  EXPECT_EQ(params[0].value, Tensor({3}, 1.0f));
  EXPECT_EQ(params[1].value, Tensor({2}, 0.0f));
  EXPECT_EQ(params[2].value, Tensor({2}, 0.0f));
  ASSERT_EQ(state.slots.size(), 1u);
  EXPECT_EQ(state.slots[0].name, "a");
  EXPECT_EQ(params[1].grad, Tensor({2}, 0.0f));
}

TEST(Adam, NonFiniteGradientThrowsBeforeUpdating) {
  NamedParams params;
  params.add("a", {2}).grad.fill(1.0f);
  params.add("b", {2}).grad[1] = std::numeric_limits<float>::quiet_NaN();
  AdamState state;
  try {
    adam_step(params, state, TrainConfig{});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(std::string(e.what()), "non-finite gradient in 'b' at element 1");
  }
  EXPECT_EQ(params[0].value, Tensor({2}, 0.0f));
  EXPECT_EQ(state.step, 0u);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(EpochLog, JsonLineRoundTrip) {
  const EpochLog a{3, 0.5, 0.75, std::nullopt, std::nullopt};
  EXPECT_EQ(to_json_line(a), R"({"epoch":3,"train_loss":0.5,"train_acc":0.75,"val_loss":null,"val_acc":null})");
  EXPECT_EQ(parse_epoch_log(to_json_line(a)), a);
  const EpochLog b{1, 1.0 / 3.0, 0.1, 2.0 / 7.0, 0.9};
  EXPECT_EQ(parse_epoch_log(to_json_line(b)), b);
  EXPECT_THROW(parse_epoch_log("{\"epoch\":1}"), DataError);
  EXPECT_THROW(parse_epoch_log("not json"), DataError);
}

TEST(TrainingState, RoundTripAndCorruption) {
  TrainingCheckpoint c;
  c.epoch = 4;
  c.adam.step = 12;
  c.adam.slots.push_back({"w", Tensor({2, 2}, 0.25f), Tensor({2, 2}, 0.5f)});
  c.rng = {1, 2, 3, 4};
  const auto bytes = encode_training_state(c);
  const auto back = decode_training_state(bytes);
  EXPECT_EQ(back.epoch, 4u);
  EXPECT_EQ(back.adam.step, 12u);
  EXPECT_EQ(back.rng, c.rng);
  ASSERT_EQ(back.adam.slots.size(), 1u);
  EXPECT_EQ(back.adam.slots[0].v, c.adam.slots[0].v);
  EXPECT_EQ(encode_training_state(back), bytes);
  auto bad = bytes;
  bad[bad.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_training_state(bad), WeightsError);
}

TEST(ArgmaxRows, TiesGoToLowerIndex) {
  const Tensor logits({3, 3}, std::vector<float>{1, 2, 2, 5, 0, 5, -1, -2, -3});
  EXPECT_EQ(argmax_rows(logits), (std::vector<int>{1, 0, 0}));
}

class FitTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data_ = scratch_dir("fit_data");
    manifest_ = load_manifest(write_solid_color_dataset(data_, 4, 16));
  }
  fs::path data_;
  DatasetManifest manifest_;
};

TEST_F(FitTest, WritesCheckpointsLogsAndBest) {
  const auto out = scratch_dir("fit_out");
  Model m = build_model(tiny_config(), 1);
  std::vector<EpochLog> seen;
  FitOptions opts;
  opts.on_epoch = [&](const EpochLog& l) { seen.push_back(l); };
  const auto result = fit(m, manifest_, tiny_train(2), out, opts);
  ASSERT_EQ(result.logs.size(), 2u);
  EXPECT_EQ(seen, result.logs);
  EXPECT_EQ(read_epoch_logs(out / "log.jsonl"), result.logs);
  for (std::size_t e = 1; e <= 2; ++e) {
    EXPECT_TRUE(fs::exists(checkpoint_weights_path(out, e)));
    EXPECT_TRUE(fs::exists(checkpoint_state_path(out, e)));
    EXPECT_TRUE(result.logs[e - 1].val_acc.has_value());
  }
  EXPECT_GE(result.best_epoch, 1u);
  EXPECT_EQ(result.best_checkpoint, checkpoint_weights_path(out, result.best_epoch));
  EXPECT_TRUE(fs::exists(out / "best"));
  // Backbone frozen by default: the stem never moves.
  const Model fresh = build_model(tiny_config(), 1);
  EXPECT_TRUE(bitwise_equal(m.params().find("backbone/stem/conv/weights")->value,
                            fresh.params().find("backbone/stem/conv/weights")->value));
}

TEST_F(FitTest, ResumeEqualsUninterruptedRun) {
  const auto full = scratch_dir("fit_full");
  const auto part = scratch_dir("fit_part");
  TrainConfig cfg = tiny_train(3);
  cfg.freeze_backbone = false;
  // 9 training samples in batches of 4: the last batch of one hits a 1x1 feature map.
  Model a = build_model(tiny_config(), 2);
  fit(a, manifest_, cfg, full);

  Model b = build_model(tiny_config(), 2);
  TrainConfig first = cfg;
  first.epochs = 1;
  fit(b, manifest_, first, part);
  Model c = build_model(tiny_config(), 99);
  FitOptions resume;
  resume.resume_from = 1;
  fit(c, manifest_, cfg, part, resume);

  for (std::size_t e = 1; e <= 3; ++e) {
    EXPECT_EQ(read_file_bytes(checkpoint_weights_path(full, e)), read_file_bytes(checkpoint_weights_path(part, e))) << e;
    EXPECT_EQ(read_file_bytes(checkpoint_state_path(full, e)), read_file_bytes(checkpoint_state_path(part, e))) << e;
  }
  EXPECT_EQ(read_file_text(full / "log.jsonl"), read_file_text(part / "log.jsonl"));
}

TEST_F(FitTest, EvaluateIsPureAndCountsEverySample) {
  const Model m = build_model(tiny_config(), 3);
  const Model before = m;
  LoaderOptions opts;
  opts.batch_size = 5;
  opts.image_h = opts.image_w = 32;
  DataLoader loader(manifest_, opts);
  const auto r1 = evaluate(m, loader);
  const auto r2 = evaluate(m, loader);
  EXPECT_EQ(r1.confusion.total(), 12u);
  EXPECT_EQ(r1.confusion, r2.confusion);
  EXPECT_EQ(r1.loss, r2.loss);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_TRUE(bitwise_equal(m.params()[i].value, before.params()[i].value));
  }
}

TEST_F(FitTest, CheckpointLoadRejectsMismatch) {
  const auto out = scratch_dir("fit_mismatch");
  Model m = build_model(tiny_config(), 4);
  fit(m, manifest_, tiny_train(1), out);
  ModelConfig other = tiny_config();
  other.head.dense_units = 8;
  Model wrong = build_model(other, 4);
  EXPECT_ANY_THROW(checkpoint_load(wrong, out, 1));
  Model right = build_model(tiny_config(), 5);
  // Optimizer slots exist for head parameters only.
  EXPECT_THROW(checkpoint_load(right, out, 1), ShapeError);
  freeze_backbone(right, true);
  const auto ckpt = checkpoint_load(right, out, 1);
  EXPECT_EQ(ckpt.epoch, 1u);
  EXPECT_THROW(checkpoint_load(right, out, 2), WeightsError);
}

TEST_F(FitTest, RejectsBadConfig) {
  Model m = build_model(tiny_config(), 1);
  TrainConfig cfg = tiny_train(0);
  EXPECT_THROW(fit(m, manifest_, cfg, scratch_dir("fit_bad")), ConfigError);
}
