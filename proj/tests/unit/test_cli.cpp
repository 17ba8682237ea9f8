#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "oracles.hpp"
#include "retinet/augment.hpp"
#include "retinet/dataset.hpp"
#include "retinet/fileio.hpp"
#include "retinet/image.hpp"
#include "retinet/metrics.hpp"
#include "retinet/weights_io.hpp"

using namespace retinet;
using namespace retinet::testing;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::pair<std::string, double>> name_values(const std::string& text) {
  std::vector<std::pair<std::string, double>> rows;
  std::istringstream s(text);
  std::string name;
  std::string value;
  while (s >> name >> value) {
    if (name == "class") continue;
    rows.emplace_back(name, std::stod(value));
  }
  return rows;
}

// One small trained run shared by the tests below.
class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new fs::path(scratch_dir("cli_data"));
    run_ = new fs::path(scratch_dir("cli_run"));
    write_solid_color_dataset(*data_, 4, 32);
    const auto r = run_cli({"train", "--manifest", (*data_ / "manifest.csv").string(), "--out", run_->string(),
                            "--epochs", "2", "--batch-size", "4", "--input-size", "32", "--seed", "7"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete data_;
    delete run_;
  }
  static fs::path* data_;
  static fs::path* run_;
};

fs::path* CliRun::data_ = nullptr;
fs::path* CliRun::run_ = nullptr;

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  const auto help = run_cli({"--help"});
  EXPECT_EQ(help.code, cli::kExitOk);
  for (const char* sub : {"train", "evaluate", "predict", "preview-augment", "curves", "param-shapes"}) {
    EXPECT_NE(help.out.find(sub), std::string::npos) << sub;
  }
  EXPECT_EQ(run_cli({}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"predict", "--image", "x.png"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"train", "--epochs", "notanumber"}).code, cli::kExitConfig);
}

TEST(Cli, TrainExitCodes) {
  const auto dir = scratch_dir("cli_codes");
  write_solid_color_dataset(dir, 2, 32);
  const std::string manifest = (dir / "manifest.csv").string();
  EXPECT_EQ(run_cli({"train", "--manifest", (dir / "missing.csv").string(), "--out", (dir / "o").string()}).code,
            cli::kExitData);
  EXPECT_EQ(run_cli({"train", "--manifest", manifest, "--out", (dir / "o").string(), "--arch", "vgg"}).code,
            cli::kExitConfig);
  EXPECT_EQ(run_cli({"train", "--manifest", manifest, "--out", (dir / "o").string(), "--input-size", "33"}).code,
            cli::kExitConfig);
  EXPECT_EQ(run_cli({"train", "--manifest", manifest, "--out", (dir / "o").string(), "--input-size", "32",
                     "--weights", (dir / "none.lwnn").string()})
                .code,
            cli::kExitWeights);
  EXPECT_EQ(run_cli({"train", "--manifest", manifest}).code, cli::kExitConfig);
}

TEST_F(CliRun, WritesRunDirectory) {
  for (const char* f : {"config.json", "log.jsonl", "best", "epoch_1.lwnn", "epoch_2.lwnn", "epoch_2.adam"}) {
    EXPECT_TRUE(fs::exists(*run_ / f)) << f;
  }
  const auto cfg = nlohmann::json::parse(read_file_text(*run_ / "config.json"));
  EXPECT_EQ(cfg["train"]["epochs"], 2);
  EXPECT_EQ(cfg["model"]["input_size"], 32);
  EXPECT_EQ(cfg["model"]["class_names"], nlohmann::json({"Normal", "DR", "MH"}));
}

TEST_F(CliRun, PredictProbabilitiesAndRawLogits) {
  const std::string image = (*data_ / "img/DR_0.ppm").string();
  const auto p = run_cli({"predict", "--image", image, "--checkpoint", run_->string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_EQ(p.out.rfind("class ", 0), 0u);
  const auto probs = name_values(p.out);
  ASSERT_EQ(probs.size(), 3u);
  EXPECT_EQ(probs[0].first, "Normal");
  double sum = 0.0;
  for (const auto& [n, v] : probs) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-6);

  const auto l = run_cli({"predict", "--image", image, "--checkpoint", run_->string(), "--raw-logits"});
  ASSERT_EQ(l.code, 0) << l.err;
  const auto logits = name_values(l.out);
  double z = 0.0;
  for (const auto& [n, v] : logits) z += std::exp(v);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(std::exp(logits[k].second) / z, probs[k].second, 1e-6);
  EXPECT_EQ(p.out.substr(0, p.out.find('\n')), l.out.substr(0, l.out.find('\n')));

  const auto missing = run_cli({"predict", "--image", (*data_ / "nope.png").string(), "--checkpoint", run_->string()});
  EXPECT_EQ(missing.code, cli::kExitData);
  const auto bad_ckpt = run_cli({"predict", "--image", image, "--checkpoint", (*data_ / "img").string()});
  EXPECT_EQ(bad_ckpt.code, cli::kExitWeights);
}

TEST_F(CliRun, EvaluateFormats) {
  const std::string manifest = (*data_ / "manifest.csv").string();
  const auto j = run_cli({"evaluate", "--manifest", manifest, "--checkpoint", run_->string(), "--format", "json"});
  ASSERT_EQ(j.code, 0) << j.err;
  const auto report = parse_report_json(j.out);
  EXPECT_EQ(report.total, 12u);
  EXPECT_NEAR(report.weighted.recall, report.accuracy, 1e-12);
  const auto c = run_cli({"evaluate", "--manifest", manifest, "--checkpoint", run_->string(), "--format", "csv"});
  EXPECT_EQ(parse_report_csv(c.out), report);
  const auto t = run_cli({"evaluate", "--manifest", manifest, "--checkpoint", (*run_ / "epoch_1.lwnn").string()});
  EXPECT_NE(t.out.find("weighted avg"), std::string::npos);
  const auto cm = read_file_text(*run_ / "confusion_matrix.csv");
  EXPECT_EQ(cm.rfind("true\\pred,Normal,DR,MH\n", 0), 0u);
  EXPECT_EQ(run_cli({"evaluate", "--manifest", manifest, "--checkpoint", run_->string(), "--format", "xml"}).code,
            cli::kExitConfig);
}

TEST_F(CliRun, CurvesCsvAndChart) {
  const auto csv_path = *run_ / "curves.csv";
  const auto png_path = *run_ / "curves.png";
  const auto r = run_cli({"curves", "--log", (*run_ / "log.jsonl").string(), "--out", csv_path.string(), "--chart",
                          png_path.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_file_text(csv_path);
  EXPECT_EQ(csv.rfind("epoch,train_loss,val_loss,train_acc,val_acc\n1,", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const Image8 chart = decode_image(png_path);
  EXPECT_EQ(chart.width, 800u);
  EXPECT_EQ(chart.height, 360u);
  EXPECT_EQ(run_cli({"curves", "--log", (*run_ / "nope.jsonl").string(), "--out", csv_path.string()}).code,
            cli::kExitData);
}

TEST_F(CliRun, ParamShapesReportsBackboneOnlyGaps) {
  const auto list = run_cli({"param-shapes", "--input-size", "32"});
  ASSERT_EQ(list.code, 0);
  EXPECT_NE(list.out.find("head/logits/weights\t[1024,3]\t3072\ttrainable"), std::string::npos);
  EXPECT_NE(list.out.find("total 3572803 "), std::string::npos);

  ModelConfig c;
  c.input_h = c.input_w = 32;
  Model backbone = build_backbone(c);
  backbone.init_weights(1);
  const auto path = *run_ / "backbone.lwnn";
  save_weights(backbone, path);
  const auto check = run_cli({"param-shapes", "--input-size", "32", "--weights", path.string()});
  ASSERT_EQ(check.code, 0);
  EXPECT_NE(check.out.find("head/dense/weights\t[1280,1024]\tmissing"), std::string::npos);
  EXPECT_NE(check.out.find("mismatches 4\n"), std::string::npos);
  EXPECT_EQ(run_cli({"param-shapes", "--input-size", "32", "--weights", path.string(), "--strict"}).code,
            cli::kExitWeights);
  const auto bb = run_cli({"param-shapes", "--input-size", "32", "--backbone-only", "--weights", path.string(), "--strict"});
  EXPECT_EQ(bb.code, cli::kExitOk);
  EXPECT_NE(bb.out.find("mismatches 0\n"), std::string::npos);
}

TEST(Cli, PreviewAugmentMatchesStreams) {
  const auto dir = scratch_dir("cli_preview");
  Image8 img(40, 40);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 7);
  write_file_atomic(dir / "src.png", std::span<const std::uint8_t>(encode_png(img)));
  const auto r = run_cli({"preview-augment", "--image", (dir / "src.png").string(), "--count", "3", "--seed", "5",
                          "--input-size", "32", "--out", (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto params = nlohmann::json::parse(read_file_text(dir / "out/params.json"));
  ASSERT_EQ(params["samples"].size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    auto rng = Xoshiro256pp::substream(5, kAugmentStreamTag, k);
    const AffineParams p = random_affine_params(AugmentConfig{}, rng);
    EXPECT_EQ(params["samples"][k]["theta_deg"].get<double>(), p.theta_deg);
    EXPECT_EQ(params["samples"][k]["zoom"].get<double>(), p.zoom);
    EXPECT_EQ(params["samples"][k]["flip"].get<bool>(), p.flip);
    const Image8 out = decode_image(dir / "out" / ("aug_" + std::to_string(k) + ".png"));
    const Image8 expect = to_image(apply_affine(normalize(resize_bilinear(img, 32, 32)), p, FillMode::nearest));
    EXPECT_EQ(out, expect);
  }
}
