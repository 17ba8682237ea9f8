#include <gtest/gtest.h>

#include <numeric>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "retinet/dataset.hpp"
#include "retinet/error.hpp"

using namespace retinet;
using namespace retinet::testing;
namespace fs = std::filesystem;

namespace {

std::string synthetic_manifest(const std::vector<std::size_t>& counts) {
  std::ostringstream s;
  s << "#classes:Normal,DR,MH\npath,label\n";
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::size_t k = 0; k < counts[c]; ++k) s << "img/" << kDefaultClassNames[c] << "_" << k << ".png," << kDefaultClassNames[c] << "\n";
  }
  return s.str();
}

std::string error_of(std::string_view text) {
  try {
    parse_manifest(text, "/data", Split::train, "m.csv");
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Manifest, ParsesAndResolvesPaths) {
  const auto m = parse_manifest("\n#classes:Normal,DR,MH\npath,label\na.png,DR\n/abs/b.png,MH\n\nsub/../c.png,Normal\n",
                                "/data", Split::test);
  ASSERT_EQ(m.samples.size(), 3u);
  EXPECT_EQ(m.split, Split::test);
  EXPECT_EQ(m.samples[0].path, fs::path("/data/a.png"));
  EXPECT_EQ(m.samples[0].label, 1);
  EXPECT_EQ(m.samples[1].path, fs::path("/abs/b.png"));
  EXPECT_EQ(m.samples[2].path, fs::path("/data/c.png"));
  EXPECT_EQ(m.class_histogram(), (std::vector<std::size_t>{1, 1, 1}));
  const auto again = parse_manifest(format_manifest(m, "/data"), "/data", Split::test);
  EXPECT_EQ(again.samples.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(again.samples[i].path, m.samples[i].path);
}

TEST(Manifest, PathsMayContainCommas) {
  const auto m = parse_manifest("#classes:A,B\npath,label\nx,y.png,B\n", "/d");
  EXPECT_EQ(m.samples[0].path, fs::path("/d/x,y.png"));
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"A", "B"}));
}

TEST(Manifest, ErrorsNameTheLine) {
  EXPECT_EQ(error_of("#classes:Normal,DR\npath,label\na.png,DR\nb.png,Glaucoma\n"), "m.csv:4: unknown class 'Glaucoma'");
  EXPECT_EQ(error_of("#classes:Normal,DR\npath,label\na.png,DR\n./a.png,Normal\n"), "m.csv:4: duplicate path './a.png'");
  EXPECT_EQ(error_of("#classes:Normal,DR\npath,label\nnocomma\n"), "m.csv:3: expected '<path>,<label>'");
  EXPECT_EQ(error_of("#classes:Normal,,DR\n"), "m.csv:1: empty class name in declaration");
  EXPECT_EQ(error_of("path,label\n"), "m.csv:1: expected '#classes:<name>,<name>,...' declaration");
  EXPECT_EQ(error_of("#classes:A,B\nfile,class\n"), "m.csv:2: expected header 'path,label'");
  EXPECT_EQ(error_of("#classes:A,B\npath,label\n"), "m.csv: manifest has no samples");
  EXPECT_EQ(error_of(""), "m.csv: empty manifest");
  EXPECT_THROW(load_manifest("/nonexistent/manifest.csv"), DataError);
}

TEST(Split, DatasetSizedCounts) {
  EXPECT_EQ(stratified_counts({401, 376, 312}, 0.1), (std::vector<std::size_t>{40, 38, 31}));
  EXPECT_EQ(stratified_counts({134, 124, 104}, 0.0), (std::vector<std::size_t>{0, 0, 0}));
  // Ties in the remainder go to the lower class index.
  EXPECT_EQ(stratified_counts({5, 5, 5}, 0.1), (std::vector<std::size_t>{1, 1, 0}));
  EXPECT_THROW(stratified_counts({1, 1}, 1.0), ConfigError);
  EXPECT_THROW(stratified_counts({1, 1}, -0.1), ConfigError);
}

TEST(Split, DatasetSizedManifestsAndBatches) {
  const auto train = parse_manifest(synthetic_manifest({401, 376, 312}), "/d");
  const auto test = parse_manifest(synthetic_manifest({134, 124, 104}), "/d", Split::test);
  EXPECT_EQ(train.samples.size(), 1089u);
  EXPECT_EQ(test.samples.size(), 362u);
  Xoshiro256pp rng(42, 3);
  const auto [fit, val] = stratified_split(train, 0.1, rng);
  EXPECT_EQ(val.class_histogram(), (std::vector<std::size_t>{40, 38, 31}));
  EXPECT_EQ(fit.class_histogram(), (std::vector<std::size_t>{361, 338, 281}));
  // Disjoint, covering, manifest order preserved.
  std::set<fs::path> all;
  for (const auto* part : {&fit, &val}) {
    for (std::size_t i = 0; i + 1 < part->samples.size(); ++i) {
      const auto a = std::find_if(train.samples.begin(), train.samples.end(), [&](const Sample& s) { return s.path == part->samples[i].path; });
      const auto b = std::find_if(train.samples.begin(), train.samples.end(), [&](const Sample& s) { return s.path == part->samples[i + 1].path; });
      ASSERT_LT(a, b);
    }
    for (const auto& s : part->samples) all.insert(s.path);
  }
  EXPECT_EQ(all.size(), 1089u);

  LoaderOptions opts;
  opts.batch_size = 32;
  const DataLoader fit_loader(fit, opts);
  EXPECT_EQ(fit_loader.num_batches(), 31u);
  EXPECT_EQ(fit.samples.size() - 30 * 32, 20u);
  EXPECT_EQ(DataLoader(test, opts).num_batches(), 12u);
}

TEST(Split, IsSeededAndDeterministic) {
  const auto train = parse_manifest(synthetic_manifest({20, 15, 10}), "/d");
  Xoshiro256pp a(1), b(1), c(2);
  const auto sa = stratified_split(train, 0.2, a).second;
  const auto sb = stratified_split(train, 0.2, b).second;
  const auto sc = stratified_split(train, 0.2, c).second;
  ASSERT_EQ(sa.samples.size(), 9u);
  bool differs = false;
  for (std::size_t i = 0; i < sa.samples.size(); ++i) {
    EXPECT_EQ(sa.samples[i].path, sb.samples[i].path);
    differs |= sa.samples[i].path != sc.samples[i].path;
  }
  EXPECT_TRUE(differs);
}

TEST(Batching, EightHundredElevenSamplesGiveTwentySixBatches) {
  std::ostringstream s;
  s << "#classes:A,B\npath,label\n";
  for (int i = 0; i < 811; ++i) s << i << ".png," << (i % 2 ? "A" : "B") << "\n";
  LoaderOptions opts;
  DataLoader loader(parse_manifest(s.str(), "/d"), opts);
  EXPECT_EQ(loader.num_batches(), 26u);
  EXPECT_EQ(loader.size() - 25 * 32, 11u);
}

class LoaderTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = scratch_dir("loader");
    manifest_ = load_manifest(write_solid_color_dataset(dir_, 4, 10));
  }
  fs::path dir_;
  DatasetManifest manifest_;
};

TEST_F(LoaderTest, EpochOrderIsSeededPermutation) {
  LoaderOptions opts;
  opts.batch_size = 5;
  opts.shuffle = true;
  opts.seed = 9;
  DataLoader a(manifest_, opts), b(manifest_, opts);
  const auto o1 = a.epoch_order(1);
  EXPECT_EQ(o1, b.epoch_order(1));
  EXPECT_NE(o1, a.epoch_order(2));
  EXPECT_EQ(std::set<std::size_t>(o1.begin(), o1.end()).size(), 12u);
  opts.shuffle = false;
  std::vector<std::size_t> identity(12);
  std::iota(identity.begin(), identity.end(), 0);
  EXPECT_EQ(DataLoader(manifest_, opts).epoch_order(3), identity);
}

TEST_F(LoaderTest, BatchesAssembleSamplesInOrder) {
  LoaderOptions opts;
  opts.batch_size = 5;
  opts.shuffle = true;
  opts.augment = AugmentConfig{};
  opts.image_h = opts.image_w = 8;
  DataLoader loader(manifest_, opts);
  EXPECT_EQ(loader.num_batches(), 3u);
  std::vector<std::size_t> seen;
  std::size_t batches = 0;
  loader.for_each_batch(2, [&](const Batch& b) {
    ++batches;
    ASSERT_EQ(b.images.dim(0), b.labels.size());
    EXPECT_EQ(b.images.shape(), (Shape{b.labels.size(), 3, 8, 8}));
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      EXPECT_EQ(b.labels[i], manifest_.samples[b.sample_ids[i]].label);
      seen.push_back(b.sample_ids[i]);
    }
  });
  EXPECT_EQ(batches, 3u);
  EXPECT_EQ(seen, loader.epoch_order(2));

  DataLoader other(manifest_, opts);
  const Batch last = loader.batch(2, 2);
  EXPECT_EQ(last.labels.size(), 2u);
  const Tensor one = other.sample_tensor(last.sample_ids[1], 2);
  const std::size_t plane = 3 * 8 * 8;
  EXPECT_TRUE(bitwise_equal(Tensor(one.shape(), std::vector<float>(last.images.ptr() + plane, last.images.ptr() + 2 * plane)), one));
  EXPECT_TRUE(bitwise_equal(loader.batch(1, 0).images, other.batch(1, 0).images));
  EXPECT_THROW(loader.batch(2, 3), DataError);
}

TEST_F(LoaderTest, SolidImagesNormalizeToPrimaries) {
  LoaderOptions opts;
  opts.image_h = opts.image_w = 6;
  DataLoader loader(manifest_, opts);
  const Tensor red = loader.sample_tensor(0, 0);
  for (std::size_t i = 0; i < 36; ++i) {
    EXPECT_EQ(red[i], 1.0f);
    EXPECT_EQ(red[36 + i], 0.0f);
    EXPECT_EQ(red[72 + i], 0.0f);
  }
  opts.batch_size = 0;
  EXPECT_THROW(DataLoader(manifest_, opts), ConfigError);
}

TEST_F(LoaderTest, MissingImageIsDataError) {
  auto m = manifest_;
  m.samples[0].path = dir_ / "missing.png";
  LoaderOptions opts;
  opts.image_h = opts.image_w = 6;
  DataLoader loader(m, opts);
  EXPECT_THROW(loader.sample_tensor(0, 0), DataError);
}
