#include "retinet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "retinet/error.hpp"
#include "retinet/fileio.hpp"
#include "retinet/parallel.hpp"

namespace retinet {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = text.find('\n', start);
    const std::size_t stop = end == std::string_view::npos ? text.size() : end;
    lines.emplace_back(text.substr(start, stop - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return lines;
}

}  // namespace

std::vector<std::size_t> DatasetManifest::class_histogram() const {
  std::vector<std::size_t> h(class_names.size(), 0);
  for (const auto& s : samples) ++h.at(static_cast<std::size_t>(s.label));
  return h;
}

DatasetManifest parse_manifest(std::string_view text, const fs::path& base_dir, Split split,
                               const std::string& source) {
  const auto fail = [&](std::size_t line, const std::string& what) -> void {
    throw DataError(source + ":" + std::to_string(line) + ": " + what);
  };
  const auto lines = split_lines(text);
  std::size_t i = 0;
  const auto next_nonempty = [&]() -> std::optional<std::size_t> {
    while (i < lines.size() && trim(lines[i]).empty()) ++i;
    if (i >= lines.size()) return std::nullopt;
    return i++;
  };

  auto first = next_nonempty();
  if (!first) throw DataError(source + ": empty manifest");
  std::string_view decl = trim(lines[*first]);
  constexpr std::string_view kClassesPrefix = "#classes:";
  if (decl.substr(0, kClassesPrefix.size()) != kClassesPrefix) {
    fail(*first + 1, "expected '#classes:<name>,<name>,...' declaration");
  }
  DatasetManifest m;
  m.split = split;
  m.class_names.clear();
  {
    std::string_view rest = decl.substr(kClassesPrefix.size());
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const std::size_t comma = rest.find(',', pos);
      const std::string_view name = trim(rest.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
      if (name.empty()) fail(*first + 1, "empty class name in declaration");
      if (std::find(m.class_names.begin(), m.class_names.end(), name) != m.class_names.end()) {
        fail(*first + 1, "duplicate class name '" + std::string(name) + "'");
      }
      m.class_names.emplace_back(name);
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
  }

  auto header = next_nonempty();
  if (!header) throw DataError(source + ": missing 'path,label' header");
  if (trim(lines[*header]) != "path,label") fail(*header + 1, "expected header 'path,label'");

  std::set<fs::path> seen;
  while (auto row = next_nonempty()) {
    const std::string_view line = trim(lines[*row]);
    const std::size_t comma = line.rfind(',');
    if (comma == std::string_view::npos) fail(*row + 1, "expected '<path>,<label>'");
    const std::string_view path_text = trim(line.substr(0, comma));
    const std::string_view label_text = trim(line.substr(comma + 1));
    if (path_text.empty()) fail(*row + 1, "empty path");
    const auto it = std::find(m.class_names.begin(), m.class_names.end(), label_text);
    if (it == m.class_names.end()) {
      fail(*row + 1, "unknown class '" + std::string(label_text) + "'");
    }
    fs::path p(path_text);
    if (p.is_relative()) p = base_dir / p;
    p = p.lexically_normal();
    if (!seen.insert(p).second) fail(*row + 1, "duplicate path '" + std::string(path_text) + "'");
    m.samples.push_back({p, static_cast<int>(it - m.class_names.begin())});
  }
  if (m.samples.empty()) throw DataError(source + ": manifest has no samples");
  return m;
}

DatasetManifest load_manifest(const fs::path& path, Split split) {
  if (!fs::exists(path)) throw DataError("manifest '" + path.string() + "' does not exist");
  return parse_manifest(read_file_text(path), path.parent_path(), split, path.string());
}

std::string format_manifest(const DatasetManifest& manifest, const fs::path& base_dir) {
  std::ostringstream out;
  out << "#classes:";
  for (std::size_t c = 0; c < manifest.class_names.size(); ++c) {
    out << (c ? "," : "") << manifest.class_names[c];
  }
  out << "\npath,label\n";
  for (const auto& s : manifest.samples) {
    fs::path p = s.path;
    if (!base_dir.empty()) {
      const fs::path rel = s.path.lexically_relative(base_dir);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    out << p.generic_string() << "," << manifest.class_names.at(static_cast<std::size_t>(s.label)) << "\n";
  }
  return out.str();
}

std::vector<std::size_t> stratified_counts(const std::vector<std::size_t>& histogram, double val_frac) {
  if (!(val_frac >= 0.0 && val_frac < 1.0)) {
    throw ConfigError("val_frac must be in [0,1), got " + std::to_string(val_frac));
  }
  const std::size_t total = std::accumulate(histogram.begin(), histogram.end(), std::size_t{0});
  const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(total) * val_frac));
  std::vector<std::size_t> counts(histogram.size());
  std::vector<double> remainder(histogram.size());
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < histogram.size(); ++c) {
    const double quota = static_cast<double>(histogram[c]) * val_frac;
    counts[c] = static_cast<std::size_t>(std::floor(quota));
    remainder[c] = quota - std::floor(quota);
    assigned += counts[c];
  }
  std::vector<std::size_t> order(histogram.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
    const std::size_t c = order[k];
    if (counts[c] < histogram[c]) {
      ++counts[c];
      ++assigned;
    }
  }
  return counts;
}

std::pair<DatasetManifest, DatasetManifest> stratified_split(const DatasetManifest& manifest,
                                                             double val_frac, Xoshiro256pp& rng) {
  const auto hist = manifest.class_histogram();
  const auto counts = stratified_counts(hist, val_frac);
  std::vector<bool> is_val(manifest.samples.size(), false);
  for (std::size_t c = 0; c < hist.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
      if (static_cast<std::size_t>(manifest.samples[i].label) == c) members.push_back(i);
    }
    deterministic_shuffle(members, rng);
    for (std::size_t k = 0; k < counts[c]; ++k) is_val[members[k]] = true;
  }
  DatasetManifest train{manifest.class_names, {}, manifest.split};
  DatasetManifest val{manifest.class_names, {}, manifest.split};
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    (is_val[i] ? val : train).samples.push_back(manifest.samples[i]);
  }
  return {std::move(train), std::move(val)};
}

// ---- DataLoader -------------------------------------------------------------

DataLoader::DataLoader(DatasetManifest manifest, LoaderOptions options)
    : manifest_(std::move(manifest)), options_(std::move(options)) {
  if (options_.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (options_.image_h == 0 || options_.image_w == 0) throw ConfigError("image size must be positive");
  if (options_.augment) options_.augment->validate();
  cache_.resize(manifest_.samples.size());
}

std::size_t DataLoader::num_batches() const noexcept {
  return (manifest_.samples.size() + options_.batch_size - 1) / options_.batch_size;
}

std::vector<std::size_t> DataLoader::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(manifest_.samples.size());
  std::iota(order.begin(), order.end(), 0);
  if (options_.shuffle) {
    auto rng = Xoshiro256pp::substream(options_.seed, kShuffleStreamTag | epoch, 0);
    deterministic_shuffle(order, rng);
  }
  return order;
}

const Image8& DataLoader::resized(std::size_t id, Image8& scratch) {
  if (options_.cache_decoded && cache_[id]) return *cache_[id];
  const Sample& s = manifest_.samples[id];
  Image8 img = resize_bilinear(decode_image(s.path), options_.image_h, options_.image_w);
  if (options_.cache_decoded) {
    cache_[id] = std::move(img);
    return *cache_[id];
  }
  scratch = std::move(img);
  return scratch;
}

Tensor DataLoader::sample_tensor(std::size_t sample_id, std::size_t epoch) {
  if (sample_id >= manifest_.samples.size()) throw DataError("sample id out of range");
  Image8 scratch;
  Tensor t = normalize(resized(sample_id, scratch));
  if (options_.augment) {
    auto rng = Xoshiro256pp::substream(options_.seed, kAugmentStreamTag | epoch, sample_id);
    const AffineParams p = random_affine_params(*options_.augment, rng);
    t = apply_affine(t, p, options_.augment->fill);
  }
  return t;
}

Batch DataLoader::batch(std::size_t epoch, std::size_t index) {
  if (index >= num_batches()) throw DataError("batch index out of range");
  const auto order = epoch_order(epoch);
  const std::size_t begin = index * options_.batch_size;
  const std::size_t end = std::min(begin + options_.batch_size, order.size());
  const std::size_t n = end - begin;
  const std::size_t plane = 3 * options_.image_h * options_.image_w;
  Batch b;
  b.images = Tensor({n, 3, options_.image_h, options_.image_w});
  b.sample_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                      order.begin() + static_cast<std::ptrdiff_t>(end));
  b.labels.resize(n);
  parallel_for(n, [&](std::size_t k) {
    const std::size_t id = b.sample_ids[k];
    const Tensor t = sample_tensor(id, epoch);
    std::copy(t.data().begin(), t.data().end(), b.images.ptr() + k * plane);
  });
  for (std::size_t k = 0; k < n; ++k) b.labels[k] = manifest_.samples[b.sample_ids[k]].label;
  return b;
}

void DataLoader::for_each_batch(std::size_t epoch, const std::function<void(const Batch&)>& fn) {
  for (std::size_t i = 0; i < num_batches(); ++i) fn(batch(epoch, i));
}

}  // namespace retinet
