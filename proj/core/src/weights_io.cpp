#include "retinet/weights_io.hpp"

#include <algorithm>
#include <array>
#include <unordered_map>
#include <unordered_set>

#include "retinet/error.hpp"
#include "retinet/fileio.hpp"

namespace retinet {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{0x4C, 0x57, 0x4E, 0x4E};  // "LWNN"

}  // namespace

std::vector<std::uint8_t> encode_lwnn(std::span<const NamedTensor> tensors) {
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kLwnnVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.tensor.empty()) throw WeightsError("cannot encode empty tensor '" + t.name + "'");
    w.str16(t.name);
    w.u8(static_cast<std::uint8_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) {
      if (d > 0xffffffffULL) throw WeightsError("dimension too large in '" + t.name + "'");
      w.u32(static_cast<std::uint32_t>(d));
    }
    for (float v : t.tensor.data()) w.f32(v);
  }
  const std::uint32_t crc = crc32(w.bytes());
  w.u32(crc);
  return w.take();
}

std::vector<NamedTensor> decode_lwnn(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "LWNN");
  if (bytes.size() < 16) r.fail("file too short to be LWNN");
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) r.fail("bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kLwnnVersion) r.fail("unsupported version " + std::to_string(version));
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.subspan(body), "LWNN");
  const std::uint32_t stored_crc = tail.u32();
  if (crc32(bytes.first(body)) != stored_crc) r.fail("CRC mismatch, file is corrupted");

  ByteReader b(bytes.first(body), "LWNN");
  b.raw(8);
  const std::uint32_t count = b.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = b.str16();
    if (!seen.insert(t.name).second) b.fail("duplicate tensor name '" + t.name + "'");
    const std::uint8_t rank = b.u8();
    if (rank < 1 || rank > 4) b.fail("tensor '" + t.name + "' has unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = b.u32();
      if (d == 0) b.fail("tensor '" + t.name + "' has a zero dimension");
      numel *= d;
    }
    if (numel > b.remaining() / 4) b.fail("tensor '" + t.name + "' payload truncated");
    std::vector<float> values(numel);
    for (auto& v : values) v = b.f32();
    t.tensor = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(t));
  }
  if (b.remaining() != 0) b.fail(std::to_string(b.remaining()) + " unexpected trailing bytes");
  return out;
}

std::vector<NamedTensor> read_lwnn(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const DataError& e) {
    throw WeightsError(e.what());
  }
  try {
    return decode_lwnn(bytes);
  } catch (const WeightsError& e) {
    throw WeightsError(path.string() + ": " + e.what());
  }
}

std::vector<NamedTensor> model_tensors(const Model& model) {
  std::vector<NamedTensor> out;
  out.reserve(model.params().size());
  for (const auto& p : model.params()) out.push_back({p.name, p.value});
  return out;
}

void save_weights(const Model& model, const std::filesystem::path& path) {
  const auto tensors = model_tensors(model);
  write_file_atomic(path, encode_lwnn(tensors));
}

LoadReport apply_tensors(Model& model, std::span<const NamedTensor> tensors, bool strict) {
  LoadReport report;
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name.emplace(t.name, &t);
  std::vector<std::pair<Param*, const NamedTensor*>> plan;
  for (auto& p : model.params()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      report.missing.push_back(p.name);
      continue;
    }
    if (it->second->tensor.shape() != p.value.shape()) {
      report.shape_conflicts.push_back(p.name + ": file " + shape_str(it->second->tensor.shape()) +
                                       " vs model " + shape_str(p.value.shape()));
    } else {
      plan.emplace_back(&p, it->second);
      report.loaded.push_back(p.name);
    }
    by_name.erase(it);
  }
  for (const auto& t : tensors) {
    if (by_name.count(t.name)) report.extra.push_back(t.name);
  }
  if (strict && (!report.missing.empty() || !report.extra.empty() || !report.shape_conflicts.empty())) {
    std::string msg = "strict load failed:";
    if (!report.shape_conflicts.empty()) msg += " shape conflict " + report.shape_conflicts.front();
    if (!report.missing.empty()) msg += " missing " + std::to_string(report.missing.size()) + " tensor(s), first '" + report.missing.front() + "'";
    if (!report.extra.empty()) msg += " extra " + std::to_string(report.extra.size()) + " tensor(s), first '" + report.extra.front() + "'";
    throw WeightsError(msg);
  }
  for (auto& [param, t] : plan) param->value = t->tensor;
  return report;
}

LoadReport load_weights(Model& model, const std::filesystem::path& path, bool strict) {
  const auto tensors = read_lwnn(path);
  return apply_tensors(model, tensors, strict);
}

}  // namespace retinet
