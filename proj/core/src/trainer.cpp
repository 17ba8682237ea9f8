#include "retinet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "retinet/error.hpp"
#include "retinet/fileio.hpp"
#include "retinet/weights_io.hpp"

namespace retinet {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0, got " + std::to_string(lr));
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must be in [0,1), got " + std::to_string(beta1));
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must be in [0,1), got " + std::to_string(beta2));
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (!(val_frac >= 0.0 && val_frac < 1.0)) {
    throw ConfigError("val_frac must be in [0,1), got " + std::to_string(val_frac));
  }
  if (augment) augment->validate();
}

const AdamSlot* AdamState::find(std::string_view name) const {
  for (const auto& s : slots) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

void adam_step(NamedParams& params, AdamState& state, const TrainConfig& cfg) {
  for (const auto& p : params) {
    if (!p.updatable()) continue;
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      if (!std::isfinite(p.grad[i])) {
        throw NumericError("non-finite gradient in '" + p.name + "' at element " + std::to_string(i));
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  std::size_t slot = 0;
  for (auto& p : params) {
    if (!p.updatable()) continue;
    if (slot == state.slots.size()) {
      state.slots.push_back({p.name, Tensor::zeros_like(p.value), Tensor::zeros_like(p.value)});
    }
    AdamSlot& s = state.slots[slot++];
    if (s.name != p.name || s.m.shape() != p.value.shape()) {
      throw ConfigError("optimizer state does not match parameter '" + p.name + "'");
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double m = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g * g;
      s.m[i] = static_cast<float>(m);
      s.v[i] = static_cast<float>(v);
      const double m_hat = static_cast<double>(s.m[i]) / c1;
      const double v_hat = static_cast<double>(s.v[i]) / c2;
      p.value[i] = static_cast<float>(p.value[i] - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
    }
  }
  if (slot != state.slots.size()) throw ConfigError("optimizer state has slots for unknown parameters");
  for (auto& p : params) p.grad.fill(0.0f);
}

// ---- epoch logs ---------------------------------------------------------------

std::string to_json_line(const EpochLog& log) {
  ordered_json j;
  j["epoch"] = log.epoch;
  j["train_loss"] = log.train_loss;
  j["train_acc"] = log.train_acc;
  j["val_loss"] = log.val_loss ? ordered_json(*log.val_loss) : ordered_json(nullptr);
  j["val_acc"] = log.val_acc ? ordered_json(*log.val_acc) : ordered_json(nullptr);
  return j.dump();
}

EpochLog parse_epoch_log(std::string_view line) {
  try {
    const auto j = ordered_json::parse(line);
    EpochLog log;
    log.epoch = j.at("epoch").get<std::size_t>();
    log.train_loss = j.at("train_loss").get<double>();
    log.train_acc = j.at("train_acc").get<double>();
    if (j.contains("val_loss") && !j["val_loss"].is_null()) log.val_loss = j["val_loss"].get<double>();
    if (j.contains("val_acc") && !j["val_acc"].is_null()) log.val_acc = j["val_acc"].get<double>();
    return log;
  } catch (const ordered_json::exception& e) {
    throw DataError(std::string("malformed epoch log: ") + e.what());
  }
}

std::vector<EpochLog> read_epoch_logs(const fs::path& path) {
  std::istringstream in(read_file_text(path));
  std::vector<EpochLog> logs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      logs.push_back(parse_epoch_log(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return logs;
}

// ---- epochs -------------------------------------------------------------------

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expects [N,K], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

EpochResult train_epoch(Model& model, DataLoader& loader, std::size_t epoch, AdamState& adam,
                        const TrainConfig& cfg, Xoshiro256pp& rng) {
  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t b = 0; b < loader.num_batches(); ++b) {
    const Batch batch = loader.batch(epoch, b);
    const ForwardPass pass = model.forward(batch.images, ops::Mode::train, &rng);
    const auto sce = ops::softmax_cross_entropy(pass.logits, std::span<const int>(batch.labels));
    model.backward(pass, sce.grad_logits);
    adam_step(model.params(), adam, cfg);
    const auto pred = argmax_rows(pass.logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
    loss_sum += sce.loss * static_cast<double>(batch.labels.size());
    seen += batch.labels.size();
  }
  if (seen == 0) throw DataError("train_epoch: empty training set");
  return {loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen)};
}

EvalResult evaluate(const Model& model, DataLoader& loader, std::size_t epoch) {
  EvalResult r{0.0, ConfusionMatrix(loader.manifest().class_names)};
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < loader.num_batches(); ++b) {
    const Batch batch = loader.batch(epoch, b);
    const Tensor logits = model.infer(batch.images);
    const auto sce = ops::softmax_cross_entropy(logits, std::span<const int>(batch.labels));
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) r.confusion.update(batch.labels[i], pred[i]);
    loss_sum += sce.loss * static_cast<double>(batch.labels.size());
  }
  if (r.confusion.total() == 0) throw DataError("evaluate: empty dataset");
  r.loss = loss_sum / static_cast<double>(r.confusion.total());
  return r;
}

// ---- checkpoints --------------------------------------------------------------

namespace {

constexpr std::uint8_t kStateMagic[4] = {'L', 'W', 'A', 'D'};
constexpr std::uint32_t kStateVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_training_state(const TrainingCheckpoint& ckpt) {
  ByteWriter w;
  w.raw(kStateMagic);
  w.u32(kStateVersion);
  w.u64(ckpt.epoch);
  w.u64(ckpt.adam.step);
  for (auto s : ckpt.rng) w.u64(s);
  w.u32(static_cast<std::uint32_t>(ckpt.adam.slots.size()));
  for (const auto& slot : ckpt.adam.slots) {
    w.str16(slot.name);
    w.u8(static_cast<std::uint8_t>(slot.m.rank()));
    for (auto d : slot.m.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : slot.m.data()) w.f32(v);
    for (float v : slot.v.data()) w.f32(v);
  }
  w.u32(crc32(w.bytes()));
  return w.take();
}

TrainingCheckpoint decode_training_state(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "training state");
  if (bytes.size() < 4 + 4 + 16 + 32 + 4 + 4) r.fail("file too short");
  const auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kStateMagic)) r.fail("bad magic bytes");
  if (const auto version = r.u32(); version != kStateVersion) {
    r.fail("unsupported version " + std::to_string(version));
  }
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.subspan(body), "training state");
  if (crc32(bytes.first(body)) != tail.u32()) r.fail("CRC mismatch, file is corrupted");

  ByteReader b(bytes.first(body), "training state");
  b.raw(8);
  TrainingCheckpoint ckpt;
  ckpt.epoch = b.u64();
  ckpt.adam.step = b.u64();
  for (auto& s : ckpt.rng) s = b.u64();
  const std::uint32_t count = b.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    AdamSlot slot;
    slot.name = b.str16();
    const std::uint8_t rank = b.u8();
    if (rank < 1 || rank > 4) b.fail("slot '" + slot.name + "' has unsupported rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = b.u32();
      if (d == 0) b.fail("slot '" + slot.name + "' has a zero dimension");
      numel *= d;
    }
    if (numel > b.remaining() / 8) b.fail("slot '" + slot.name + "' truncated");
    std::vector<float> m(numel), v(numel);
    for (auto& x : m) x = b.f32();
    for (auto& x : v) x = b.f32();
    slot.m = Tensor(shape, std::move(m));
    slot.v = Tensor(std::move(shape), std::move(v));
    ckpt.adam.slots.push_back(std::move(slot));
  }
  if (b.remaining() != 0) b.fail("unexpected trailing bytes");
  return ckpt;
}

fs::path checkpoint_weights_path(const fs::path& dir, std::size_t epoch) {
  return dir / ("epoch_" + std::to_string(epoch) + ".lwnn");
}

fs::path checkpoint_state_path(const fs::path& dir, std::size_t epoch) {
  return dir / ("epoch_" + std::to_string(epoch) + ".adam");
}

void checkpoint_save(const Model& model, const TrainingCheckpoint& ckpt, const fs::path& dir) {
  save_weights(model, checkpoint_weights_path(dir, ckpt.epoch));
  write_file_atomic(checkpoint_state_path(dir, ckpt.epoch), encode_training_state(ckpt));
}

TrainingCheckpoint checkpoint_load(Model& model, const fs::path& dir, std::size_t epoch) {
  const fs::path state_path = checkpoint_state_path(dir, epoch);
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(state_path);
  } catch (const DataError& e) {
    throw WeightsError(e.what());
  }
  TrainingCheckpoint ckpt;
  try {
    ckpt = decode_training_state(bytes);
  } catch (const WeightsError& e) {
    throw WeightsError(state_path.string() + ": " + e.what());
  }
  if (ckpt.epoch != epoch) {
    throw WeightsError(state_path.string() + ": records epoch " + std::to_string(ckpt.epoch));
  }
  std::size_t slot = 0;
  for (const auto& p : model.params()) {
    if (!p.updatable() || ckpt.adam.slots.empty()) continue;
    if (slot >= ckpt.adam.slots.size() || ckpt.adam.slots[slot].name != p.name ||
        ckpt.adam.slots[slot].m.shape() != p.value.shape()) {
      throw ShapeError(state_path.string() + ": optimizer state does not match parameter '" + p.name + "'");
    }
    ++slot;
  }
  if (slot != ckpt.adam.slots.size()) {
    throw ShapeError(state_path.string() + ": optimizer state has slots for unknown parameters");
  }
  load_weights(model, checkpoint_weights_path(dir, epoch), true);
  return ckpt;
}

// ---- fit ----------------------------------------------------------------------

namespace {

std::size_t pick_best(const std::vector<EpochLog>& logs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logs.size(); ++i) {
    const auto score = [](const EpochLog& l) { return l.val_acc.value_or(l.train_acc); };
    if (score(logs[i]) > score(logs[best])) best = i;
  }
  return logs[best].epoch;
}

}  // namespace

FitResult fit(Model& model, const DatasetManifest& train_manifest, const TrainConfig& cfg,
              const fs::path& out_dir, const FitOptions& options) {
  cfg.validate();
  if (train_manifest.samples.empty()) throw DataError("training manifest is empty");
  freeze_backbone(model, cfg.freeze_backbone);

  DatasetManifest train = train_manifest;
  DatasetManifest val{train_manifest.class_names, {}, train_manifest.split};
  if (cfg.val_frac > 0.0) {
    Xoshiro256pp split_rng(cfg.seed, kSplitStream);
    std::tie(train, val) = stratified_split(train_manifest, cfg.val_frac, split_rng);
  }
  if (train.samples.empty()) throw DataError("validation split leaves no training samples");

  LoaderOptions train_opts;
  train_opts.batch_size = cfg.batch_size;
  train_opts.shuffle = true;
  train_opts.augment = cfg.augment;
  train_opts.seed = cfg.seed;
  train_opts.image_h = model.config().input_h;
  train_opts.image_w = model.config().input_w;
  DataLoader train_loader(std::move(train), train_opts);

  std::optional<DataLoader> val_loader;
  if (!val.samples.empty()) {
    LoaderOptions val_opts = train_opts;
    val_opts.shuffle = false;
    val_opts.augment.reset();
    val_loader.emplace(std::move(val), val_opts);
  }

  fs::create_directories(out_dir);
  const fs::path log_path = out_dir / "log.jsonl";

  FitResult result;
  AdamState adam;
  Xoshiro256pp rng(cfg.seed, kDropoutStream);
  std::size_t start = 1;
  if (options.resume_from && *options.resume_from > 0) {
    const std::size_t k = *options.resume_from;
    if (k > cfg.epochs) {
      throw ConfigError("cannot resume from epoch " + std::to_string(k) + " of a " +
                        std::to_string(cfg.epochs) + "-epoch run");
    }
    TrainingCheckpoint ckpt = checkpoint_load(model, out_dir, k);
    adam = std::move(ckpt.adam);
    rng = Xoshiro256pp::from_state(ckpt.rng);
    auto logs = read_epoch_logs(log_path);
    if (logs.size() < k) {
      throw DataError(log_path.string() + ": has " + std::to_string(logs.size()) +
                      " epochs, resume needs " + std::to_string(k));
    }
    logs.resize(k);
    result.logs = std::move(logs);
    start = k + 1;
  }

  for (std::size_t epoch = start; epoch <= cfg.epochs; ++epoch) {
    const EpochResult tr = train_epoch(model, train_loader, epoch, adam, cfg, rng);
    EpochLog log{epoch, tr.loss, tr.accuracy, std::nullopt, std::nullopt};
    if (val_loader) {
      const EvalResult ev = evaluate(model, *val_loader);
      log.val_loss = ev.loss;
      log.val_acc = static_cast<double>(ev.confusion.trace()) / static_cast<double>(ev.confusion.total());
    }
    checkpoint_save(model, {epoch, adam, rng.state()}, out_dir);
    result.logs.push_back(log);

    std::string text;
    for (const auto& l : result.logs) text += to_json_line(l) + "\n";
    write_file_atomic(log_path, text);
    write_file_atomic(out_dir / "best", std::to_string(pick_best(result.logs)) + "\n");
    if (options.on_epoch) options.on_epoch(log);
  }

  result.best_epoch = pick_best(result.logs);
  result.best_checkpoint = checkpoint_weights_path(out_dir, result.best_epoch);
  return result;
}

}  // namespace retinet
