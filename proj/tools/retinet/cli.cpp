#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>

#include "chart.hpp"
#include "retinet/dataset.hpp"
#include "retinet/error.hpp"
#include "retinet/fileio.hpp"
#include "retinet/image.hpp"
#include "retinet/metrics.hpp"
#include "retinet/trainer.hpp"
#include "retinet/weights_io.hpp"
#include "run_config.hpp"

namespace retinet::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Checkpoint argument: a run directory (uses its `best` epoch) or an .lwnn file.
struct ResolvedCheckpoint {
  fs::path weights;
  fs::path run_dir;
};

ResolvedCheckpoint resolve_checkpoint(const fs::path& arg) {
  if (fs::is_directory(arg)) {
    const fs::path best = arg / "best";
    if (!fs::exists(best)) throw WeightsError(arg.string() + ": run directory has no 'best' file");
    std::string text = read_file_text(best);
    text.erase(std::remove_if(text.begin(), text.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); }),
               text.end());
    std::size_t epoch = 0;
    try {
      epoch = std::stoul(text);
    } catch (const std::exception&) {
      throw WeightsError(best.string() + ": expected an epoch number");
    }
    return {checkpoint_weights_path(arg, epoch), arg};
  }
  if (!fs::exists(arg)) throw WeightsError("checkpoint '" + arg.string() + "' does not exist");
  return {arg, arg.parent_path()};
}

RunConfig config_for_checkpoint(const ResolvedCheckpoint& ckpt, const std::string& config_arg) {
  const fs::path path = config_arg.empty() ? ckpt.run_dir / "config.json" : fs::path(config_arg);
  if (!fs::exists(path)) {
    throw ConfigError("model config '" + path.string() +
                      "' not found (pass --config with the run's config.json)");
  }
  RunConfig cfg = load_run_config(path);
  cfg.finalize();
  return cfg;
}

Model load_model(const RunConfig& cfg, const fs::path& weights) {
  Model model = build_model(cfg.model, cfg.train.seed);
  load_weights(model, weights, true);
  return model;
}

Tensor load_input(const fs::path& image, const ModelConfig& mc) {
  if (!fs::exists(image)) throw DataError("image '" + image.string() + "' does not exist");
  const Image8 img = resize_bilinear(decode_image(image), mc.input_h, mc.input_w);
  return normalize(img).reshaped({1, 3, mc.input_h, mc.input_w});
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string arch = "mobilenet_v2";
  std::string weights;
  bool freeze_backbone = true;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 0.001;
  std::uint64_t seed = 42;
  std::string out;
  double val_frac = 0.1;
  std::size_t input_size = 224;
  std::size_t resume = 0;
  bool no_augment = false;
};

int cmd_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config);
  const auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
  if (given("--manifest")) cfg.manifest = a.manifest;
  if (given("--arch")) cfg.model.arch = parse_arch(a.arch);
  if (given("--weights")) cfg.weights = fs::path(a.weights);
  if (given("--freeze-backbone")) cfg.train.freeze_backbone = a.freeze_backbone;
  if (given("--epochs")) cfg.train.epochs = a.epochs;
  if (given("--batch-size")) cfg.train.batch_size = a.batch_size;
  if (given("--lr")) cfg.train.lr = a.lr;
  if (given("--seed")) cfg.train.seed = a.seed;
  if (given("--out")) cfg.out_dir = a.out;
  if (given("--val-frac")) cfg.train.val_frac = a.val_frac;
  if (given("--input-size")) cfg.model.input_h = cfg.model.input_w = a.input_size;
  if (given("--no-augment")) cfg.augment_enabled = !a.no_augment;

  if (cfg.manifest.empty()) throw ConfigError("train: --manifest is required");
  if (cfg.out_dir.empty()) throw ConfigError("train: --out is required");
  const DatasetManifest manifest = load_manifest(cfg.manifest, Split::train);
  cfg.class_names = manifest.class_names;
  cfg.finalize();
  if (cfg.weights && !fs::exists(*cfg.weights)) {
    throw WeightsError("weights file '" + cfg.weights->string() + "' does not exist");
  }

  fs::create_directories(cfg.out_dir);
  save_run_config(cfg, cfg.out_dir / "config.json");

  Model model = build_model(cfg.model, cfg.train.seed);
  if (cfg.weights && a.resume == 0) {
    const LoadReport report = load_weights(model, *cfg.weights, false);
    if (!report.shape_conflicts.empty()) {
      throw WeightsError(cfg.weights->string() + ": shape conflict " + report.shape_conflicts.front());
    }
    if (report.loaded.empty()) throw WeightsError(cfg.weights->string() + ": no tensor matches the model");
    err << "loaded " << report.loaded.size() << " tensors from " << cfg.weights->string() << " ("
        << report.missing.size() << " missing, " << report.extra.size() << " extra)\n";
  }

  FitOptions options;
  if (a.resume > 0) options.resume_from = a.resume;
  options.on_epoch = [&](const EpochLog& l) {
    out << "epoch " << l.epoch << "/" << cfg.train.epochs << " train_loss " << g9(l.train_loss)
        << " train_acc " << g9(l.train_acc);
    if (l.val_acc) out << " val_loss " << g9(*l.val_loss) << " val_acc " << g9(*l.val_acc);
    out << std::endl;
  };
  const FitResult result = fit(model, manifest, cfg.train, cfg.out_dir, options);
  out << "best epoch " << result.best_epoch << ": " << result.best_checkpoint.generic_string() << "\n";
  return kExitOk;
}

// ---- evaluate -----------------------------------------------------------------

struct EvaluateArgs {
  std::string manifest;
  std::string checkpoint;
  std::string format = "text";
  std::string config;
  std::string confusion_out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const ReportFormat format = parse_report_format(a.format);
  const ResolvedCheckpoint ckpt = resolve_checkpoint(a.checkpoint);
  const RunConfig cfg = config_for_checkpoint(ckpt, a.config);
  const DatasetManifest manifest = load_manifest(a.manifest, Split::test);
  if (manifest.class_names != cfg.class_names) {
    throw ConfigError(a.manifest + ": classes do not match the checkpoint's config");
  }
  const Model model = load_model(cfg, ckpt.weights);
  LoaderOptions opts;
  opts.batch_size = cfg.train.batch_size;
  opts.image_h = cfg.model.input_h;
  opts.image_w = cfg.model.input_w;
  opts.cache_decoded = false;
  DataLoader loader(manifest, opts);
  const EvalResult ev = evaluate(model, loader);
  const ClassificationReport report = compute_report(ev.confusion);
  out << render_report(report, format);
  const fs::path cm_path = a.confusion_out.empty() ? ckpt.weights.parent_path() / "confusion_matrix.csv"
                                                   : fs::path(a.confusion_out);
  write_file_atomic(cm_path, render_confusion_csv(ev.confusion));
  return kExitOk;
}

// ---- predict ------------------------------------------------------------------

struct PredictArgs {
  std::string image;
  std::string checkpoint;
  std::string config;
  bool raw_logits = false;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  const ResolvedCheckpoint ckpt = resolve_checkpoint(a.checkpoint);
  const RunConfig cfg = config_for_checkpoint(ckpt, a.config);
  const Tensor input = load_input(a.image, cfg.model);
  const Model model = load_model(cfg, ckpt.weights);
  const Tensor logits = model.infer(input);
  const Tensor probs = ops::softmax(logits);
  const Tensor& shown = a.raw_logits ? logits : probs;
  out << "class " << cfg.class_names.at(static_cast<std::size_t>(argmax_rows(logits)[0])) << "\n";
  for (std::size_t k = 0; k < cfg.class_names.size(); ++k) {
    out << cfg.class_names[k] << " " << g9(shown[k]) << "\n";
  }
  return kExitOk;
}

// ---- preview-augment ----------------------------------------------------------

struct PreviewArgs {
  std::string image;
  std::uint64_t seed = 42;
  std::size_t count = 8;
  std::string out;
  std::string config;
  std::size_t input_size = 224;
};

int cmd_preview_augment(const PreviewArgs& a, const CLI::App& sub, std::ostream& out) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config);
  if (sub.get_option("--input-size")->count() > 0) cfg.model.input_h = cfg.model.input_w = a.input_size;
  cfg.augment.validate();
  if (!fs::exists(a.image)) throw DataError("image '" + a.image + "' does not exist");
  const Image8 img = resize_bilinear(decode_image(a.image), cfg.model.input_h, cfg.model.input_w);
  const Tensor base = normalize(img);
  fs::create_directories(a.out);

  ordered_json samples = ordered_json::array();
  for (std::size_t k = 0; k < a.count; ++k) {
    auto rng = Xoshiro256pp::substream(a.seed, kAugmentStreamTag, k);
    const AffineParams p = random_affine_params(cfg.augment, rng);
    const std::string name = "aug_" + std::to_string(k) + ".png";
    write_file_atomic(fs::path(a.out) / name, encode_png(to_image(apply_affine(base, p, cfg.augment.fill))));
    samples.push_back({{"index", k},
                       {"file", name},
                       {"theta_deg", p.theta_deg},
                       {"tx_frac", p.tx_frac},
                       {"ty_frac", p.ty_frac},
                       {"shear", p.shear},
                       {"zoom", p.zoom},
                       {"flip", p.flip}});
  }
  ordered_json j;
  j["image"] = fs::path(a.image).generic_string();
  j["seed"] = a.seed;
  j["count"] = a.count;
  j["augment"] = to_json(cfg)["augment"];
  j["samples"] = samples;
  write_file_atomic(fs::path(a.out) / "params.json", j.dump(2) + "\n");
  out << "wrote " << a.count << " augmented images and params.json to " << a.out << "\n";
  return kExitOk;
}

// ---- curves -------------------------------------------------------------------

struct CurvesArgs {
  std::string log;
  std::string out;
  std::string chart;
};

int cmd_curves(const CurvesArgs& a, std::ostream& out) {
  if (!fs::exists(a.log)) throw DataError("log '" + a.log + "' does not exist");
  const auto logs = read_epoch_logs(a.log);
  std::string csv = "epoch,train_loss,val_loss,train_acc,val_acc\n";
  for (const auto& l : logs) {
    csv += std::to_string(l.epoch) + "," + g17(l.train_loss) + "," + (l.val_loss ? g17(*l.val_loss) : "") + "," +
           g17(l.train_acc) + "," + (l.val_acc ? g17(*l.val_acc) : "") + "\n";
  }
  write_file_atomic(a.out, csv);
  if (!a.chart.empty()) write_file_atomic(a.chart, encode_png(render_curves(logs)));
  out << "wrote " << logs.size() << " epochs to " << a.out << "\n";
  return kExitOk;
}

// ---- param-shapes -------------------------------------------------------------

struct ParamShapesArgs {
  std::string arch = "mobilenet_v2";
  std::size_t num_classes = 3;
  std::size_t input_size = 224;
  bool backbone_only = false;
  std::string weights;
  bool strict = false;
};

int cmd_param_shapes(const ParamShapesArgs& a, std::ostream& out) {
  ModelConfig mc;
  mc.arch = parse_arch(a.arch);
  mc.num_classes = a.num_classes;
  mc.input_h = mc.input_w = a.input_size;
  mc.validate();
  const Model model = a.backbone_only ? build_backbone(mc) : attach_classifier_head(build_backbone(mc), mc.num_classes);
  if (a.weights.empty()) {
    for (const auto& p : model.params()) {
      out << p.name << "\t" << shape_str(p.value.shape()) << "\t" << p.value.size() << "\t"
          << (p.trainable ? "trainable" : "state") << "\n";
    }
    out << "total " << model.param_count(false) << " trainable " << model.param_count(true) << "\n";
    return kExitOk;
  }
  const auto tensors = read_lwnn(a.weights);
  std::size_t problems = 0;
  std::vector<bool> used(tensors.size(), false);
  for (const auto& p : model.params()) {
    const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == p.name; });
    std::string status = "missing";
    if (it != tensors.end()) {
      used[static_cast<std::size_t>(it - tensors.begin())] = true;
      status = it->tensor.shape() == p.value.shape() ? "ok" : "shape " + shape_str(it->tensor.shape());
    }
    if (status != "ok") ++problems;
    out << p.name << "\t" << shape_str(p.value.shape()) << "\t" << status << "\n";
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (used[i]) continue;
    ++problems;
    out << tensors[i].name << "\t" << shape_str(tensors[i].tensor.shape()) << "\textra\n";
  }
  out << "mismatches " << problems << "\n";
  if (a.strict && problems > 0) throw WeightsError(a.weights + ": " + std::to_string(problems) + " tensor mismatch(es)");
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"retinet: lightweight CNN training and evaluation for retinal fundus images"};
  app.name("retinet");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Fine-tune a model on a manifest and write checkpoints");
  train->add_option("--config", ta.config, "Run config JSON; flags override its values");
  train->add_option("--manifest", ta.manifest, "Training manifest CSV");
  train->add_option("--arch", ta.arch, "Backbone: mobilenet_v2 or nasnet_mobile");
  train->add_option("--weights", ta.weights, "Pretrained LWNN weights, loaded by name (non-strict)");
  train->add_flag("--freeze-backbone,!--no-freeze-backbone", ta.freeze_backbone,
                  "Freeze backbone parameters (head-only fine-tuning)");
  train->add_option("--epochs", ta.epochs, "Training epochs");
  train->add_option("--batch-size", ta.batch_size, "Mini-batch size");
  train->add_option("--lr", ta.lr, "Adam learning rate");
  train->add_option("--seed", ta.seed, "Seed for init, split, shuffling, augmentation and dropout");
  train->add_option("--out", ta.out, "Output run directory");
  train->add_option("--val-frac", ta.val_frac, "Stratified validation fraction carved from training data");
  train->add_option("--input-size", ta.input_size, "Square input size (multiple of 32)");
  train->add_option("--resume", ta.resume, "Resume after this completed epoch in --out (0 = fresh run)");
  train->add_flag("--no-augment", ta.no_augment, "Disable training-time augmentation");

  EvaluateArgs ea;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Report accuracy/recall/precision/F1 on a test manifest");
  evaluate_cmd->add_option("--manifest", ea.manifest, "Test manifest CSV")->required();
  evaluate_cmd->add_option("--checkpoint", ea.checkpoint, "Run directory (uses its best epoch) or .lwnn file")->required();
  evaluate_cmd->add_option("--format", ea.format, "Report format: text, json or csv");
  evaluate_cmd->add_option("--config", ea.config, "Run config (default: config.json next to the checkpoint)");
  evaluate_cmd->add_option("--confusion-out", ea.confusion_out,
                           "Confusion matrix CSV path (default: confusion_matrix.csv next to the checkpoint)");

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Classify one image and print class probabilities");
  predict->add_option("--image", pa.image, "PNG or PPM/PGM image")->required();
  predict->add_option("--checkpoint", pa.checkpoint, "Run directory or .lwnn file")->required();
  predict->add_option("--config", pa.config, "Run config (default: config.json next to the checkpoint)");
  predict->add_flag("--raw-logits", pa.raw_logits, "Print pre-softmax logits instead of probabilities");

  PreviewArgs va;
  auto* preview = app.add_subcommand("preview-augment", "Write augmented samples of one image plus their parameters");
  preview->add_option("--image", va.image, "Source image")->required();
  preview->add_option("--seed", va.seed, "Augmentation seed");
  preview->add_option("--count", va.count, "Number of augmented images");
  preview->add_option("--out", va.out, "Output directory")->required();
  preview->add_option("--config", va.config, "Run config whose augment section is used");
  preview->add_option("--input-size", va.input_size, "Resize target before augmentation");

  CurvesArgs ca;
  auto* curves = app.add_subcommand("curves", "Convert log.jsonl to a learning-curve CSV and optional PNG chart");
  curves->add_option("--log", ca.log, "log.jsonl from a training run")->required();
  curves->add_option("--out", ca.out, "CSV output path")->required();
  curves->add_option("--chart", ca.chart, "PNG chart output path");

  ParamShapesArgs sa;
  auto* shapes = app.add_subcommand("param-shapes", "List parameter names and shapes; check an LWNN file against them");
  shapes->add_option("--arch", sa.arch, "Backbone: mobilenet_v2 or nasnet_mobile");
  shapes->add_option("--num-classes", sa.num_classes, "Classifier outputs");
  shapes->add_option("--input-size", sa.input_size, "Square input size");
  shapes->add_flag("--backbone-only", sa.backbone_only, "Omit the classifier head");
  shapes->add_option("--weights", sa.weights, "LWNN file to compare against the model");
  shapes->add_flag("--strict", sa.strict, "Exit 4 when the file does not match exactly");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(ta, *train, out, err);
    if (*evaluate_cmd) return cmd_evaluate(ea, out);
    if (*predict) return cmd_predict(pa, out);
    if (*preview) return cmd_preview_augment(va, *preview, out);
    if (*curves) return cmd_curves(ca, out);
    if (*shapes) return cmd_param_shapes(sa, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const WeightsError& e) {
    err << "weights error: " << e.what() << "\n";
    return kExitWeights;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace retinet::cli
