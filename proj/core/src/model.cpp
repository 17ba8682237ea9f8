#include "retinet/model.hpp"

#include <cmath>
#include <set>

namespace retinet {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

std::string to_string(Arch arch) {
  return arch == Arch::mobilenet_v2 ? "mobilenet_v2" : "nasnet_mobile";
}

Arch parse_arch(std::string_view name) {
  if (name == "mobilenet_v2") return Arch::mobilenet_v2;
  if (name == "nasnet_mobile") return Arch::nasnet_mobile;
  throw ConfigError("unknown arch '" + std::string(name) +
                    "' (expected mobilenet_v2 or nasnet_mobile)");
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise: return "depthwise";
    case LayerKind::bn: return "bn";
    case LayerKind::act: return "act";
    case LayerKind::gap: return "gap";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::add: return "add";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (num_classes < 2) {
    throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  }
  if (input_h == 0 || input_w == 0 || input_h % 32 != 0 || input_w % 32 != 0) {
    throw ConfigError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " must be a positive multiple of 32");
  }
  if (head.dense_units == 0) throw ConfigError("head dense_units must be >= 1");
  if (!(head.dropout_rate >= 0.0 && head.dropout_rate < 1.0)) {
    throw ConfigError("head dropout_rate must be in [0,1), got " +
                      std::to_string(head.dropout_rate));
  }
  if (!(width_multiplier > 0.0) || !std::isfinite(width_multiplier)) {
    throw ConfigError("width_multiplier must be positive");
  }
  if (nasnet.stem_filters == 0 || nasnet.cells_per_stage == 0) {
    throw ConfigError("nasnet stem_filters and cells_per_stage must be >= 1");
  }
  for (auto w : nasnet.stage_widths) {
    if (w == 0) throw ConfigError("nasnet stage widths must be >= 1");
  }
}

// ---- NamedParams --------------------------------------------------------

Param& NamedParams::add(std::string name, Shape shape, bool trainable) {
  if (index_.count(name)) throw ShapeError("duplicate parameter name '" + name + "'");
  index_.emplace(name, items_.size());
  Param p;
  p.name = std::move(name);
  p.value = Tensor(shape);
  p.grad = Tensor(shape);
  p.trainable = trainable;
  items_.push_back(std::move(p));
  return items_.back();
}

Param* NamedParams::find(std::string_view name) {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &items_[it->second];
}

const Param* NamedParams::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &items_[it->second];
}

// ---- Model construction ---------------------------------------------------

Model::Model(ModelConfig config) : config_(std::move(config)) {}

std::size_t Model::find_node(std::string_view name) const {
  auto it = node_index_.find(std::string(name));
  if (it == node_index_.end()) throw ShapeError("no node named '" + std::string(name) + "'");
  return it->second;
}

std::size_t Model::add_node(std::string name, LayerSpec spec, std::vector<std::size_t> inputs) {
  if (node_index_.count(name)) throw ShapeError("duplicate node name '" + name + "'");
  for (auto i : inputs) {
    if (i >= nodes_.size()) {
      throw ShapeError("node '" + name + "' refers to upstream index " + std::to_string(i) +
                       " which does not exist yet");
    }
  }
  LayerNode node;
  node.name = name;
  node.inputs = inputs;
  const auto fail = [&](const std::string& what) -> void {
    throw ShapeError("node '" + name + "': " + what);
  };
  const auto expect_inputs = [&](std::size_t n) {
    if (inputs.size() != n) {
      fail("expects " + std::to_string(n) + " input(s), got " + std::to_string(inputs.size()));
    }
  };
  const auto in_shape = [&](std::size_t k) -> const Shape& { return nodes_[inputs[k]].sample_shape; };
  const auto expect_chw = [&]() {
    if (in_shape(0).size() != 3) fail("expects a [C,H,W] input, got " + shape_str(in_shape(0)));
  };
  const auto add_param = [&](const std::string& suffix, Shape shape, bool trainable = true) {
    params_.add(name + "/" + suffix, std::move(shape), trainable);
    node.params.push_back(params_.size() - 1);
  };

  std::visit(
      Overloaded{
          [&](InputLayer&) {
            expect_inputs(0);
            node.sample_shape = {3, config_.input_h, config_.input_w};
          },
          [&](ConvLayer& l) {
            expect_inputs(1);
            expect_chw();
            const Shape& s = in_shape(0);
            const Shape wshape{l.spec.out_channels, s[0] / std::max<std::size_t>(l.spec.groups, 1),
                               l.spec.kernel_h, l.spec.kernel_w};
            ops::validate_conv({1, s[0], s[1], s[2]}, wshape, l.spec);
            const auto geo = ops::conv_geometry(s[1], s[2], l.spec);
            node.sample_shape = {l.spec.out_channels, geo.out_h, geo.out_w};
            add_param("weights", wshape);
            if (l.bias) add_param("bias", {l.spec.out_channels});
          },
          [&](DepthwiseLayer& l) {
            expect_inputs(1);
            expect_chw();
            const Shape& s = in_shape(0);
            l.spec.groups = s[0];
            l.spec.out_channels = s[0];
            const Shape wshape{s[0], 1, l.spec.kernel_h, l.spec.kernel_w};
            ops::validate_conv({1, s[0], s[1], s[2]}, wshape, l.spec);
            const auto geo = ops::conv_geometry(s[1], s[2], l.spec);
            node.sample_shape = {s[0], geo.out_h, geo.out_w};
            add_param("weights", wshape);
          },
          [&](BatchNormLayer&) {
            expect_inputs(1);
            expect_chw();
            const std::size_t c = in_shape(0)[0];
            node.sample_shape = in_shape(0);
            add_param("gamma", {c});
            add_param("beta", {c});
            add_param("running_mean", {c}, false);
            add_param("running_var", {c}, false);
          },
          [&](ActivationLayer&) {
            expect_inputs(1);
            node.sample_shape = in_shape(0);
          },
          [&](GlobalAvgPoolLayer&) {
            expect_inputs(1);
            expect_chw();
            node.sample_shape = {in_shape(0)[0]};
          },
          [&](FlattenLayer&) {
            expect_inputs(1);
            node.sample_shape = {shape_numel(in_shape(0))};
          },
          [&](DenseLayer& l) {
            expect_inputs(1);
            if (in_shape(0).size() != 1) fail("expects a flat [D] input, got " + shape_str(in_shape(0)));
            if (l.units == 0) fail("units must be >= 1");
            node.sample_shape = {l.units};
            add_param("weights", {in_shape(0)[0], l.units});
            add_param("bias", {l.units});
          },
          [&](DropoutLayer& l) {
            expect_inputs(1);
            if (!(l.rate >= 0.0 && l.rate < 1.0)) fail("dropout rate must be in [0,1)");
            node.sample_shape = in_shape(0);
          },
          [&](AddLayer&) {
            expect_inputs(2);
            if (in_shape(0) != in_shape(1)) {
              fail("operand shapes differ: " + shape_str(in_shape(0)) + " vs " +
                   shape_str(in_shape(1)));
            }
            node.sample_shape = in_shape(0);
          },
      },
      spec);
  node.spec = std::move(spec);
  node_index_.emplace(name, nodes_.size());
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

void Model::init_weights(std::uint64_t seed) {
  for (const auto& node : nodes_) {
    for (auto pi : node.params) {
      Param& p = params_[pi];
      Xoshiro256pp rng(seed, fnv1a(p.name));
      const std::string_view suffix = std::string_view(p.name).substr(node.name.size() + 1);
      if (suffix == "weights") {
        const Shape& s = p.value.shape();
        const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (auto& v : p.value.data()) v = static_cast<float>(rng.uniform(-limit, limit));
      } else if (suffix == "gamma" || suffix == "running_var") {
        p.value.fill(1.0f);
      } else {
        p.value.fill(0.0f);
      }
      p.grad.fill(0.0f);
    }
  }
}

void Model::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0f);
}

void Model::set_frozen(std::string_view prefix, bool frozen) {
  for (auto& p : params_) {
    if (std::string_view(p.name).substr(0, prefix.size()) == prefix) p.frozen = frozen;
  }
}

std::size_t Model::param_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (!trainable_only || p.updatable()) n += p.value.size();
  }
  return n;
}

std::vector<bool> Model::grad_plan() const {
  std::vector<bool> rg(nodes_.size(), false);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    bool r = false;
    for (auto pi : nodes_[i].params) r = r || params_[pi].updatable();
    for (auto j : nodes_[i].inputs) r = r || rg[j];
    rg[i] = r;
  }
  return rg;
}

// ---- execution ------------------------------------------------------------

namespace {

bool bn_frozen(const NamedParams& params, const LayerNode& node) {
  return params[node.params[0]].frozen;
}

// Kinds whose backward reads the forward input values.
bool backward_reads_input(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::depthwise || k == LayerKind::act ||
         k == LayerKind::dense;
}

}  // namespace

Tensor Model::execute(const Tensor& input, ops::Mode mode, Xoshiro256pp* rng, ForwardPass* pass,
                      NamedParams* mutable_params) const {
  if (nodes_.empty()) throw ShapeError("model has no nodes");
  const Shape& in_sample = nodes_[0].sample_shape;
  if (input.rank() != 4 || input.dim(1) != in_sample[0] || input.dim(2) != in_sample[1] ||
      input.dim(3) != in_sample[2]) {
    throw ShapeError("model input must be [N," + std::to_string(in_sample[0]) + "," +
                     std::to_string(in_sample[1]) + "," + std::to_string(in_sample[2]) +
                     "], got " + shape_str(input.shape()));
  }
  const std::size_t count = nodes_.size();
  const std::vector<bool> rg = pass ? grad_plan() : std::vector<bool>(count, false);

  // Which outputs must survive for backward, and how many consumers remain.
  std::vector<bool> keep(count, false);
  std::vector<std::size_t> remaining(count, 0);
  for (std::size_t i = 0; i < count; ++i) {
    for (auto j : nodes_[i].inputs) {
      ++remaining[j];
      if (rg[i] && backward_reads_input(nodes_[i].kind())) keep[j] = true;
    }
  }
  keep[count - 1] = true;

  std::uint64_t dropout_key = 0;
  if (mode == ops::Mode::train) {
    if (rng == nullptr) throw ConfigError("train-mode forward needs an RNG stream");
    dropout_key = rng->next();
  }

  std::vector<Tensor> out(count);
  if (pass) {
    pass->bn.assign(count, {});
    pass->dropout_masks.assign(count, {});
    pass->mode = mode;
    pass->batch = input.dim(0);
  }

  for (std::size_t i = 0; i < count; ++i) {
    const LayerNode& node = nodes_[i];
    const auto param = [&](std::size_t k) -> const Tensor& { return params_[node.params[k]].value; };
    const auto in = [&](std::size_t k) -> const Tensor& { return out[node.inputs[k]]; };
    switch (node.kind()) {
      case LayerKind::input:
        out[i] = input;
        break;
      case LayerKind::conv: {
        const auto& l = std::get<ConvLayer>(node.spec);
        const Tensor* bias = l.bias ? &param(1) : nullptr;
        out[i] = ops::conv2d(in(0), param(0), bias, l.spec);
        break;
      }
      case LayerKind::depthwise: {
        const auto& l = std::get<DepthwiseLayer>(node.spec);
        out[i] = ops::depthwise_conv2d<float>(in(0), param(0), nullptr, l.spec);
        break;
      }
      case LayerKind::bn: {
        const auto& l = std::get<BatchNormLayer>(node.spec);
        ops::BatchNormOptions opt;
        opt.momentum = l.momentum;
        opt.epsilon = l.epsilon;
        const bool frozen = bn_frozen(params_, node);
        opt.mode = (mode == ops::Mode::train && !frozen) ? ops::Mode::train : ops::Mode::infer;
        opt.update_running = mutable_params != nullptr;
        ops::BatchNormCache<float>* cache = (pass && rg[i]) ? &pass->bn[i] : nullptr;
        if (opt.mode == ops::Mode::train && mutable_params) {
          Tensor& rm = (*mutable_params)[node.params[2]].value;
          Tensor& rv = (*mutable_params)[node.params[3]].value;
          out[i] = ops::batch_norm(in(0), param(0), param(1), rm, rv, opt, cache);
        } else {
          Tensor rm = param(2), rv = param(3);
          opt.update_running = false;
          out[i] = ops::batch_norm(in(0), param(0), param(1), rm, rv, opt, cache);
        }
        break;
      }
      case LayerKind::act:
        out[i] = ops::activation(in(0), std::get<ActivationLayer>(node.spec).kind);
        break;
      case LayerKind::gap:
        out[i] = ops::global_avg_pool(in(0));
        break;
      case LayerKind::flatten:
        out[i] = ops::flatten(in(0));
        break;
      case LayerKind::dense:
        out[i] = ops::dense(in(0), param(0), param(1));
        break;
      case LayerKind::dropout: {
        const double rate = std::get<DropoutLayer>(node.spec).rate;
        Xoshiro256pp layer_rng(dropout_key, i);
        auto r = ops::dropout(in(0), rate, layer_rng, mode);
        out[i] = std::move(r.output);
        if (pass && rg[i]) pass->dropout_masks[i] = std::move(r.mask);
        break;
      }
      case LayerKind::add:
        out[i] = ops::add(in(0), in(1));
        break;
    }
    for (auto j : node.inputs) {
      if (--remaining[j] == 0 && !keep[j]) out[j] = Tensor();
    }
  }
  Tensor logits = out[count - 1];
  if (pass) {
    for (std::size_t i = 0; i + 1 < count; ++i) {
      if (!keep[i]) out[i] = Tensor();
    }
    pass->outputs = std::move(out);
    pass->logits = logits;
  }
  return logits;
}

ForwardPass Model::forward(const Tensor& input, ops::Mode mode, Xoshiro256pp* rng) {
  ForwardPass pass;
  execute(input, mode, rng, &pass, mode == ops::Mode::train ? &params_ : nullptr);
  return pass;
}

Tensor Model::infer(const Tensor& input) const {
  return execute(input, ops::Mode::infer, nullptr, nullptr, nullptr);
}

void Model::backward(const ForwardPass& pass, const Tensor& grad_logits) {
  const std::size_t count = nodes_.size();
  if (pass.outputs.size() != count) throw ShapeError("backward: forward pass does not belong to this model");
  if (grad_logits.shape() != pass.logits.shape()) {
    throw ShapeError("backward: grad_logits shape " + shape_str(grad_logits.shape()) +
                     " differs from logits shape " + shape_str(pass.logits.shape()));
  }
  const std::vector<bool> rg = grad_plan();
  std::vector<Tensor> grad(count);
  grad[count - 1] = grad_logits;

  const auto batch_shape = [&](std::size_t j) {
    Shape s{pass.batch};
    for (auto d : nodes_[j].sample_shape) s.push_back(d);
    return s;
  };
  const auto accumulate = [&](std::size_t j, Tensor g) {
    if (!rg[j]) return;
    if (grad[j].empty()) {
      grad[j] = std::move(g);
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) grad[j][k] += g[k];
    }
  };
  const auto accumulate_param = [&](std::size_t pi, const Tensor& g) {
    Param& p = params_[pi];
    if (!p.updatable() || g.empty()) return;
    for (std::size_t k = 0; k < g.size(); ++k) p.grad[k] += g[k];
  };

  for (std::size_t i = count; i-- > 0;) {
    if (!rg[i] || grad[i].empty()) continue;
    const LayerNode& node = nodes_[i];
    const Tensor& g = grad[i];
    bool own_params = false;
    for (auto pi : node.params) own_params = own_params || params_[pi].updatable();
    const bool need_input = !node.inputs.empty() && rg[node.inputs[0]];
    const ops::GradRequest req{need_input, own_params};
    const auto in_value = [&](std::size_t k) -> const Tensor& { return pass.outputs[node.inputs[k]]; };
    const auto param = [&](std::size_t k) -> const Tensor& { return params_[node.params[k]].value; };

    switch (node.kind()) {
      case LayerKind::input:
        break;
      case LayerKind::conv: {
        const auto& l = std::get<ConvLayer>(node.spec);
        auto cg = ops::conv2d_backward(g, in_value(0), param(0), l.spec, l.bias, req);
        accumulate_param(node.params[0], cg.weights);
        if (l.bias) accumulate_param(node.params[1], cg.bias);
        if (need_input) accumulate(node.inputs[0], std::move(cg.input));
        break;
      }
      case LayerKind::depthwise: {
        const auto& l = std::get<DepthwiseLayer>(node.spec);
        auto cg = ops::depthwise_conv2d_backward(g, in_value(0), param(0), l.spec, false, req);
        accumulate_param(node.params[0], cg.weights);
        if (need_input) accumulate(node.inputs[0], std::move(cg.input));
        break;
      }
      case LayerKind::bn: {
        auto bg = ops::batch_norm_backward(g, pass.bn[i], param(0), req);
        accumulate_param(node.params[0], bg.gamma);
        accumulate_param(node.params[1], bg.beta);
        if (need_input) accumulate(node.inputs[0], std::move(bg.input));
        break;
      }
      case LayerKind::act:
        if (need_input) {
          accumulate(node.inputs[0], ops::activation_backward(
                                         g, in_value(0), std::get<ActivationLayer>(node.spec).kind));
        }
        break;
      case LayerKind::gap:
        if (need_input) accumulate(node.inputs[0], ops::global_avg_pool_backward(g, batch_shape(node.inputs[0])));
        break;
      case LayerKind::flatten:
        if (need_input) accumulate(node.inputs[0], ops::flatten_backward(g, batch_shape(node.inputs[0])));
        break;
      case LayerKind::dense: {
        auto dg = ops::dense_backward(g, in_value(0), param(0), req);
        accumulate_param(node.params[0], dg.weights);
        accumulate_param(node.params[1], dg.bias);
        if (need_input) accumulate(node.inputs[0], std::move(dg.input));
        break;
      }
      case LayerKind::dropout:
        if (need_input) {
          const Tensor& mask = pass.dropout_masks[i];
          accumulate(node.inputs[0], mask.empty() ? g : ops::dropout_backward(g, mask));
        }
        break;
      case LayerKind::add:
        accumulate(node.inputs[0], g);
        accumulate(node.inputs[1], g);
        break;
    }
    grad[i] = Tensor();
  }
}

// ---- builders -------------------------------------------------------------

std::size_t make_divisible(double value, std::size_t divisor) {
  const double d = static_cast<double>(divisor);
  std::size_t v = std::max<std::size_t>(divisor, static_cast<std::size_t>((value + d / 2) / d) * divisor);
  if (static_cast<double>(v) < 0.9 * value) v += divisor;
  return v;
}

namespace {

ops::ConvSpec conv_spec(std::size_t out, std::size_t k, std::size_t stride) {
  ops::ConvSpec s;
  s.out_channels = out;
  s.kernel_h = s.kernel_w = k;
  s.stride_h = s.stride_w = stride;
  s.padding = ops::Padding::same;
  return s;
}

// conv (no bias) -> BN [-> activation]
std::size_t conv_bn(Model& m, const std::string& prefix, std::size_t x, std::size_t out,
                    std::size_t k, std::size_t stride, const ops::Activation* act,
                    const std::string& conv_name = "conv", const std::string& bn_name = "bn",
                    const std::string& act_name = "relu6") {
  x = m.add_node(prefix + conv_name, ConvLayer{conv_spec(out, k, stride), false}, {x});
  x = m.add_node(prefix + bn_name, BatchNormLayer{}, {x});
  if (act) x = m.add_node(prefix + act_name, ActivationLayer{*act}, {x});
  return x;
}

void check_input_size(const ModelConfig& config) {
  if (config.input_h % 32 != 0 || config.input_w % 32 != 0 || config.input_h == 0 ||
      config.input_w == 0) {
    throw ConfigError("input size " + std::to_string(config.input_h) + "x" +
                      std::to_string(config.input_w) + " must be a positive multiple of 32");
  }
}

}  // namespace

Model build_mobilenet_v2_backbone(const ModelConfig& config) {
  if (config.arch != Arch::mobilenet_v2) throw ConfigError("build_mobilenet_v2_backbone: arch is not mobilenet_v2");
  check_input_size(config);
  const ops::Activation relu6 = ops::Activation::relu6;
  const double alpha = config.width_multiplier;
  Model m(config);
  std::size_t x = m.add_node("backbone/input", InputLayer{});
  std::size_t channels = make_divisible(32 * alpha);
  x = conv_bn(m, "backbone/stem/", x, channels, 3, 2, &relu6);

  std::size_t block = 0;
  for (const auto& stage : kMobileNetV2Stages) {
    const std::size_t out = make_divisible(static_cast<double>(stage.channels) * alpha);
    for (std::size_t r = 0; r < stage.repeats; ++r) {
      const std::size_t stride = r == 0 ? stage.stride : 1;
      const std::string p = "backbone/block_" + std::to_string(++block) + "/";
      const std::size_t block_in = x;
      std::size_t y = x;
      if (stage.expansion != 1) {
        y = conv_bn(m, p, y, channels * stage.expansion, 1, 1, &relu6, "expand", "expand_bn",
                    "expand_relu6");
      }
      y = m.add_node(p + "depthwise", DepthwiseLayer{conv_spec(0, 3, stride)}, {y});
      y = m.add_node(p + "depthwise_bn", BatchNormLayer{}, {y});
      y = m.add_node(p + "depthwise_relu6", ActivationLayer{relu6}, {y});
      y = conv_bn(m, p, y, out, 1, 1, nullptr, "project", "project_bn");
      if (stride == 1 && channels == out) y = m.add_node(p + "add", AddLayer{}, {block_in, y});
      x = y;
      channels = out;
    }
  }
  const std::size_t top = alpha > 1.0 ? make_divisible(1280 * alpha) : 1280;
  conv_bn(m, "backbone/top/", x, top, 1, 1, &relu6);
  return m;
}

namespace {

// depthwise(k, stride) -> pointwise(out) -> BN
std::size_t separable(Model& m, const std::string& p, std::size_t x, std::size_t out, std::size_t k,
                      std::size_t stride) {
  x = m.add_node(p + "depthwise", DepthwiseLayer{conv_spec(0, k, stride)}, {x});
  x = m.add_node(p + "pointwise", ConvLayer{conv_spec(out, 1, 1), false}, {x});
  return m.add_node(p + "bn", BatchNormLayer{}, {x});
}

// Two separable branches (5x5, 3x3) summed with the identity; shape-preserving.
std::size_t normal_cell(Model& m, const std::string& p, std::size_t x) {
  const std::size_t channels = m.nodes()[x].sample_shape[0];
  const std::size_t r = m.add_node(p + "relu", ActivationLayer{ops::Activation::relu}, {x});
  const std::size_t a = separable(m, p + "sep5x5/", r, channels, 5, 1);
  const std::size_t b = separable(m, p + "sep3x3/", r, channels, 3, 1);
  const std::size_t s = m.add_node(p + "add_branches", AddLayer{}, {a, b});
  return m.add_node(p + "add_identity", AddLayer{}, {s, x});
}

// Same branches at stride 2 plus a stride-2 1x1 projection of the skip path.
std::size_t reduction_cell(Model& m, const std::string& p, std::size_t x, std::size_t out) {
  const std::size_t r = m.add_node(p + "relu", ActivationLayer{ops::Activation::relu}, {x});
  const std::size_t a = separable(m, p + "sep5x5/", r, out, 5, 2);
  const std::size_t b = separable(m, p + "sep3x3/", r, out, 3, 2);
  std::size_t skip = m.add_node(p + "skip_conv", ConvLayer{conv_spec(out, 1, 2), false}, {x});
  skip = m.add_node(p + "skip_bn", BatchNormLayer{}, {skip});
  const std::size_t s = m.add_node(p + "add_branches", AddLayer{}, {a, b});
  return m.add_node(p + "add_skip", AddLayer{}, {s, skip});
}

}  // namespace

Model build_nasnet_mobile_backbone(const ModelConfig& config) {
  if (config.arch != Arch::nasnet_mobile) throw ConfigError("build_nasnet_mobile_backbone: arch is not nasnet_mobile");
  check_input_size(config);
  const NasNetConfig& nc = config.nasnet;
  Model m(config);
  std::size_t x = m.add_node("backbone/input", InputLayer{});
  x = conv_bn(m, "backbone/stem/", x, nc.stem_filters, 3, 2, nullptr);
  x = reduction_cell(m, "backbone/stem_reduction/", x, nc.stage_widths[0]);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string stage = "backbone/stage" + std::to_string(s + 1) + "/";
    for (std::size_t k = 0; k < nc.cells_per_stage; ++k) {
      x = normal_cell(m, stage + "normal" + std::to_string(k + 1) + "/", x);
    }
    const std::size_t next = s + 1 < 3 ? nc.stage_widths[s + 1] : 2 * nc.stage_widths[2];
    x = reduction_cell(m, stage + "reduction/", x, next);
  }
  m.add_node("backbone/final_relu", ActivationLayer{ops::Activation::relu}, {x});
  return m;
}

Model build_backbone(const ModelConfig& config) {
  config.validate();
  return config.arch == Arch::mobilenet_v2 ? build_mobilenet_v2_backbone(config)
                                           : build_nasnet_mobile_backbone(config);
}

Model attach_classifier_head(Model backbone, std::size_t num_classes) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  const HeadConfig head = backbone.config().head;
  std::size_t x = backbone.output_node();
  x = backbone.add_node("head/gap", GlobalAvgPoolLayer{}, {x});
  x = backbone.add_node("head/flatten", FlattenLayer{}, {x});
  x = backbone.add_node("head/dense", DenseLayer{head.dense_units}, {x});
  x = backbone.add_node("head/relu", ActivationLayer{ops::Activation::relu}, {x});
  x = backbone.add_node("head/dropout", DropoutLayer{head.dropout_rate}, {x});
  backbone.add_node("head/logits", DenseLayer{num_classes}, {x});
  return backbone;
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  Model m = attach_classifier_head(build_backbone(config), config.num_classes);
  m.init_weights(seed);
  return m;
}

void freeze_backbone(Model& model, bool frozen) { model.set_frozen(kBackbonePrefix, frozen); }

std::size_t param_count(const Model& model, bool trainable_only) {
  return model.param_count(trainable_only);
}

Tensor predict(const Model& model, const Tensor& input) {
  return ops::softmax(model.infer(input));
}

std::size_t count_bottlenecks(const Model& model) {
  std::set<std::string> blocks;
  const std::string prefix = "backbone/block_";
  for (const auto& node : model.nodes()) {
    if (node.name.rfind(prefix, 0) == 0) {
      blocks.insert(node.name.substr(0, node.name.find('/', prefix.size())));
    }
  }
  return blocks.size();
}

}  // namespace retinet
