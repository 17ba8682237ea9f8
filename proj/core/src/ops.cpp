#include "retinet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

#include "retinet/parallel.hpp"

namespace retinet::ops {

namespace {

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

void require_rank(const std::string& op, const std::string& arg, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    shape_fail(op, arg + " must be rank " + std::to_string(rank) + ", got shape " + shape_str(s));
  }
}

// Output columns [begin, end) whose input column ow*stride + k - pad lies in [0, in).
struct Span1D {
  std::size_t begin;
  std::size_t end;
};

Span1D valid_outputs(std::size_t out, std::size_t in, std::size_t stride, std::size_t k,
                     std::size_t pad) {
  // need ow*stride + k >= pad  and  ow*stride + k - pad <= in - 1
  std::size_t begin = 0;
  if (pad > k) begin = (pad - k + stride - 1) / stride;
  std::size_t end = 0;
  if (in + pad > k) end = std::min(out, (in - 1 + pad - k) / stride + 1);
  if (begin > end) begin = end;
  return {begin, end};
}

bool is_pointwise(const ConvSpec& spec) {
  return spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride_h == 1 && spec.stride_w == 1;
}

// Accumulates w * in[c] into one output plane for a generic kernel window.
// Per output element the terms arrive in (kh, kw) order for this channel.
template <typename T>
void accumulate_window(T* out, const T* in_plane, const T* kernel, std::size_t H, std::size_t W,
                       std::size_t OH, std::size_t OW, const ConvSpec& spec,
                       const ConvGeometry& geo) {
  for (std::size_t kh = 0; kh < spec.kernel_h; ++kh) {
    const Span1D rows = valid_outputs(OH, H, spec.stride_h, kh, geo.pad_top);
    for (std::size_t kw = 0; kw < spec.kernel_w; ++kw) {
      const T w = kernel[kh * spec.kernel_w + kw];
      const Span1D cols = valid_outputs(OW, W, spec.stride_w, kw, geo.pad_left);
      for (std::size_t oh = rows.begin; oh < rows.end; ++oh) {
        const T* row = in_plane + (oh * spec.stride_h + kh - geo.pad_top) * W;
        T* orow = out + oh * OW;
        if (spec.stride_w == 1) {
          const T* src = row + kw - geo.pad_left;
          for (std::size_t ow = cols.begin; ow < cols.end; ++ow) orow[ow] += w * src[ow];
        } else {
          for (std::size_t ow = cols.begin; ow < cols.end; ++ow) {
            orow[ow] += w * row[ow * spec.stride_w + kw - geo.pad_left];
          }
        }
      }
    }
  }
}

// Scatter of the forward window: grad_in[c] += w * grad_out over valid taps.
template <typename T>
void scatter_window(T* gin_plane, const T* gout, const T* kernel, std::size_t H, std::size_t W,
                    std::size_t OH, std::size_t OW, const ConvSpec& spec,
                    const ConvGeometry& geo) {
  for (std::size_t kh = 0; kh < spec.kernel_h; ++kh) {
    const Span1D rows = valid_outputs(OH, H, spec.stride_h, kh, geo.pad_top);
    for (std::size_t kw = 0; kw < spec.kernel_w; ++kw) {
      const T w = kernel[kh * spec.kernel_w + kw];
      const Span1D cols = valid_outputs(OW, W, spec.stride_w, kw, geo.pad_left);
      for (std::size_t oh = rows.begin; oh < rows.end; ++oh) {
        T* row = gin_plane + (oh * spec.stride_h + kh - geo.pad_top) * W;
        const T* grow = gout + oh * OW;
        for (std::size_t ow = cols.begin; ow < cols.end; ++ow) {
          row[ow * spec.stride_w + kw - geo.pad_left] += w * grow[ow];
        }
      }
    }
  }
}

// dW[kh,kw] += sum over outputs of grad_out * input window.
template <typename T>
void correlate_window(T* gkernel, const T* in_plane, const T* gout, std::size_t H, std::size_t W,
                      std::size_t OH, std::size_t OW, const ConvSpec& spec,
                      const ConvGeometry& geo) {
  for (std::size_t kh = 0; kh < spec.kernel_h; ++kh) {
    const Span1D rows = valid_outputs(OH, H, spec.stride_h, kh, geo.pad_top);
    for (std::size_t kw = 0; kw < spec.kernel_w; ++kw) {
      const Span1D cols = valid_outputs(OW, W, spec.stride_w, kw, geo.pad_left);
      T acc = 0;
      for (std::size_t oh = rows.begin; oh < rows.end; ++oh) {
        const T* row = in_plane + (oh * spec.stride_h + kh - geo.pad_top) * W;
        const T* grow = gout + oh * OW;
        for (std::size_t ow = cols.begin; ow < cols.end; ++ow) {
          acc += grow[ow] * row[ow * spec.stride_w + kw - geo.pad_left];
        }
      }
      gkernel[kh * spec.kernel_w + kw] += acc;
    }
  }
}

template <typename T>
void check_bias(const std::string& op, const BasicTensor<T>* bias, std::size_t cout) {
  if (bias && !bias->empty() && (bias->rank() != 1 || bias->dim(0) != cout)) {
    shape_fail(op, "bias shape " + shape_str(bias->shape()) + " does not match out_channels " +
                       std::to_string(cout));
  }
}

template <typename T>
void add_bias(BasicTensor<T>& out, const BasicTensor<T>* bias) {
  if (!bias || bias->empty()) return;
  const std::size_t N = out.dim(0), C = out.dim(1), P = out.dim(2) * out.dim(3);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      T* o = out.ptr() + (n * C + c) * P;
      const T b = (*bias)[c];
      for (std::size_t p = 0; p < P; ++p) o[p] += b;
    }
  }
}

// Sums per-sample partial gradients in sample order.
template <typename T>
BasicTensor<T> reduce_partials(const std::vector<BasicTensor<T>>& partials) {
  BasicTensor<T> total = partials.front();
  for (std::size_t i = 1; i < partials.size(); ++i) {
    T* dst = total.ptr();
    const T* src = partials[i].ptr();
    for (std::size_t j = 0; j < total.size(); ++j) dst[j] += src[j];
  }
  return total;
}

template <typename T>
BasicTensor<T> conv_bias_grad(const BasicTensor<T>& grad_out) {
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1),
                    P = grad_out.dim(2) * grad_out.dim(3);
  BasicTensor<T> gb({C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* g = grad_out.ptr() + (n * C + c) * P;
      T acc = 0;
      for (std::size_t p = 0; p < P; ++p) acc += g[p];
      gb[c] += acc;
    }
  }
  return gb;
}

}  // namespace

ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, const ConvSpec& spec) {
  ConvGeometry g;
  if (spec.padding == Padding::same) {
    g.out_h = (in_h + spec.stride_h - 1) / spec.stride_h;
    g.out_w = (in_w + spec.stride_w - 1) / spec.stride_w;
    const std::size_t need_h = (g.out_h - 1) * spec.stride_h + spec.kernel_h;
    const std::size_t need_w = (g.out_w - 1) * spec.stride_w + spec.kernel_w;
    g.pad_top = need_h > in_h ? (need_h - in_h) / 2 : 0;
    g.pad_left = need_w > in_w ? (need_w - in_w) / 2 : 0;
  } else {
    if (in_h < spec.kernel_h || in_w < spec.kernel_w) {
      throw ShapeError("conv: valid padding needs input " + std::to_string(in_h) + "x" +
                       std::to_string(in_w) + " >= kernel " + std::to_string(spec.kernel_h) +
                       "x" + std::to_string(spec.kernel_w));
    }
    g.out_h = (in_h - spec.kernel_h) / spec.stride_h + 1;
    g.out_w = (in_w - spec.kernel_w) / spec.stride_w + 1;
  }
  return g;
}

void validate_conv(const Shape& input, const Shape& weights, const ConvSpec& spec) {
  const std::string op = "conv2d";
  require_rank(op, "input", input, 4);
  require_rank(op, "weights", weights, 4);
  if (spec.kernel_h < 1 || spec.kernel_w < 1) shape_fail(op, "kernel dims must be >= 1");
  if (spec.stride_h < 1 || spec.stride_w < 1) shape_fail(op, "stride must be >= 1");
  if (spec.groups < 1) shape_fail(op, "groups must be >= 1");
  const std::size_t C = input[1];
  if (C % spec.groups != 0) {
    shape_fail(op, "groups=" + std::to_string(spec.groups) +
                       " does not divide input channels (dim 1) = " + std::to_string(C));
  }
  if (spec.out_channels % spec.groups != 0) {
    shape_fail(op, "groups=" + std::to_string(spec.groups) +
                       " does not divide out_channels = " + std::to_string(spec.out_channels));
  }
  if (weights[0] != spec.out_channels) {
    shape_fail(op, "weights dim 0 (out channels) is " + std::to_string(weights[0]) +
                       ", spec says " + std::to_string(spec.out_channels));
  }
  if (weights[1] != C / spec.groups) {
    shape_fail(op, "weights dim 1 (in channels per group) is " + std::to_string(weights[1]) +
                       ", input dim 1 / groups is " + std::to_string(C / spec.groups));
  }
  if (weights[2] != spec.kernel_h) {
    shape_fail(op, "weights dim 2 (kernel height) is " + std::to_string(weights[2]) +
                       ", spec says " + std::to_string(spec.kernel_h));
  }
  if (weights[3] != spec.kernel_w) {
    shape_fail(op, "weights dim 3 (kernel width) is " + std::to_string(weights[3]) +
                       ", spec says " + std::to_string(spec.kernel_w));
  }
  conv_geometry(input[2], input[3], spec);
}

// ---- conv2d ------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                      const std::type_identity_t<BasicTensor<T>>* bias, const ConvSpec& spec) {
  validate_conv(input.shape(), weights.shape(), spec);
  check_bias("conv2d", bias, spec.out_channels);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const ConvGeometry geo = conv_geometry(H, W, spec);
  const std::size_t OH = geo.out_h, OW = geo.out_w, Cout = spec.out_channels;
  const std::size_t cin_g = C / spec.groups, cout_g = Cout / spec.groups;
  const std::size_t ksize = spec.kernel_h * spec.kernel_w;
  BasicTensor<T> out({N, Cout, OH, OW});

  parallel_for(N, [&](std::size_t n) {
    for (std::size_t g = 0; g < spec.groups; ++g) {
      const T* in_group = input.ptr() + (n * C + g * cin_g) * H * W;
      if (is_pointwise(spec)) {
        // Spatial tiling keeps the input tile cache resident across output
        // channels; per element the sum still runs over channels in order.
        const std::size_t P = H * W;
        const std::size_t tile = std::clamp<std::size_t>(
            (32768 / std::max<std::size_t>(cin_g, 1)) / 16 * 16, 16, 1024);
        std::vector<T> acc(tile);
        for (std::size_t p0 = 0; p0 < P; p0 += tile) {
          const std::size_t len = std::min(tile, P - p0);
          for (std::size_t col = 0; col < cout_g; ++col) {
            const std::size_t co = g * cout_g + col;
            std::fill(acc.begin(), acc.begin() + len, T(0));
            const T* wrow = weights.ptr() + co * cin_g;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
              const T w = wrow[ci];
              const T* src = in_group + ci * P + p0;
              T* a = acc.data();
              for (std::size_t j = 0; j < len; ++j) a[j] += w * src[j];
            }
            std::copy(acc.begin(), acc.begin() + len,
                      out.ptr() + (n * Cout + co) * P + p0);
          }
        }
        continue;
      }
      for (std::size_t col = 0; col < cout_g; ++col) {
        const std::size_t co = g * cout_g + col;
        T* o = out.ptr() + (n * Cout + co) * OH * OW;
        for (std::size_t ci = 0; ci < cin_g; ++ci) {
          accumulate_window(o, in_group + ci * H * W, weights.ptr() + (co * cin_g + ci) * ksize,
                            H, W, OH, OW, spec, geo);
        }
      }
    }
  });
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const BasicTensor<T>& weights, const ConvSpec& spec, bool with_bias,
                             GradRequest request) {
  validate_conv(input.shape(), weights.shape(), spec);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const ConvGeometry geo = conv_geometry(H, W, spec);
  const std::size_t OH = geo.out_h, OW = geo.out_w, Cout = spec.out_channels;
  const Shape expected{N, Cout, OH, OW};
  if (grad_out.shape() != expected) {
    shape_fail("conv2d_backward", "grad_out shape " + shape_str(grad_out.shape()) +
                                      " differs from forward output shape " + shape_str(expected));
  }
  const std::size_t cin_g = C / spec.groups, cout_g = Cout / spec.groups;
  const std::size_t ksize = spec.kernel_h * spec.kernel_w;
  const std::size_t P = H * W, OP = OH * OW;

  ConvGrads<T> grads;
  if (request.input) grads.input = BasicTensor<T>(input.shape());
  std::vector<BasicTensor<T>> partial_w;
  if (request.params) partial_w.assign(N, BasicTensor<T>(weights.shape()));

  parallel_for(N, [&](std::size_t n) {
    for (std::size_t g = 0; g < spec.groups; ++g) {
      for (std::size_t col = 0; col < cout_g; ++col) {
        const std::size_t co = g * cout_g + col;
        const T* gout = grad_out.ptr() + (n * Cout + co) * OP;
        for (std::size_t ci = 0; ci < cin_g; ++ci) {
          const std::size_t c = g * cin_g + ci;
          const T* kernel = weights.ptr() + (co * cin_g + ci) * ksize;
          if (request.input) {
            T* gin = grads.input.ptr() + (n * C + c) * P;
            if (is_pointwise(spec)) {
              const T w = kernel[0];
              for (std::size_t p = 0; p < P; ++p) gin[p] += w * gout[p];
            } else {
              scatter_window(gin, gout, kernel, H, W, OH, OW, spec, geo);
            }
          }
          if (request.params) {
            const T* in_plane = input.ptr() + (n * C + c) * P;
            T* gk = partial_w[n].ptr() + (co * cin_g + ci) * ksize;
            if (is_pointwise(spec)) {
              T acc = 0;
              for (std::size_t p = 0; p < P; ++p) acc += gout[p] * in_plane[p];
              gk[0] += acc;
            } else {
              correlate_window(gk, in_plane, gout, H, W, OH, OW, spec, geo);
            }
          }
        }
      }
    }
  });
  if (request.params) {
    grads.weights = reduce_partials(partial_w);
    if (with_bias) grads.bias = conv_bias_grad(grad_out);
  }
  return grads;
}

// ---- depthwise ----------------------------------------------------------------

namespace {

void validate_depthwise(const Shape& input, const Shape& weights, const ConvSpec& spec) {
  const std::string op = "depthwise_conv2d";
  require_rank(op, "input", input, 4);
  require_rank(op, "weights", weights, 4);
  const std::size_t C = input[1];
  if (spec.groups != C || spec.out_channels != C) {
    shape_fail(op, "spec must have groups == out_channels == input channels (dim 1) = " +
                       std::to_string(C) + ", got groups=" + std::to_string(spec.groups) +
                       " out_channels=" + std::to_string(spec.out_channels));
  }
  validate_conv(input, weights, spec);
}

}  // namespace

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                                const std::type_identity_t<BasicTensor<T>>* bias, const ConvSpec& spec) {
  validate_depthwise(input.shape(), weights.shape(), spec);
  check_bias("depthwise_conv2d", bias, spec.out_channels);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const ConvGeometry geo = conv_geometry(H, W, spec);
  const std::size_t OH = geo.out_h, OW = geo.out_w;
  const std::size_t ksize = spec.kernel_h * spec.kernel_w;
  BasicTensor<T> out({N, C, OH, OW});
  parallel_for(N, [&](std::size_t n) {
    for (std::size_t c = 0; c < C; ++c) {
      accumulate_window(out.ptr() + (n * C + c) * OH * OW, input.ptr() + (n * C + c) * H * W,
                        weights.ptr() + c * ksize, H, W, OH, OW, spec, geo);
    }
  });
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& grad_out,
                                       const BasicTensor<T>& input,
                                       const BasicTensor<T>& weights, const ConvSpec& spec,
                                       bool with_bias, GradRequest request) {
  validate_depthwise(input.shape(), weights.shape(), spec);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const ConvGeometry geo = conv_geometry(H, W, spec);
  const std::size_t OH = geo.out_h, OW = geo.out_w;
  const Shape expected{N, C, OH, OW};
  if (grad_out.shape() != expected) {
    shape_fail("depthwise_conv2d_backward", "grad_out shape " + shape_str(grad_out.shape()) +
                                                " differs from forward output shape " +
                                                shape_str(expected));
  }
  const std::size_t ksize = spec.kernel_h * spec.kernel_w;
  ConvGrads<T> grads;
  if (request.input) grads.input = BasicTensor<T>(input.shape());
  std::vector<BasicTensor<T>> partial_w;
  if (request.params) partial_w.assign(N, BasicTensor<T>(weights.shape()));
  parallel_for(N, [&](std::size_t n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* gout = grad_out.ptr() + (n * C + c) * OH * OW;
      if (request.input) {
        scatter_window(grads.input.ptr() + (n * C + c) * H * W, gout, weights.ptr() + c * ksize,
                       H, W, OH, OW, spec, geo);
      }
      if (request.params) {
        correlate_window(partial_w[n].ptr() + c * ksize, input.ptr() + (n * C + c) * H * W, gout,
                         H, W, OH, OW, spec, geo);
      }
    }
  });
  if (request.params) {
    grads.weights = reduce_partials(partial_w);
    if (with_bias) grads.bias = conv_bias_grad(grad_out);
  }
  return grads;
}

// ---- dense --------------------------------------------------------------------

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const BasicTensor<T>& bias) {
  require_rank("dense", "input", input.shape(), 2);
  require_rank("dense", "weights", weights.shape(), 2);
  const std::size_t N = input.dim(0), D = input.dim(1), U = weights.dim(1);
  if (weights.dim(0) != D) {
    shape_fail("dense", "input dim 1 is " + std::to_string(D) + " but weights dim 0 is " +
                            std::to_string(weights.dim(0)));
  }
  if (bias.rank() != 1 || bias.dim(0) != U) {
    shape_fail("dense", "bias shape " + shape_str(bias.shape()) + " does not match weights dim 1 = " +
                            std::to_string(U));
  }
  BasicTensor<T> out({N, U});
  parallel_for(N, [&](std::size_t n) {
    T* o = out.ptr() + n * U;
    const T* x = input.ptr() + n * D;
    for (std::size_t d = 0; d < D; ++d) {
      const T xv = x[d];
      const T* wrow = weights.ptr() + d * U;
      for (std::size_t u = 0; u < U; ++u) o[u] += xv * wrow[u];
    }
    for (std::size_t u = 0; u < U; ++u) o[u] += bias[u];
  });
  return out;
}

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const BasicTensor<T>& weights, GradRequest request) {
  const std::size_t N = input.dim(0), D = input.dim(1), U = weights.dim(1);
  if (grad_out.shape() != Shape{N, U}) {
    shape_fail("dense_backward", "grad_out shape " + shape_str(grad_out.shape()) +
                                     " differs from forward output [" + std::to_string(N) + "," +
                                     std::to_string(U) + "]");
  }
  DenseGrads<T> grads;
  if (request.input) {
    grads.input = BasicTensor<T>({N, D});
    parallel_for(N, [&](std::size_t n) {
      const T* g = grad_out.ptr() + n * U;
      T* gi = grads.input.ptr() + n * D;
      for (std::size_t d = 0; d < D; ++d) {
        const T* wrow = weights.ptr() + d * U;
        T acc = 0;
        for (std::size_t u = 0; u < U; ++u) acc += g[u] * wrow[u];
        gi[d] = acc;
      }
    });
  }
  if (request.params) {
    grads.weights = BasicTensor<T>({D, U});
    grads.bias = BasicTensor<T>({U});
    parallel_for(D, [&](std::size_t d) {
      T* gw = grads.weights.ptr() + d * U;
      for (std::size_t n = 0; n < N; ++n) {
        const T xv = input[n * D + d];
        const T* g = grad_out.ptr() + n * U;
        for (std::size_t u = 0; u < U; ++u) gw[u] += xv * g[u];
      }
    });
    for (std::size_t n = 0; n < N; ++n) {
      const T* g = grad_out.ptr() + n * U;
      for (std::size_t u = 0; u < U; ++u) grads.bias[u] += g[u];
    }
  }
  return grads;
}

// ---- batch norm -----------------------------------------------------------

template <typename T>
BatchNormState<T> BatchNormState<T>::identity(std::size_t channels) {
  BatchNormState s;
  s.gamma = BasicTensor<T>({channels}, T(1));
  s.beta = BasicTensor<T>({channels}, T(0));
  s.running_mean = BasicTensor<T>({channels}, T(0));
  s.running_var = BasicTensor<T>({channels}, T(1));
  return s;
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, const BatchNormOptions& options,
                          std::type_identity_t<BatchNormCache<T>>* cache) {
  require_rank("batch_norm", "input", input.shape(), 4);
  const std::size_t N = input.dim(0), C = input.dim(1), P = input.dim(2) * input.dim(3);
  for (const BasicTensor<T>* t :
       std::initializer_list<const BasicTensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != C) {
      shape_fail("batch_norm", "state tensor shape " + shape_str(t->shape()) +
                                   " does not match input channels (dim 1) = " + std::to_string(C));
    }
  }
  const std::size_t M = N * P;
  BasicTensor<T> out(input.shape());
  BasicTensor<T> x_hat(input.shape());
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (options.mode == Mode::train) {
      double sum = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* x = input.ptr() + (n * C + c) * P;
        for (std::size_t p = 0; p < P; ++p) sum += x[p];
      }
      mean = sum / static_cast<double>(M);
      double sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* x = input.ptr() + (n * C + c) * P;
        for (std::size_t p = 0; p < P; ++p) {
          const double d = x[p] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(M);
      if (options.update_running) {
        running_mean[c] = static_cast<T>(options.momentum * running_mean[c] +
                                         (1.0 - options.momentum) * mean);
        running_var[c] = static_cast<T>(options.momentum * running_var[c] +
                                        (1.0 - options.momentum) * var);
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T istd = static_cast<T>(1.0 / std::sqrt(var + options.epsilon));
    const T m = static_cast<T>(mean);
    inv_std[c] = istd;
    const T g = gamma[c], b = beta[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * P;
      const T* x = input.ptr() + off;
      T* xh = x_hat.ptr() + off;
      T* y = out.ptr() + off;
      for (std::size_t p = 0; p < P; ++p) {
        xh[p] = (x[p] - m) * istd;
        y[p] = g * xh[p] + b;
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->mode = options.mode;
  }
  return out;
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, BatchNormState<T>& state,
                          std::type_identity_t<BatchNormCache<T>>* cache) {
  BatchNormOptions options;
  options.momentum = state.momentum;
  options.epsilon = state.epsilon;
  options.mode = state.mode;
  return batch_norm(input, state.gamma, state.beta, state.running_mean, state.running_var, options,
                    cache);
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& grad_out,
                                      const BatchNormCache<T>& cache,
                                      const BasicTensor<T>& gamma, GradRequest request) {
  if (grad_out.shape() != cache.x_hat.shape()) {
    shape_fail("batch_norm_backward", "grad_out shape " + shape_str(grad_out.shape()) +
                                          " differs from cached input shape " +
                                          shape_str(cache.x_hat.shape()));
  }
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), P = grad_out.dim(2) * grad_out.dim(3);
  const double M = static_cast<double>(N * P);
  BatchNormGrads<T> grads;
  if (request.input) grads.input = BasicTensor<T>(grad_out.shape());
  if (request.params) {
    grads.gamma = BasicTensor<T>({C});
    grads.beta = BasicTensor<T>({C});
  }
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * P;
      const T* dy = grad_out.ptr() + off;
      const T* xh = cache.x_hat.ptr() + off;
      for (std::size_t p = 0; p < P; ++p) {
        sum_dy += dy[p];
        sum_dy_xhat += static_cast<double>(dy[p]) * xh[p];
      }
    }
    if (request.params) {
      grads.gamma[c] = static_cast<T>(sum_dy_xhat);
      grads.beta[c] = static_cast<T>(sum_dy);
    }
    if (!request.input) continue;
    const T scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * P;
      const T* dy = grad_out.ptr() + off;
      const T* xh = cache.x_hat.ptr() + off;
      T* dx = grads.input.ptr() + off;
      if (cache.mode == Mode::train) {
        const T mean_dy = static_cast<T>(sum_dy / M);
        const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / M);
        for (std::size_t p = 0; p < P; ++p) {
          dx[p] = scale * (dy[p] - mean_dy - xh[p] * mean_dy_xhat);
        }
      } else {
        for (std::size_t p = 0; p < P; ++p) dx[p] = scale * dy[p];
      }
    }
  }
  return grads;
}

// ---- activations ---------------------------------------------------------

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& input, Activation kind) {
  BasicTensor<T> out(input.shape());
  const T* x = input.ptr();
  T* y = out.ptr();
  const std::size_t n = input.size();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::min(x[i] > T(0) ? x[i] : T(0), T(6));
  }
  return out;
}

template <typename T>
BasicTensor<T> activation_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                                   Activation kind) {
  if (grad_out.shape() != input.shape()) {
    shape_fail("activation_backward", "grad_out shape " + shape_str(grad_out.shape()) +
                                          " differs from input shape " + shape_str(input.shape()));
  }
  BasicTensor<T> out(input.shape());
  const T* x = input.ptr();
  const T* g = grad_out.ptr();
  T* d = out.ptr();
  const std::size_t n = input.size();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > T(0) ? g[i] : T(0);
  } else {
    for (std::size_t i = 0; i < n; ++i) d[i] = (x[i] > T(0) && x[i] < T(6)) ? g[i] : T(0);
  }
  return out;
}

// ---- pooling / reshape / add ----------------------------------------------

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  require_rank("global_avg_pool", "input", input.shape(), 4);
  const std::size_t N = input.dim(0), C = input.dim(1), P = input.dim(2) * input.dim(3);
  BasicTensor<T> out({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    const T* x = input.ptr() + i * P;
    double sum = 0;
    for (std::size_t p = 0; p < P; ++p) sum += x[p];
    out[i] = static_cast<T>(sum / static_cast<double>(P));
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape) {
  require_rank("global_avg_pool_backward", "input shape", input_shape, 4);
  const std::size_t N = input_shape[0], C = input_shape[1], P = input_shape[2] * input_shape[3];
  if (grad_out.shape() != Shape{N, C}) {
    shape_fail("global_avg_pool_backward",
               "grad_out shape " + shape_str(grad_out.shape()) + " does not match [N,C] of " +
                   shape_str(input_shape));
  }
  BasicTensor<T> out(input_shape);
  const T inv = static_cast<T>(1.0 / static_cast<double>(P));
  for (std::size_t i = 0; i < N * C; ++i) {
    const T v = grad_out[i] * inv;
    T* d = out.ptr() + i * P;
    for (std::size_t p = 0; p < P; ++p) d[p] = v;
  }
  return out;
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& input) {
  if (input.rank() < 2) shape_fail("flatten", "input must have rank >= 2, got " + shape_str(input.shape()));
  if (input.rank() == 2) return input;
  return input.reshaped({input.dim(0), input.size() / input.dim(0)});
}

template <typename T>
BasicTensor<T> flatten_backward(const BasicTensor<T>& grad_out, const Shape& input_shape) {
  if (grad_out.size() != shape_numel(input_shape)) {
    shape_fail("flatten_backward", "grad_out size does not match input shape " + shape_str(input_shape));
  }
  return grad_out.reshaped(input_shape);
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_fail("add", "operand shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

// ---- dropout ----------------------------------------------------------------

template <typename T>
DropoutResult<T> dropout(const BasicTensor<T>& input, double rate, Xoshiro256pp& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  DropoutResult<T> r{input, BasicTensor<T>(input.shape(), T(1))};
  if (mode == Mode::infer || rate == 0.0) return r;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T m = rng.uniform() < rate ? T(0) : scale;
    r.mask[i] = m;
    r.output[i] = input[i] * m;
  }
  return r;
}

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& mask) {
  if (grad_out.shape() != mask.shape()) {
    shape_fail("dropout_backward", "grad_out shape " + shape_str(grad_out.shape()) +
                                       " differs from mask shape " + shape_str(mask.shape()));
  }
  BasicTensor<T> out(grad_out.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = grad_out[i] * mask[i];
  return out;
}

// ---- softmax / loss ---------------------------------------------------------

namespace {

template <typename T>
void check_logits(const std::string& op, const BasicTensor<T>& logits) {
  require_rank(op, "logits", logits.shape(), 2);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(static_cast<double>(logits[i]))) {
      throw NumericError(op + ": non-finite logit at row " + std::to_string(i / logits.dim(1)) +
                         ", class " + std::to_string(i % logits.dim(1)));
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  check_logits("softmax", logits);
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  BasicTensor<T> probs({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    const T* x = logits.ptr() + n * C;
    const double m = *std::max_element(x, x + C);
    double sum = 0;
    std::vector<double> e(C);
    for (std::size_t c = 0; c < C; ++c) sum += (e[c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < C; ++c) probs[n * C + c] = static_cast<T>(e[c] / sum);
  }
  return probs;
}

template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                             std::span<const int> labels) {
  check_logits("softmax_cross_entropy", logits);
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  if (labels.size() != N) {
    shape_fail("softmax_cross_entropy", "got " + std::to_string(labels.size()) +
                                            " labels for batch dim (dim 0) = " + std::to_string(N));
  }
  SoftmaxCrossEntropy<T> r;
  r.probs = BasicTensor<T>({N, C});
  r.grad_logits = BasicTensor<T>({N, C});
  double total = 0;
  const double inv_n = 1.0 / static_cast<double>(N);
  std::vector<double> e(C);
  for (std::size_t n = 0; n < N; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= C) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(label) + " at row " +
                      std::to_string(n) + " outside [0," + std::to_string(C) + ")");
    }
    const T* x = logits.ptr() + n * C;
    const double m = *std::max_element(x, x + C);
    double sum = 0;
    for (std::size_t c = 0; c < C; ++c) sum += (e[c] = std::exp(x[c] - m));
    const double log_sum = std::log(sum);
    total += -((x[label] - m) - log_sum);
    for (std::size_t c = 0; c < C; ++c) {
      const double p = e[c] / sum;
      r.probs[n * C + c] = static_cast<T>(p);
      const double onehot = static_cast<std::size_t>(label) == c ? 1.0 : 0.0;
      r.grad_logits[n * C + c] = static_cast<T>((p - onehot) * inv_n);
    }
  }
  r.loss = total * inv_n;
  return r;
}

// ---- explicit instantiations --------------------------------------------

#define RETINET_INSTANTIATE_OPS(T)                                                              \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                 const BasicTensor<T>*, const ConvSpec&);                       \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                        const BasicTensor<T>&, const ConvSpec&, bool,           \
                                        GradRequest);                                           \
  template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                           const BasicTensor<T>*, const ConvSpec&);             \
  template ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, \
                                                  const BasicTensor<T>&, const ConvSpec&, bool, \
                                                  GradRequest);                                 \
  template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                const BasicTensor<T>&);                                         \
  template DenseGrads<T> dense_backward(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                        const BasicTensor<T>&, GradRequest);                    \
  template struct BatchNormState<T>;                                                            \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                     const BasicTensor<T>&, BasicTensor<T>&, BasicTensor<T>&,   \
                                     const BatchNormOptions&, BatchNormCache<T>*);              \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, BatchNormState<T>&,                 \
                                     BatchNormCache<T>*);                                       \
  template BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>&,                         \
                                                 const BatchNormCache<T>&,                      \
                                                 const BasicTensor<T>&, GradRequest);           \
  template BasicTensor<T> activation(const BasicTensor<T>&, Activation);                        \
  template BasicTensor<T> activation_backward(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                              Activation);                                      \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                               \
  template BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>&, const Shape&);        \
  template BasicTensor<T> flatten(const BasicTensor<T>&);                                       \
  template BasicTensor<T> flatten_backward(const BasicTensor<T>&, const Shape&);                \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template DropoutResult<T> dropout(const BasicTensor<T>&, double, Xoshiro256pp&, Mode);        \
  template BasicTensor<T> dropout_backward(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                       \
  template SoftmaxCrossEntropy<T> softmax_cross_entropy(const BasicTensor<T>&,                  \
                                                        std::span<const int>);

RETINET_INSTANTIATE_OPS(float)
RETINET_INSTANTIATE_OPS(double)

#undef RETINET_INSTANTIATE_OPS

}  // namespace retinet::ops
