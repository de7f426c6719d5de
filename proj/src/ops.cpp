// Copyright 2026 The malnas Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "malnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "malnas/error.hpp"

namespace malnas {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;
using BackwardFn = std::function<void(TensorNode&)>;

// Builds an output node; the backward rule and input links are kept only if
// some input participates in the gradient.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<NodePtr> inputs, const char* op,
                   BackwardFn backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const NodePtr& n) { return n->requires_grad; });
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av != 0.0) axpy(av, pb + p * n, row, n);
    }
  }
  auto an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {an, bn}, "matmul",
                     [an, bn, m, k, n](TensorNode& self) {
                       const double* g = self.grad.data();
                       if (an->requires_grad) {
                         auto ga = an->grad_buffer();
                         const double* pb = bn->data.data();
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             ga[i * k + p] += dot(g + i * n, pb + p * n, n);
                           }
                         }
                       }
                       if (bn->requires_grad) {
                         auto gb = bn->grad_buffer();
                         const double* pa = an->data.data();
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             const double av = pa[i * k + p];
                             if (av != 0.0) axpy(av, g + i * n, gb.data() + p * n, n);
                           }
                         }
                       }
                     });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) throw DimensionError("add_bias: bias length must equal columns");
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  }
  auto xn = x.node(), bn = bias.node();
  return make_result(x.shape(), std::move(out), {xn, bn}, "add_bias",
                     [xn, bn, m, n](TensorNode& self) {
                       if (xn->requires_grad) axpy(1.0, self.grad.data(), xn->grad_buffer().data(), m * n);
                       if (bn->requires_grad) {
                         auto gb = bn->grad_buffer();
                         for (std::size_t i = 0; i < m; ++i) axpy(1.0, self.grad.data() + i * n, gb.data(), n);
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, "add", [an, bn](TensorNode& self) {
    for (const auto& in : {an, bn}) {
      if (in->requires_grad) axpy(1.0, self.grad.data(), in->grad_buffer().data(), self.grad.size());
    }
  });
}

Tensor add_n(std::span<const Tensor> terms) {
  if (terms.empty()) throw UsageError("add_n: no terms");
  if (terms.size() == 1) return terms[0];
  std::vector<double> out(terms[0].data().begin(), terms[0].data().end());
  std::vector<NodePtr> inputs;
  inputs.push_back(terms[0].node());
  for (std::size_t t = 1; t < terms.size(); ++t) {
    require_same_shape(terms[0], terms[t], "add_n");
    axpy(1.0, terms[t].data().data(), out.data(), out.size());
    inputs.push_back(terms[t].node());
  }
  auto captured = inputs;
  return make_result(terms[0].shape(), std::move(out), std::move(inputs), "add_n",
                     [captured](TensorNode& self) {
                       for (const auto& in : captured) {
                         if (in->requires_grad) axpy(1.0, self.grad.data(), in->grad_buffer().data(), self.grad.size());
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, "mul", [an, bn](TensorNode& self) {
    const std::size_t n = self.grad.size();
    if (an->requires_grad) {
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto gb = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {xn}, "scale", [xn, factor](TensorNode& self) {
    axpy(factor, self.grad.data(), xn->grad_buffer().data(), self.grad.size());
  });
}

Tensor scale_by_element(const Tensor& x, const Tensor& weights, std::size_t index) {
  if (index >= weights.numel()) throw DimensionError("scale_by_element: index out of range");
  const double w = weights.data()[index];
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= w;
  auto xn = x.node(), wn = weights.node();
  return make_result(x.shape(), std::move(out), {xn, wn}, "scale_by_element",
                     [xn, wn, index, w](TensorNode& self) {
                       if (xn->requires_grad) axpy(w, self.grad.data(), xn->grad_buffer().data(), self.grad.size());
                       if (wn->requires_grad) {
                         wn->grad_buffer()[index] += dot(self.grad.data(), xn->data.data(), self.grad.size());
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return make_result({1}, {s}, {xn}, "sum", [xn](TensorNode& self) {
    const double g = self.grad[0];
    for (auto& v : xn->grad_buffer()) v += g;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return make_result(std::move(shape), std::move(out), {xn}, "reshape", [xn](TensorNode& self) {
    axpy(1.0, self.grad.data(), xn->grad_buffer().data(), self.grad.size());
  });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax: empty shape");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  auto xn = x.node();
  auto result = make_result(x.shape(), std::move(out), {xn}, "softmax", {});
  if (result.requires_grad()) {
    // The rule reads the output values, which live on the node itself.
    result.node()->backward = [xn, rows, cols](TensorNode& self) {
      auto gx = xn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.data.data() + r * cols;
        const double* g = self.grad.data() + r * cols;
        const double inner = dot(y, g, cols);
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - inner);
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::elu: return "elu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "elu") return Activation::elu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  throw ParameterError("unknown activation '" + std::string(name) + "'");
}

Tensor activation(const Tensor& x, Activation kind) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const auto in = x.data();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case Activation::elu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0.0 ? in[i] : std::expm1(in[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) {
        // Stable in both tails; never returns exactly 0 or 1 for finite input
        // in the range the models produce.
        out[i] = in[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-in[i]))
                              : std::exp(in[i]) / (1.0 + std::exp(in[i]));
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(in[i]);
      break;
  }
  auto xn = x.node();
  auto result = make_result(x.shape(), std::move(out), {xn}, "activation", {});
  if (result.requires_grad()) {
    result.node()->backward = [xn, kind, n](TensorNode& self) {
      auto gx = xn->grad_buffer();
      const double* g = self.grad.data();
      const double* y = self.data.data();
      const double* xin = xn->data.data();
      switch (kind) {
        case Activation::relu:
          for (std::size_t i = 0; i < n; ++i) if (xin[i] > 0.0) gx[i] += g[i];
          break;
        case Activation::elu:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (xin[i] > 0.0 ? 1.0 : y[i] + 1.0);
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
          break;
        case Activation::tanh:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
          break;
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride,
                             std::size_t padding, std::size_t dilation) {
  if (stride == 0 || dilation == 0 || kernel == 0) throw DimensionError("conv: stride, dilation and kernel must be positive");
  const long long span = static_cast<long long>(dilation) * (static_cast<long long>(kernel) - 1) + 1;
  const long long avail = static_cast<long long>(input) + 2 * static_cast<long long>(padding) - span;
  if (avail < 0) {
    throw DimensionError("conv: non-positive output size for input " + std::to_string(input) +
                         ", kernel " + std::to_string(kernel) + ", dilation " + std::to_string(dilation));
  }
  return static_cast<std::size_t>(avail) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, oh, ow, cin_g, cout_g;
  Conv2dOptions opt;

  // Range of output columns whose input column (ow*stride - pad + kx*dil)
  // lands inside [0, w).
  std::pair<std::size_t, std::size_t> col_range(std::size_t kx) const {
    const long long off = static_cast<long long>(kx * opt.dilation) - static_cast<long long>(opt.padding);
    const long long s = static_cast<long long>(opt.stride);
    long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long long hi = (static_cast<long long>(w) - 1 - off);
    hi = hi < 0 ? -1 : hi / s;
    hi = std::min<long long>(hi, static_cast<long long>(ow) - 1);
    if (lo > hi) return {1, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi) + 1};
  }
};

// Calls fn(out_row_ptr_index, in_row_ptr_index, count, in_stride) for each
// (output row, kernel tap) pairing; shared by forward and both gradients.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, std::size_t ky, std::size_t kx, Fn&& fn) {
  const auto [lo, hi] = g.col_range(kx);
  if (lo >= hi) return;
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    const long long iy = static_cast<long long>(oy * g.opt.stride + ky * g.opt.dilation) -
                         static_cast<long long>(g.opt.padding);
    if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
    const std::size_t in_start = static_cast<std::size_t>(iy) * g.w + lo * g.opt.stride + kx * g.opt.dilation - g.opt.padding;
    fn(oy * g.ow + lo, in_start, hi - lo);
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Conv2dOptions& options) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d kernel");
  ConvGeometry g{};
  g.opt = options;
  g.batch = x.dim(0);
  g.c_in = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.c_out = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  if (options.groups == 0 || g.c_in % options.groups != 0 || g.c_out % options.groups != 0) {
    throw DimensionError("conv2d: groups must divide input and output channels");
  }
  g.cin_g = g.c_in / options.groups;
  g.cout_g = g.c_out / options.groups;
  if (kernel.dim(1) != g.cin_g) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels per group, input provides " + std::to_string(g.cin_g));
  }
  g.oh = conv_output_size(g.h, g.kh, options.stride, options.padding, options.dilation);
  g.ow = conv_output_size(g.w, g.kw, options.stride, options.padding, options.dilation);

  const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
  const std::size_t stride = options.stride;
  std::vector<double> out(g.batch * g.c_out * out_plane, 0.0);
  const double* px = x.data().data();
  const double* pk = kernel.data().data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oc = 0; oc < g.c_out; ++oc) {
      const std::size_t group = oc / g.cout_g;
      double* o = out.data() + (b * g.c_out + oc) * out_plane;
      for (std::size_t ic = 0; ic < g.cin_g; ++ic) {
        const double* in = px + (b * g.c_in + group * g.cin_g + ic) * in_plane;
        const double* kern = pk + (oc * g.cin_g + ic) * g.kh * g.kw;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const double wv = kern[ky * g.kw + kx];
            for_each_tap(g, ky, kx, [&](std::size_t o0, std::size_t i0, std::size_t cnt) {
              if (stride == 1) {
                axpy(wv, in + i0, o + o0, cnt);
              } else {
                for (std::size_t t = 0; t < cnt; ++t) o[o0 + t] += wv * in[i0 + t * stride];
              }
            });
          }
        }
      }
    }
  }

  auto xn = x.node(), kn = kernel.node();
  return make_result({g.batch, g.c_out, g.oh, g.ow}, std::move(out), {xn, kn}, "conv2d",
                     [xn, kn, g](TensorNode& self) {
                       const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
                       const std::size_t stride = g.opt.stride;
                       const double* gy = self.grad.data();
                       double* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
                       double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
                       const double* px = xn->data.data();
                       const double* pk = kn->data.data();
                       for (std::size_t b = 0; b < g.batch; ++b) {
                         for (std::size_t oc = 0; oc < g.c_out; ++oc) {
                           const std::size_t group = oc / g.cout_g;
                           const double* go = gy + (b * g.c_out + oc) * out_plane;
                           for (std::size_t ic = 0; ic < g.cin_g; ++ic) {
                             const std::size_t in_off = (b * g.c_in + group * g.cin_g + ic) * in_plane;
                             const std::size_t k_off = (oc * g.cin_g + ic) * g.kh * g.kw;
                             for (std::size_t ky = 0; ky < g.kh; ++ky) {
                               for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                 const std::size_t tap = k_off + ky * g.kw + kx;
                                 const double wv = pk[tap];
                                 double acc = 0.0;
                                 for_each_tap(g, ky, kx, [&](std::size_t o0, std::size_t i0, std::size_t cnt) {
                                   if (stride == 1) {
                                     if (gx) axpy(wv, go + o0, gx + in_off + i0, cnt);
                                     if (gk) acc += dot(go + o0, px + in_off + i0, cnt);
                                   } else {
                                     for (std::size_t t = 0; t < cnt; ++t) {
                                       if (gx) gx[in_off + i0 + t * stride] += wv * go[o0 + t];
                                       if (gk) acc += go[o0 + t] * px[in_off + i0 + t * stride];
                                     }
                                   }
                                 });
                                 if (gk) gk[tap] += acc;
                               }
                             }
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor pool2d(const Tensor& x, PoolKind kind, const Pool2dOptions& options) {
  require_rank(x, 4, "pool2d");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = options.size, s = options.stride, p = options.padding;
  const std::size_t oh = conv_output_size(h, k, s, p, 1);
  const std::size_t ow = conv_output_size(w, k, s, p, 1);
  const std::size_t planes = b * c, in_plane = h * w, out_plane = oh * ow;
  std::vector<double> out(planes * out_plane);
  // For max pooling, the flat input index that produced each output; for
  // average pooling, the in-bounds element count.
  std::vector<std::size_t> route(planes * out_plane);
  const double* px = x.data().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* in = px + pl * in_plane;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const long long y0 = static_cast<long long>(oy * s) - static_cast<long long>(p);
      const std::size_t ylo = static_cast<std::size_t>(std::max<long long>(y0, 0));
      const std::size_t yhi = static_cast<std::size_t>(std::min<long long>(y0 + static_cast<long long>(k), static_cast<long long>(h)));
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const long long x0 = static_cast<long long>(ox * s) - static_cast<long long>(p);
        const std::size_t xlo = static_cast<std::size_t>(std::max<long long>(x0, 0));
        const std::size_t xhi = static_cast<std::size_t>(std::min<long long>(x0 + static_cast<long long>(k), static_cast<long long>(w)));
        const std::size_t oi = pl * out_plane + oy * ow + ox;
        if (kind == PoolKind::avg) {
          double acc = 0.0;
          for (std::size_t yy = ylo; yy < yhi; ++yy)
            for (std::size_t xx = xlo; xx < xhi; ++xx) acc += in[yy * w + xx];
          const std::size_t count = (yhi - ylo) * (xhi - xlo);
          out[oi] = acc / static_cast<double>(count);
          route[oi] = count;
        } else {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t arg = ylo * w + xlo;
          for (std::size_t yy = ylo; yy < yhi; ++yy)
            for (std::size_t xx = xlo; xx < xhi; ++xx)
              if (in[yy * w + xx] > best) {
                best = in[yy * w + xx];
                arg = yy * w + xx;
              }
          out[oi] = best;
          route[oi] = arg;
        }
      }
    }
  }
  auto xn = x.node();
  return make_result({b, c, oh, ow}, std::move(out), {xn}, kind == PoolKind::avg ? "avg_pool" : "max_pool",
                     [xn, kind, route = std::move(route), planes, in_plane, out_plane, oh, ow, h, w, k, s, p](TensorNode& self) {
                       auto gx = xn->grad_buffer();
                       for (std::size_t pl = 0; pl < planes; ++pl) {
                         double* gin = gx.data() + pl * in_plane;
                         for (std::size_t oy = 0; oy < oh; ++oy) {
                           for (std::size_t ox = 0; ox < ow; ++ox) {
                             const std::size_t oi = pl * out_plane + oy * ow + ox;
                             const double go = self.grad[oi];
                             if (kind == PoolKind::max) {
                               gin[route[oi]] += go;
                               continue;
                             }
                             const long long y0 = static_cast<long long>(oy * s) - static_cast<long long>(p);
                             const long long x0 = static_cast<long long>(ox * s) - static_cast<long long>(p);
                             const std::size_t ylo = static_cast<std::size_t>(std::max<long long>(y0, 0));
                             const std::size_t yhi = static_cast<std::size_t>(std::min<long long>(y0 + static_cast<long long>(k), static_cast<long long>(h)));
                             const std::size_t xlo = static_cast<std::size_t>(std::max<long long>(x0, 0));
                             const std::size_t xhi = static_cast<std::size_t>(std::min<long long>(x0 + static_cast<long long>(k), static_cast<long long>(w)));
                             const double share = go / static_cast<double>(route[oi]);
                             for (std::size_t yy = ylo; yy < yhi; ++yy)
                               for (std::size_t xx = xlo; xx < xhi; ++xx) gin[yy * w + xx] += share;
                           }
                         }
                       }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<double> out(b * c);
  for (std::size_t i = 0; i < b * c; ++i) {
    double acc = 0.0;
    const double* in = x.data().data() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) acc += in[j];
    out[i] = acc / static_cast<double>(plane);
  }
  auto xn = x.node();
  return make_result({b, c}, std::move(out), {xn}, "global_avg_pool", [xn, plane](TensorNode& self) {
    auto gx = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double share = self.grad[i] / static_cast<double>(plane);
      for (std::size_t j = 0; j < plane; ++j) gx[i * plane + j] += share;
    }
  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw UsageError("concat_channels: no inputs");
  const std::size_t b = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t channels = 0;
  std::vector<NodePtr> inputs;
  for (const auto& t : parts) {
    require_rank(t, 4, "concat_channels");
    if (t.dim(0) != b || t.dim(2) != h || t.dim(3) != w) {
      throw DimensionError("concat_channels: incompatible " + shape_string(t.shape()));
    }
    channels += t.dim(1);
    inputs.push_back(t.node());
  }
  const std::size_t plane = h * w;
  std::vector<double> out(b * channels * plane);
  std::size_t offset = 0;
  for (const auto& t : parts) {
    const std::size_t c = t.dim(1);
    for (std::size_t n = 0; n < b; ++n) {
      std::copy_n(t.data().data() + n * c * plane, c * plane, out.data() + (n * channels + offset) * plane);
    }
    offset += c;
  }
  auto captured = inputs;
  return make_result({b, channels, h, w}, std::move(out), std::move(inputs), "concat_channels",
                     [captured, b, channels, plane](TensorNode& self) {
                       std::size_t offset = 0;
                       for (const auto& in : captured) {
                         const std::size_t c = in->shape[1];
                         if (in->requires_grad) {
                           auto gi = in->grad_buffer();
                           for (std::size_t n = 0; n < b; ++n) {
                             axpy(1.0, self.grad.data() + (n * channels + offset) * plane,
                                  gi.data() + n * c * plane, c * plane);
                           }
                         }
                         offset += c;
                       }
                     });
}

Tensor crop2d(const Tensor& x, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  require_rank(x, 4, "crop2d");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (height == 0 || width == 0 || top + height > h || left + width > w) {
    throw DimensionError("crop2d: window outside " + shape_string(x.shape()));
  }
  std::vector<double> out(b * c * height * width);
  for (std::size_t pl = 0; pl < b * c; ++pl) {
    for (std::size_t y = 0; y < height; ++y) {
      std::copy_n(x.data().data() + pl * h * w + (top + y) * w + left, width,
                  out.data() + (pl * height + y) * width);
    }
  }
  auto xn = x.node();
  return make_result({b, c, height, width}, std::move(out), {xn}, "crop2d",
                     [xn, b, c, h, w, top, left, height, width](TensorNode& self) {
                       auto gx = xn->grad_buffer();
                       for (std::size_t pl = 0; pl < b * c; ++pl) {
                         for (std::size_t y = 0; y < height; ++y) {
                           axpy(1.0, self.grad.data() + (pl * height + y) * width,
                                gx.data() + pl * h * w + (top + y) * w + left, width);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                    Mode mode) {
  require_rank(x, 4, "batch_norm2d");
  const std::size_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw DimensionError("batch_norm2d: state has " + std::to_string(state.running_mean.size()) +
                         " channels, input has " + std::to_string(c));
  }
  if (gamma.defined() && gamma.numel() != c) throw DimensionError("batch_norm2d: gamma length");
  if (beta.defined() && beta.numel() != c) throw DimensionError("batch_norm2d: beta length");
  const std::size_t count = b * plane;
  if (mode == Mode::train && count < 2) {
    throw DegenerateStatsError("batch_norm2d: train mode needs at least two values per channel");
  }

  std::vector<double> mean_c(c), inv_std(c);
  const double* px = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (mode == Mode::train) {
      double acc = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* in = px + (n * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) acc += in[j];
      }
      const double mu = acc / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* in = px + (n * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) var += (in[j] - mu) * (in[j] - mu);
      }
      var /= static_cast<double>(count);
      mean_c[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
      state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
    } else {
      mean_c[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
    }
  }

  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (n * c + ch) * plane;
      const double gm = gamma.defined() ? gamma.data()[ch] : 1.0;
      const double bt = beta.defined() ? beta.data()[ch] : 0.0;
      for (std::size_t j = 0; j < plane; ++j) {
        const double v = (px[off + j] - mean_c[ch]) * inv_std[ch];
        xhat[off + j] = v;
        out[off + j] = gm * v + bt;
      }
    }
  }

  std::vector<NodePtr> inputs{x.node()};
  NodePtr gn = gamma.defined() ? gamma.node() : nullptr;
  NodePtr bn = beta.defined() ? beta.node() : nullptr;
  if (gn) inputs.push_back(gn);
  if (bn) inputs.push_back(bn);
  auto xn = x.node();
  const bool train = mode == Mode::train;
  return make_result(x.shape(), std::move(out), std::move(inputs), "batch_norm2d",
                     [xn, gn, bn, b, c, plane, count, train, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](TensorNode& self) {
                       const double* gy = self.grad.data();
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double sum_g = 0.0, sum_gx = 0.0;
                         for (std::size_t n = 0; n < b; ++n) {
                           const std::size_t off = (n * c + ch) * plane;
                           for (std::size_t j = 0; j < plane; ++j) {
                             sum_g += gy[off + j];
                             sum_gx += gy[off + j] * xhat[off + j];
                           }
                         }
                         if (gn && gn->requires_grad) gn->grad_buffer()[ch] += sum_gx;
                         if (bn && bn->requires_grad) bn->grad_buffer()[ch] += sum_g;
                         if (!xn->requires_grad) continue;
                         const double gm = gn ? gn->data[ch] : 1.0;
                         auto gx = xn->grad_buffer();
                         const double k = gm * inv_std[ch];
                         const double inv_count = 1.0 / static_cast<double>(count);
                         for (std::size_t n = 0; n < b; ++n) {
                           const std::size_t off = (n * c + ch) * plane;
                           for (std::size_t j = 0; j < plane; ++j) {
                             if (train) {
                               gx[off + j] += k * (gy[off + j] - inv_count * sum_g - xhat[off + j] * inv_count * sum_gx);
                             } else {
                               gx[off + j] += k * gy[off + j];
                             }
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {xn}, "dropout", [xn, mask = std::move(mask)](TensorNode& self) {
    auto gx = xn->grad_buffer();
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target) {
  if (pred.numel() != target.numel()) {
    throw DimensionError("loss: prediction " + shape_string(pred.shape()) + " vs target " +
                         shape_string(target.shape()));
  }
  const std::size_t n = pred.numel();
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto p = pred.data();
  const auto t = target.data();
  double total = 0.0;
  switch (kind) {
    case LossKind::bce:
      for (std::size_t i = 0; i < n; ++i) {
        const double q = std::clamp(p[i], kBceClamp, 1.0 - kBceClamp);
        total -= t[i] * std::log(q) + (1.0 - t[i]) * std::log(1.0 - q);
      }
      break;
    case LossKind::mse:
      for (std::size_t i = 0; i < n; ++i) total += (p[i] - t[i]) * (p[i] - t[i]);
      break;
    case LossKind::poisson_log:
      for (std::size_t i = 0; i < n; ++i) total += std::exp(p[i]) - t[i] * p[i];
      break;
  }
  auto pn = pred.node(), tn = target.node();
  return make_result({1}, {total * inv_n}, {pn, tn}, "loss", [pn, tn, kind, n, inv_n](TensorNode& self) {
    const double g = self.grad[0] * inv_n;
    const double* p = pn->data.data();
    const double* t = tn->data.data();
    if (pn->requires_grad) {
      auto gp = pn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
          case LossKind::bce: {
            // Clamped region has zero derivative.
            if (p[i] < kBceClamp || p[i] > 1.0 - kBceClamp) break;
            gp[i] += g * (p[i] - t[i]) / (p[i] * (1.0 - p[i]));
            break;
          }
          case LossKind::mse: gp[i] += g * 2.0 * (p[i] - t[i]); break;
          case LossKind::poisson_log: gp[i] += g * (std::exp(p[i]) - t[i]); break;
        }
      }
    }
    if (tn->requires_grad) {
      auto gt = tn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
          case LossKind::bce: {
            const double q = std::clamp(p[i], kBceClamp, 1.0 - kBceClamp);
            gt[i] += g * (std::log(1.0 - q) - std::log(q));
            break;
          }
          case LossKind::mse: gt[i] += g * 2.0 * (t[i] - p[i]); break;
          case LossKind::poisson_log: gt[i] -= g * p[i]; break;
        }
      }
    }
  });
}

}  // namespace malnas
