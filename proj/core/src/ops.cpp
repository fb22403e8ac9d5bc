#include "rayfusion/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>

#include "rayfusion/errors.hpp"

namespace rayfusion::ops {

using detail::make_result;
using detail::Node;
using detail::ParentGrads;

namespace {

const std::vector<double>& parent_value(const Node& self, std::size_t i) {
  return self.parents[i]->value;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.dim() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(x.shape()));
  }
}

template <typename Fn>
Tensor unary(const Tensor& x, Fn&& forward, detail::BackwardFn backward) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_result(x.shape(), std::move(out), {x}, std::move(backward));
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Direct cross-correlation kernels shared by conv3d and its transpose.
struct ConvGeometry {
  std::size_t cin, cout;
  std::array<std::size_t, 3> in, out, k, stride, pad;
};

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
std::pair<std::size_t, std::size_t> valid_range(std::size_t out_n, std::size_t in_n,
                                                std::size_t stride, std::size_t pad,
                                                std::size_t tap) {
  // need 0 <= o*stride - pad + tap < in_n
  long lo_num = static_cast<long>(pad) - static_cast<long>(tap);
  long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  long hi_num = static_cast<long>(in_n) - 1 + static_cast<long>(pad) - static_cast<long>(tap);
  if (hi_num < 0) return {0, 0};
  long hi = hi_num / static_cast<long>(stride) + 1;
  hi = std::min<long>(hi, static_cast<long>(out_n));
  if (lo >= hi) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

enum class ConvPass { kForward, kInputGrad, kWeightGrad };

// kForward:   out[co] += w[co,ci] * in[ci]
// kInputGrad: in[ci]  += w[co,ci] * out[co]
// kWeightGrad: w[co,ci] += out[co] * in[ci]
template <ConvPass Pass>
void correlate(const ConvGeometry& g, double* in, double* w, double* out) {
  const auto& [id, ih, iw] = g.in;
  const auto& [od, oh, ow] = g.out;
  const auto& [kd, kh, kw] = g.k;
  const auto& [sd, sh, sw] = g.stride;
  const auto& [pd, ph, pw] = g.pad;
  const std::size_t in_plane = ih * iw, in_vol = id * in_plane;
  const std::size_t out_plane = oh * ow, out_vol = od * out_plane;
  const std::size_t taps = kd * kh * kw;
  for (std::size_t co = 0; co < g.cout; ++co) {
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      double* in_c = in + ci * in_vol;
      double* out_c = out + co * out_vol;
      double* w_c = w + (co * g.cin + ci) * taps;
      for (std::size_t a = 0; a < kd; ++a) {
        const auto [z0, z1] = valid_range(od, id, sd, pd, a);
        for (std::size_t b = 0; b < kh; ++b) {
          const auto [y0, y1] = valid_range(oh, ih, sh, ph, b);
          for (std::size_t c = 0; c < kw; ++c) {
            const auto [x0, x1] = valid_range(ow, iw, sw, pw, c);
            if (x0 >= x1) continue;
            double& wv = w_c[(a * kh + b) * kw + c];
            double acc = 0.0;
            for (std::size_t z = z0; z < z1; ++z) {
              const std::size_t iz = z * sd + a - pd;
              for (std::size_t y = y0; y < y1; ++y) {
                const std::size_t iy = y * sh + b - ph;
                double* out_row = out_c + z * out_plane + y * ow;
                double* in_row = in_c + iz * in_plane + iy * iw;
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(c) - static_cast<std::ptrdiff_t>(pw);
                if constexpr (Pass == ConvPass::kForward) {
                  const double v = wv;
                  if (sw == 1) {
                    for (std::size_t x = x0; x < x1; ++x) out_row[x] += v * in_row[static_cast<std::ptrdiff_t>(x) + shift];
                  } else {
                    for (std::size_t x = x0; x < x1; ++x) out_row[x] += v * in_row[static_cast<std::ptrdiff_t>(x * sw) + shift];
                  }
                } else if constexpr (Pass == ConvPass::kInputGrad) {
                  const double v = wv;
                  if (sw == 1) {
                    for (std::size_t x = x0; x < x1; ++x) in_row[static_cast<std::ptrdiff_t>(x) + shift] += v * out_row[x];
                  } else {
                    for (std::size_t x = x0; x < x1; ++x) in_row[static_cast<std::ptrdiff_t>(x * sw) + shift] += v * out_row[x];
                  }
                } else {
                  if (sw == 1) {
                    for (std::size_t x = x0; x < x1; ++x) acc += out_row[x] * in_row[static_cast<std::ptrdiff_t>(x) + shift];
                  } else {
                    for (std::size_t x = x0; x < x1; ++x) acc += out_row[x] * in_row[static_cast<std::ptrdiff_t>(x * sw) + shift];
                  }
                }
              }
            }
            if constexpr (Pass == ConvPass::kWeightGrad) wv += acc;
          }
        }
      }
    }
  }
}

void check_conv_kernel(const Tensor& kernel, const Tensor& bias, std::size_t cin_axis,
                       std::size_t cin, std::size_t cout_axis, const char* op) {
  require_rank(kernel, 5, op);
  if (kernel.size(cin_axis) != cin) {
    throw DimensionError(std::string(op) + ": channel mismatch, input has " +
                         std::to_string(cin) + " channels, kernel " +
                         shape_string(kernel.shape()));
  }
  for (std::size_t axis = 2; axis < 5; ++axis) {
    if (kernel.size(axis) % 2 == 0) {
      throw ParameterError(std::string(op) + ": kernel extents must be odd, got " +
                           shape_string(kernel.shape()));
    }
  }
  if (bias.dim() != 1 || bias.size(0) != kernel.size(cout_axis)) {
    throw DimensionError(std::string(op) + ": bias " + shape_string(bias.shape()) +
                         " does not match kernel " + shape_string(kernel.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](const Node& self, ParentGrads& g) {
    for (auto& gi : g) {
      if (!gi.empty()) std::copy(self.grad.begin(), self.grad.end(), gi.begin());
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](const Node& self, ParentGrads& g) {
    if (!g[0].empty()) std::copy(self.grad.begin(), self.grad.end(), g[0].begin());
    if (!g[1].empty()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[1][i] = -self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](const Node& self, ParentGrads& g) {
    const auto& x = parent_value(self, 0);
    const auto& y = parent_value(self, 1);
    if (!g[0].empty()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[0][i] = self.grad[i] * y[i];
    }
    if (!g[1].empty()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[1][i] = self.grad[i] * x[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](const Node& self, ParentGrads& g) {
    const auto& x = parent_value(self, 0);
    const auto& y = parent_value(self, 1);
    if (!g[0].empty()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[0][i] = self.grad[i] / y[i];
    }
    if (!g[1].empty()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[1][i] = -self.grad[i] * x[i] / (y[i] * y[i]);
      }
    }
  });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](const Node& self, ParentGrads& g) {
    std::copy(self.grad.begin(), self.grad.end(), g[0].begin());
  });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](const Node& self, ParentGrads& g) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[0][i] = self.grad[i] * s;
  });
}

Tensor add_trailing(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.begin(), ys.end(), xs.end() - ys.size())) {
    throw DimensionError("add_trailing: " + shape_string(ys) +
                         " is not a trailing shape of " + shape_string(xs));
  }
  const std::size_t inner = y.numel();
  std::vector<double> out(x.numel());
  auto xv = x.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i % inner];
  return make_result(xs, std::move(out), {x, y}, [inner](const Node& self, ParentGrads& g) {
    if (!g[0].empty()) std::copy(self.grad.begin(), self.grad.end(), g[0].begin());
    if (!g[1].empty()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[1][i % inner] += self.grad[i];
    }
  });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](const Node& self, ParentGrads& g) {
        const auto& in = parent_value(self, 0);
        for (std::size_t i = 0; i < in.size(); ++i) {
          g[0][i] = self.grad[i] * (in[i] > 0.0 ? 1.0 : slope);
        }
      });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](const Node& self, ParentGrads& g) {
        const auto& in = parent_value(self, 0);
        for (std::size_t i = 0; i < in.size(); ++i) {
          const double sign = in[i] > 0.0 ? 1.0 : (in[i] < 0.0 ? -1.0 : 0.0);
          g[0][i] = self.grad[i] * sign;
        }
      });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; },
      [](const Node& self, ParentGrads& g) {
        const auto& in = parent_value(self, 0);
        for (std::size_t i = 0; i < in.size(); ++i) g[0][i] = 2.0 * in[i] * self.grad[i];
      });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw NumericError("log: argument must be positive and finite");
    }
  }
  return unary(
      x, [](double v) { return std::log(v); },
      [](const Node& self, ParentGrads& g) {
        const auto& in = parent_value(self, 0);
        for (std::size_t i = 0; i < in.size(); ++i) g[0][i] = self.grad[i] / in[i];
      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x}, [](const Node& self, ParentGrads& g) {
    std::fill(g[0].begin(), g[0].end(), self.grad[0]);
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_lastdim(const Tensor& x) {
  if (x.dim() == 0) throw DimensionError("sum_lastdim on a scalar");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const std::size_t n = x.shape().back();
  const std::size_t rows = shape_numel(out_shape);
  std::vector<double> out(rows, 0.0);
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += in[r * n + j];
    out[r] = acc;
  }
  return make_result(out_shape, std::move(out), {x}, [n](const Node& self, ParentGrads& g) {
    for (std::size_t i = 0; i < g[0].size(); ++i) g[0][i] = self.grad[i / n];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](const Node& self, ParentGrads& g) {
    std::copy(self.grad.begin(), self.grad.end(), g[0].begin());
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) {
    throw DimensionError("permute: axis list rank mismatch for " + shape_string(in_shape));
  }
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || seen[axes[i]]) throw DimensionError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = in_shape[axes[i]];
  }
  const auto in_strides = strides_of(in_shape);
  // source offset for each output element, walked with an odometer
  std::vector<std::size_t> gather(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < gather.size(); ++i) {
    gather[i] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      offset += in_strides[axes[ax]];
      if (++counter[ax] < out_shape[ax]) break;
      offset -= in_strides[axes[ax]] * out_shape[ax];
      counter[ax] = 0;
    }
  }
  std::vector<double> out(gather.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[gather[i]];
  return make_result(out_shape, std::move(out), {x},
                     [gather = std::move(gather)](const Node& self, ParentGrads& g) {
                       for (std::size_t i = 0; i < gather.size(); ++i) {
                         g[0][gather[i]] = self.grad[i];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& inputs, std::size_t axis) {
  if (inputs.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = inputs[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : inputs) {
    const auto& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: " + shape_string(s) + " incompatible with " +
                           shape_string(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + axis));
  const std::size_t inner = shape_numel(Shape(first.begin() + axis + 1, first.end()));
  std::vector<std::size_t> widths;
  for (const auto& t : inputs) widths.push_back(t.shape()[axis] * inner);
  const std::size_t out_width = out_shape[axis] * inner;
  std::vector<double> out(shape_numel(out_shape));
  std::size_t col = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto in = inputs[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(in.begin() + o * widths[k], widths[k], out.begin() + o * out_width + col);
    }
    col += widths[k];
  }
  return make_result(out_shape, std::move(out), inputs,
                     [outer, widths, out_width](const Node& self, ParentGrads& g) {
                       std::size_t col = 0;
                       for (std::size_t k = 0; k < g.size(); ++k) {
                         if (!g[k].empty()) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             std::copy_n(self.grad.begin() + o * out_width + col, widths[k],
                                         g[k].begin() + o * widths[k]);
                           }
                         }
                         col += widths[k];
                       }
                     });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& s = x.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of bounds for axis " +
                         std::to_string(axis) + " of " + shape_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t in_width = s[axis] * inner;
  const std::size_t width = length * inner;
  const std::size_t offset = start * inner;
  std::vector<double> out(outer * width);
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(in.begin() + o * in_width + offset, width, out.begin() + o * width);
  }
  return make_result(out_shape, std::move(out), {x},
                     [outer, width, in_width, offset](const Node& self, ParentGrads& g) {
                       for (std::size_t o = 0; o < outer; ++o) {
                         std::copy_n(self.grad.begin() + o * width, width,
                                     g[0].begin() + o * in_width + offset);
                       }
                     });
}

namespace {

// c[M x N] += a[M x K] . b (b is K x N, or N x K when b_transposed)
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n, bool b_transposed) {
  if (!b_transposed) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        const double* brow = b + p * n;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

// c[M x N] += a^T . b where a is [K x M], b is [K x N]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[p * m + i];
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor batched_product(const Tensor& a, const Tensor& b, bool b_transposed, bool batched) {
  const std::size_t base = batched ? 1 : 0;
  const char* name = batched ? (b_transposed ? "bmm_nt" : "bmm") : "matmul";
  require_rank(a, base + 2, name);
  require_rank(b, base + 2, name);
  const std::size_t batch = batched ? a.size(0) : 1;
  const std::size_t m = a.size(base);
  const std::size_t k = a.size(base + 1);
  const std::size_t bk = b_transposed ? b.size(base + 1) : b.size(base);
  const std::size_t n = b_transposed ? b.size(base) : b.size(base + 1);
  if (k != bk || (batched && b.size(0) != batch)) {
    throw DimensionError(std::string(name) + ": incompatible shapes " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n, 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_acc(av.data() + i * m * k, bv.data() + i * k * n, out.data() + i * m * n, m, k, n,
             b_transposed);
  }
  return make_result(
      out_shape, std::move(out), {a, b},
      [batch, m, k, n, b_transposed](const Node& self, ParentGrads& g) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        const double* gy = self.grad.data();
        for (std::size_t i = 0; i < batch; ++i) {
          const double* gyi = gy + i * m * n;
          const double* ai = av.data() + i * m * k;
          const double* bi = bv.data() + i * k * n;
          if (!g[0].empty()) {
            // dA = dY . B^T  (B is K x N)   or dY . B (B is N x K)
            gemm_acc(gyi, bi, g[0].data() + i * m * k, m, n, k, !b_transposed);
          }
          if (!g[1].empty()) {
            if (!b_transposed) {
              // dB[K x N] = A^T . dY
              gemm_tn_acc(ai, gyi, g[1].data() + i * k * n, k, m, n);
            } else {
              // dB[N x K] = dY^T . A
              gemm_tn_acc(gyi, ai, g[1].data() + i * k * n, n, m, k);
            }
          }
        }
      });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return batched_product(a, b, false, false); }
Tensor bmm(const Tensor& a, const Tensor& b) { return batched_product(a, b, false, true); }
Tensor bmm_nt(const Tensor& a, const Tensor& b) { return batched_product(a, b, true, true); }

Tensor softmax_lastdim(const Tensor& x) {
  if (x.dim() == 0 || x.shape().back() == 0) {
    throw DimensionError("softmax_lastdim: last axis must be non-empty, got " +
                         shape_string(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto in = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double peak = row[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("softmax_lastdim: non-finite input");
      peak = std::max(peak, row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(row[j] - peak);
      total += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= total;
  }
  return make_result(x.shape(), std::move(out), {x}, [n, rows](const Node& self, ParentGrads& g) {
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        g[0][r * n + j] = y[r * n + j] * (self.grad[r * n + j] - dot);
      }
    }
  });
}

Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, Conv3dOptions options) {
  require_rank(x, 4, "conv3d");
  check_conv_kernel(kernel, bias, 1, x.size(0), 0, "conv3d");
  ConvGeometry geo{};
  geo.cin = x.size(0);
  geo.cout = kernel.size(0);
  for (std::size_t ax = 0; ax < 3; ++ax) {
    const std::size_t k = kernel.size(ax + 2);
    const std::size_t s = options.stride[ax];
    if (s == 0) throw ParameterError("conv3d: stride must be positive");
    geo.in[ax] = x.size(ax + 1);
    geo.k[ax] = k;
    geo.stride[ax] = s;
    geo.pad[ax] = (k - 1) / 2;
    geo.out[ax] = (geo.in[ax] + 2 * geo.pad[ax] - k) / s + 1;
  }
  const Shape out_shape{geo.cout, geo.out[0], geo.out[1], geo.out[2]};
  const std::size_t out_vol = geo.out[0] * geo.out[1] * geo.out[2];
  std::vector<double> out(shape_numel(out_shape));
  auto b = bias.data();
  for (std::size_t co = 0; co < geo.cout; ++co) {
    std::fill_n(out.begin() + co * out_vol, out_vol, b[co]);
  }
  correlate<ConvPass::kForward>(geo, const_cast<double*>(x.data().data()),
                                const_cast<double*>(kernel.data().data()), out.data());
  return make_result(out_shape, std::move(out), {x, kernel, bias},
                     [geo, out_vol](const Node& self, ParentGrads& g) {
                       auto* gy = const_cast<double*>(self.grad.data());
                       auto* xv = const_cast<double*>(self.parents[0]->value.data());
                       auto* wv = const_cast<double*>(self.parents[1]->value.data());
                       if (!g[0].empty()) correlate<ConvPass::kInputGrad>(geo, g[0].data(), wv, gy);
                       if (!g[1].empty()) correlate<ConvPass::kWeightGrad>(geo, xv, g[1].data(), gy);
                       if (!g[2].empty()) {
                         for (std::size_t co = 0; co < geo.cout; ++co) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < out_vol; ++i) acc += gy[co * out_vol + i];
                           g[2][co] = acc;
                         }
                       }
                     });
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                        std::array<std::size_t, 3> stride,
                        std::array<std::size_t, 3> output_padding) {
  require_rank(x, 4, "conv_transpose3d");
  check_conv_kernel(kernel, bias, 0, x.size(0), 1, "conv_transpose3d");
  // Geometry of the forward conv this op is the adjoint of: big -> small.
  ConvGeometry geo{};
  geo.cout = x.size(0);
  geo.cin = kernel.size(1);
  for (std::size_t ax = 0; ax < 3; ++ax) {
    const std::size_t k = kernel.size(ax + 2);
    if (stride[ax] == 0 || output_padding[ax] >= stride[ax]) {
      throw ParameterError("conv_transpose3d: need 0 <= output_padding < stride");
    }
    geo.k[ax] = k;
    geo.stride[ax] = stride[ax];
    geo.pad[ax] = (k - 1) / 2;
    geo.out[ax] = x.size(ax + 1);
    const long big = static_cast<long>((geo.out[ax] - 1) * stride[ax] + k + output_padding[ax]) -
                     2 * static_cast<long>(geo.pad[ax]);
    if (big <= 0) throw DimensionError("conv_transpose3d: empty output");
    geo.in[ax] = static_cast<std::size_t>(big);
  }
  const Shape out_shape{geo.cin, geo.in[0], geo.in[1], geo.in[2]};
  const std::size_t out_vol = geo.in[0] * geo.in[1] * geo.in[2];
  std::vector<double> out(shape_numel(out_shape));
  auto b = bias.data();
  for (std::size_t c = 0; c < geo.cin; ++c) std::fill_n(out.begin() + c * out_vol, out_vol, b[c]);
  // Kernel layout [small x big x k..] matches the forward conv's [cout x cin x k..].
  correlate<ConvPass::kInputGrad>(geo, out.data(), const_cast<double*>(kernel.data().data()),
                                  const_cast<double*>(x.data().data()));
  return make_result(out_shape, std::move(out), {x, kernel, bias},
                     [geo, out_vol](const Node& self, ParentGrads& g) {
                       auto* gy = const_cast<double*>(self.grad.data());
                       auto* xv = const_cast<double*>(self.parents[0]->value.data());
                       auto* wv = const_cast<double*>(self.parents[1]->value.data());
                       if (!g[0].empty()) correlate<ConvPass::kForward>(geo, gy, wv, g[0].data());
                       if (!g[1].empty()) correlate<ConvPass::kWeightGrad>(geo, gy, g[1].data(), xv);
                       if (!g[2].empty()) {
                         for (std::size_t c = 0; c < geo.cin; ++c) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < out_vol; ++i) acc += gy[c * out_vol + i];
                           g[2][c] = acc;
                         }
                       }
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
  require_rank(x, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const auto& ks = kernel.shape();
  auto x4 = reshape(x, {x.size(0), 1, x.size(1), x.size(2)});
  auto k5 = reshape(kernel, {ks[0], ks[1], 1, ks[2], ks[3]});
  auto y = conv3d(x4, k5, bias, {{1, stride, stride}});
  return reshape(y, {y.size(0), y.size(2), y.size(3)});
}

Tensor avg_pool2d(const Tensor& x, std::size_t factor) {
  if (x.dim() < 2) throw DimensionError("avg_pool2d: need at least two axes");
  if (factor == 0) throw ParameterError("avg_pool2d: factor must be positive");
  const auto& s = x.shape();
  const std::size_t h = s[s.size() - 2];
  const std::size_t w = s[s.size() - 1];
  if (h % factor || w % factor) {
    throw DimensionError("avg_pool2d: extents " + shape_string(s) + " not divisible by " +
                         std::to_string(factor));
  }
  if (factor == 1) return x;
  const std::size_t oh = h / factor;
  const std::size_t ow = w / factor;
  const std::size_t planes = x.numel() / (h * w);
  Shape out_shape = s;
  out_shape[s.size() - 2] = oh;
  out_shape[s.size() - 1] = ow;
  const double norm = 1.0 / static_cast<double>(factor * factor);
  std::vector<double> out(planes * oh * ow, 0.0);
  auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out[(p * oh + y / factor) * ow + xx / factor] += in[(p * h + y) * w + xx];
      }
    }
  }
  for (double& v : out) v *= norm;
  return make_result(out_shape, std::move(out), {x},
                     [planes, h, w, oh, ow, factor, norm](const Node& self, ParentGrads& g) {
                       for (std::size_t p = 0; p < planes; ++p) {
                         for (std::size_t y = 0; y < h; ++y) {
                           for (std::size_t xx = 0; xx < w; ++xx) {
                             g[0][(p * h + y) * w + xx] =
                                 norm * self.grad[(p * oh + y / factor) * ow + xx / factor];
                           }
                         }
                       }
                     });
}

Tensor shift2d(const Tensor& x, int dy, int dx) {
  if (x.dim() < 2) throw DimensionError("shift2d: need at least two axes");
  const auto& s = x.shape();
  const long h = static_cast<long>(s[s.size() - 2]);
  const long w = static_cast<long>(s[s.size() - 1]);
  const std::size_t planes = x.numel() / static_cast<std::size_t>(h * w);
  std::vector<double> out(x.numel(), 0.0);
  auto in = x.data();
  auto for_each = [=](auto&& fn) {
    for (std::size_t p = 0; p < planes; ++p) {
      for (long y = 0; y < h; ++y) {
        const long sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        for (long xx = 0; xx < w; ++xx) {
          const long sx = xx + dx;
          if (sx < 0 || sx >= w) continue;
          fn((p * h + y) * w + xx, (p * h + sy) * w + sx);
        }
      }
    }
  };
  for_each([&](std::size_t dst, std::size_t src) { out[dst] = in[src]; });
  return make_result(s, std::move(out), {x}, [for_each](const Node& self, ParentGrads& g) {
    for_each([&](std::size_t dst, std::size_t src) { g[0][src] += self.grad[dst]; });
  });
}

}  // namespace rayfusion::ops
