#include "naln/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "naln/error.hpp"

namespace naln::ops {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
  }
}

std::vector<double> copy(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

double order_invariant_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = copy(a.data());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b},
                             [](std::span<const double> g, detail::GradBuffers& gin) {
                               for (auto& buf : gin) {
                                 if (!buf.empty()) std::copy(g.begin(), g.end(), buf.begin());
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto out = copy(a.data());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), "sub", {a, b},
                             [](std::span<const double> g, detail::GradBuffers& gin) {
                               if (!gin[0].empty()) std::copy(g.begin(), g.end(), gin[0].begin());
                               if (!gin[1].empty()) {
                                 for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] = -g[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = copy(a.data());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b},
                             [a, b](std::span<const double> g, detail::GradBuffers& gin) {
                               auto ad = a.data();
                               auto bd = b.data();
                               if (!gin[0].empty()) {
                                 for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * bd[i];
                               }
                               if (!gin[1].empty()) {
                                 for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] = g[i] * ad[i];
                               }
                             });
}

Tensor scale(const Tensor& a, double s) {
  auto out = copy(a.data());
  for (auto& v : out) v *= s;
  return Tensor::make_result(a.shape(), std::move(out), "scale", {a},
                             [s](std::span<const double> g, detail::GradBuffers& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * s;
                             });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({}, {s}, "sum", {a}, [](std::span<const double> g, detail::GradBuffers& gin) {
    std::fill(gin[0].begin(), gin[0].end(), g[0]);
  });
}

Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.numel());
  if (n == 0) throw EmptySetError("mean of empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({}, {s / n}, "mean", {a}, [n](std::span<const double> g, detail::GradBuffers& gin) {
    std::fill(gin[0].begin(), gin[0].end(), g[0] / n);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), copy(a.data()), "reshape", {a},
                             [](std::span<const double> g, detail::GradBuffers& gin) {
                               std::copy(g.begin(), g.end(), gin[0].begin());
                             });
}

namespace {

// Swaps axes i0 < i1 of a tensor laid out as [outer, n0, mid, n1, inner].
void swap_axes(std::span<const double> src, std::span<double> dst, std::size_t outer, std::size_t n0,
               std::size_t mid, std::size_t n1, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n0; ++i)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t j = 0; j < n1; ++j) {
          const std::size_t s = (((o * n0 + i) * mid + m) * n1 + j) * inner;
          const std::size_t d = (((o * n1 + j) * mid + m) * n0 + i) * inner;
          std::copy_n(src.begin() + s, inner, dst.begin() + d);
        }
}

}  // namespace

Tensor transpose(const Tensor& a, std::size_t d0, std::size_t d1) {
  const Shape& s = a.shape();
  if (d0 >= s.size() || d1 >= s.size()) {
    throw DimensionError("transpose: axes out of range for shape " + shape_str(s));
  }
  if (d0 == d1) return reshape(a, s);
  if (d0 > d1) std::swap(d0, d1);
  std::size_t outer = 1, mid = 1, inner = 1;
  for (std::size_t i = 0; i < d0; ++i) outer *= s[i];
  for (std::size_t i = d0 + 1; i < d1; ++i) mid *= s[i];
  for (std::size_t i = d1 + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n0 = s[d0], n1 = s[d1];
  Shape out_shape = s;
  std::swap(out_shape[d0], out_shape[d1]);
  std::vector<double> out(a.numel());
  swap_axes(a.data(), out, outer, n0, mid, n1, inner);
  return Tensor::make_result(std::move(out_shape), std::move(out), "transpose", {a},
                             [=](std::span<const double> g, detail::GradBuffers& gin) {
                               swap_axes(g, gin[0], outer, n1, mid, n0, inner);
                             });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t dim) {
  if (parts.empty()) throw EmptySetError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (dim >= out_shape.size()) throw DimensionError("concat: dim out of range for " + shape_str(out_shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == out_shape.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == dim) || s[i] == out_shape[i];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(out_shape) + " and " + shape_str(s));
    }
    total += s[dim];
  }
  out_shape[dim] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= out_shape[i];
  for (std::size_t i = dim + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(dim) * inner);
  const std::size_t row = total * inner;

  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto d = parts[pi].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(d.begin() + o * widths[pi], widths[pi], out.begin() + o * row + offset);
    }
    offset += widths[pi];
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), "concat", parts,
                             [=](std::span<const double> g, detail::GradBuffers& gin) {
                               std::size_t off = 0;
                               for (std::size_t pi = 0; pi < gin.size(); ++pi) {
                                 if (!gin[pi].empty()) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     std::copy_n(g.begin() + o * row + off, widths[pi],
                                                 gin[pi].begin() + o * widths[pi]);
                                   }
                                 }
                                 off += widths[pi];
                               }
                             });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (s.empty() || begin > end || end > s[0]) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(s));
  }
  const std::size_t inner = s[0] ? a.numel() / s[0] : 0;
  Shape out_shape = s;
  out_shape[0] = end - begin;
  auto d = a.data();
  std::vector<double> out(d.begin() + begin * inner, d.begin() + end * inner);
  return Tensor::make_result(std::move(out_shape), std::move(out), "slice_rows", {a},
                             [=](std::span<const double> g, detail::GradBuffers& gin) {
                               std::copy(g.begin(), g.end(), gin[0].begin() + begin * inner);
                             });
}

namespace {

// Fixed-order dot product with four partial sums.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
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

// Output positions `to` in [lo, hi) for which to*stride + off lies in [0, len).
std::pair<std::size_t, std::size_t> valid_range(long off, std::size_t stride, std::size_t len,
                                                 std::size_t t_out) {
  const long s = static_cast<long>(stride);
  long lo = off < 0 ? (-off + s - 1) / s : 0;
  long last = static_cast<long>(len) - 1 - off;
  if (last < 0) return {0, 0};
  long hi = std::min(static_cast<long>(t_out), last / s + 1);
  if (lo >= hi) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t dilation, std::size_t groups, std::size_t padding) {
  require_rank(input, 3, "conv1d input");
  require_rank(kernel, 3, "conv1d kernel");
  const std::size_t B = input.dim(0), C = input.dim(1), T = input.dim(2);
  const std::size_t F = kernel.dim(0), Cg = kernel.dim(1), K = kernel.dim(2);
  if (groups == 0 || stride == 0 || dilation == 0 || K == 0) {
    throw ParameterError("conv1d: stride, dilation, groups and kernel length must be >= 1");
  }
  if (C % groups != 0 || F % groups != 0 || Cg * groups != C) {
    throw DimensionError("conv1d: input channels " + std::to_string(C) + ", kernel " +
                         shape_str(kernel.shape()) + ", groups " + std::to_string(groups));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != F)) {
    throw DimensionError("conv1d: bias shape " + shape_str(bias.shape()) + " for " + std::to_string(F) +
                         " filters");
  }
  const std::size_t span_len = dilation * (K - 1) + 1;
  if (T + 2 * padding < span_len) {
    throw EmptyOutputError("conv1d: input length " + std::to_string(T) + " with padding " +
                           std::to_string(padding) + " shorter than dilated kernel span " +
                           std::to_string(span_len));
  }
  const std::size_t T_out = (T + 2 * padding - span_len) / stride + 1;
  const std::size_t Fg = F / groups;

  auto x = input.data();
  auto w = kernel.data();
  std::vector<double> out(B * F * T_out, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      double* o = out.data() + (b * F + f) * T_out;
      if (bias.defined()) std::fill_n(o, T_out, bias.data()[f]);
      const std::size_t g = f / Fg;
      for (std::size_t ci = 0; ci < Cg; ++ci) {
        const double* xr = x.data() + (b * C + g * Cg + ci) * T;
        const double* wr = w.data() + (f * Cg + ci) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const long off = static_cast<long>(k * dilation) - static_cast<long>(padding);
          auto [lo, hi] = valid_range(off, stride, T, T_out);
          const double wk = wr[k];
          if (stride == 1) {
            const double* xs = xr + (static_cast<long>(lo) + off);
            double* os = o + lo;
            for (std::size_t t = 0; t < hi - lo; ++t) os[t] += wk * xs[t];
          } else {
            for (std::size_t t = lo; t < hi; ++t) o[t] += wk * xr[t * stride + off];
          }
        }
      }
    }
  }

  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      {B, F, T_out}, std::move(out), "conv1d", inputs,
      [=](std::span<const double> go, detail::GradBuffers& gin) {
        auto xd = input.data();
        auto wd = kernel.data();
        auto& gx = gin[0];
        auto& gw = gin[1];
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t f = 0; f < F; ++f) {
            const double* gr = go.data() + (b * F + f) * T_out;
            if (gin.size() > 2 && !gin[2].empty()) {
              double s = 0.0;
              for (std::size_t t = 0; t < T_out; ++t) s += gr[t];
              gin[2][f] += s;
            }
            const std::size_t g = f / Fg;
            for (std::size_t ci = 0; ci < Cg; ++ci) {
              const std::size_t xrow = (b * C + g * Cg + ci) * T;
              const double* xr = xd.data() + xrow;
              for (std::size_t k = 0; k < K; ++k) {
                const long off = static_cast<long>(k * dilation) - static_cast<long>(padding);
                auto [lo, hi] = valid_range(off, stride, T, T_out);
                const std::size_t widx = (f * Cg + ci) * K + k;
                if (stride == 1) {
                  const double* xs = xr + (static_cast<long>(lo) + off);
                  if (!gw.empty()) gw[widx] += dot(gr + lo, xs, hi - lo);
                  if (!gx.empty()) {
                    const double wk = wd[widx];
                    double* gxs = gx.data() + xrow + (static_cast<long>(lo) + off);
                    const double* gs = gr + lo;
                    for (std::size_t t = 0; t < hi - lo; ++t) gxs[t] += wk * gs[t];
                  }
                  continue;
                }
                if (!gw.empty()) {
                  double s = 0.0;
                  for (std::size_t t = lo; t < hi; ++t) s += gr[t] * xr[t * stride + off];
                  gw[widx] += s;
                }
                if (!gx.empty()) {
                  const double wk = wd[widx];
                  double* gxr = gx.data() + xrow;
                  for (std::size_t t = lo; t < hi; ++t) gxr[t * stride + off] += wk * gr[t];
                }
              }
            }
          }
        }
      });
}

Tensor depthwise_conv_channels(const Tensor& input, const Tensor& kernel, std::size_t depth_multiplier) {
  require_rank(input, 4, "depthwise_conv_channels input");
  require_rank(kernel, 4, "depthwise_conv_channels kernel");
  const std::size_t B = input.dim(0), C = input.dim(1), E = input.dim(2), T = input.dim(3);
  const std::size_t D = depth_multiplier;
  if (D == 0) throw ParameterError("depthwise_conv_channels: depth multiplier must be >= 1");
  if (kernel.dim(2) != E) {
    throw DimensionError("depthwise_conv_channels: kernel electrode extent " + std::to_string(kernel.dim(2)) +
                         " != input electrodes " + std::to_string(E));
  }
  if (kernel.dim(0) != C * D || kernel.dim(1) != 1 || kernel.dim(3) != 1) {
    throw DimensionError("depthwise_conv_channels: kernel " + shape_str(kernel.shape()) + " for " +
                         std::to_string(C) + " channels x multiplier " + std::to_string(D));
  }
  // One group per input channel; each group sees that channel's E electrodes.
  Tensor flat = reshape(input, {B, C * E, T});
  Tensor w = reshape(kernel, {C * D, E, 1});
  Tensor out = conv1d(flat, w, Tensor{}, 1, 1, C, 0);
  return reshape(out, {B, C * D, 1, T});
}

Tensor avg_pool1d(const Tensor& input, std::size_t k, std::size_t stride, std::size_t pad_left,
                  std::size_t pad_right) {
  require_rank(input, 3, "avg_pool1d");
  if (k == 0 || stride == 0) throw ParameterError("avg_pool1d: k and stride must be >= 1");
  const std::size_t B = input.dim(0), C = input.dim(1), T = input.dim(2);
  const std::size_t padded = T + pad_left + pad_right;
  if (padded < k) {
    throw EmptyOutputError("avg_pool1d: input length " + std::to_string(T) + " shorter than window " +
                           std::to_string(k));
  }
  const std::size_t T_out = (padded - k) / stride + 1;
  const double inv = 1.0 / static_cast<double>(k);
  auto x = input.data();
  std::vector<double> out(B * C * T_out);
  for (std::size_t r = 0; r < B * C; ++r) {
    const double* xr = x.data() + r * T;
    double* o = out.data() + r * T_out;
    for (std::size_t t = 0; t < T_out; ++t) {
      const long start = static_cast<long>(t * stride) - static_cast<long>(pad_left);
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const long idx = start + static_cast<long>(j);
        if (idx >= 0 && idx < static_cast<long>(T)) s += xr[idx];
      }
      o[t] = s * inv;
    }
  }
  return Tensor::make_result({B, C, T_out}, std::move(out), "avg_pool1d", {input},
                             [=](std::span<const double> g, detail::GradBuffers& gin) {
                               for (std::size_t r = 0; r < B * C; ++r) {
                                 double* gx = gin[0].data() + r * T;
                                 const double* gr = g.data() + r * T_out;
                                 for (std::size_t t = 0; t < T_out; ++t) {
                                   const long start = static_cast<long>(t * stride) - static_cast<long>(pad_left);
                                   const double v = gr[t] * inv;
                                   for (std::size_t j = 0; j < k; ++j) {
                                     const long idx = start + static_cast<long>(j);
                                     if (idx >= 0 && idx < static_cast<long>(T)) gx[idx] += v;
                                   }
                                 }
                               }
                             });
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 3, "global_avg_pool");
  const std::size_t B = input.dim(0), C = input.dim(1), T = input.dim(2);
  if (T == 0) throw EmptyOutputError("global_avg_pool: zero-length input");
  auto x = input.data();
  std::vector<double> out(B * C);
  for (std::size_t r = 0; r < B * C; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) s += x[r * T + t];
    out[r] = s / static_cast<double>(T);
  }
  return Tensor::make_result({B, C}, std::move(out), "global_avg_pool", {input},
                             [=](std::span<const double> g, detail::GradBuffers& gin) {
                               for (std::size_t r = 0; r < B * C; ++r) {
                                 const double v = g[r] / static_cast<double>(T);
                                 std::fill_n(gin[0].begin() + r * T, T, v);
                               }
                             });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t B = input.dim(0), N = input.dim(1), M = weight.dim(0);
  if (weight.dim(1) != N) {
    throw DimensionError("linear: input " + shape_str(input.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != M)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(M) + " outputs");
  }
  auto x = input.data();
  auto w = weight.data();
  std::vector<double> out(B * M);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t m = 0; m < M; ++m) {
      double s = bias.defined() ? bias.data()[m] : 0.0;
      const double* xr = x.data() + b * N;
      const double* wr = w.data() + m * N;
      for (std::size_t n = 0; n < N; ++n) s += xr[n] * wr[n];
      out[b * M + m] = s;
    }
  }
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result({B, M}, std::move(out), "linear", inputs,
                             [=](std::span<const double> g, detail::GradBuffers& gin) {
                               auto xd = input.data();
                               auto wd = weight.data();
                               for (std::size_t b = 0; b < B; ++b) {
                                 for (std::size_t m = 0; m < M; ++m) {
                                   const double gv = g[b * M + m];
                                   if (!gin[0].empty()) {
                                     double* gx = gin[0].data() + b * N;
                                     const double* wr = wd.data() + m * N;
                                     for (std::size_t n = 0; n < N; ++n) gx[n] += gv * wr[n];
                                   }
                                   if (!gin[1].empty()) {
                                     double* gw = gin[1].data() + m * N;
                                     const double* xr = xd.data() + b * N;
                                     for (std::size_t n = 0; n < N; ++n) gw[n] += gv * xr[n];
                                   }
                                   if (gin.size() > 2 && !gin[2].empty()) gin[2][m] += gv;
                                 }
                               }
                             });
}

Tensor elu(const Tensor& x, double alpha) {
  auto out = copy(x.data());
  for (auto& v : out) {
    if (v < 0) v = alpha * std::expm1(v);
  }
  return Tensor::make_result(x.shape(), out, "elu", {x},
                             [x, out, alpha](std::span<const double> g, detail::GradBuffers& gin) {
                               auto xd = x.data();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 gin[0][i] = xd[i] >= 0 ? g[i] : g[i] * (out[i] + alpha);
                               }
                             });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep;
  auto out = copy(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tensor::make_result(x.shape(), std::move(out), "dropout", {x},
                             [mask = std::move(mask)](std::span<const double> g, detail::GradBuffers& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * mask[i];
                             });
}

Tensor log_softmax(const Tensor& x) {
  require_rank(x, 2, "log_softmax");
  const std::size_t B = x.dim(0), C = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    const double* r = xd.data() + b * C;
    const double m = *std::max_element(r, r + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(r[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < C; ++c) out[b * C + c] = r[c] - lse;
  }
  return Tensor::make_result({B, C}, out, "log_softmax", {x},
                             [out, B, C](std::span<const double> g, detail::GradBuffers& gin) {
                               for (std::size_t b = 0; b < B; ++b) {
                                 double gs = 0.0;
                                 for (std::size_t c = 0; c < C; ++c) gs += g[b * C + c];
                                 for (std::size_t c = 0; c < C; ++c) {
                                   gin[0][b * C + c] = g[b * C + c] - std::exp(out[b * C + c]) * gs;
                                 }
                               }
                             });
}

Tensor channel_affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 2) throw DimensionError("channel_affine: input rank < 2: " + shape_str(x.shape()));
  const std::size_t K = x.dim(0), C = x.dim(1);
  const std::size_t inner = C ? x.numel() / (K * C) : 0;
  if (weight.numel() != C || bias.numel() != C) {
    throw DimensionError("channel_affine: " + std::to_string(C) + " channels but weight " +
                         shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  auto xd = x.data();
  auto w = weight.data();
  auto bb = bias.data();
  std::vector<double> out(x.numel());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (k * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = w[c] * xd[base + i] + bb[c];
    }
  return Tensor::make_result(x.shape(), std::move(out), "channel_affine", {x, weight, bias},
                             [=](std::span<const double> g, detail::GradBuffers& gin) {
                               auto xv = x.data();
                               auto wv = weight.data();
                               for (std::size_t k = 0; k < K; ++k)
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t base = (k * C + c) * inner;
                                   double sw = 0.0, sb = 0.0;
                                   for (std::size_t i = 0; i < inner; ++i) {
                                     const double gv = g[base + i];
                                     if (!gin[0].empty()) gin[0][base + i] = gv * wv[c];
                                     sw += gv * xv[base + i];
                                     sb += gv;
                                   }
                                   if (!gin[1].empty()) gin[1][c] += sw;
                                   if (!gin[2].empty()) gin[2][c] += sb;
                                 }
                             });
}

Tensor group_standardize(const Tensor& x, const std::vector<std::size_t>& bounds, double eps) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("group_standardize: expected [K,C] or [K,C,T], got " + shape_str(x.shape()));
  }
  if (!(eps > 0)) throw ParameterError("group_standardize: epsilon must be > 0");
  const std::size_t K = x.dim(0), C = x.dim(1), T = x.rank() == 3 ? x.dim(2) : 1;
  if (bounds.size() < 2 || bounds.front() != 0 || bounds.back() != K) {
    throw ContractError("group_standardize: group bounds must run from 0 to " + std::to_string(K));
  }
  const std::size_t G = bounds.size() - 1;
  for (std::size_t g = 0; g < G; ++g) {
    if (bounds[g + 1] <= bounds[g]) throw EmptySetError("group_standardize: empty subject group " + std::to_string(g));
  }
  auto xd = x.data();
  // Per (group, channel): mean, population std, divisor.
  std::vector<double> mu(G * C), sd(G * C), div(G * C);
  std::vector<double> partial;
  for (std::size_t g = 0; g < G; ++g) {
    const std::size_t k0 = bounds[g], k1 = bounds[g + 1];
    const double n = static_cast<double>((k1 - k0) * T);
    for (std::size_t c = 0; c < C; ++c) {
      partial.clear();
      for (std::size_t k = k0; k < k1; ++k) {
        const double* r = xd.data() + (k * C + c) * T;
        double s = 0.0;
        for (std::size_t t = 0; t < T; ++t) s += r[t];
        partial.push_back(s);
      }
      const double m = order_invariant_sum(partial) / n;
      partial.clear();
      for (std::size_t k = k0; k < k1; ++k) {
        const double* r = xd.data() + (k * C + c) * T;
        double s = 0.0;
        for (std::size_t t = 0; t < T; ++t) s += (r[t] - m) * (r[t] - m);
        partial.push_back(s);
      }
      const double v = order_invariant_sum(partial) / n;
      mu[g * C + c] = m;
      sd[g * C + c] = std::sqrt(v);
      div[g * C + c] = std::max(sd[g * C + c], eps);
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = bounds[g]; k < bounds[g + 1]; ++k)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (k * C + c) * T;
        const double m = mu[g * C + c], s = div[g * C + c];
        for (std::size_t t = 0; t < T; ++t) out[base + t] = (xd[base + t] - m) / s;
      }
  return Tensor::make_result(
      x.shape(), std::move(out), "group_standardize", {x},
      [=](std::span<const double> gout, detail::GradBuffers& gin) {
        auto xv = x.data();
        for (std::size_t g = 0; g < G; ++g) {
          const std::size_t k0 = bounds[g], k1 = bounds[g + 1];
          const double n = static_cast<double>((k1 - k0) * T);
          for (std::size_t c = 0; c < C; ++c) {
            const double m = mu[g * C + c], sigma = sd[g * C + c], s = div[g * C + c];
            double gsum = 0.0, gxsum = 0.0;
            for (std::size_t k = k0; k < k1; ++k) {
              const std::size_t base = (k * C + c) * T;
              for (std::size_t t = 0; t < T; ++t) {
                gsum += gout[base + t];
                gxsum += gout[base + t] * (xv[base + t] - m);
              }
            }
            const double gmean = gsum / n;
            // The std path only contributes when std > eps (otherwise the divisor is constant).
            const double coef = sigma > eps ? gxsum / (n * sigma * s * s) : 0.0;
            for (std::size_t k = k0; k < k1; ++k) {
              const std::size_t base = (k * C + c) * T;
              for (std::size_t t = 0; t < T; ++t) {
                gin[0][base + t] = (gout[base + t] - gmean) / s - (xv[base + t] - m) * coef;
              }
            }
          }
        }
      });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t M = x.dim(0), N = x.dim(1);
  if (M == 0) throw EmptySetError("mean_rows: zero rows");
  auto xd = x.data();
  std::vector<double> out(N), col(M);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t m = 0; m < M; ++m) col[m] = xd[m * N + n];
    out[n] = order_invariant_sum(col) / static_cast<double>(M);
  }
  return Tensor::make_result({1, N}, std::move(out), "mean_rows", {x},
                             [M, N](std::span<const double> g, detail::GradBuffers& gin) {
                               for (std::size_t m = 0; m < M; ++m)
                                 for (std::size_t n = 0; n < N; ++n) gin[0][m * N + n] = g[n] / static_cast<double>(M);
                             });
}

Tensor broadcast_rows(const Tensor& x, std::size_t m) {
  require_rank(x, 2, "broadcast_rows");
  if (x.dim(0) != 1) throw DimensionError("broadcast_rows: expected [1,N], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(m * N);
  for (std::size_t i = 0; i < m; ++i) std::copy(xd.begin(), xd.end(), out.begin() + i * N);
  return Tensor::make_result({m, N}, std::move(out), "broadcast_rows", {x},
                             [m, N](std::span<const double> g, detail::GradBuffers& gin) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t n = 0; n < N; ++n) gin[0][n] += g[i * N + n];
                             });
}

}  // namespace naln::ops
