#pragma once

// Differentiable operators. Every op takes an optional Tape; recording only
// happens when a tape is given and at least one operand requires grad.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dfbf/autodiff.hpp"
#include "dfbf/error.hpp"
#include "dfbf/tensor.hpp"

namespace dfbf::ops {

namespace detail {

template <typename T, typename... Vars>
bool any_requires_grad(const Tape<T>* tape, const Vars&... vars) {
  return tape != nullptr && (vars.requires_grad() || ...);
}

template <typename T>
void expect_same_shape(const Var<T>& a, const Var<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void check_finite(const Tensor<T>& t, std::string_view op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
}

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox*stride + j - padding is in
// [0, W).
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeometry& g, std::size_t j) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding), jj = static_cast<std::ptrdiff_t>(j);
  const auto st = static_cast<std::ptrdiff_t>(g.stride), W = static_cast<std::ptrdiff_t>(g.width);
  const auto ow = static_cast<std::ptrdiff_t>(g.out_w);
  // smallest ox with ox*st >= pad - j, largest with ox*st <= W - 1 + pad - j
  const std::ptrdiff_t need = pad - jj;
  const std::ptrdiff_t lo = need <= 0 ? 0 : (need + st - 1) / st;
  const std::ptrdiff_t top = W - 1 + pad - jj;
  const std::ptrdiff_t hi = top < 0 ? 0 : std::min(ow, top / st + 1);
  return {static_cast<std::size_t>(std::min(lo, ow)), static_cast<std::size_t>(std::max(hi, std::min(lo, ow)))};
}

// col[k, p] with k = (c*kh + i)*kw + j and p = oy*out_w + ox.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const auto P = g.pixels();
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const T* xc = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        const auto [lo, hi] = valid_cols(g, j);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(g.padding);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                          static_cast<std::ptrdiff_t>(g.padding);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = xc + iy * static_cast<std::ptrdiff_t>(g.width);
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1 && hi > lo) {
            std::copy_n(src + (static_cast<std::ptrdiff_t>(lo) + shift), hi - lo, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) {
              dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + shift];
            }
          }
          std::fill(dst + hi, dst + g.out_w, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const auto P = g.pixels();
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    T* dxc = dx + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        const auto [lo, hi] = valid_cols(g, j);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(g.padding);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * g.out_w;
          T* dst = dxc + iy * static_cast<std::ptrdiff_t>(g.width);
          for (std::size_t ox = lo; ox < hi; ++ox) {
            dst[static_cast<std::ptrdiff_t>(ox * g.stride) + shift] += src[ox];
          }
        }
      }
    }
  }
}

// C[M,N] += A[M,K] * B[K,N], all row-major with leading dimensions lda/ldb/ldc.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda,
              const T* B, std::size_t ldb, T* C, std::size_t ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N),
             k = static_cast<Eigen::Index>(K);
  Eigen::Map<const Mat, 0, Stride> a(A, m, k, Stride(static_cast<Eigen::Index>(lda)));
  Eigen::Map<const Mat, 0, Stride> b(B, k, n, Stride(static_cast<Eigen::Index>(ldb)));
  Eigen::Map<Mat, 0, Stride> c(C, m, n, Stride(static_cast<Eigen::Index>(ldc)));
  c.noalias() += a * b;
}

}  // namespace detail

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t padding) {
  if (in + 2 * padding < k) return 0;
  return (in + 2 * padding - k) / stride + 1;
}

/// Cross-correlation of x[B,Cin,H,W] with weight[Cout,Cin,kh,kw].
template <typename T>
Var<T> conv2d(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>* bias,
              Conv2dParams params) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  expect_rank(xv, 4, "conv2d input");
  expect_rank(wv, 4, "conv2d weight");
  if (params.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (xv.dim(1) != wv.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(xv.dim(1)) +
                     " do not match weight " + shape_str(wv.shape()));
  }
  detail::ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2),
                         wv.dim(3), params.stride, params.padding, 0, 0};
  g.out_h = conv_out_extent(g.height, g.kh, g.stride, g.padding);
  g.out_w = conv_out_extent(g.width, g.kw, g.stride, g.padding);
  if (g.out_h < 1 || g.out_w < 1) {
    throw ShapeError("conv2d: kernel " + shape_str(wv.shape()) + " does not fit input " +
                     shape_str(xv.shape()));
  }
  if (bias != nullptr && (bias->value().rank() != 1 || bias->value().dim(0) != g.out_ch)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " for " +
                     std::to_string(g.out_ch) + " filters");
  }

  const auto K = g.patch();
  const auto P = g.pixels();
  Tensor<T> out({g.batch, g.out_ch, g.out_h, g.out_w});
  std::vector<T> col(K * P);
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::im2col(xv.raw() + b * g.in_ch * g.height * g.width, g, col.data());
    T* o = out.raw() + b * g.out_ch * P;
    for (std::size_t co = 0; co < g.out_ch; ++co) {
      std::fill(o + co * P, o + (co + 1) * P, bias ? bias->value()[co] : T{0});
    }
    detail::gemm_acc(g.out_ch, P, K, wv.raw(), K, col.data(), P, o, P);
  }

  const bool rg = bias ? detail::any_requires_grad(tape, x, weight, *bias)
                       : detail::any_requires_grad(tape, x, weight);
  Var<T> result(std::move(out), rg);
  if (rg) {
    Var<T> bias_var = bias ? *bias : Var<T>();
    const bool has_bias = bias != nullptr;
    tape->record("conv2d", [x, weight, bias_var, has_bias, result, g]() mutable {
      if (!result.has_grad()) return;
      const auto K = g.patch();
      const auto P = g.pixels();
      const T* dout = result.grad().raw();
      const auto in_stride = g.in_ch * g.height * g.width;
      std::vector<T> col(K * P);
      if (weight.requires_grad()) {
        // dW[co, :] += dout[co, p] * colT[p, :]; colT keeps the inner loop contiguous.
        std::vector<T> colT(P * K);
        T* dw = weight.grad_buffer().raw();
        for (std::size_t b = 0; b < g.batch; ++b) {
          detail::im2col(x.value().raw() + b * in_stride, g, col.data());
          for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t p = 0; p < P; ++p) colT[p * K + k] = col[k * P + p];
          }
          detail::gemm_acc(g.out_ch, K, P, dout + b * g.out_ch * P, P, colT.data(), K, dw, K);
        }
      }
      if (has_bias && bias_var.requires_grad()) {
        T* db = bias_var.grad_buffer().raw();
        for (std::size_t b = 0; b < g.batch; ++b) {
          for (std::size_t co = 0; co < g.out_ch; ++co) {
            const T* gr = dout + (b * g.out_ch + co) * P;
            T acc = 0;
            for (std::size_t p = 0; p < P; ++p) acc += gr[p];
            db[co] += acc;
          }
        }
      }
      if (x.requires_grad()) {
        T* dx = x.grad_buffer().raw();
        // dcol = W^T dout
        const T* w = weight.value().raw();
        std::vector<T> wT(K * g.out_ch);
        for (std::size_t co = 0; co < g.out_ch; ++co) {
          for (std::size_t k = 0; k < K; ++k) wT[k * g.out_ch + co] = w[co * K + k];
        }
        for (std::size_t b = 0; b < g.batch; ++b) {
          std::fill(col.begin(), col.end(), T{0});
          detail::gemm_acc(K, P, g.out_ch, wT.data(), g.out_ch, dout + b * g.out_ch * P, P,
                           col.data(), P);
          detail::col2im_add(col.data(), g, dx + b * in_stride);
        }
      }
    });
  }
  return result;
}

enum class BnMode {
  Train,      // normalize by batch stats, update running stats
  Eval,       // normalize by running stats
  Synthesis,  // normalize by running stats, expose batch stats, never update
};

struct BatchNormParams {
  BnMode mode = BnMode::Eval;
  double momentum = 0.1;
  double eps = 1e-5;
};

template <typename T>
struct BatchNormResult {
  Var<T> output;
  // Per-channel batch mean and biased variance; populated in Train and Synthesis modes.
  Var<T> mean;
  Var<T> var;
};

/// Batch normalization over the (B,H,W) axes of x[B,C,H,W].
///
/// In Train mode `running_mean` / `running_var` are updated in place by an
/// exponential moving average; other modes never touch them. Variance is the
/// biased estimate everywhere, including the running buffer.
template <typename T>
BatchNormResult<T> batchnorm2d(Tape<T>* tape, const Var<T>& x, const Var<T>& gamma,
                               const Var<T>& beta, Tensor<T>& running_mean,
                               Tensor<T>& running_var, BatchNormParams params) {
  const auto& xv = x.value();
  expect_rank(xv, 4, "batchnorm2d input");
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  const std::size_t n = B * HW;
  for (const Tensor<T>* t :
       std::initializer_list<const Tensor<T>*>{&gamma.value(), &beta.value(), &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != C) {
      throw ShapeError("batchnorm2d: parameter shape " + shape_str(t->shape()) + " for " +
                       std::to_string(C) + " channels");
    }
  }
  if (HW == 0 || B == 0) throw ShapeError("batchnorm2d: zero spatial extent");
  if (!(params.eps > 0)) throw ShapeError("batchnorm2d: eps must be positive");
  const bool want_stats = params.mode != BnMode::Eval;
  if (params.mode == BnMode::Train && n < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel");
  }

  Tensor<T> mean({C}), var({C});
  if (want_stats) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = xv.raw() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(n);
      double sq = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = xv.raw() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - m;
          sq += d * d;
        }
      }
      mean[c] = static_cast<T>(m);
      var[c] = static_cast<T>(sq / static_cast<double>(n));
    }
  }

  // Per-channel normalization constants actually used for the output.
  Tensor<T> center({C}), inv_std({C});
  for (std::size_t c = 0; c < C; ++c) {
    if (params.mode == BnMode::Train) {
      center[c] = mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + params.eps));
    } else {
      center[c] = running_mean[c];
      inv_std[c] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + params.eps));
    }
  }

  Tensor<T> out(xv.shape());
  const T* gm = gamma.value().raw();
  const T* bt = beta.value().raw();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.raw() + (b * C + c) * HW;
      T* dst = out.raw() + (b * C + c) * HW;
      const T scale = gm[c] * inv_std[c];
      const T shift = bt[c] - center[c] * scale;
      for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] * scale + shift;
    }
  }

  if (params.mode == BnMode::Train) {
    const T m = static_cast<T>(params.momentum);
    for (std::size_t c = 0; c < C; ++c) {
      running_mean[c] = (T{1} - m) * running_mean[c] + m * mean[c];
      running_var[c] = (T{1} - m) * running_var[c] + m * var[c];
    }
  }

  const bool rg = detail::any_requires_grad(tape, x, gamma, beta);
  BatchNormResult<T> res{Var<T>(std::move(out), rg), Var<T>(), Var<T>()};
  if (want_stats) {
    res.mean = Var<T>(std::move(mean), rg && x.requires_grad());
    res.var = Var<T>(std::move(var), rg && x.requires_grad());
  }
  if (rg) {
    const BnMode mode = params.mode;
    tape->record("batchnorm2d", [x, gamma, beta, res, center, inv_std, mode, B, C, HW,
                                 n]() mutable {
      const T* xs = x.value().raw();
      const T* gm = gamma.value().raw();
      const bool has_out = res.output.has_grad();
      if (has_out) {
        const T* dy = res.output.grad().raw();
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* g = dy + (b * C + c) * HW;
            const T* xp = xs + (b * C + c) * HW;
            double s1 = 0, s2 = 0;
            for (std::size_t i = 0; i < HW; ++i) {
              s1 += g[i];
              s2 += g[i] * (xp[i] - center[c]) * inv_std[c];
            }
            sum_dy[c] += s1;
            sum_dy_xhat[c] += s2;
          }
        }
        if (gamma.requires_grad()) {
          T* dg = gamma.grad_buffer().raw();
          for (std::size_t c = 0; c < C; ++c) dg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (beta.requires_grad()) {
          T* db = beta.grad_buffer().raw();
          for (std::size_t c = 0; c < C; ++c) db[c] += static_cast<T>(sum_dy[c]);
        }
        if (x.requires_grad()) {
          T* dx = x.grad_buffer().raw();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t c = 0; c < C; ++c) {
              const T* g = dy + (b * C + c) * HW;
              const T* xp = xs + (b * C + c) * HW;
              T* d = dx + (b * C + c) * HW;
              const double k = static_cast<double>(gm[c]) * inv_std[c];
              if (mode == BnMode::Train) {
                for (std::size_t i = 0; i < HW; ++i) {
                  const double xhat = (xp[i] - center[c]) * inv_std[c];
                  d[i] += static_cast<T>(
                      k * (g[i] - inv_n * sum_dy[c] - xhat * inv_n * sum_dy_xhat[c]));
                }
              } else {
                for (std::size_t i = 0; i < HW; ++i) d[i] += static_cast<T>(k * g[i]);
              }
            }
          }
        }
      }
      // Gradients flowing in through the exposed batch statistics.
      if (x.requires_grad() && mode != BnMode::Eval &&
          (res.mean.has_grad() || res.var.has_grad())) {
        T* dx = x.grad_buffer().raw();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t c = 0; c < C; ++c) {
          const double gmean = res.mean.has_grad() ? res.mean.grad()[c] : 0.0;
          const double gvar = res.var.has_grad() ? res.var.grad()[c] : 0.0;
          const double mu = res.mean.value()[c];
          for (std::size_t b = 0; b < B; ++b) {
            const T* xp = xs + (b * C + c) * HW;
            T* d = dx + (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              d[i] += static_cast<T>(inv_n * (gmean + 2.0 * gvar * (xp[i] - mu)));
            }
          }
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> relu(Tape<T>* tape, const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* xs = x.value().raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] > T{0} ? xs[i] : T{0};
  const bool rg = detail::any_requires_grad(tape, x);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("relu", [x, result]() mutable {
      if (!result.has_grad() || !x.requires_grad()) return;
      const T* g = result.grad().raw();
      const T* xs = x.value().raw();
      T* dx = x.grad_buffer().raw();
      // subgradient 0 at 0
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (xs[i] > T{0}) dx[i] += g[i];
      }
    });
  }
  return result;
}

template <typename T>
Var<T> add(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  detail::expect_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const bool rg = detail::any_requires_grad(tape, a, b);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("add", [a, b, result]() mutable {
      if (!result.has_grad()) return;
      const auto& g = result.grad();
      for (const Var<T>* v : {&a, &b}) {
        if (!v->requires_grad()) continue;
        auto& d = v->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return result;
}

template <typename T>
Var<T> sub(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  detail::expect_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  const bool rg = detail::any_requires_grad(tape, a, b);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("sub", [a, b, result]() mutable {
      if (!result.has_grad()) return;
      const auto& g = result.grad();
      if (a.requires_grad()) {
        auto& d = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& d = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
    });
  }
  return result;
}

template <typename T>
Var<T> mul(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  detail::expect_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const bool rg = detail::any_requires_grad(tape, a, b);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("mul", [a, b, result]() mutable {
      if (!result.has_grad()) return;
      const auto& g = result.grad();
      if (a.requires_grad()) {
        auto& d = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b.value()[i];
      }
      if (b.requires_grad()) {
        auto& d = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a.value()[i];
      }
    });
  }
  return result;
}

template <typename T>
Var<T> scale(Tape<T>* tape, const Var<T>& x, T c) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * c;
  const bool rg = detail::any_requires_grad(tape, x);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("scale", [x, result, c]() mutable {
      if (!result.has_grad()) return;
      const auto& g = result.grad();
      auto& d = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
    });
  }
  return result;
}

/// Non-overlapping or strided max pooling without padding.
template <typename T>
Var<T> maxpool2d(Tape<T>* tape, const Var<T>& x, std::size_t kernel, std::size_t stride) {
  const auto& xv = x.value();
  expect_rank(xv, 4, "maxpool2d input");
  if (kernel < 1 || stride < 1) throw ShapeError("maxpool2d: kernel and stride must be >= 1");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Ho = conv_out_extent(H, kernel, stride, 0);
  const std::size_t Wo = conv_out_extent(W, kernel, stride, 0);
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("maxpool2d: window " + std::to_string(kernel) + " exceeds input " +
                     shape_str(xv.shape()));
  }
  Tensor<T> out({B, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* src = xv.raw() + bc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (oy * stride) * W + ox * stride;
        for (std::size_t i = 0; i < kernel; ++i) {
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = (oy * stride + i) * W + ox * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = bc * Ho * Wo + oy * Wo + ox;
        out[o] = src[best];
        argmax[o] = bc * H * W + best;
      }
    }
  }
  const bool rg = detail::any_requires_grad(tape, x);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("maxpool2d", [x, result, argmax = std::move(argmax)]() mutable {
      if (!result.has_grad()) return;
      const auto& g = result.grad();
      auto& d = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[argmax[i]] += g[i];
    });
  }
  return result;
}

/// x[B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avg_pool(Tape<T>* tape, const Var<T>& x) {
  const auto& xv = x.value();
  expect_rank(xv, 4, "global_avg_pool input");
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool: zero spatial extent");
  Tensor<T> out({B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* p = xv.raw() + bc * HW;
    T s = 0;
    for (std::size_t i = 0; i < HW; ++i) s += p[i];
    out[bc] = s / static_cast<T>(HW);
  }
  const bool rg = detail::any_requires_grad(tape, x);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("global_avg_pool", [x, result, B, C, HW]() mutable {
      if (!result.has_grad()) return;
      const auto& g = result.grad();
      T* d = x.grad_buffer().raw();
      const T inv = T{1} / static_cast<T>(HW);
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        for (std::size_t i = 0; i < HW; ++i) d[bc * HW + i] += g[bc] * inv;
      }
    });
  }
  return result;
}

/// y[B,out] = x[B,in] * W[out,in]^T + b[out]
template <typename T>
Var<T> linear(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  expect_rank(xv, 2, "linear input");
  expect_rank(wv, 2, "linear weight");
  const std::size_t B = xv.dim(0), In = xv.dim(1), Out = wv.dim(0);
  if (wv.dim(1) != In) {
    throw ShapeError("linear: input features " + std::to_string(In) + " vs weight " +
                     shape_str(wv.shape()));
  }
  if (bias.value().rank() != 1 || bias.value().dim(0) != Out) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
  }
  Tensor<T> out({B, Out});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Out; ++o) {
      T s = bias.value()[o];
      const T* xr = xv.raw() + b * In;
      const T* wr = wv.raw() + o * In;
      for (std::size_t i = 0; i < In; ++i) s += xr[i] * wr[i];
      out[b * Out + o] = s;
    }
  }
  const bool rg = detail::any_requires_grad(tape, x, weight, bias);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("linear", [x, weight, bias, result, B, In, Out]() mutable {
      if (!result.has_grad()) return;
      const T* g = result.grad().raw();
      if (weight.requires_grad()) {
        T* dw = weight.grad_buffer().raw();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t o = 0; o < Out; ++o) {
            const T gv = g[b * Out + o];
            const T* xr = x.value().raw() + b * In;
            for (std::size_t i = 0; i < In; ++i) dw[o * In + i] += gv * xr[i];
          }
        }
      }
      if (bias.requires_grad()) {
        T* db = bias.grad_buffer().raw();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t o = 0; o < Out; ++o) db[o] += g[b * Out + o];
        }
      }
      if (x.requires_grad()) {
        T* dx = x.grad_buffer().raw();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t o = 0; o < Out; ++o) {
            const T gv = g[b * Out + o];
            const T* wr = weight.value().raw() + o * In;
            for (std::size_t i = 0; i < In; ++i) dx[b * In + i] += gv * wr[i];
          }
        }
      }
    });
  }
  return result;
}

/// Batch-mean cross-entropy of softmax(logits[B,K]) against integer labels.
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>* tape, const Var<T>& logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  expect_rank(lv, 2, "softmax_cross_entropy logits");
  const std::size_t B = lv.dim(0), K = lv.dim(1);
  if (labels.size() != B) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(B));
  }
  if (B == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  Tensor<T> probs({B, K});
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                       " outside [0," + std::to_string(K) + ")");
    }
    const T* row = lv.raw() + b * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (std::size_t k = 0; k < K; ++k) {
      probs[b * K + k] = static_cast<T>(std::exp(row[k] - mx) / z);
    }
    loss += -(row[labels[b]] - mx - std::log(z));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(B)));
  detail::check_finite(out, "softmax_cross_entropy");
  const bool rg = detail::any_requires_grad(tape, logits);
  Var<T> result(std::move(out), rg);
  if (rg) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", [logits, result, probs = std::move(probs),
                                           lab = std::move(lab), B, K]() mutable {
      if (!result.has_grad()) return;
      const T g = result.grad()[0] / static_cast<T>(B);
      T* d = logits.grad_buffer().raw();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
          const T onehot = static_cast<std::size_t>(lab[b]) == k ? T{1} : T{0};
          d[b * K + k] += g * (probs[b * K + k] - onehot);
        }
      }
    });
  }
  return result;
}

/// Sum of |a - b| over all elements; subgradient 0 where a == b.
template <typename T>
Var<T> l1_distance_sum(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  detail::expect_same_shape(a, b, "l1_distance_sum");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.value()[i] - b.value()[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  detail::check_finite(out, "l1_distance_sum");
  const bool rg = detail::any_requires_grad(tape, a, b);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("l1_distance_sum", [a, b, result]() mutable {
      if (!result.has_grad()) return;
      const T g = result.grad()[0];
      const auto& av = a.value();
      const auto& bv = b.value();
      auto sign = [](T d) { return d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0}); };
      if (a.requires_grad()) {
        auto& d = a.grad_buffer();
        for (std::size_t i = 0; i < av.size(); ++i) d[i] += g * sign(av[i] - bv[i]);
      }
      if (b.requires_grad()) {
        auto& d = b.grad_buffer();
        for (std::size_t i = 0; i < av.size(); ++i) d[i] -= g * sign(av[i] - bv[i]);
      }
    });
  }
  return result;
}

template <typename T>
Var<T> sq_l2_norm(Tape<T>* tape, const Var<T>& x) {
  double s = 0;
  for (T v : x.value().data()) s += static_cast<double>(v) * v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  detail::check_finite(out, "sq_l2_norm");
  const bool rg = detail::any_requires_grad(tape, x);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("sq_l2_norm", [x, result]() mutable {
      if (!result.has_grad()) return;
      const T g = result.grad()[0];
      auto& d = x.grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += T{2} * g * x.value()[i];
    });
  }
  return result;
}

template <typename T>
Var<T> sum(Tape<T>* tape, const Var<T>& x) {
  double s = 0;
  for (T v : x.value().data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  const bool rg = detail::any_requires_grad(tape, x);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("sum", [x, result]() mutable {
      if (!result.has_grad()) return;
      const T g = result.grad()[0];
      auto& d = x.grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
    });
  }
  return result;
}

/// Total variation of x[B,C,h,w]: per image, the summed squared horizontal and
/// vertical neighbour differences divided by C*h*w; summed over the batch.
template <typename T>
Var<T> tv_loss(Tape<T>* tape, const Var<T>& x) {
  const auto& xv = x.value();
  expect_rank(xv, 4, "tv_loss input");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H < 2 || W < 2) {
    throw ShapeError("tv_loss: spatial dims must be at least 2x2, got " + shape_str(xv.shape()));
  }
  const double norm = static_cast<double>(C * H * W);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = xv.raw() + (b * C + c) * H * W;
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          if (j + 1 < W) {
            const double d = p[i * W + j + 1] - p[i * W + j];
            s += d * d;
          }
          if (i + 1 < H) {
            const double d = p[(i + 1) * W + j] - p[i * W + j];
            s += d * d;
          }
        }
      }
    }
    total += s / norm;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total));
  detail::check_finite(out, "tv_loss");
  const bool rg = detail::any_requires_grad(tape, x);
  Var<T> result(std::move(out), rg);
  if (rg) {
    tape->record("tv_loss", [x, result, B, C, H, W, norm]() mutable {
      if (!result.has_grad()) return;
      const T g = static_cast<T>(result.grad()[0] * 2.0 / norm);
      T* d = x.grad_buffer().raw();
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        const T* p = x.value().raw() + bc * H * W;
        T* dp = d + bc * H * W;
        for (std::size_t i = 0; i < H; ++i) {
          for (std::size_t j = 0; j < W; ++j) {
            if (j + 1 < W) {
              const T diff = p[i * W + j + 1] - p[i * W + j];
              dp[i * W + j + 1] += g * diff;
              dp[i * W + j] -= g * diff;
            }
            if (i + 1 < H) {
              const T diff = p[(i + 1) * W + j] - p[i * W + j];
              dp[(i + 1) * W + j] += g * diff;
              dp[i * W + j] -= g * diff;
            }
          }
        }
      }
    });
  }
  return result;
}

}  // namespace dfbf::ops
