#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "stream4d/autodiff.hpp"

// Differentiable operators. Every op computes its value eagerly; when a tape is
// active and an input requires a gradient, a backward closure is recorded.
// No implicit broadcasting: the only broadcasts are `add_bias` (row vector over
// rows) and the additive mask in `softmax_lastdim`.

namespace stream4d::ops {

namespace kernels {

// Row-major GEMM wrappers over Eigen. Single-threaded; summation order depends
// only on the operand shapes, so results are reproducible run to run.
template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMajor<T>>;
template <class T>
using MMap = Eigen::Map<RowMajor<T>>;

// c[m×n] += a[m×k] · b[k×n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap<T>(c, M, N).noalias() += CMap<T>(a, M, K) * CMap<T>(b, K, N);
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap<T>(c, M, N).noalias() += CMap<T>(a, M, K) * CMap<T>(b, N, K).transpose();
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap<T>(c, K, N).noalias() += CMap<T>(a, M, K).transpose() * CMap<T>(b, M, N);
}

}  // namespace kernels

/// Count of softmax rows that were entirely masked (returned as zeros).
inline std::atomic<std::uint64_t>& all_masked_rows() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

namespace detail {

template <class T>
void require_matrix(const char* op, const Var<T>& a) {
  if (a.value().rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw_shape(op, a.shape(), b.shape());
}

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF dfdx) {
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return stream4d::detail::make_result<T>(std::move(y), a.requires_grad(), [pa = a.ptr(), dfdx] {
    return [pa, dfdx](Node<T>& self) {
      if (!pa->requires_grad) return;
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(pa->value[i], self.value[i]);
    };
  });
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k) throw_shape("matmul", a.shape(), b.shape());
  Tensor<T> c({m, n});
  kernels::gemm_nn(a.value().data(), b.value().data(), c.data(), m, k, n);
  return stream4d::detail::make_result<T>(std::move(c), a.requires_grad() || b.requires_grad(),
                                          [pa = a.ptr(), pb = b.ptr(), m, k, n] {
    return [pa, pb, m, k, n](Node<T>& self) {
      if (pa->requires_grad)
        kernels::gemm_nt(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, n, k);
      if (pb->requires_grad)
        kernels::gemm_tn(pa->value.data(), self.grad.data(), pb->grad_buffer().data(), m, k, n);
    };
  });
}

/// a · bᵀ without materializing the transpose.
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix("matmul_nt", a);
  detail::require_matrix("matmul_nt", b);
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(0);
  if (b.value().dim(1) != k) throw_shape("matmul_nt", a.shape(), b.shape());
  Tensor<T> c({m, n});
  kernels::gemm_nt(a.value().data(), b.value().data(), c.data(), m, k, n);
  return stream4d::detail::make_result<T>(std::move(c), a.requires_grad() || b.requires_grad(),
                                          [pa = a.ptr(), pb = b.ptr(), m, k, n] {
    return [pa, pb, m, k, n](Node<T>& self) {
      if (pa->requires_grad)
        kernels::gemm_nn(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, n, k);
      if (pb->requires_grad)
        kernels::gemm_tn(self.grad.data(), pa->value.data(), pb->grad_buffer().data(), m, n, k);
    };
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same("add", a, b);
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return stream4d::detail::make_result<T>(std::move(y), a.requires_grad() || b.requires_grad(),
                                          [pa = a.ptr(), pb = b.ptr()] {
    return [pa, pb](Node<T>& self) {
      for (auto* p : {pa.get(), pb.get()}) {
        if (!p->requires_grad) continue;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same("sub", a, b);
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return stream4d::detail::make_result<T>(std::move(y), a.requires_grad() || b.requires_grad(),
                                          [pa = a.ptr(), pb = b.ptr()] {
    return [pa, pb](Node<T>& self) {
      if (pa->requires_grad) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  });
}

/// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same("mul", a, b);
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return stream4d::detail::make_result<T>(std::move(y), a.requires_grad() || b.requires_grad(),
                                          [pa = a.ptr(), pb = b.ptr()] {
    return [pa, pb](Node<T>& self) {
      if (pa->requires_grad) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
      }
    };
  });
}

/// x[r×c] + bias[c] added to every row.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t c = x.value().cols();
  if (bias.size() != c) throw_shape("add_bias", x.shape(), bias.shape());
  Tensor<T> y = x.value();
  const std::size_t r = y.rows();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += bias.value()[j];
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad() || bias.requires_grad(),
                                          [px = x.ptr(), pb = bias.ptr(), r, c] {
    return [px, pb, r, c](Node<T>& self) {
      if (px->requires_grad) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
      }
    };
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  constexpr T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
  return detail::unary(
      x, [](T v) { return T{0.5} * v * (T{1} + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T{-0.5} * v * v);
      });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <class T>
Var<T> abs(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::abs(v); },
                       [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
                       [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

/// Elementwise Huber: quadratic inside |x| ≤ delta, linear outside.
template <class T>
Var<T> huber(const Var<T>& x, T delta) {
  return detail::unary(
      x,
      [delta](T v) {
        const T a = std::abs(v);
        return a <= delta ? T{0.5} * v * v : delta * (a - T{0.5} * delta);
      },
      [delta](T v, T) { return std::clamp(v, -delta, delta); });
}

/// Numerically stable elementwise binary cross-entropy on logits; targets are constants.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) throw_shape("bce_with_logits", logits.shape(), targets.shape());
  const auto& x = logits.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = std::max(x[i], T{0}) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  return stream4d::detail::make_result<T>(std::move(y), logits.requires_grad(), [px = logits.ptr(), targets] {
    return [px, targets](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-px->value[i]));
        g[i] += self.grad[i] * (s - targets[i]);
      }
    };
  });
}

/// Sum of all elements, as a 1-element tensor.
template <class T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().vec()) s += v;
  return stream4d::detail::make_result<T>(Tensor<T>::scalar(s), x.requires_grad(), [px = x.ptr()] {
    return [px](Node<T>& self) {
      auto& g = px->grad_buffer();
      const T d = self.grad[0];
      for (auto& v : g.vec()) v += d;
    };
  });
}

/// Row-wise layer normalization over the last dim; epsilon 1e-5 inside the sqrt.
template <class T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  const std::size_t c = x.value().cols();
  if (gain.size() != c) throw_shape("layernorm(gain)", x.shape(), gain.shape());
  if (bias.size() != c) throw_shape("layernorm(bias)", x.shape(), bias.shape());
  const std::size_t r = x.value().rows();
  constexpr T eps = static_cast<T>(1e-5);
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(r);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.value().data() + i * c;
    T mean{0};
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<T>(c);
    rstd[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xi[j] - mean) * rstd[i];
      xhat[i * c + j] = h;
      y[i * c + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  const bool needs = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return stream4d::detail::make_result<T>(
      std::move(y), needs,
      [px = x.ptr(), pg = gain.ptr(), pb = bias.ptr(), xhat = std::move(xhat), rstd = std::move(rstd), r, c] {
        return [px, pg, pb, xhat, rstd, r, c](Node<T>& self) {
          const auto& dy = self.grad;
          if (pg->requires_grad) {
            auto& g = pg->grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) g[j] += dy[i * c + j] * xhat[i * c + j];
          }
          if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) g[j] += dy[i * c + j];
          }
          if (px->requires_grad) {
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < r; ++i) {
              T mean_d{0}, mean_dh{0};
              for (std::size_t j = 0; j < c; ++j) {
                const T d = dy[i * c + j] * pg->value[j];
                mean_d += d;
                mean_dh += d * xhat[i * c + j];
              }
              mean_d /= static_cast<T>(c);
              mean_dh /= static_cast<T>(c);
              for (std::size_t j = 0; j < c; ++j) {
                const T d = dy[i * c + j] * pg->value[j];
                g[i * c + j] += rstd[i] * (d - mean_d - xhat[i * c + j] * mean_dh);
              }
            }
          }
        };
      });
}

/// Softmax over the last dim with an optional additive mask (same shape as x,
/// or a single row broadcast over all rows). Masked entries (−∞) get exactly 0.
/// A fully masked row yields zeros and bumps `all_masked_rows()`.
template <class T>
Var<T> softmax_lastdim(const Var<T>& x, const Tensor<T>* mask = nullptr) {
  const std::size_t c = x.value().cols();
  const std::size_t r = x.value().rows();
  if (mask && !(mask->shape() == x.shape() || mask->size() == c)) throw_shape("softmax_lastdim(mask)", x.shape(), mask->shape());
  const bool row_mask = mask && mask->size() == c && mask->shape() != x.shape();
  Tensor<T> y(x.shape());
  std::vector<T> z(c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.value().data() + i * c;
    const T* mi = mask ? mask->data() + (row_mask ? 0 : i * c) : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      z[j] = mi ? xi[j] + mi[j] : xi[j];
      mx = std::max(mx, z[j]);
    }
    T* yi = y.data() + i * c;
    if (mx == -std::numeric_limits<T>::infinity()) {
      if (all_masked_rows().fetch_add(1) == 0)
        std::cerr << "stream4d: warning: softmax row fully masked; returning zeros\n";
      continue;
    }
    T s{0};
    for (std::size_t j = 0; j < c; ++j) {
      yi[j] = std::exp(z[j] - mx);
      s += yi[j];
    }
    const T inv = T{1} / s;
    for (std::size_t j = 0; j < c; ++j) yi[j] *= inv;
  }
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad(), [px = x.ptr(), r, c] {
    return [px, r, c](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        const T* yi = self.value.data() + i * c;
        const T* di = self.grad.data() + i * c;
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += di[j] * yi[j];
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += yi[j] * (di[j] - dot);
      }
    };
  });
}

/// Row-wise maximum, shape rows×1. Gradient flows to the first argmax.
template <class T>
Var<T> max_lastdim(const Var<T>& x) {
  const std::size_t c = x.value().cols();
  const std::size_t r = x.value().rows();
  if (c == 0) throw ShapeError("max_lastdim: empty rows");
  Tensor<T> y({r, 1});
  std::vector<std::size_t> arg(r);
  for (std::size_t i = 0; i < r; ++i) {
    const auto row = x.value().row(i);
    arg[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    y[i] = row[arg[i]];
  }
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad(), [px = x.ptr(), arg = std::move(arg), c] {
    return [px, arg, c](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < arg.size(); ++i) g[i * c + arg[i]] += self.grad[i];
    };
  });
}

/// Scales each row to unit L2 norm.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  const std::size_t c = x.value().cols();
  const std::size_t r = x.value().rows();
  Tensor<T> y(x.shape());
  std::vector<T> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    T s{0};
    for (T v : x.value().row(i)) s += v * v;
    norms[i] = std::max(std::sqrt(s), static_cast<T>(1e-12));
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = x.value()[i * c + j] / norms[i];
  }
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad(), [px = x.ptr(), norms = std::move(norms), r, c] {
    return [px, norms, r, c](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          g[i * c + j] += (self.grad[i * c + j] - self.value[i * c + j] * dot) / norms[i];
      }
    };
  });
}

/// out.flat[i] = x.flat[indices[i]]; backward scatter-adds. Repeated indices allowed.
template <class T>
Var<T> gather(const Var<T>& x, std::vector<std::size_t> indices, Shape out_shape) {
  if (shape_numel(out_shape) != indices.size())
    throw ShapeError("gather: " + std::to_string(indices.size()) + " indices for output " + shape_str(out_shape));
  Tensor<T> y(std::move(out_shape));
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) throw ShapeError("gather: index " + std::to_string(indices[i]) + " out of range for " + shape_str(x.shape()));
    y[i] = x.value()[indices[i]];
  }
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad(), [px = x.ptr(), idx = std::move(indices)] {
    return [px, idx](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
    };
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  if (shape_numel(s) != x.size()) throw_shape("reshape", x.shape(), s);
  Tensor<T> y(std::move(s), x.value().vec());
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad(), [px = x.ptr()] {
    return [px](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  });
}

template <class T>
Var<T> transpose(const Var<T>& x) {
  detail::require_matrix("transpose", x);
  const std::size_t r = x.value().dim(0), c = x.value().dim(1);
  Tensor<T> y({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x.value()[i * c + j];
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad(), [px = x.ptr(), r, c] {
    return [px, r, c](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    };
  });
}

/// Stacks matrices with equal column counts vertically (token concatenation).
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().value().cols();
  std::size_t rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.value().cols() != c) throw_shape("concat_rows", parts.front().shape(), p.shape());
    rows += p.value().rows();
    needs = needs || p.requires_grad();
  }
  std::vector<T> d;
  d.reserve(rows * c);
  for (const auto& p : parts) d.insert(d.end(), p.value().vec().begin(), p.value().vec().end());
  std::vector<std::shared_ptr<Node<T>>> ptrs;
  if (needs)
    for (const auto& p : parts) ptrs.push_back(p.ptr());
  return stream4d::detail::make_result<T>(Tensor<T>({rows, c}, std::move(d)), needs, [ptrs = std::move(ptrs)] {
    return [ptrs](Node<T>& self) {
      std::size_t off = 0;
      for (const auto& p : ptrs) {
        const std::size_t n = p->value.size();
        if (p->requires_grad) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
        }
        off += n;
      }
    };
  });
}

/// Joins matrices with equal row counts side by side.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts.front().value().rows();
  std::size_t cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.value().rows() != r) throw_shape("concat_cols", parts.front().shape(), p.shape());
    cols += p.value().cols();
    needs = needs || p.requires_grad();
  }
  Tensor<T> y({r, cols});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.value().cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) y[i * cols + off + j] = p.value()[i * pc + j];
    off += pc;
  }
  std::vector<std::shared_ptr<Node<T>>> ptrs;
  if (needs)
    for (const auto& p : parts) ptrs.push_back(p.ptr());
  return stream4d::detail::make_result<T>(std::move(y), needs, [ptrs = std::move(ptrs), r, cols] {
    return [ptrs, r, cols](Node<T>& self) {
      std::size_t off = 0;
      for (const auto& p : ptrs) {
        const std::size_t pc = p->value.cols();
        if (p->requires_grad) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += self.grad[i * cols + off + j];
        }
        off += pc;
      }
    };
  });
}

/// Rows [begin, end) of a matrix.
template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t c = x.value().cols();
  if (begin > end || end > x.value().rows())
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
  std::vector<T> d(x.value().vec().begin() + static_cast<std::ptrdiff_t>(begin * c),
                   x.value().vec().begin() + static_cast<std::ptrdiff_t>(end * c));
  return stream4d::detail::make_result<T>(Tensor<T>({end - begin, c}, std::move(d)), x.requires_grad(),
                                          [px = x.ptr(), off = begin * c] {
    return [px, off](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
    };
  });
}

/// Columns [begin, end) of a matrix.
template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix("slice_cols", x);
  const std::size_t r = x.value().dim(0), c = x.value().dim(1);
  if (begin > end || end > c)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  Tensor<T> y({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = x.value()[i * c + begin + j];
  return stream4d::detail::make_result<T>(std::move(y), x.requires_grad(), [px = x.ptr(), r, c, begin, w] {
    return [px, r, c, begin, w](Node<T>& self) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
    };
  });
}

/// y = x·w + b for a row-major batch x[r×in], w[in×out], b[out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace stream4d::ops
