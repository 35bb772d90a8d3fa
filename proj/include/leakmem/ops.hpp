#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "leakmem/tensor.hpp"

namespace leakmem {

// Floor used inside KL quotients and norm denominators.
inline constexpr double kNumericFloor = 1e-8;

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

template <class Real>
void require_finite(const char* op, std::span<const Real> v) {
  for (Real x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

template <class Real>
Real dot(std::span<const Real> a, std::span<const Real> b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Simplex tolerance: the documented 1e-6, widened to what the working
// precision can represent for long vectors.
template <class Real>
Real simplex_tolerance(std::size_t n) {
  return std::max<Real>(Real(1e-6), Real(4) * static_cast<Real>(n) * std::numeric_limits<Real>::epsilon());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return detail::make_result<Real>(a.shape(), std::move(v), "add", {a, b}, [](TensorNode<Real>& out) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = detail::input_grad(out, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
      }
    }
  });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return detail::make_result<Real>(a.shape(), std::move(v), "sub", {a, b}, [](TensorNode<Real>& out) {
    if (auto* g = detail::input_grad(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    }
    if (auto* g = detail::input_grad(out, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= out.grad[i];
    }
  });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return detail::make_result<Real>(a.shape(), std::move(v), "mul", {a, b}, [](TensorNode<Real>& out) {
    const auto& av = out.inputs[0]->value;
    const auto& bv = out.inputs[1]->value;
    if (auto* g = detail::input_grad(out, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * bv[i];
    }
    if (auto* g = detail::input_grad(out, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * av[i];
    }
  });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * c;
  return detail::make_result<Real>(a.shape(), std::move(v), "scale", {a}, [c](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * c;
  });
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real c) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + c;
  return detail::make_result<Real>(a.shape(), std::move(v), "add_scalar", {a}, [](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
  });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a[i]);
  return detail::make_result<Real>(a.shape(), std::move(v), "tanh", {a}, [](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * (Real(1) - out.value[i] * out.value[i]);
  });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = a[i] >= 0 ? Real(1) / (Real(1) + std::exp(-a[i])) : std::exp(a[i]) / (Real(1) + std::exp(a[i]));
  }
  return detail::make_result<Real>(a.shape(), std::move(v), "sigmoid", {a}, [](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * out.value[i] * (Real(1) - out.value[i]);
  });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(a[i] > 0)) throw DomainError("log: non-positive input");
    v[i] = std::log(a[i]);
  }
  return detail::make_result<Real>(a.shape(), std::move(v), "log", {a}, [](TensorNode<Real>& out) {
    const auto& av = out.inputs[0]->value;
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] / av[i];
  });
}

template <class Real>
Tensor<Real> abs(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(a[i]);
  return detail::make_result<Real>(a.shape(), std::move(v), "abs", {a}, [](TensorNode<Real>& out) {
    const auto& av = out.inputs[0]->value;
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) {
      Real s = av[i] > 0 ? Real(1) : (av[i] < 0 ? Real(-1) : Real(0));
      (*g)[i] += out.grad[i] * s;
    }
  });
}

/// max(0, x); the subgradient at 0 is taken as 0.
template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > 0 ? a[i] : Real(0);
  return detail::make_result<Real>(a.shape(), std::move(v), "relu", {a}, [](TensorNode<Real>& out) {
    const auto& av = out.inputs[0]->value;
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) {
      if (av[i] > 0) (*g)[i] += out.grad[i];
    }
  });
}

/// Clamps into [lo, hi]; gradient passes only where the input is inside.
template <class Real>
Tensor<Real> clamp(const Tensor<Real>& a, Real lo, Real hi) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(a[i], lo, hi);
  return detail::make_result<Real>(a.shape(), std::move(v), "clamp", {a}, [lo, hi](TensorNode<Real>& out) {
    const auto& av = out.inputs[0]->value;
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) {
      if (av[i] >= lo && av[i] <= hi) (*g)[i] += out.grad[i];
    }
  });
}

/// Identity on values, zero on gradients.
template <class Real>
Tensor<Real> stop_gradient(const Tensor<Real>& a) {
  return a.detach_copy(false);
}

// ---------------------------------------------------------------------------
// Shape and linear algebra

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  return detail::make_result<Real>(std::move(shape), a.to_vector(), "reshape", {a}, [](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
  });
}

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> v(m * n, Real(0));
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      const Real* brow = &bv[p * n];
      Real* orow = &v[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_result<Real>({m, n}, std::move(v), "matmul", {a, b}, [m, k, n](TensorNode<Real>& out) {
    const auto& A = out.inputs[0]->value;
    const auto& B = out.inputs[1]->value;
    const auto& G = out.grad;
    if (auto* ga = detail::input_grad(out, 0)) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          Real s = 0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          (*ga)[i * k + p] += s;
        }
      }
    }
    if (auto* gb = detail::input_grad(out, 1)) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const Real aip = A[i * k + p];
          if (aip == Real(0)) continue;
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * G[i * n + j];
        }
      }
    }
  });
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  detail::require_rank("transpose", a.shape(), 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<Real> v(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a[i * n + j];
  }
  return detail::make_result<Real>({n, m}, std::move(v), "transpose", {a}, [m, n](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += out.grad[j * m + i];
    }
  });
}

/// a[m x n] + b[n] added to every row.
template <class Real>
Tensor<Real> add_row_broadcast(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.size() != a.dim(1)) {
    throw DimensionError("add_row_broadcast: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<Real> v(a.to_vector());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] += b[j];
  }
  return detail::make_result<Real>(a.shape(), std::move(v), "add_row_broadcast", {a, b},
                                   [m, n](TensorNode<Real>& out) {
                                     if (auto* g = detail::input_grad(out, 0)) {
                                       for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
                                     }
                                     if (auto* g = detail::input_grad(out, 1)) {
                                       for (std::size_t i = 0; i < m; ++i) {
                                         for (std::size_t j = 0; j < n; ++j) (*g)[j] += out.grad[i * n + j];
                                       }
                                     }
                                   });
}

/// Repeats x[n] as m rows -> [m x n].
template <class Real>
Tensor<Real> broadcast_rows(const Tensor<Real>& x, std::size_t m) {
  const std::size_t n = x.size();
  std::vector<Real> v(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(x.data().begin(), x.data().end(), v.begin() + i * n);
  return detail::make_result<Real>({m, n}, std::move(v), "broadcast_rows", {x}, [m, n](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) (*g)[j] += out.grad[i * n + j];
    }
  });
}

/// Column-wise mean of a[m x n] -> [n].
template <class Real>
Tensor<Real> mean_rows(const Tensor<Real>& a) {
  detail::require_rank("mean_rows", a.shape(), 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<Real> v(n, Real(0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) v[j] += a[i * n + j];
  }
  for (auto& x : v) x /= static_cast<Real>(m);
  return detail::make_result<Real>({n}, std::move(v), "mean_rows", {a}, [m, n](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    const Real inv = Real(1) / static_cast<Real>(m);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += out.grad[j] * inv;
    }
  });
}

/// Columns [begin, begin+count) of a[m x n].
template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& a, std::size_t begin, std::size_t count) {
  detail::require_rank("slice_cols", a.shape(), 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (count == 0 || begin + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(a.shape()));
  }
  std::vector<Real> v(m * count);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < count; ++j) v[i * count + j] = a[i * n + begin + j];
  }
  return detail::make_result<Real>({m, count}, std::move(v), "slice_cols", {a},
                                   [m, n, begin, count](TensorNode<Real>& out) {
                                     auto* g = detail::input_grad(out, 0);
                                     for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t j = 0; j < count; ++j)
                                         (*g)[i * n + begin + j] += out.grad[i * count + j];
                                     }
                                   });
}

/// Side-by-side concatenation of matrices with equal row counts.
template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) {
      throw DimensionError("concat_cols: " + shape_string(p.shape()) + " vs " + shape_string(parts[0].shape()));
    }
    widths.push_back(p.dim(1));
    n += p.dim(1);
  }
  std::vector<Real> v(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < w; ++j) v[i * n + off + j] = p[i * w + j];
    }
    off += w;
  }
  return detail::make_result<Real>({m, n}, std::move(v), "concat_cols", parts, [m, n, widths](TensorNode<Real>& out) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (auto* g = detail::input_grad(out, k)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += out.grad[i * n + off + j];
        }
      }
      off += w;
    }
  });
}

/// Flattens and concatenates -> 1-D.
template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  std::vector<Real> v;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    v.insert(v.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.size());
  }
  const std::size_t total = v.size();
  return detail::make_result<Real>({total}, std::move(v), "concat", parts, [sizes](TensorNode<Real>& out) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (auto* g = detail::input_grad(out, k)) {
        for (std::size_t i = 0; i < sizes[k]; ++i) (*g)[i] += out.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (Real x : a.data()) s += x;
  return detail::make_result<Real>({1}, {s}, "sum", {a}, [](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (auto& x : *g) x += out.grad[0];
  });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  Real s = 0;
  for (Real x : a.data()) s += x;
  const Real inv = Real(1) / static_cast<Real>(a.size());
  return detail::make_result<Real>({1}, {s * inv}, "mean", {a}, [inv](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    for (auto& x : *g) x += out.grad[0] * inv;
  });
}

/// Euclidean norm with the numeric floor applied to the result.
template <class Real>
Tensor<Real> l2_norm(const Tensor<Real>& a) {
  Real s = 0;
  for (Real x : a.data()) s += x * x;
  const Real norm = std::sqrt(s);
  // Below the floor the derivative direction is undefined; treat it as zero.
  const bool floored = norm < Real(kNumericFloor);
  return detail::make_result<Real>({1}, {norm}, "l2_norm", {a}, [floored](TensorNode<Real>& out) {
    if (floored) return;
    const auto& av = out.inputs[0]->value;
    auto* g = detail::input_grad(out, 0);
    const Real k = out.grad[0] / out.value[0];
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += k * av[i];
  });
}

/// Mean over the s*s spatial positions of each channel: [c x s x s] -> [c].
template <class Real>
Tensor<Real> avg_pool_spatial(const Tensor<Real>& f) {
  detail::require_rank("avg_pool_spatial", f.shape(), 3);
  if (f.dim(1) != f.dim(2)) throw DimensionError("avg_pool_spatial: grid must be square, got " + shape_string(f.shape()));
  const std::size_t c = f.dim(0), area = f.dim(1) * f.dim(2);
  std::vector<Real> v(c, Real(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < area; ++p) v[ch] += f[ch * area + p];
    v[ch] /= static_cast<Real>(area);
  }
  return detail::make_result<Real>({c}, std::move(v), "avg_pool_spatial", {f}, [c, area](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    const Real inv = Real(1) / static_cast<Real>(area);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < area; ++p) (*g)[ch * area + p] += out.grad[ch] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizers and similarities

namespace detail {

template <class Real>
void softmax_inplace(std::span<Real> x, Real temperature) {
  Real mx = *std::max_element(x.begin(), x.end());
  Real s = 0;
  for (auto& v : x) {
    v = std::exp((v - mx) / temperature);
    s += v;
  }
  for (auto& v : x) v /= s;
}

// y = softmax(x / T): dx = y * (g - <g, y>) / T
template <class Real>
void softmax_adjoint(std::span<const Real> y, std::span<const Real> gy, std::span<Real> gx, Real temperature) {
  Real s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += gy[i] * y[i];
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (gy[i] - s) / temperature;
}

}  // namespace detail

/// softmax(x / temperature) over all entries, computed with max subtraction.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, Real temperature = Real(1)) {
  if (!(temperature > 0)) throw DomainError("softmax: temperature must be positive");
  detail::require_finite<Real>("softmax", x.data());
  std::vector<Real> v(x.to_vector());
  detail::softmax_inplace<Real>(v, temperature);
  return detail::make_result<Real>(x.shape(), std::move(v), "softmax", {x}, [temperature](TensorNode<Real>& out) {
    auto* g = detail::input_grad(out, 0);
    detail::softmax_adjoint<Real>(out.value, out.grad, *g, temperature);
  });
}

/// Row-wise softmax of a[m x n] after multiplying by `scale_factor`.
template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& a, Real scale_factor = Real(1)) {
  detail::require_rank("softmax_rows", a.shape(), 2);
  detail::require_finite<Real>("softmax_rows", a.data());
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<Real> v(a.to_vector());
  const Real temperature = Real(1) / scale_factor;
  for (std::size_t i = 0; i < m; ++i) detail::softmax_inplace<Real>(std::span<Real>(v).subspan(i * n, n), temperature);
  return detail::make_result<Real>(a.shape(), std::move(v), "softmax_rows", {a},
                                   [m, n, temperature](TensorNode<Real>& out) {
                                     auto* g = detail::input_grad(out, 0);
                                     std::span<const Real> y(out.value), gy(out.grad);
                                     std::span<Real> gx(*g);
                                     for (std::size_t i = 0; i < m; ++i) {
                                       detail::softmax_adjoint<Real>(y.subspan(i * n, n), gy.subspan(i * n, n),
                                                                     gx.subspan(i * n, n), temperature);
                                     }
                                   });
}

namespace detail {

template <class Real>
Real checked_norm(const char* op, std::span<const Real> v) {
  Real s = 0;
  for (Real x : v) s += x * x;
  const Real n = std::sqrt(s);
  if (!std::isfinite(n)) throw NumericError(std::string(op) + ": non-finite operand");
  if (n == Real(0)) throw DegenerateInputError(std::string(op) + ": zero-norm operand");
  return n;
}

// d cos(u, v) / du accumulated with weight w into gu.
template <class Real>
void cosine_grad(std::span<const Real> u, std::span<const Real> v, Real nu, Real nv, bool u_floored, Real cosine,
                 Real w, std::span<Real> gu) {
  const Real inv = Real(1) / (nu * nv);
  const Real self = u_floored ? Real(0) : cosine / (nu * nu);
  for (std::size_t i = 0; i < u.size(); ++i) gu[i] += w * (v[i] * inv - self * u[i]);
}

}  // namespace detail

/// u.v / (|u| |v|), clamped to [-1, 1]. Zero-norm operands are rejected.
template <class Real>
Tensor<Real> cosine_similarity(const Tensor<Real>& u, const Tensor<Real>& v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine_similarity: " + shape_string(u.shape()) + " vs " + shape_string(v.shape()));
  }
  const Real nu_raw = detail::checked_norm<Real>("cosine_similarity", u.data());
  const Real nv_raw = detail::checked_norm<Real>("cosine_similarity", v.data());
  const Real floor = Real(kNumericFloor);
  const bool uf = nu_raw < floor, vf = nv_raw < floor;
  const Real nu = uf ? floor : nu_raw, nv = vf ? floor : nv_raw;
  const Real raw = detail::dot(u.data(), v.data()) / (nu * nv);
  const Real c = std::clamp(raw, Real(-1), Real(1));
  return detail::make_result<Real>({1}, {c}, "cosine_similarity", {u, v},
                                   [nu, nv, uf, vf, raw](TensorNode<Real>& out) {
                                     const auto& uv = out.inputs[0]->value;
                                     const auto& vv = out.inputs[1]->value;
                                     const Real w = out.grad[0];
                                     if (auto* g = detail::input_grad(out, 0))
                                       detail::cosine_grad<Real>(uv, vv, nu, nv, uf, raw, w, *g);
                                     if (auto* g = detail::input_grad(out, 1))
                                       detail::cosine_grad<Real>(vv, uv, nv, nu, vf, raw, w, *g);
                                   });
}

/// Cosine of a query[n] against every row of slots[S x n] -> [S].
template <class Real>
Tensor<Real> cosine_similarity_rows(const Tensor<Real>& query, const Tensor<Real>& slots) {
  detail::require_rank("cosine_similarity_rows", slots.shape(), 2);
  const std::size_t S = slots.dim(0), n = slots.dim(1);
  if (query.size() != n) {
    throw DimensionError("cosine_similarity_rows: query " + shape_string(query.shape()) + " vs slots " +
                         shape_string(slots.shape()));
  }
  const Real floor = Real(kNumericFloor);
  const Real nq_raw = detail::checked_norm<Real>("cosine_similarity_rows", query.data());
  const bool qf = nq_raw < floor;
  const Real nq = qf ? floor : nq_raw;
  std::vector<Real> norms(S), raw(S), v(S);
  std::vector<char> floored(S);
  auto sv = slots.data();
  for (std::size_t i = 0; i < S; ++i) {
    auto row = sv.subspan(i * n, n);
    const Real nr = detail::checked_norm<Real>("cosine_similarity_rows", row);
    floored[i] = nr < floor;
    norms[i] = floored[i] ? floor : nr;
    raw[i] = detail::dot(query.data(), row) / (nq * norms[i]);
    v[i] = std::clamp(raw[i], Real(-1), Real(1));
  }
  return detail::make_result<Real>(
      {S}, std::move(v), "cosine_similarity_rows", {query, slots},
      [S, n, nq, qf, norms = std::move(norms), raw = std::move(raw), floored = std::move(floored)](
          TensorNode<Real>& out) {
        std::span<const Real> q(out.inputs[0]->value), M(out.inputs[1]->value);
        auto* gq = detail::input_grad(out, 0);
        auto* gm = detail::input_grad(out, 1);
        for (std::size_t i = 0; i < S; ++i) {
          const Real w = out.grad[i];
          if (w == Real(0)) continue;
          auto row = M.subspan(i * n, n);
          if (gq) detail::cosine_grad<Real>(q, row, nq, norms[i], qf, raw[i], w, *gq);
          if (gm) {
            detail::cosine_grad<Real>(row, q, norms[i], nq, floored[i], raw[i], w,
                                      std::span<Real>(*gm).subspan(i * n, n));
          }
        }
      });
}

/// KL(p || q) = sum p_i ln(p_i / q_i) with 0 ln 0 = 0 and q floored at 1e-8.
template <class Real>
Tensor<Real> kl_divergence(const Tensor<Real>& p, const Tensor<Real>& q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl_divergence: " + shape_string(p.shape()) + " vs " + shape_string(q.shape()));
  }
  const Real tol = detail::simplex_tolerance<Real>(p.size());
  for (const auto* t : {&p, &q}) {
    Real s = 0;
    for (Real x : t->data()) {
      if (!std::isfinite(x) || x < -tol) throw DomainError("kl_divergence: input is not a probability vector");
      s += x;
    }
    if (std::abs(s - Real(1)) > tol) {
      throw DomainError("kl_divergence: input sums to " + std::to_string(s) + ", not 1");
    }
  }
  const Real floor = Real(kNumericFloor);
  Real kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) kl += p[i] * std::log(p[i] / std::max(q[i], floor));
  }
  return detail::make_result<Real>({1}, {kl}, "kl_divergence", {p, q}, [floor](TensorNode<Real>& out) {
    const auto& pv = out.inputs[0]->value;
    const auto& qv = out.inputs[1]->value;
    const Real w = out.grad[0];
    if (auto* g = detail::input_grad(out, 0)) {
      for (std::size_t i = 0; i < pv.size(); ++i) {
        (*g)[i] += w * (std::log(std::max(pv[i], floor) / std::max(qv[i], floor)) + Real(1));
      }
    }
    if (auto* g = detail::input_grad(out, 1)) {
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (qv[i] >= floor) (*g)[i] -= w * pv[i] / qv[i];
      }
    }
  });
}

/// sum_i softmax(logits)_i * inputs_i, all inputs of one shape.
template <class Real>
Tensor<Real> weighted_sum(const std::vector<Tensor<Real>>& inputs, const Tensor<Real>& logits) {
  if (inputs.empty() || logits.size() != inputs.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(inputs.size()) + " inputs vs " +
                         std::to_string(logits.size()) + " logits");
  }
  const std::size_t k = inputs.size(), d = inputs[0].size();
  for (const auto& in : inputs) {
    if (in.shape() != inputs[0].shape()) {
      throw DimensionError("weighted_sum: " + shape_string(in.shape()) + " vs " + shape_string(inputs[0].shape()));
    }
  }
  detail::require_finite<Real>("weighted_sum", logits.data());
  std::vector<Real> w(logits.to_vector());
  detail::softmax_inplace<Real>(w, Real(1));
  std::vector<Real> v(d, Real(0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) v[j] += w[i] * inputs[i][j];
  }
  std::vector<Tensor<Real>> all(inputs);
  all.push_back(logits);
  return detail::make_result<Real>(inputs[0].shape(), std::move(v), "weighted_sum", std::move(all),
                                   [k, d, w = std::move(w)](TensorNode<Real>& out) {
                                     std::vector<Real> gw(k, Real(0));
                                     for (std::size_t i = 0; i < k; ++i) {
                                       const auto& x = out.inputs[i]->value;
                                       for (std::size_t j = 0; j < d; ++j) gw[i] += out.grad[j] * x[j];
                                       if (auto* g = detail::input_grad(out, i)) {
                                         for (std::size_t j = 0; j < d; ++j) (*g)[j] += w[i] * out.grad[j];
                                       }
                                     }
                                     if (auto* gl = detail::input_grad(out, k)) {
                                       detail::softmax_adjoint<Real>(w, gw, *gl, Real(1));
                                     }
                                   });
}

}  // namespace leakmem
