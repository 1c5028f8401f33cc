#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dm1/error.hpp"

namespace dm1 {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major array of doubles. Rank 0 is a scalar. Most engine
// primitives work on rank-2 (rows x cols) values; rank 1 of length n is
// treated as a 1 x n row wherever a matrix is expected.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor(Shape{rows, cols}, std::move(data));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor(Shape{rows, cols}, fill);
  }

  static Tensor row(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor(Shape{1, n}, std::move(data));
  }

  static Tensor column(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor(Shape{n, 1}, std::move(data));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  // Matrix view. Rank 0 -> 1x1, rank 1 -> 1xn.
  std::size_t rows() const {
    if (shape_.size() < 2) return 1;
    return shape_[0];
  }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    return shape_.back();
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  // Training inputs must be finite; throws naming `what` otherwise.
  const Tensor& require_finite(const std::string& what) const {
    if (!all_finite()) throw DomainError(what + " contains NaN or Inf");
    return *this;
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  Tensor row_slice(std::size_t r) const {
    std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(r * cols()),
                          data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols()));
    return Tensor::row(std::move(d));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Value kernels. Every differentiable primitive is a thin layer over these.
// ---------------------------------------------------------------------------

namespace detail {

struct Dims2 {
  std::size_t r, c;
};

inline Dims2 dims2(const Tensor& t) { return {t.rows(), t.cols()}; }

inline void require_rank2ish(const Tensor& t, const char* op) {
  if (t.rank() > 2) throw ShapeError(std::string(op) + ": rank > 2 not supported, got " + shape_str(t.shape()));
}

inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1 && b.rank() <= 2) return a.shape();
  if (a.size() == 1 && a.rank() <= 2) return b.shape();
  require_rank2ish(a, op);
  require_rank2ish(b, op);
  auto [ar, ac] = dims2(a);
  auto [br, bc] = dims2(b);
  auto join = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                     shape_str(b.shape()));
  };
  return Shape{join(ar, br), join(ac, bc)};
}

template <class F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, F f, const char* op) {
  Shape out_shape = broadcast_shape(a, b, op);
  Tensor out(out_shape);
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.size() == 1) {
    const double bv = b[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  if (a.size() == 1) {
    const double av = a[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av, b[i]);
    return out;
  }
  const std::size_t R = out.rows(), C = out.cols();
  auto [ar, ac] = dims2(a);
  auto [br, bc] = dims2(b);
  for (std::size_t i = 0; i < R; ++i) {
    const std::size_t ia = (ar == 1 ? 0 : i) * ac;
    const std::size_t ib = (br == 1 ? 0 : i) * bc;
    for (std::size_t j = 0; j < C; ++j) {
      out[i * C + j] = f(a[ia + (ac == 1 ? 0 : j)], b[ib + (bc == 1 ? 0 : j)]);
    }
  }
  return out;
}

template <class F>
Tensor unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

}  // namespace detail

// Sums g down to `shape` along broadcast dimensions (the adjoint of broadcasting).
inline Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor out(shape, 0.0);
  if (out.size() == 1) {
    out[0] = std::accumulate(g.values().begin(), g.values().end(), 0.0);
    return out;
  }
  const std::size_t R = g.rows(), C = g.cols();
  const std::size_t orow = out.rows(), ocol = out.cols();
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      out[(orow == 1 ? 0 : i) * ocol + (ocol == 1 ? 0 : j)] += g[i * C + j];
    }
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(a, b, [](double x, double y) { return x + y; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(a, b, [](double x, double y) { return x * y; }, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(a, b, [](double x, double y) { return x / y; }, "div");
}
inline Tensor neg(const Tensor& x) {
  return detail::unary(x, [](double v) { return -v; });
}
inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; });
}
inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// In-place a += b for equal shapes.
inline void accumulate(Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("accumulate: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank2ish(x, "transpose");
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out = Tensor::matrix(C, R);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[j * R + i] = x[i * C + j];
  return out;
}

// A (m x k) . B (k x n)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2ish(a, "matmul");
  detail::require_rank2ish(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  }
  Tensor out = Tensor::matrix(m, n);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* O = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = O + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// A (m x k) . B^T where B is (n x k)
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " . " + shape_str(b.shape()) + "^T");
  }
  Tensor out = Tensor::matrix(m, n);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * n + j] = s;
    }
  }
  return out;
}

// A^T . B where A is (k x m), B is (k x n)
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_tn: " + shape_str(a.shape()) + "^T . " + shape_str(b.shape()));
  }
  Tensor out = Tensor::matrix(m, n);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* O = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = A[p * m + i];
      if (av == 0.0) continue;
      double* orow = O + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// x (B x in) . W (in x out) + b (1 x out)
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (b.size() != w.cols()) {
    throw ShapeError("affine: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  Tensor out = matmul(x, w);
  const std::size_t R = out.rows(), C = out.cols();
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[i * C + j] += b[j];
  return out;
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); });
}

// Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x)));
}

inline double gelu_derivative_scalar(double x) {
  const double inner = detail::kGeluC * (x + detail::kGeluA * x * x * x);
  const double th = std::tanh(inner);
  const double dinner = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
}

inline Tensor gelu(const Tensor& x) { return detail::unary(x, gelu_scalar); }
inline Tensor gelu_derivative(const Tensor& x) { return detail::unary(x, gelu_derivative_scalar); }

inline Tensor sin(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sin(v); });
}
inline Tensor cos(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::cos(v); });
}
inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); });
}
inline Tensor log(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::log(v); });
}
inline Tensor sqrt(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sqrt(v); });
}
// Elementwise max(x, c).
inline Tensor maximum(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return v > c ? v : c; });
}
inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; });
}

inline Tensor sum(const Tensor& x) {
  return Tensor::scalar(std::accumulate(x.values().begin(), x.values().end(), 0.0));
}
inline Tensor mean(const Tensor& x) {
  return Tensor::scalar(sum(x).item() / static_cast<double>(x.size()));
}

// Sum along an axis of a matrix, keeping the reduced dimension (size 1).
inline Tensor sum_axis(const Tensor& x, int axis) {
  detail::require_rank2ish(x, "sum_axis");
  const std::size_t R = x.rows(), C = x.cols();
  if (axis == 0) {
    Tensor out = Tensor::matrix(1, C);
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) out[j] += x[i * C + j];
    return out;
  }
  if (axis == 1) {
    Tensor out = Tensor::matrix(R, 1);
    for (std::size_t i = 0; i < R; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < C; ++j) s += x[i * C + j];
      out[i] = s;
    }
    return out;
  }
  throw ShapeError("sum_axis: axis must be 0 or 1");
}

// Column-wise concatenation of matrices with equal row counts.
inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t R = parts[0].rows();
  std::size_t C = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].rows() != R) throw ShapeError("concat_cols: row count mismatch", k);
    C += parts[k].cols();
  }
  Tensor out = Tensor::matrix(R, C);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < R; ++i)
      std::copy_n(p.data().data() + i * pc, pc, out.data().data() + i * C + off);
    off += pc;
  }
  return out;
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t R = x.rows(), C = x.cols();
  if (begin > end || end > C) throw ShapeError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  const std::size_t W = end - begin;
  Tensor out = Tensor::matrix(R, W);
  for (std::size_t i = 0; i < R; ++i)
    std::copy_n(x.data().data() + i * C + begin, W, out.data().data() + i * W);
  return out;
}

// D_ij = ||h_i - h_j||^2 for the rows of H, computed from differences (no
// expansion), so D_ii is exactly 0.
inline Tensor pairwise_sqdist(const Tensor& h) {
  const std::size_t B = h.rows(), d = h.cols();
  Tensor out = Tensor::matrix(B, B);
  const double* H = h.data().data();
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = i + 1; j < B; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = H[i * d + k] - H[j * d + k];
        s += diff * diff;
      }
      out[i * B + j] = s;
      out[j * B + i] = s;
    }
  }
  return out;
}

// Adjoint of pairwise_sqdist: given G = dL/dD, returns dL/dH.
inline Tensor pairwise_sqdist_backward(const Tensor& h, const Tensor& g) {
  const std::size_t B = h.rows(), d = h.cols();
  Tensor out = Tensor::matrix(B, d);
  const double* H = h.data().data();
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      if (i == j) continue;
      const double w = 2.0 * (g[i * B + j] + g[j * B + i]);
      if (w == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) out[i * d + k] += w * (H[i * d + k] - H[j * d + k]);
    }
  }
  return out;
}

// Directional derivative of pairwise_sqdist at h along dh.
inline Tensor pairwise_sqdist_tangent(const Tensor& h, const Tensor& dh) {
  const std::size_t B = h.rows(), d = h.cols();
  Tensor out = Tensor::matrix(B, B);
  const double* H = h.data().data();
  const double* T = dh.data().data();
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = i + 1; j < B; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        s += 2.0 * (H[i * d + k] - H[j * d + k]) * (T[i * d + k] - T[j * d + k]);
      }
      out[i * B + j] = s;
      out[j * B + i] = s;
    }
  }
  return out;
}

inline Tensor identity(std::size_t n) {
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = 1.0;
  return out;
}

// 1 off the diagonal, 0 on it.
inline Tensor offdiag_mask(std::size_t n) {
  Tensor out = Tensor::matrix(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = 0.0;
  return out;
}

inline double max_abs(const Tensor& x) {
  double m = 0.0;
  for (double v : x.values()) m = std::max(m, std::abs(v));
  return m;
}

inline double l2_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return std::sqrt(s);
}

// FNV-1a over the little-endian bytes of the values.
inline std::uint64_t checksum(std::span<const double> values, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFu;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace dm1
