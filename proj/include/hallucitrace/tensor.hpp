#pragma once

// Dense row-major tensors and the deterministic numeric kernels everything
// else is built on. Every reduction runs in a fixed sequential order, so the
// same inputs always produce the same bits.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hallucitrace {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {
inline std::atomic<bool>& checked_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace detail

/// In checked mode every kernel verifies that its output is finite.
inline bool checked_mode() { return detail::checked_flag().load(std::memory_order_relaxed); }
inline void set_checked_mode(bool on) { detail::checked_flag().store(on, std::memory_order_relaxed); }

class CheckedModeGuard {
 public:
  explicit CheckedModeGuard(bool on) : previous_(checked_mode()) { set_checked_mode(on); }
  ~CheckedModeGuard() { set_checked_mode(previous_); }
  CheckedModeGuard(const CheckedModeGuard&) = delete;
  CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

 private:
  bool previous_;
};

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor of shape " + shape_string(shape_) + " needs " +
                           std::to_string(shape_size(shape_)) + " elements, got " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t n = rows.size();
    const std::size_t m = n ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(n * m);
    for (const auto& r : rows) {
      if (r.size() != m) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({n, m}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Leading extent for matrices; 1 for vectors.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  /// Trailing extent.
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) noexcept { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

template <std::floating_point T>
Tensor<T> row_vector(std::span<const T> values) {
  return Tensor<T>({values.size()}, std::vector<T>(values.begin(), values.end()));
}

template <std::floating_point T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!checked_mode()) return;
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <std::floating_point T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <std::floating_point T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Products. Every output element accumulates over the inner index in order
// k = 0, 1, ...; the loops only vectorize across independent output columns.

namespace detail {
// c (m×n, zero-initialized) += a (m×k) · b (k×n). Column tiles of four rows are
// held in a local accumulator; each element still sums its k terms in order.
template <std::floating_point T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kTile = 64 / sizeof(T) * 4;
  for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
    const std::size_t jn = std::min(kTile, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T acc[4][kTile] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = a[i * k + p], a1 = a[(i + 1) * k + p], a2 = a[(i + 2) * k + p], a3 = a[(i + 3) * k + p];
        const T* bp = b + p * n + j0;
        if (jn == kTile) {
          for (std::size_t j = 0; j < kTile; ++j) {
            const T bv = bp[j];
            acc[0][j] += a0 * bv;
            acc[1][j] += a1 * bv;
            acc[2][j] += a2 * bv;
            acc[3][j] += a3 * bv;
          }
        } else {
          for (std::size_t j = 0; j < jn; ++j) {
            const T bv = bp[j];
            acc[0][j] += a0 * bv;
            acc[1][j] += a1 * bv;
            acc[2][j] += a2 * bv;
            acc[3][j] += a3 * bv;
          }
        }
      }
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < jn; ++j) c[(i + r) * n + j0 + j] += acc[r][j];
    }
    for (; i < m; ++i) {
      T acc[kTile] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* bp = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) acc[j] += av * bp[j];
      }
      for (std::size_t j = 0; j < jn; ++j) c[i * n + j0 + j] += acc[j];
    }
  }
}
}  // namespace detail

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor<T> c({m, n});
  detail::gemm_accumulate(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  check_finite(c, "matmul");
  return c;
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

/// a · bᵀ, for weights stored one output per row (the unembedding).
template <std::floating_point T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + "ᵀ");
  }
  return matmul(a, transpose(b));
}

/// aᵀ · b, accumulated over the shared leading index in order.
template <std::floating_point T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (b.shape()[0] != a.shape()[0]) {
    throw DimensionError("matmul_tn: leading dimensions disagree for " + shape_string(a.shape()) + "ᵀ and " +
                         shape_string(b.shape()));
  }
  return matmul(transpose(a), b);
}

template <std::floating_point T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// ---------------------------------------------------------------------------
// Elementwise.

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  check_finite(c, "add");
  return c;
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  check_finite(c, "sub");
  return c;
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> c = a;
  for (auto& v : c.data()) v *= s;
  check_finite(c, "scale");
  return c;
}

/// Adds a length-n bias to every row of an m×n matrix.
template <std::floating_point T>
Tensor<T> add_row_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  require_matrix(a, "add_row_bias");
  if (bias.size() != a.cols()) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) + " vs matrix " +
                         shape_string(a.shape()));
  }
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.rows(); ++i) {
    auto r = c.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  check_finite(c, "add_row_bias");
  return c;
}

namespace detail {
template <std::floating_point T>
constexpr T gelu_c() {
  return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}
}  // namespace detail

/// tanh of the GELU inner argument; gelu and its derivative both derive from it.
template <std::floating_point T>
T gelu_tanh(T x) {
  return std::tanh(detail::gelu_c<T>() * (x + T(0.044715) * x * x * x));
}

template <std::floating_point T>
T gelu_with_tanh(T x, T t) {
  return T(0.5) * x * (T(1) + t);
}

template <std::floating_point T>
T gelu_derivative_with_tanh(T x, T t) {
  const T du = detail::gelu_c<T>() * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

/// GELU, tanh approximation.
template <std::floating_point T>
T gelu(T x) {
  return gelu_with_tanh(x, gelu_tanh(x));
}

template <std::floating_point T>
T gelu_derivative(T x) {
  return gelu_derivative_with_tanh(x, gelu_tanh(x));
}

template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> c = a;
  for (auto& v : c.data()) v = gelu(v);
  check_finite(c, "gelu");
  return c;
}

// ---------------------------------------------------------------------------
// Normalizations and distributions.

namespace detail {
struct AxisSplit {
  std::size_t outer, n, inner;
};
inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}
}  // namespace detail

template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  Tensor<T> y = x;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = y[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, y[base + j * s.inner]);
      T total{0};
      for (std::size_t j = 0; j < s.n; ++j) {
        T& v = y[base + j * s.inner];
        v = std::exp(v - mx);
        total += v;
      }
      for (std::size_t j = 0; j < s.n; ++j) y[base + j * s.inner] /= total;
    }
  }
  check_finite(y, "softmax");
  return y;
}

/// Softmax along the last axis.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax(x, x.rank() - 1);
}

template <std::floating_point T>
std::vector<T> log_softmax(std::span<const T> logits) {
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  T total{0};
  for (T v : logits) total += std::exp(v - mx);
  const T lse = mx + std::log(total);
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

template <std::floating_point T>
T log_sum_exp(std::span<const T> logits) {
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  T total{0};
  for (T v : logits) total += std::exp(v - mx);
  return mx + std::log(total);
}

/// Row-wise layer norm over the last dimension: (x - mean) / sqrt(var + eps) * gain + bias.
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  }
  Tensor<T> y = x;
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    T* p = y.data().data() + r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += p[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (p[j] - mean) * (p[j] - mean);
    var /= static_cast<T>(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) p[j] = (p[j] - mean) * rstd * gain[j] + bias[j];
  }
  check_finite(y, "layer_norm");
  return y;
}

/// Shannon entropy in nats, with 0·ln 0 = 0. The sum check allows at least
/// the rounding a length-n summation can accumulate (n ulp).
template <std::floating_point T>
T entropy(std::span<const T> p, T tolerance = T(1e-6)) {
  tolerance = std::max(tolerance, static_cast<T>(p.size()) * std::numeric_limits<T>::epsilon());
  T total{0};
  for (T v : p) {
    if (!(v >= T(0))) throw DomainError("entropy: negative or NaN probability");
    total += v;
  }
  if (std::abs(total - T(1)) > tolerance) {
    throw DomainError("entropy: probabilities sum to " + std::to_string(total) + ", not 1");
  }
  T h{0};
  for (T v : p)
    if (v > T(0)) h -= v * std::log(v);
  return h;
}

template <std::floating_point T>
std::size_t argmax(std::span<const T> v) {
  if (v.empty()) throw DomainError("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Indices of the k largest values, descending; ties go to the lower index.
template <std::floating_point T>
std::vector<std::size_t> top_k(std::span<const T> v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, v.size());
  auto better = [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

/// 1-based rank of `index` under descending order, ties broken toward lower indices.
template <std::floating_point T>
std::size_t rank_of(std::span<const T> v, std::size_t index) {
  std::size_t rank = 1;
  const T x = v[index];
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] > x || (v[i] == x && i < index)) ++rank;
  }
  return rank;
}

/// Mean over rows of -log softmax(logits)[target].
template <std::floating_point T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  require_matrix(logits, "cross_entropy");
  if (targets.size() != logits.rows()) throw DimensionError("cross_entropy: one target per row required");
  T total{0};
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    if (targets[r] >= row.size()) throw DomainError("cross_entropy: target out of range");
    total += log_sum_exp(row) - row[targets[r]];
  }
  return total / static_cast<T>(logits.rows());
}

template <std::floating_point T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::size_t> ids) {
  require_matrix(table, "embedding_gather");
  if (ids.empty()) throw DimensionError("embedding_gather: no ids");
  Tensor<T> out({ids.size(), table.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) {
      throw DomainError("embedding_gather: id " + std::to_string(ids[i]) + " outside table of " +
                        std::to_string(table.rows()) + " rows");
    }
    std::copy_n(table.row(ids[i]).begin(), table.cols(), out.row(i).begin());
  }
  return out;
}

}  // namespace hallucitrace
