#pragma once

// Tensor-level reverse-mode differentiation. Every op computes its value with
// the kernels in tensor.hpp; when gradients are being recorded it also keeps a
// closure that pushes the output gradient back to its inputs.

#include <cstddef>
#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hallucitrace/tensor.hpp"

namespace hallucitrace {

template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void reset_grad() { grad = Tensor<T>(value.shape()); }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables recording of backward closures on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <std::floating_point T>
class Var {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* parameter = nullptr;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
      if (grad.empty()) grad = Tensor<T>(value.shape());
      return grad;
    }
  };

  Var() = default;

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  /// A leaf bound to a parameter; backward accumulates into `p.grad`.
  static Var parameter(Parameter<T>& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->parameter = &p;
    n->requires_grad = grad_enabled();
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds an op result; records `backward` only if an input needs gradients.
  static Var make(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
      n->requires_grad = true;
      for (auto& in : inputs) n->parents.push_back(in.node_);
      n->backward = std::move(backward);
    }
    return Var(std::move(n));
  }

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

/// Propagates d(loss)/d(·) through the recorded graph into every reachable Parameter::grad.
template <std::floating_point T>
void backward(const Var<T>& loss) {
  using Node = typename Var<T>::Node;
  if (!loss.valid()) throw StateError("backward: no forward computation recorded");
  if (loss.value().size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad() || (!loss.node()->backward && !loss.node()->parameter)) {
    throw StateError("backward: loss has no recorded dependency on any parameter");
  }
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty()) continue;
    if (n->backward) n->backward(*n);
    if (n->parameter) {
      auto& g = n->parameter->grad;
      if (g.shape() != n->value.shape()) g = Tensor<T>(n->value.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n->grad[i];
    }
  }
}

namespace detail {
template <std::floating_point T>
void accumulate(typename Var<T>::Node& parent, const Tensor<T>& g) {
  auto& buf = parent.grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops.

template <std::floating_point T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(add(a.value(), b.value()), {a, b}, [](auto& n) {
    for (auto& p : n.parents) detail::accumulate<T>(*p, n.grad);
  });
}

template <std::floating_point T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(sub(a.value(), b.value()), {a, b}, [ra = a.requires_grad(), rb = b.requires_grad()](auto& n) {
    std::size_t k = 0;
    if (ra) detail::accumulate<T>(*n.parents[k++], n.grad);
    if (rb) detail::accumulate<T>(*n.parents[k], scale(n.grad, T(-1)));
  });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T s) {
  return Var<T>::make(scale(a.value(), s), {a}, [s](auto& n) { detail::accumulate<T>(*n.parents[0], scale(n.grad, s)); });
}

namespace detail {
// Parents of a node are stored only for inputs that require gradients; this
// maps an input slot to its parent pointer (or nullptr).
template <std::floating_point T>
std::vector<typename Var<T>::Node*> slots(typename Var<T>::Node& n, std::initializer_list<bool> needs) {
  std::vector<typename Var<T>::Node*> out;
  std::size_t k = 0;
  for (bool need : needs) out.push_back(need ? n.parents[k++].get() : nullptr);
  return out;
}
}  // namespace detail

template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(matmul(a.value(), b.value()), {a, b},
                      [a, b, ra = a.requires_grad(), rb = b.requires_grad()](auto& n) {
                        auto s = detail::slots<T>(n, {ra, rb});
                        if (s[0]) detail::accumulate<T>(*s[0], matmul_nt(n.grad, b.value()));
                        if (s[1]) detail::accumulate<T>(*s[1], matmul_tn(a.value(), n.grad));
                      });
}

/// a · bᵀ.
template <std::floating_point T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(matmul_nt(a.value(), b.value()), {a, b},
                      [a, b, ra = a.requires_grad(), rb = b.requires_grad()](auto& n) {
                        auto s = detail::slots<T>(n, {ra, rb});
                        if (s[0]) detail::accumulate<T>(*s[0], matmul(n.grad, b.value()));
                        if (s[1]) detail::accumulate<T>(*s[1], matmul_tn(n.grad, a.value()));
                      });
}

template <std::floating_point T>
Var<T> add_row_bias(const Var<T>& a, const Var<T>& bias) {
  return Var<T>::make(add_row_bias(a.value(), bias.value()), {a, bias},
                      [ra = a.requires_grad(), rb = bias.requires_grad()](auto& n) {
                        auto s = detail::slots<T>(n, {ra, rb});
                        if (s[0]) detail::accumulate<T>(*s[0], n.grad);
                        if (s[1]) {
                          auto& g = s[1]->grad_buffer();
                          for (std::size_t r = 0; r < n.grad.rows(); ++r) {
                            auto row = n.grad.row(r);
                            for (std::size_t j = 0; j < row.size(); ++j) g[j] += row[j];
                          }
                        }
                      });
}

template <std::floating_point T>
Var<T> gelu(const Var<T>& a) {
  if (!grad_enabled() || !a.requires_grad()) return Var<T>::make(gelu(a.value()), {a}, nullptr);
  // The tanh values are kept for the backward pass instead of being recomputed.
  const auto& x = a.value();
  auto t = std::make_shared<Tensor<T>>(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*t)[i] = gelu_tanh(x[i]);
    y[i] = gelu_with_tanh(x[i], (*t)[i]);
  }
  check_finite(y, "gelu");
  return Var<T>::make(std::move(y), {a}, [a, t](auto& n) {
    Tensor<T> g = n.grad;
    const auto& x = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= gelu_derivative_with_tanh(x[i], (*t)[i]);
    detail::accumulate<T>(*n.parents[0], g);
  });
}

template <std::floating_point T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  Tensor<T> y = layer_norm(x.value(), gain.value(), bias.value(), eps);
  return Var<T>::make(
      std::move(y), {x, gain, bias},
      [x, gain, eps, rx = x.requires_grad(), rg = gain.requires_grad(), rb = bias.requires_grad()](auto& n) {
        auto s = detail::slots<T>(n, {rx, rg, rb});
        const auto& xv = x.value();
        const auto& gv = gain.value();
        const std::size_t d = xv.cols();
        const std::size_t rows = xv.size() / d;
        Tensor<T> dx(xv.shape());
        Tensor<T> dg(gv.shape()), db(gv.shape());
        std::vector<T> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* px = xv.data().data() + r * d;
          const T* pg = n.grad.data().data() + r * d;
          T mean{0};
          for (std::size_t j = 0; j < d; ++j) mean += px[j];
          mean /= static_cast<T>(d);
          T var{0};
          for (std::size_t j = 0; j < d; ++j) var += (px[j] - mean) * (px[j] - mean);
          var /= static_cast<T>(d);
          const T rstd = T(1) / std::sqrt(var + eps);
          T sum_dxhat{0}, sum_dxhat_xhat{0};
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (px[j] - mean) * rstd;
            dxhat[j] = pg[j] * gv[j];
            dg[j] += pg[j] * xhat[j];
            db[j] += pg[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
          }
          T* pdx = dx.data().data() + r * d;
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            pdx[j] = rstd * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
          }
        }
        if (s[0]) detail::accumulate<T>(*s[0], dx);
        if (s[1]) detail::accumulate<T>(*s[1], dg);
        if (s[2]) detail::accumulate<T>(*s[2], db);
      });
}

/// Rows of `table` selected by `ids`.
template <std::floating_point T>
Var<T> embedding(const Var<T>& table, std::vector<std::size_t> ids) {
  Tensor<T> out = embedding_gather(table.value(), ids);
  return Var<T>::make(std::move(out), {table}, [ids = std::move(ids)](auto& n) {
    auto& g = n.parents[0]->grad_buffer();
    const std::size_t d = n.grad.cols();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = g.data().data() + ids[i] * d;
      const auto src = n.grad.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

/// Single row `r` of a matrix, as a 1×d matrix.
template <std::floating_point T>
Var<T> select_row(const Var<T>& x, std::size_t r) {
  require_matrix(x.value(), "select_row");
  if (r >= x.value().rows()) throw DimensionError("select_row: row " + std::to_string(r) + " out of range");
  const auto src = x.value().row(r);
  Tensor<T> out({1, src.size()}, std::vector<T>(src.begin(), src.end()));
  return Var<T>::make(std::move(out), {x}, [r](auto& n) {
    auto& g = n.parents[0]->grad_buffer();
    auto dst = g.row(r);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
  });
}

/// Rows `idx` of a matrix, stacked in the order given.
template <std::floating_point T>
Var<T> select_rows(const Var<T>& x, std::vector<std::size_t> idx) {
  require_matrix(x.value(), "select_rows");
  const std::size_t d = x.value().cols();
  if (idx.empty()) throw DimensionError("select_rows: no rows requested");
  std::vector<T> data;
  data.reserve(idx.size() * d);
  for (auto r : idx) {
    if (r >= x.value().rows()) throw DimensionError("select_rows: row " + std::to_string(r) + " out of range");
    const auto src = x.value().row(r);
    data.insert(data.end(), src.begin(), src.end());
  }
  Tensor<T> out({idx.size(), d}, std::move(data));
  return Var<T>::make(std::move(out), {x}, [idx = std::move(idx)](auto& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = g.row(idx[i]);
      const auto src = n.grad.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

/// Copy of `x` with row `r` overwritten by a constant; no gradient flows to the overwritten row.
template <std::floating_point T>
Var<T> replace_row(const Var<T>& x, std::size_t r, std::span<const T> values) {
  require_matrix(x.value(), "replace_row");
  if (r >= x.value().rows()) throw DimensionError("replace_row: row " + std::to_string(r) + " out of range");
  if (values.size() != x.value().cols()) throw DimensionError("replace_row: vector length mismatch");
  Tensor<T> out = x.value();
  std::copy(values.begin(), values.end(), out.row(r).begin());
  return Var<T>::make(std::move(out), {x}, [r](auto& n) {
    Tensor<T> g = n.grad;
    std::fill(g.row(r).begin(), g.row(r).end(), T(0));
    detail::accumulate<T>(*n.parents[0], g);
  });
}

/// Mean over rows of −log softmax(logits)[target].
template <std::floating_point T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<std::size_t> targets) {
  const T loss = cross_entropy(logits.value(), targets);
  return Var<T>::make(Tensor<T>({1}, std::vector<T>{loss}), {logits}, [logits, targets = std::move(targets)](auto& n) {
    const auto& lv = logits.value();
    Tensor<T> p = softmax(lv);
    const T scale_by = n.grad[0] / static_cast<T>(lv.rows());
    for (std::size_t r = 0; r < lv.rows(); ++r) {
      auto row = p.row(r);
      row[targets[r]] -= T(1);
      for (auto& v : row) v *= scale_by;
    }
    detail::accumulate<T>(*n.parents[0], p);
  });
}

/// log softmax(logits)[token] for a single-row logits matrix (or vector).
template <std::floating_point T>
Var<T> log_prob(const Var<T>& logits, std::size_t token) {
  const auto row = logits.value().data();
  if (token >= row.size()) throw DomainError("log_prob: token out of range");
  const T lp = row[token] - log_sum_exp(row);
  return Var<T>::make(Tensor<T>({1}, std::vector<T>{lp}), {logits}, [logits, token](auto& n) {
    const auto lv = logits.value().data();
    const T lse = log_sum_exp(lv);
    Tensor<T> g(logits.value().shape());
    for (std::size_t i = 0; i < lv.size(); ++i) g[i] = -std::exp(lv[i] - lse) * n.grad[0];
    g[token] += n.grad[0];
    detail::accumulate<T>(*n.parents[0], g);
  });
}

template <std::floating_point T>
Var<T> sum_squares(const Var<T>& a) {
  T s{0};
  for (T v : a.value().data()) s += v * v;
  return Var<T>::make(Tensor<T>({1}, std::vector<T>{s}), {a}, [a](auto& n) {
    detail::accumulate<T>(*n.parents[0], scale(a.value(), T(2) * n.grad[0]));
  });
}

template <std::floating_point T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  return Var<T>::make(Tensor<T>({1}, std::vector<T>{s}), {a}, [shape = a.shape()](auto& n) {
    detail::accumulate<T>(*n.parents[0], Tensor<T>(shape, n.grad[0]));
  });
}

template <std::floating_point T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  const T s = dot(a.value().data(), b.value().data());
  return Var<T>::make(Tensor<T>({1}, std::vector<T>{s}), {a, b},
                      [a, b, ra = a.requires_grad(), rb = b.requires_grad()](auto& n) {
                        auto sl = detail::slots<T>(n, {ra, rb});
                        if (sl[0]) detail::accumulate<T>(*sl[0], scale(b.value(), n.grad[0]));
                        if (sl[1]) detail::accumulate<T>(*sl[1], scale(a.value(), n.grad[0]));
                      });
}

// ---------------------------------------------------------------------------
// Multi-head causal self-attention over a packed batch. Rows of q, k, v are
// tokens; `segments` holds the start row of every sequence plus the total row
// count, and a token attends only to tokens of its own sequence at or before
// its own position.

template <std::floating_point T>
struct AttentionResult {
  Var<T> output;
  /// Per head, per row: weights over the row's visible prefix.
  std::shared_ptr<std::vector<std::vector<T>>> weights;
};

namespace detail {
inline std::size_t segment_start(const std::vector<std::size_t>& segments, std::size_t row) {
  auto it = std::upper_bound(segments.begin(), segments.end(), row);
  return *(it - 1);
}
}  // namespace detail

template <std::floating_point T>
AttentionResult<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t n_heads,
                                    std::vector<std::size_t> segments) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  require_same_shape(qv, kv, "causal_attention");
  require_same_shape(qv, vv, "causal_attention");
  const std::size_t rows = qv.rows(), d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  if (segments.empty() || segments.front() != 0 || segments.back() != rows) {
    throw DimensionError("causal_attention: segments must start at 0 and end at the row count");
  }
  const std::size_t dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto weights = std::make_shared<std::vector<std::vector<T>>>(n_heads * rows);
  Tensor<T> out({rows, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t start = detail::segment_start(segments, i);
      auto& w = (*weights)[h * rows + i];
      w.resize(i - start + 1);
      const T* qi = qv.data().data() + i * d + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = start; j <= i; ++j) {
        const T* kj = kv.data().data() + j * d + off;
        T s{0};
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= inv_sqrt;
        w[j - start] = s;
        mx = std::max(mx, s);
      }
      T total{0};
      for (auto& x : w) {
        x = std::exp(x - mx);
        total += x;
      }
      for (auto& x : w) x /= total;
      T* oi = out.data().data() + i * d + off;
      for (std::size_t j = start; j <= i; ++j) {
        const T wj = w[j - start];
        const T* vj = vv.data().data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += wj * vj[c];
      }
    }
  }
  check_finite(out, "causal_attention");
  auto backward = [q, k, v, n_heads, weights, segments, rq = q.requires_grad(), rk = k.requires_grad(),
                   rv = v.requires_grad()](auto& n) {
    auto s = detail::slots<T>(n, {rq, rk, rv});
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    const std::size_t rows = qv.rows(), d = qv.cols(), dh = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> dq({rows, d}), dk({rows, d}), dv({rows, d});
    std::vector<T> dw;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t start = detail::segment_start(segments, i);
        const auto& w = (*weights)[h * rows + i];
        const T* go = n.grad.data().data() + i * d + off;
        dw.assign(w.size(), T(0));
        T wdot{0};
        for (std::size_t j = start; j <= i; ++j) {
          const T* vj = vv.data().data() + j * d + off;
          T acc{0};
          for (std::size_t c = 0; c < dh; ++c) acc += go[c] * vj[c];
          dw[j - start] = acc;
          wdot += acc * w[j - start];
          T* dvj = dv.data().data() + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) dvj[c] += w[j - start] * go[c];
        }
        const T* qi = qv.data().data() + i * d + off;
        T* dqi = dq.data().data() + i * d + off;
        for (std::size_t j = start; j <= i; ++j) {
          const T ds = w[j - start] * (dw[j - start] - wdot) * inv_sqrt;
          const T* kj = kv.data().data() + j * d + off;
          T* dkj = dk.data().data() + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
    if (s[0]) detail::accumulate<T>(*s[0], dq);
    if (s[1]) detail::accumulate<T>(*s[1], dk);
    if (s[2]) detail::accumulate<T>(*s[2], dv);
  };
  return {Var<T>::make(std::move(out), {q, k, v}, std::move(backward)), weights};
}

}  // namespace hallucitrace
