#pragma once

// Pretraining loop: next-token NLL over packed batches of corpus sentences,
// Adam with warmup and cosine decay, global-norm gradient clipping. The batch
// order is a pure function of the seed, so runs are bit-reproducible.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "hallucitrace/checkpoint.hpp"
#include "hallucitrace/model.hpp"

namespace hallucitrace {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;  // sequences per step
  double lr = 2e-3;
  double min_lr_ratio = 0.05;
  std::size_t warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // 0 disables
  std::uint64_t seed = 99;
  /// Write a checkpoint every this many steps (0 = only the final one).
  std::size_t checkpoint_every = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, lr, min_lr_ratio, warmup_steps,
                                                beta1, beta2, adam_eps, weight_decay, grad_clip, seed,
                                                checkpoint_every)

/// Mean next-token NLL over every position that has a successor.
template <std::floating_point T>
Var<T> sequence_nll(const TransformerWeights<T>& weights, const BoundWeights<T>& bound,
                    const std::vector<TokenSeq>& batch) {
  std::vector<std::size_t> rows, targets;
  std::size_t base = 0;
  for (const auto& seq : batch) {
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      rows.push_back(base + i);
      targets.push_back(seq[i + 1]);
    }
    base += seq.size();
  }
  if (rows.empty()) throw DimensionError("sequence_nll: no sequence has two or more tokens");
  ForwardOptions<T> opt;
  opt.logit_rows = &rows;
  auto r = forward(weights, bound, batch, opt);
  return cross_entropy(r.logits, std::move(targets));
}

template <std::floating_point T>
double global_grad_norm(const TransformerWeights<T>& w) {
  double s = 0;
  for (const auto& p : w.params)
    for (T g : p.grad.data()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

template <std::floating_point T>
void scale_grads(TransformerWeights<T>& w, double factor) {
  for (auto& p : w.params)
    for (T& g : p.grad.data()) g = static_cast<T>(g * factor);
}

template <std::floating_point T>
class Adam {
 public:
  Adam(const TransformerWeights<T>& w, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& p : w.params) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  void step(TransformerWeights<T>& w, double lr) {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T inv_c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg_.beta1, static_cast<double>(t_))));
    const T inv_c2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg_.beta2, static_cast<double>(t_))));
    const T eps = static_cast<T>(cfg_.adam_eps), rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < w.params.size(); ++i) {
      auto& p = w.params[i];
      T* m = m_[i].data().data();
      T* v = v_[i].data().data();
      T* x = p.value.data().data();
      const T* g = p.grad.data().data();
      const std::size_t n = p.value.size();
      const T decay = (cfg_.weight_decay > 0 && p.value.rank() == 2) ? static_cast<T>(cfg_.weight_decay) : T(0);
      for (std::size_t k = 0; k < n; ++k) {
        m[k] = b1 * m[k] + (T(1) - b1) * g[k];
        v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
        const T upd = (m[k] * inv_c1) / (std::sqrt(v[k] * inv_c2) + eps) + decay * x[k];
        x[k] -= rate * upd;
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

/// Plain gradient descent: w -= lr * g.
template <std::floating_point T>
void sgd_step(TransformerWeights<T>& w, double lr) {
  for (auto& p : w.params) {
    auto x = p.value.data();
    auto g = p.grad.data();
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = static_cast<T>(x[k] - lr * g[k]);
  }
}

inline double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total) {
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  if (total <= c.warmup_steps) return c.lr;
  const double progress =
      static_cast<double>(step - c.warmup_steps) / static_cast<double>(std::max<std::size_t>(1, total - c.warmup_steps));
  const double cosine = 0.5 * (1 + std::cos(M_PI * std::min(1.0, progress)));
  return c.lr * (c.min_lr_ratio + (1 - c.min_lr_ratio) * cosine);
}

/// Seeded shuffled batches for one epoch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 gen(seed * 1000003ULL + epoch);
  std::shuffle(order.begin(), order.end(), gen);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  return out;
}

struct TrainStep {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainHooks {
  std::function<void(const TrainStep&)> on_step;
  /// Called after each epoch with the epoch index and its mean loss.
  std::function<void(std::size_t, double)> on_epoch;
};

/// Trains in place. With a run directory, writes step checkpoints there
/// (including step 0 and the final step).
template <std::floating_point T>
std::vector<TrainStep> pretrain(TransformerWeights<T>& w, const std::vector<TokenSeq>& data, const TrainConfig& cfg,
                                const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                                const TrainHooks& hooks = {}) {
  if (data.empty()) throw ConfigError("pretraining needs a non-empty corpus");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  for (const auto& s : data) {
    if (s.size() > w.config.max_seq_len) {
      throw ConfigError("corpus sentence of " + std::to_string(s.size()) + " tokens exceeds max_seq_len " +
                        std::to_string(w.config.max_seq_len));
    }
  }
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  Adam<T> opt(w, cfg);
  std::vector<TrainStep> log;
  if (run_dir) write_checkpoint(*run_dir, 0, w);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double epoch_loss = 0;
    for (const auto& idx : epoch_batches(data.size(), cfg.batch_size, cfg.seed, e)) {
      std::vector<TokenSeq> batch;
      for (auto i : idx) batch.push_back(data[i]);
      w.reset_grads();
      auto loss = sequence_nll(w, BoundWeights<T>::parameters(w), batch);
      backward(loss);
      if (cfg.grad_clip > 0) {
        const double norm = global_grad_norm(w);
        if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
        if (norm > cfg.grad_clip) scale_grads(w, cfg.grad_clip / norm);
      }
      const double lr = scheduled_lr(cfg, step, total);
      opt.step(w, lr);
      TrainStep rec{step + 1, e, lr, static_cast<double>(loss.value()[0])};
      epoch_loss += rec.loss;
      log.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      ++step;
      if (run_dir && cfg.checkpoint_every && step % cfg.checkpoint_every == 0 && step != total) {
        write_checkpoint(*run_dir, step, w);
      }
    }
    if (hooks.on_epoch) hooks.on_epoch(e, epoch_loss / static_cast<double>(per_epoch));
  }
  if (run_dir && total > 0) write_checkpoint(*run_dir, total, w);
  return log;
}

inline std::vector<TokenSeq> tokenize_corpus(const Vocabulary& vocab, const std::vector<std::string>& sentences) {
  std::vector<TokenSeq> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(vocab.tokenize(s));
  return out;
}

}  // namespace hallucitrace
