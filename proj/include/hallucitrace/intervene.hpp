#pragma once

// Interventions applied inside a forward pass: overwrite one residual /
// attention / MLP output, or add seeded Gaussian noise to input embeddings.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hallucitrace/tensor.hpp"

namespace hallucitrace {

class InterventionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class SiteKind { residual, attn_out, mlp_out };

inline const char* to_string(SiteKind k) {
  switch (k) {
    case SiteKind::residual: return "residual";
    case SiteKind::attn_out: return "attn_out";
    case SiteKind::mlp_out: return "mlp_out";
  }
  return "?";
}

inline SiteKind site_kind_from_string(const std::string& s) {
  if (s == "residual") return SiteKind::residual;
  if (s == "attn_out") return SiteKind::attn_out;
  if (s == "mlp_out") return SiteKind::mlp_out;
  throw std::invalid_argument("unknown site kind '" + s + "'");
}

/// A (kind, layer, position) location; layers are 1-based.
struct Site {
  SiteKind kind = SiteKind::residual;
  std::size_t layer = 1;
  std::size_t position = 0;

  friend bool operator==(const Site&, const Site&) = default;
};

inline std::string to_string(const Site& s) {
  return std::string(to_string(s.kind)) + "@layer" + std::to_string(s.layer) + ":pos" + std::to_string(s.position);
}

template <std::floating_point T>
struct PatchState {
  Site site;
  std::vector<T> vector;
};

struct EmbeddingNoise {
  std::vector<std::size_t> positions;
  double sigma = 1.0;
  std::uint64_t seed = 0;
};

/// Noise tensor shaped like `rows`: i.i.d. N(0, sigma²) draws on the listed
/// rows, zeros elsewhere. Rows are filled in the order given, so the same seed
/// always yields the same noise.
template <std::floating_point T>
Tensor<T> embedding_noise(const Shape& shape, std::span<const std::size_t> positions, double sigma,
                          std::uint64_t seed) {
  if (!(sigma > 0.0)) throw DomainError("embedding noise sigma must be positive");
  Tensor<T> noise(shape);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (std::size_t p : positions) {
    if (p >= noise.rows()) {
      throw InterventionError("noise position " + std::to_string(p) + " beyond sequence of length " +
                              std::to_string(noise.rows()));
    }
    for (auto& v : noise.row(p)) v = static_cast<T>(normal(gen));
  }
  return noise;
}

/// E*(u) = E(u) + ε with ε from embedding_noise; unlisted rows are untouched.
template <std::floating_point T>
Tensor<T> apply_embedding_noise(const Tensor<T>& rows, std::span<const std::size_t> positions, double sigma,
                                std::uint64_t seed) {
  return add(rows, embedding_noise<T>(rows.shape(), positions, sigma, seed));
}

template <std::floating_point T>
class InterventionSet {
 public:
  using Item = std::variant<PatchState<T>, EmbeddingNoise>;

  InterventionSet() = default;

  InterventionSet& patch(Site site, std::vector<T> vector) {
    for (const auto& p : patches_) {
      if (p.site == site) throw InterventionError("duplicate patch at " + to_string(site));
    }
    patches_.push_back({site, std::move(vector)});
    order_.push_back(patches_.size() - 1);
    return *this;
  }

  InterventionSet& noise(EmbeddingNoise n) {
    if (noise_) throw InterventionError("at most one embedding-noise intervention per set");
    noise_ = std::move(n);
    order_.push_back(kNoiseSlot);
    return *this;
  }

  const std::vector<PatchState<T>>& patches() const { return patches_; }
  const std::optional<EmbeddingNoise>& embedding_noise() const { return noise_; }
  bool empty() const { return patches_.empty() && !noise_; }
  std::size_t size() const { return order_.size(); }

  /// Items in insertion order.
  std::vector<Item> items() const {
    std::vector<Item> out;
    for (auto slot : order_) {
      if (slot == kNoiseSlot) out.emplace_back(*noise_);
      else out.emplace_back(patches_[slot]);
    }
    return out;
  }

  /// Throws if any target falls outside a model with `layers` layers, width `width`, on `length` tokens.
  void validate(std::size_t layers, std::size_t width, std::size_t length) const {
    for (const auto& p : patches_) {
      if (p.site.layer < 1 || p.site.layer > layers || p.site.position >= length) {
        throw InterventionError("unreachable intervention target " + to_string(p.site) + " (model has " +
                                std::to_string(layers) + " layers, prompt has " + std::to_string(length) +
                                " tokens)");
      }
      if (p.vector.size() != width) {
        throw InterventionError("patch vector for " + to_string(p.site) + " has length " +
                                std::to_string(p.vector.size()) + ", expected " + std::to_string(width));
      }
    }
    if (noise_) {
      for (auto pos : noise_->positions) {
        if (pos >= length) {
          throw InterventionError("noise position " + std::to_string(pos) + " beyond prompt of length " +
                                  std::to_string(length));
        }
      }
    }
  }

 private:
  static constexpr std::size_t kNoiseSlot = static_cast<std::size_t>(-1);
  std::vector<PatchState<T>> patches_;
  std::optional<EmbeddingNoise> noise_;
  std::vector<std::size_t> order_;
};

}  // namespace hallucitrace
