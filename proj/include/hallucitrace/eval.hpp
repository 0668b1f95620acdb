#pragma once

// External features of a hallucinated prediction: subject-object association
// in the input embedding space, robustness of o' to embedding noise, and
// next-token uncertainty; plus their per-mechanism group means.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hallucitrace/dataset.hpp"
#include "hallucitrace/model.hpp"
#include "hallucitrace/parallel.hpp"
#include "hallucitrace/tracing.hpp"

namespace hallucitrace {

/// Mean over subject tokens of <E_in[s_i], E_in[o]>.
template <std::floating_point T>
double association_strength(const TransformerWeights<T>& w, std::span<const TokenId> subject, TokenId object) {
  if (subject.empty()) throw DomainError("association_strength: empty subject");
  const auto& E = w.tok_embed();
  if (object >= E.rows()) throw DomainError("association_strength: object outside vocabulary");
  double total = 0;
  for (TokenId s : subject) {
    if (s >= E.rows()) throw DomainError("association_strength: subject token outside vocabulary");
    const auto a = E.row(s), b = E.row(object);
    double d = 0;
    for (std::size_t j = 0; j < a.size(); ++j) d += static_cast<double>(a[j]) * static_cast<double>(b[j]);
    total += d;
  }
  return total / static_cast<double>(subject.size());
}

/// prose: a noise fails when o' is still preferred (y* > 0).
/// parenthetical: counts noises with y* < 0 < y, read literally.
enum class RobustnessRule { prose, parenthetical };

inline const char* to_string(RobustnessRule r) { return r == RobustnessRule::prose ? "prose" : "parenthetical"; }
inline RobustnessRule robustness_rule_from_string(const std::string& s) {
  if (s == "prose") return RobustnessRule::prose;
  if (s == "parenthetical") return RobustnessRule::parenthetical;
  throw std::invalid_argument("unknown robustness rule '" + s + "' (expected prose or parenthetical)");
}
NLOHMANN_JSON_SERIALIZE_ENUM(RobustnessRule, {{RobustnessRule::prose, "prose"},
                                              {RobustnessRule::parenthetical, "parenthetical"}})

inline double robustness(const std::vector<NoiseSample>& pool, double y, RobustnessRule rule = RobustnessRule::prose) {
  if (pool.empty()) throw DomainError("robustness: empty noise pool");
  std::size_t n = 0;
  for (const auto& s : pool) {
    if (rule == RobustnessRule::prose ? s.y_star > 0 : (s.y_star < 0 && 0 < y)) ++n;
  }
  return static_cast<double>(n) / static_cast<double>(pool.size());
}

/// The first `size` seeded noises of the tracing sampler, with no acceptance filter.
template <std::floating_point T>
std::vector<NoiseSample> draw_noise_pool(const Transformer<T>& model, const HallucinationQuery& q,
                                         const TraceConfig& cfg, std::size_t size) {
  const TokenId o_prime = detail::predicted_or_throw(q);
  const double sigma = noise_sigma(model.weights(), cfg.sigma_mode);
  std::vector<NoiseSample> out;
  for (std::size_t a = 0; a < size; ++a) {
    const auto seed = noise_seed(cfg.seed, q.id, a);
    auto logits = model.run(q.tokens, noise_intervention<T>(q, cfg, sigma, seed), false, true).logits;
    out.push_back({seed, degree_of_hallucination<T>(logits.row(0), q.object, o_prime)});
  }
  return out;
}

template <std::floating_point T>
double prediction_uncertainty(const Transformer<T>& model, const HallucinationQuery& q) {
  auto logits = model.run(q.tokens, {}, false, true).logits;
  auto p = next_token_distribution<T>(logits.row(0));
  return static_cast<double>(entropy<T>(p));
}

struct ManifestationFeatures {
  std::size_t query = 0;
  double so_assoc = 0;
  double so_prime_assoc = 0;
  double robustness = 0;
  double uncertainty = 0;  // nats

  static constexpr std::array<const char*, 4> kNames = {"so_assoc", "so_prime_assoc", "robustness", "uncertainty"};
  std::array<double, 4> values() const { return {so_assoc, so_prime_assoc, robustness, uncertainty}; }
};

struct FeatureConfig {
  std::size_t pool_size = 100;
  RobustnessRule rule = RobustnessRule::prose;
  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FeatureConfig, pool_size, rule)

template <std::floating_point T>
ManifestationFeatures manifestation_features(const Transformer<T>& model, const HallucinationQuery& q,
                                             const TraceConfig& trace_cfg, const FeatureConfig& cfg = {}) {
  const TokenId o_prime = detail::predicted_or_throw(q);
  ManifestationFeatures f;
  f.query = q.id;
  std::vector<TokenId> subject(q.tokens.begin() + static_cast<std::ptrdiff_t>(q.subject_first),
                               q.tokens.begin() + static_cast<std::ptrdiff_t>(q.subject_last + 1));
  f.so_assoc = association_strength<T>(model.weights(), subject, q.object);
  f.so_prime_assoc = association_strength<T>(model.weights(), subject, o_prime);
  auto logits = model.run(q.tokens, {}, false, true).logits;
  const double y = degree_of_hallucination<T>(logits.row(0), q.object, o_prime);
  f.robustness = robustness(draw_noise_pool(model, q, trace_cfg, cfg.pool_size), y, cfg.rule);
  f.uncertainty = static_cast<double>(entropy<T>(next_token_distribution<T>(logits.row(0))));
  return f;
}

template <std::floating_point T>
std::vector<ManifestationFeatures> manifestation_features(const Transformer<T>& model,
                                                          const std::vector<HallucinationQuery>& queries,
                                                          const TraceConfig& trace_cfg, const FeatureConfig& cfg = {},
                                                          std::size_t threads = 1) {
  std::vector<ManifestationFeatures> out(queries.size());
  parallel_for(queries.size(), threads,
               [&](std::size_t i) { out[i] = manifestation_features(model, queries[i], trace_cfg, cfg); });
  return out;
}

/// Reference group means of a 7B-parameter model, for side-by-side display only.
struct ReferenceFeatures {
  Mechanism group;
  std::array<double, 4> values;
};
inline constexpr std::array<ReferenceFeatures, 2> kReferenceFeatures = {
    ReferenceFeatures{Mechanism::early_site, {0.40, 0.85, 0.78, 4.39}},
    ReferenceFeatures{Mechanism::late_site, {0.88, 2.03, 0.51, 4.17}}};

struct ManifestationRow {
  Mechanism group = Mechanism::early_site;
  std::size_t count = 0;
  std::array<double, 4> mean{};
  std::array<double, 4> reference{};
};

struct ManifestationReport {
  std::vector<ManifestationRow> rows;  // non-empty groups, early then late
  std::vector<Mechanism> empty_groups;
};

/// Group means of the four features; features[i] belongs to labels[i].
inline ManifestationReport manifestation_report(const std::vector<ManifestationFeatures>& features,
                                                const std::vector<Mechanism>& labels) {
  if (features.size() != labels.size()) throw DimensionError("manifestation_report: one label per query required");
  ManifestationReport out;
  for (const auto& ref : kReferenceFeatures) {
    ManifestationRow row;
    row.group = ref.group;
    row.reference = ref.values;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (labels[i] != ref.group) continue;
      const auto v = features[i].values();
      for (std::size_t k = 0; k < v.size(); ++k) row.mean[k] += v[k];
      ++row.count;
    }
    if (row.count == 0) {
      out.empty_groups.push_back(ref.group);
      continue;
    }
    for (auto& m : row.mean) m /= static_cast<double>(row.count);
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace hallucitrace
