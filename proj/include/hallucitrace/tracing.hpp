#pragma once

// Three-run causal tracing of a hallucinated prediction:
//   hallucination run   clean prompt, degree of hallucination y
//   mitigation run      noised subject embeddings, y*
//   patched run         noised embeddings with one site restored to its
//                       hallucination-run value, y_{E*,z}
// and the indirect effects, averaged grids and early/late-site labels built
// from them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "hallucitrace/dataset.hpp"
#include "hallucitrace/intervene.hpp"
#include "hallucitrace/model.hpp"
#include "hallucitrace/parallel.hpp"
#include "json.hpp"

namespace hallucitrace {

enum class SigmaMode { unit, three_std };
enum class NoiseScope { first_subject, all_subject };
/// below_clean keeps noises with y* < y; below_one keeps noises with y* < 1.
enum class AcceptanceRule { below_clean, below_one };
/// main: IE = y_{E*,z} - y*; companion: IE = y_{E*,z} - y.
enum class IeConvention { main, companion };

inline const char* to_string(SigmaMode m) { return m == SigmaMode::unit ? "unit" : "3xstd"; }
inline SigmaMode sigma_mode_from_string(const std::string& s) {
  if (s == "unit") return SigmaMode::unit;
  if (s == "3xstd") return SigmaMode::three_std;
  throw std::invalid_argument("unknown sigma mode '" + s + "' (expected unit or 3xstd)");
}
inline const char* to_string(NoiseScope s) { return s == NoiseScope::first_subject ? "first" : "all"; }
inline NoiseScope noise_scope_from_string(const std::string& s) {
  if (s == "first") return NoiseScope::first_subject;
  if (s == "all") return NoiseScope::all_subject;
  throw std::invalid_argument("unknown noise scope '" + s + "' (expected first or all)");
}
inline const char* to_string(AcceptanceRule r) { return r == AcceptanceRule::below_clean ? "below-clean" : "below-one"; }
inline AcceptanceRule acceptance_rule_from_string(const std::string& s) {
  if (s == "below-clean") return AcceptanceRule::below_clean;
  if (s == "below-one") return AcceptanceRule::below_one;
  throw std::invalid_argument("unknown acceptance rule '" + s + "' (expected below-clean or below-one)");
}
inline const char* to_string(IeConvention c) { return c == IeConvention::main ? "main" : "companion"; }
inline IeConvention ie_convention_from_string(const std::string& s) {
  if (s == "main") return IeConvention::main;
  if (s == "companion") return IeConvention::companion;
  throw std::invalid_argument("unknown IE convention '" + s + "' (expected main or companion)");
}

NLOHMANN_JSON_SERIALIZE_ENUM(SigmaMode, {{SigmaMode::unit, "unit"}, {SigmaMode::three_std, "3xstd"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NoiseScope, {{NoiseScope::first_subject, "first"}, {NoiseScope::all_subject, "all"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AcceptanceRule, {{AcceptanceRule::below_clean, "below-clean"},
                                              {AcceptanceRule::below_one, "below-one"}})
NLOHMANN_JSON_SERIALIZE_ENUM(IeConvention, {{IeConvention::main, "main"}, {IeConvention::companion, "companion"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SiteKind, {{SiteKind::residual, "residual"},
                                        {SiteKind::attn_out, "attn_out"},
                                        {SiteKind::mlp_out, "mlp_out"}})

struct TraceConfig {
  std::size_t n_target = 10;
  std::size_t max_attempts = 0;  // 0 means 10 * n_target
  SigmaMode sigma_mode = SigmaMode::three_std;
  NoiseScope noise_scope = NoiseScope::first_subject;
  AcceptanceRule acceptance = AcceptanceRule::below_clean;
  IeConvention convention = IeConvention::main;
  /// Component kinds averaged into the relative IE.
  std::vector<SiteKind> delta_kinds = {SiteKind::attn_out, SiteKind::mlp_out};
  std::uint64_t seed = 7;

  std::size_t attempts_limit() const { return max_attempts ? max_attempts : 10 * n_target; }
  friend bool operator==(const TraceConfig&, const TraceConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TraceConfig, n_target, max_attempts, sigma_mode, noise_scope,
                                                acceptance, convention, delta_kinds, seed)

inline constexpr std::array<SiteKind, 3> kAllKinds = {SiteKind::attn_out, SiteKind::mlp_out, SiteKind::residual};

inline std::size_t kind_index(SiteKind k) {
  switch (k) {
    case SiteKind::attn_out: return 0;
    case SiteKind::mlp_out: return 1;
    case SiteKind::residual: return 2;
  }
  return 0;
}

/// y = log p(o'|u) - log p(o|u) from one logits row. The softmax normalizer
/// cancels, leaving the logit difference.
template <std::floating_point T>
double degree_of_hallucination(std::span<const T> logits, TokenId o, TokenId o_prime) {
  if (o >= logits.size() || o_prime >= logits.size()) throw DomainError("degree_of_hallucination: token out of range");
  return static_cast<double>(logits[o_prime]) - static_cast<double>(logits[o]);
}

/// Standard deviation over every entry of the input embedding table.
template <std::floating_point T>
double embedding_std(const TransformerWeights<T>& w) {
  const auto e = w.tok_embed().data();
  double mean = 0;
  for (T v : e) mean += static_cast<double>(v);
  mean /= static_cast<double>(e.size());
  double sq = 0;
  for (T v : e) sq += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  return std::sqrt(sq / static_cast<double>(e.size()));
}

template <std::floating_point T>
double noise_sigma(const TransformerWeights<T>& w, SigmaMode mode) {
  return mode == SigmaMode::unit ? 1.0 : 3.0 * embedding_std(w);
}

inline std::vector<std::size_t> noise_positions(const HallucinationQuery& q, NoiseScope scope) {
  if (scope == NoiseScope::first_subject) return {q.subject_first};
  return q.subject_positions();
}

/// Seed of attempt `attempt` for query `query` (splitmix64 finalizer over the mix).
inline std::uint64_t noise_seed(std::uint64_t base, std::size_t query, std::size_t attempt) {
  std::uint64_t z = base ^ (0x9e3779b97f4a7c15ULL * (query + 1)) ^ (0xbf58476d1ce4e5b9ULL * (attempt + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct NoiseSample {
  std::uint64_t seed = 0;
  double y_star = 0;
};

struct NoiseSampling {
  double y = 0;
  double sigma = 0;
  std::vector<NoiseSample> accepted;
  std::vector<NoiseSample> drawn;  // every attempt, accepted or not

  double acceptance_rate() const {
    return drawn.empty() ? 0.0 : static_cast<double>(accepted.size()) / static_cast<double>(drawn.size());
  }
};

class UnderSampledError : public std::runtime_error {
 public:
  UnderSampledError(const std::string& what, NoiseSampling partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const NoiseSampling& partial() const { return partial_; }

 private:
  NoiseSampling partial_;
};

inline bool accepts(AcceptanceRule rule, double y, double y_star) {
  return rule == AcceptanceRule::below_clean ? y_star < y : y_star < 1.0;
}

template <std::floating_point T>
InterventionSet<T> noise_intervention(const HallucinationQuery& q, const TraceConfig& cfg, double sigma,
                                      std::uint64_t seed) {
  InterventionSet<T> iv;
  iv.noise({noise_positions(q, cfg.noise_scope), sigma, seed});
  return iv;
}

namespace detail {
inline TokenId predicted_or_throw(const HallucinationQuery& q) {
  if (!q.predicted) throw DomainError("query " + std::to_string(q.id) + " has no predicted object o'");
  if (*q.predicted == q.object) throw DomainError("query " + std::to_string(q.id) + " predicts its true object");
  return *q.predicted;
}
}  // namespace detail

/// Draws seeded noises until n_target pass the acceptance rule or the attempt
/// budget runs out (then throws UnderSampledError carrying what was found).
template <std::floating_point T>
NoiseSampling sample_mitigating_noises(const Transformer<T>& model, const HallucinationQuery& q,
                                       const TraceConfig& cfg) {
  const TokenId o_prime = detail::predicted_or_throw(q);
  NoiseSampling out;
  out.y = degree_of_hallucination<T>(model.run(q.tokens, {}, false, true).logits.row(0), q.object, o_prime);
  if (!(out.y > 0)) throw DomainError("query " + std::to_string(q.id) + " is not hallucinated (y <= 0)");
  out.sigma = noise_sigma(model.weights(), cfg.sigma_mode);
  for (std::size_t a = 0; a < cfg.attempts_limit() && out.accepted.size() < cfg.n_target; ++a) {
    const auto seed = noise_seed(cfg.seed, q.id, a);
    auto logits = model.run(q.tokens, noise_intervention<T>(q, cfg, out.sigma, seed), false, true).logits;
    NoiseSample s{seed, degree_of_hallucination<T>(logits.row(0), q.object, o_prime)};
    out.drawn.push_back(s);
    if (accepts(cfg.acceptance, out.y, s.y_star)) out.accepted.push_back(s);
  }
  if (out.accepted.size() < cfg.n_target) {
    throw UnderSampledError("query " + std::to_string(q.id) + ": only " + std::to_string(out.accepted.size()) + " of " +
                                std::to_string(cfg.n_target) + " noises accepted in " +
                                std::to_string(out.drawn.size()) + " attempts",
                            std::move(out));
  }
  return out;
}

inline double ie_value(IeConvention c, double y, double y_star, double y_patched) {
  return c == IeConvention::main ? y_patched - y_star : y_patched - y;
}

/// One patched run computed from scratch: noise on the subject, `site`
/// restored to its hallucination-run value. Returns the IE under cfg.convention.
template <std::floating_point T>
double indirect_effect(const Transformer<T>& model, const HallucinationQuery& q, std::uint64_t noise_seed_value,
                       const Site& site, const TraceConfig& cfg) {
  const TokenId o_prime = detail::predicted_or_throw(q);
  const double sigma = noise_sigma(model.weights(), cfg.sigma_mode);
  auto clean = model.run(q.tokens, {}, true, true);
  const double y = degree_of_hallucination<T>(clean.logits.row(0), q.object, o_prime);
  auto noise = noise_intervention<T>(q, cfg, sigma, noise_seed_value);
  const double y_star =
      degree_of_hallucination<T>(model.run(q.tokens, noise, false, true).logits.row(0), q.object, o_prime);
  auto patched = noise;
  const auto row = clean.trace->at(site);
  patched.patch(site, std::vector<T>(row.begin(), row.end()));
  const double y_patched =
      degree_of_hallucination<T>(model.run(q.tokens, patched, false, true).logits.row(0), q.object, o_prime);
  return ie_value(cfg.convention, y, y_star, y_patched);
}

struct TraceOutcome {
  std::size_t query = 0;
  std::size_t layers = 0;
  std::size_t length = 0;
  double y = 0;
  NoiseSampling sampling;
  bool under_sampled = false;
  /// Mean IE over accepted noises, indexed [kind_index][layer-1][position].
  std::vector<double> ie;

  double at(SiteKind k, std::size_t layer, std::size_t pos) const {
    return ie.at((kind_index(k) * layers + (layer - 1)) * length + pos);
  }
  double& at(SiteKind k, std::size_t layer, std::size_t pos) {
    return ie.at((kind_index(k) * layers + (layer - 1)) * length + pos);
  }
};

/// Patched runs for one accepted noise, resuming each from the cached
/// mitigation-run residual stream. Adds IE / n to every cell of `out`.
template <std::floating_point T>
void accumulate_noise_effects(const Transformer<T>& model, const HallucinationQuery& q, const ActivationTrace<T>& clean,
                              const TraceConfig& cfg, double sigma, const NoiseSample& s, double weight,
                              TraceOutcome& out) {
  const TokenId o_prime = *q.predicted;
  const std::size_t L = model.config().n_layers, n = q.tokens.size();
  auto noisy_run = model.run(q.tokens, noise_intervention<T>(q, cfg, sigma, s.seed), true, true);
  const auto& noisy = *noisy_run.trace;
  auto positions = noise_positions(q, cfg.noise_scope);
  const std::size_t first_noised = *std::min_element(positions.begin(), positions.end());
  auto y_of = [&](const Tensor<T>& logits) {
    return degree_of_hallucination<T>(logits.row(0), q.object, o_prime);
  };
  for (std::size_t l = 1; l <= L; ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      for (SiteKind k : kAllKinds) {
        double y_patched = s.y_star;
        // Before the first noised token both runs agree bit for bit, so the patch is a no-op.
        if (i >= first_noised) {
          if (k == SiteKind::residual) {
            Tensor<T> h = noisy.residual(l);
            const auto src = clean.residual(l).row(i);
            std::copy(src.begin(), src.end(), h.row(i).begin());
            y_patched = y_of(model.resume_last_logits(q.tokens, l + 1, h, {}));
          } else {
            InterventionSet<T> iv;
            const auto src = clean.get(k, l).row(i);
            iv.patch({k, l, i}, std::vector<T>(src.begin(), src.end()));
            y_patched = y_of(model.resume_last_logits(q.tokens, l, noisy.residual(l - 1), iv));
          }
        }
        out.at(k, l, i) += weight * ie_value(cfg.convention, out.y, s.y_star, y_patched);
      }
    }
  }
}

/// Full trace of one hallucinated query. With allow_partial, an under-sampled
/// query is traced over the noises it has (flagged); with none it rethrows.
template <std::floating_point T>
TraceOutcome trace_query(const Transformer<T>& model, const HallucinationQuery& q, const TraceConfig& cfg,
                         bool allow_partial = true) {
  TraceOutcome out;
  out.query = q.id;
  out.layers = model.config().n_layers;
  out.length = q.tokens.size();
  try {
    out.sampling = sample_mitigating_noises(model, q, cfg);
  } catch (const UnderSampledError& e) {
    if (!allow_partial || e.partial().accepted.empty()) throw;
    out.sampling = e.partial();
    out.under_sampled = true;
  }
  out.y = out.sampling.y;
  out.ie.assign(kAllKinds.size() * out.layers * out.length, 0.0);
  auto clean = model.run(q.tokens, {}, true, true);
  const double weight = 1.0 / static_cast<double>(out.sampling.accepted.size());
  for (const auto& s : out.sampling.accepted)
    accumulate_noise_effects(model, q, *clean.trace, cfg, out.sampling.sigma, s, weight, out);
  return out;
}

struct TraceBatch {
  std::vector<TraceOutcome> outcomes;     // traced queries, in input order
  std::vector<std::size_t> skipped;       // query ids with no accepted noise
  std::vector<std::string> skip_reasons;  // aligned with skipped
};

template <std::floating_point T>
TraceBatch trace_queries(const Transformer<T>& model, const std::vector<HallucinationQuery>& queries,
                         const TraceConfig& cfg, std::size_t threads = 1) {
  std::vector<std::optional<TraceOutcome>> slots(queries.size());
  std::vector<std::string> reasons(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    try {
      slots[i] = trace_query(model, queries[i], cfg);
    } catch (const UnderSampledError& e) {
      reasons[i] = e.what();
    }
  });
  TraceBatch out;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (slots[i]) {
      out.outcomes.push_back(std::move(*slots[i]));
    } else {
      out.skipped.push_back(queries[i].id);
      out.skip_reasons.push_back(reasons[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Position groups and averaged grids.

enum class PositionGroup { first_subject, mid_subject, last_subject, relation, last_relation };
inline constexpr std::size_t kGroupCount = 5;
inline constexpr std::array<PositionGroup, kGroupCount> kAllGroups = {
    PositionGroup::first_subject, PositionGroup::mid_subject, PositionGroup::last_subject, PositionGroup::relation,
    PositionGroup::last_relation};

inline const char* to_string(PositionGroup g) {
  switch (g) {
    case PositionGroup::first_subject: return "first_subject";
    case PositionGroup::mid_subject: return "mid_subject";
    case PositionGroup::last_subject: return "last_subject";
    case PositionGroup::relation: return "relation";
    case PositionGroup::last_relation: return "last_relation";
  }
  return "?";
}

/// Groups of a prompt position. A one-token subject is both the first and the
/// last subject token; every other position belongs to exactly one group.
inline std::vector<PositionGroup> position_groups(const HallucinationQuery& q, std::size_t pos) {
  if (pos == q.relation_end) return {PositionGroup::last_relation};
  if (pos < q.subject_first || pos > q.subject_last) return {PositionGroup::relation};
  std::vector<PositionGroup> g;
  if (pos == q.subject_first) g.push_back(PositionGroup::first_subject);
  if (pos > q.subject_first && pos < q.subject_last) g.push_back(PositionGroup::mid_subject);
  if (pos == q.subject_last) g.push_back(PositionGroup::last_subject);
  return g;
}

struct AieGrid {
  std::size_t layers = 0;
  std::vector<double> sum;           // [kind][layer-1][group]
  std::vector<std::size_t> count;    // same layout

  explicit AieGrid(std::size_t L = 0) : layers(L), sum(kAllKinds.size() * L * kGroupCount, 0.0),
                                        count(kAllKinds.size() * L * kGroupCount, 0) {}

  std::size_t index(SiteKind k, std::size_t layer, PositionGroup g) const {
    return (kind_index(k) * layers + (layer - 1)) * kGroupCount + static_cast<std::size_t>(g);
  }
  std::size_t cell_count(SiteKind k, std::size_t layer, PositionGroup g) const { return count.at(index(k, layer, g)); }
  /// Mean over contributions; nullopt for an empty cell.
  std::optional<double> mean(SiteKind k, std::size_t layer, PositionGroup g) const {
    const auto i = index(k, layer, g);
    if (count.at(i) == 0) return std::nullopt;
    return sum[i] / static_cast<double>(count[i]);
  }
};

/// AIE over queries. Each query contributes, per (kind, layer, group), the
/// mean over its positions in that group of its noise-averaged IE.
inline AieGrid average_indirect_effects(const std::vector<TraceOutcome>& outcomes,
                                        const std::vector<HallucinationQuery>& queries) {
  if (outcomes.empty()) throw DomainError("average_indirect_effects: no traced queries");
  AieGrid grid(outcomes.front().layers);
  std::unordered_map<std::size_t, const HallucinationQuery*> by_id;
  for (const auto& q : queries) by_id[q.id] = &q;
  for (const auto& o : outcomes) {
    if (o.layers != grid.layers) throw DimensionError("average_indirect_effects: mixed layer counts");
    const auto it = by_id.find(o.query);
    if (it == by_id.end()) throw DomainError("average_indirect_effects: unknown query id " + std::to_string(o.query));
    const auto& q = *it->second;
    for (SiteKind k : kAllKinds) {
      for (std::size_t l = 1; l <= o.layers; ++l) {
        std::array<double, kGroupCount> s{};
        std::array<std::size_t, kGroupCount> c{};
        for (std::size_t i = 0; i < o.length; ++i) {
          for (auto g : position_groups(q, i)) {
            s[static_cast<std::size_t>(g)] += o.at(k, l, i);
            ++c[static_cast<std::size_t>(g)];
          }
        }
        for (auto g : kAllGroups) {
          const auto gi = static_cast<std::size_t>(g);
          if (!c[gi]) continue;
          grid.sum[grid.index(k, l, g)] += s[gi] / static_cast<double>(c[gi]);
          ++grid.count[grid.index(k, l, g)];
        }
      }
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Relative indirect effect and early/late-site labels.

enum class Mechanism { early_site, late_site };

inline const char* to_string(Mechanism m) { return m == Mechanism::early_site ? "EarlySite" : "LateSite"; }
inline Mechanism mechanism_from_string(const std::string& s) {
  if (s == "EarlySite") return Mechanism::early_site;
  if (s == "LateSite") return Mechanism::late_site;
  throw std::invalid_argument("unknown mechanism label '" + s + "'");
}

struct MechanismLabel {
  double delta_ie = 0;
  Mechanism label = Mechanism::late_site;
};

/// (2/L) [sum over upper-half layers of IE at w_T - sum over lower-half layers
/// of IE at w_0]; inputs are per-layer values for layers 1..L.
inline MechanismLabel relative_ie(const std::vector<double>& ie_last_relation, const std::vector<double>& ie_first_subject) {
  const std::size_t L = ie_last_relation.size();
  if (ie_first_subject.size() != L) throw DimensionError("relative_ie: per-layer profiles differ in length");
  if (L == 0 || L % 2 != 0) {
    throw ConfigError("relative_ie needs an even, positive layer count to split early/late halves, got " +
                      std::to_string(L));
  }
  double upper = 0, lower = 0;
  for (std::size_t l = L / 2; l < L; ++l) upper += ie_last_relation[l];
  for (std::size_t l = 0; l < L / 2; ++l) lower += ie_first_subject[l];
  MechanismLabel out;
  out.delta_ie = 2.0 / static_cast<double>(L) * (upper - lower);
  out.label = out.delta_ie < 0 ? Mechanism::early_site : Mechanism::late_site;
  return out;
}

/// Label of one traced query: per layer, IE averaged over `kinds` at w_0 and w_T.
inline MechanismLabel classify(const TraceOutcome& o, const HallucinationQuery& q, const std::vector<SiteKind>& kinds) {
  if (kinds.empty()) throw ConfigError("classify: no component kinds selected");
  std::vector<double> at_t(o.layers, 0.0), at_0(o.layers, 0.0);
  for (std::size_t l = 1; l <= o.layers; ++l) {
    for (SiteKind k : kinds) {
      at_t[l - 1] += o.at(k, l, q.relation_end);
      at_0[l - 1] += o.at(k, l, q.subject_first);
    }
    at_t[l - 1] /= static_cast<double>(kinds.size());
    at_0[l - 1] /= static_cast<double>(kinds.size());
  }
  return relative_ie(at_t, at_0);
}

}  // namespace hallucitrace
