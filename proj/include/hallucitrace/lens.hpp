#pragma once

// Vocabulary-space views of intermediate states.
//   esp:        raw dot product z . e_o with an unembedding row (no layer norm)
//   logit lens: softmax(E LayerNorm_final(z))
// plus the enrichment / extraction metrics built on the logit lens, group
// profiles and per-checkpoint trajectories.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "hallucitrace/checkpoint.hpp"
#include "hallucitrace/dataset.hpp"
#include "hallucitrace/model.hpp"
#include "hallucitrace/parallel.hpp"

namespace hallucitrace {

template <std::floating_point T>
double esp(std::span<const T> z, const TransformerWeights<T>& w, TokenId o) {
  if (o >= w.config.vocab_size) throw DomainError("esp: token " + std::to_string(o) + " outside vocabulary");
  const auto e = w.unembed().row(o);
  if (z.size() != e.size()) throw DimensionError("esp: state width differs from d_model");
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += static_cast<double>(z[i]) * static_cast<double>(e[i]);
  return s;
}

/// E LayerNorm_final(z): the logit-lens logits of one state.
template <std::floating_point T>
std::vector<T> lens_logits(std::span<const T> z, const TransformerWeights<T>& w) {
  if (z.size() != w.config.d_model) throw DimensionError("lens_logits: state width differs from d_model");
  Tensor<T> row({1, z.size()}, std::vector<T>(z.begin(), z.end()));
  auto normed = layer_norm(row, w.final_gain(), w.final_bias(), static_cast<T>(w.config.layer_norm_eps));
  return matmul_nt(normed, w.unembed()).storage();
}

template <std::floating_point T>
std::vector<T> logit_lens(std::span<const T> z, const TransformerWeights<T>& w) {
  const auto logits = lens_logits(z, w);
  return next_token_distribution<T>(logits);
}

/// I_m(o) at layer l: e_o . LayerNorm_final(m_s).
template <std::floating_point T>
double mlp_enriched_info(const ActivationTrace<T>& trace, const TransformerWeights<T>& w, std::size_t layer,
                         std::size_t subject_last, TokenId o) {
  if (o >= w.config.vocab_size) throw DomainError("mlp_enriched_info: token outside vocabulary");
  return static_cast<double>(lens_logits<T>(trace.mlp(layer).row(subject_last), w)[o]);
}

/// O': the `k` tokens with the highest I_m at this layer, excluding o.
template <std::floating_point T>
std::vector<TokenId> enriched_alternatives(const ActivationTrace<T>& trace, const TransformerWeights<T>& w,
                                           std::size_t layer, std::size_t subject_last, TokenId o,
                                           std::size_t k = 100) {
  const auto info = lens_logits<T>(trace.mlp(layer).row(subject_last), w);
  std::vector<TokenId> out;
  for (auto t : top_k<T>(info, k + 1)) {
    if (t != o && out.size() < k) out.push_back(t);
  }
  return out;
}

/// I_a(o) at layer l: a_T . (e_o - mean over O' of e_o').
template <std::floating_point T>
double attn_extracted_info(const ActivationTrace<T>& trace, const TransformerWeights<T>& w, std::size_t layer,
                           std::size_t last, TokenId o, const std::vector<TokenId>& alternatives) {
  if (alternatives.empty()) throw DomainError("attn_extracted_info: empty alternative set O'");
  const std::size_t d = w.config.d_model;
  std::vector<double> contrast(d, 0.0);
  for (TokenId t : alternatives) {
    if (t >= w.config.vocab_size) throw DomainError("attn_extracted_info: alternative outside vocabulary");
    const auto e = w.unembed().row(t);
    for (std::size_t j = 0; j < d; ++j) contrast[j] -= static_cast<double>(e[j]);
  }
  const auto eo = w.unembed().row(o);
  for (std::size_t j = 0; j < d; ++j) contrast[j] = static_cast<double>(eo[j]) + contrast[j] / alternatives.size();
  const auto a = trace.attn(layer).row(last);
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(a[j]) * contrast[j];
  return s;
}

struct RankRecord {
  std::size_t query = 0;
  std::size_t rank = 0;       // rho*, 1-based
  std::size_t best_layer = 0;  // first layer attaining rho*
  std::size_t threshold = 0;
  bool pass = false;           // rank <= threshold
};

inline std::size_t rank_threshold(std::size_t vocab, double fraction = 0.01) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(vocab)));
}

/// rho*: best 1-based rank of o over layers in the logit lens of m_s. Ranking
/// the lens logits is the same as ranking the lens distribution.
template <std::floating_point T>
RankRecord min_object_rank(const ActivationTrace<T>& trace, const TransformerWeights<T>& w, std::size_t subject_last,
                           TokenId o, double fraction = 0.01) {
  if (o >= w.config.vocab_size) throw DomainError("min_object_rank: token outside vocabulary");
  RankRecord r;
  r.rank = w.config.vocab_size + 1;
  for (std::size_t l = 1; l <= trace.layers(); ++l) {
    const auto logits = lens_logits<T>(trace.mlp(l).row(subject_last), w);
    const auto k = rank_of<T>(logits, o);
    if (k < r.rank) {
      r.rank = k;
      r.best_layer = l;
    }
  }
  r.threshold = rank_threshold(w.config.vocab_size, fraction);
  r.pass = r.rank <= r.threshold;
  return r;
}

template <std::floating_point T>
RankRecord query_rank(const Transformer<T>& model, const HallucinationQuery& q, double fraction = 0.01) {
  auto run = model.run(q.tokens, {}, true, true);
  auto r = min_object_rank(*run.trace, model.weights(), q.subject_last, q.object, fraction);
  r.query = q.id;
  return r;
}

// ---------------------------------------------------------------------------
// Group profiles.

enum class QueryGroup { factual, early_site, late_site };
inline constexpr std::array<QueryGroup, 3> kAllQueryGroups = {QueryGroup::factual, QueryGroup::early_site,
                                                              QueryGroup::late_site};

inline const char* to_string(QueryGroup g) {
  switch (g) {
    case QueryGroup::factual: return "factual";
    case QueryGroup::early_site: return "early_site";
    case QueryGroup::late_site: return "late_site";
  }
  return "?";
}
inline QueryGroup query_group_from_string(const std::string& s) {
  for (auto g : kAllQueryGroups)
    if (s == to_string(g)) return g;
  throw std::invalid_argument("unknown query group '" + s + "'");
}

/// Per-layer ESP of the true object for one query: MLP outputs at the last
/// subject token, attention outputs at the last prompt token.
struct QueryEsp {
  std::size_t query = 0;
  std::vector<double> mlp;   // layers 1..L
  std::vector<double> attn;  // layers 1..L

  const std::vector<double>& of(SiteKind k) const {
    if (k == SiteKind::mlp_out) return mlp;
    if (k == SiteKind::attn_out) return attn;
    throw DomainError("ESP profiles cover attn_out and mlp_out only");
  }
};

template <std::floating_point T>
QueryEsp query_esp(const ActivationTrace<T>& trace, const TransformerWeights<T>& w, const HallucinationQuery& q) {
  QueryEsp out;
  out.query = q.id;
  for (std::size_t l = 1; l <= trace.layers(); ++l) {
    out.mlp.push_back(esp<T>(trace.mlp(l).row(q.subject_last), w, q.object));
    out.attn.push_back(esp<T>(trace.attn(l).row(q.relation_end), w, q.object));
  }
  return out;
}

template <std::floating_point T>
std::vector<QueryEsp> query_esps(const Transformer<T>& model, const std::vector<HallucinationQuery>& queries,
                                 std::size_t threads = 1) {
  std::vector<QueryEsp> out(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    auto run = model.run(queries[i].tokens, {}, true, true);
    out[i] = query_esp(*run.trace, model.weights(), queries[i]);
  });
  return out;
}

/// ESP of every (kind, layer, position) of one prompt, indexed [layer-1][position].
template <std::floating_point T>
std::vector<std::vector<double>> esp_grid(const ActivationTrace<T>& trace, const TransformerWeights<T>& w, SiteKind kind,
                                          TokenId o) {
  std::vector<std::vector<double>> out;
  for (std::size_t l = 1; l <= trace.layers(); ++l) {
    const auto& z = trace.get(kind, l);
    std::vector<double> row;
    for (std::size_t i = 0; i < z.rows(); ++i) row.push_back(esp<T>(z.row(i), w, o));
    out.push_back(std::move(row));
  }
  return out;
}

struct EspProfile {
  QueryGroup group = QueryGroup::factual;
  SiteKind kind = SiteKind::mlp_out;
  std::size_t count = 0;
  std::vector<double> mean;  // layers 1..L
};

struct EspProfileSet {
  std::vector<EspProfile> profiles;      // non-empty groups only, in kAllQueryGroups order
  std::vector<QueryGroup> empty_groups;  // flagged, no profile emitted
};

/// Per-group, per-layer mean ESP of `kind`; esps[i] belongs to groups[i].
inline EspProfileSet group_esp_profile(const std::vector<QueryEsp>& esps, const std::vector<QueryGroup>& groups,
                                       SiteKind kind) {
  if (esps.size() != groups.size()) throw DimensionError("group_esp_profile: one group label per query required");
  EspProfileSet out;
  for (auto g : kAllQueryGroups) {
    EspProfile p;
    p.group = g;
    p.kind = kind;
    for (std::size_t i = 0; i < esps.size(); ++i) {
      if (groups[i] != g) continue;
      const auto& v = esps[i].of(kind);
      if (p.mean.empty()) p.mean.assign(v.size(), 0.0);
      if (v.size() != p.mean.size()) throw DimensionError("group_esp_profile: mixed layer counts");
      for (std::size_t l = 0; l < v.size(); ++l) p.mean[l] += v[l];
      ++p.count;
    }
    if (p.count == 0) {
      out.empty_groups.push_back(g);
      continue;
    }
    for (auto& m : p.mean) m /= static_cast<double>(p.count);
    out.profiles.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint trajectories.

struct TrajectoryPoint {
  std::size_t step = 0;
  QueryGroup group = QueryGroup::factual;
  std::size_t count = 0;
  double lower_mlp = 0;   // mean ESP over MLP layers 1..L/2
  double upper_attn = 0;  // mean ESP over attention layers L/2+1..L
};

struct SkippedCheckpoint {
  std::filesystem::path path;
  std::string reason;
};

struct Trajectory {
  std::vector<TrajectoryPoint> points;  // step-major, groups in kAllQueryGroups order
  std::vector<SkippedCheckpoint> skipped;
};

/// Reduces one checkpoint's per-query ESPs to trajectory points.
inline std::vector<TrajectoryPoint> trajectory_points(std::size_t step, const std::vector<QueryEsp>& esps,
                                                      const std::vector<QueryGroup>& groups) {
  std::vector<TrajectoryPoint> out;
  for (const auto& p : group_esp_profile(esps, groups, SiteKind::mlp_out).profiles) {
    const std::size_t L = p.mean.size(), half = L / 2;
    if (L == 0 || L % 2) throw ConfigError("checkpoint trajectories need an even layer count");
    TrajectoryPoint t;
    t.step = step;
    t.group = p.group;
    t.count = p.count;
    for (std::size_t l = 0; l < half; ++l) t.lower_mlp += p.mean[l] / static_cast<double>(half);
    out.push_back(t);
  }
  const auto attn = group_esp_profile(esps, groups, SiteKind::attn_out).profiles;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& m = attn[i].mean;
    const std::size_t L = m.size(), half = L / 2;
    for (std::size_t l = half; l < L; ++l) out[i].upper_attn += m[l] / static_cast<double>(L - half);
  }
  return out;
}

/// Checkpoint files "step-NNNNNN.htw" in a run directory, ordered by step.
inline std::vector<std::pair<std::size_t, std::filesystem::path>> list_checkpoints(const std::filesystem::path& dir) {
  static const std::regex name(R"(step-(\d+)\.htw)");
  std::vector<std::pair<std::size_t, std::filesystem::path>> out;
  if (!std::filesystem::is_directory(dir)) throw CheckpointError("not a run directory: " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string file = entry.path().filename().string();
    if (std::regex_match(file, m, name)) out.emplace_back(std::stoull(m[1].str()), entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// ESP trajectory across every checkpoint of a run. Groups are fixed by the
/// caller (from the final checkpoint); unreadable checkpoints are skipped.
inline Trajectory checkpoint_trajectory(const std::filesystem::path& run_dir,
                                        const std::vector<HallucinationQuery>& queries,
                                        const std::vector<QueryGroup>& groups, std::size_t threads = 1) {
  if (queries.size() != groups.size()) throw DimensionError("checkpoint_trajectory: one group label per query required");
  Trajectory out;
  for (const auto& [step, path] : list_checkpoints(run_dir)) {
    std::optional<Transformer<float>> model;
    try {
      model.emplace(load_weights(path).weights);
    } catch (const std::exception& e) {
      out.skipped.push_back({path, e.what()});
      continue;
    }
    auto pts = trajectory_points(step, query_esps(*model, queries, threads), groups);
    out.points.insert(out.points.end(), pts.begin(), pts.end());
  }
  return out;
}

}  // namespace hallucitrace
