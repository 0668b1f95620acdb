#pragma once

// Fine-tuning against hallucinations. The MHM term raises the true answer y in
// the logit lens of selected MLP outputs and pushes y above the hallucinated
// y' in the logit lens of selected attention outputs, both at the last
// question token; it is added to the ordinary NLL of [x; y].

#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hallucitrace/checkpoint.hpp"
#include "hallucitrace/dataset.hpp"
#include "hallucitrace/model.hpp"
#include "hallucitrace/train.hpp"

namespace hallucitrace {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step, TransformerWeights<float> last_good)
      : std::runtime_error(what), step_(step), last_good_(std::move(last_good)) {}
  /// Steps completed before the non-finite loss.
  std::size_t step() const { return step_; }
  const TransformerWeights<float>& last_good() const { return last_good_; }

 private:
  std::size_t step_;
  TransformerWeights<float> last_good_;
};

/// Six consecutive layers centred on 3L/4, clipped to [1, L].
inline std::vector<std::size_t> default_mitigation_layers(std::size_t n_layers) {
  if (n_layers == 0) return {};
  const std::size_t centre = (3 * n_layers) / 4;
  std::size_t last = std::min(n_layers, centre + 3);
  std::size_t first = last >= 6 ? last - 5 : 1;
  std::vector<std::size_t> out;
  for (std::size_t l = first; l <= last; ++l) out.push_back(l);
  return out;
}

struct MhmConfig {
  std::vector<std::size_t> layers_mlp;   // empty = default_mitigation_layers
  std::vector<std::size_t> layers_attn;  // empty = default_mitigation_layers
  double lambda = 1.0;
  double lr = 0.005;
  std::size_t epochs = 8;
  std::size_t batch_size = 8;
  double grad_clip = 1.0;  // global-norm clip before each step; 0 disables
  std::uint64_t seed = 5;
  /// Treat the lens readout (final norm and unembedding) inside the MHM term
  /// as fixed, so the term can only move the intermediate states themselves.
  bool detach_readout = false;

  friend bool operator==(const MhmConfig&, const MhmConfig&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MhmConfig, layers_mlp, layers_attn, lambda, lr, epochs, batch_size,
                                                grad_clip, seed, detach_readout)

/// MhmConfig with defaults filled in and layers checked against the model.
inline MhmConfig resolve_mhm_config(MhmConfig cfg, std::size_t n_layers) {
  if (cfg.layers_mlp.empty()) cfg.layers_mlp = default_mitigation_layers(n_layers);
  if (cfg.layers_attn.empty()) cfg.layers_attn = default_mitigation_layers(n_layers);
  for (const auto* set : {&cfg.layers_mlp, &cfg.layers_attn}) {
    for (auto l : *set) {
      if (l < 1 || l > n_layers) {
        throw ConfigError("mitigation layer " + std::to_string(l) + " outside [1, " + std::to_string(n_layers) + "]");
      }
    }
  }
  if (!(cfg.lambda >= 0)) throw ConfigError("lambda must be non-negative");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  return cfg;
}

struct TrainExample {
  std::size_t query = 0;
  TokenSeq x;         // question
  TokenId y = 0;      // first token of the true answer
  TokenId y_prime = 0;  // hallucinated token

  TokenSeq joined() const {
    TokenSeq s = x;
    s.push_back(y);
    return s;
  }
};

inline void validate_example(const TrainExample& e) {
  if (e.x.empty()) throw DomainError("training example with an empty question");
  if (e.y == e.y_prime) throw DomainError("training example whose answer equals the hallucinated token");
}

/// Per-example loss parts of one packed batch, as graph nodes.
template <std::floating_point T>
struct MitigationLosses {
  std::vector<Var<T>> nll;  // mean next-token NLL over [x; y]
  std::vector<Var<T>> mhm;  // empty when not requested
};

namespace detail {

template <std::floating_point T>
struct LensReadout {
  Var<T> gain, bias, unembed;
  T eps;

  LensReadout(const TransformerWeights<T>& w, const BoundWeights<T>& bound, bool detach)
      : gain(detach ? Var<T>::constant(w.final_gain()) : bound.vars[w.final_gain_index()]),
        bias(detach ? Var<T>::constant(w.final_bias()) : bound.vars[w.final_bias_index()]),
        unembed(detach ? Var<T>::constant(w.unembed()) : bound.vars[w.unembed_index()]),
        eps(static_cast<T>(w.config.layer_norm_eps)) {}
};

template <std::floating_point T>
Var<T> lens_log_prob(const Var<T>& states, std::size_t row, const LensReadout<T>& lens, TokenId token) {
  auto normed = layer_norm(select_row(states, row), lens.gain, lens.bias, lens.eps);
  return log_prob(matmul_nt(normed, lens.unembed), token);
}

}  // namespace detail

/// One packed forward over [x; y] for every example.
template <std::floating_point T>
MitigationLosses<T> mitigation_losses(const TransformerWeights<T>& w, const BoundWeights<T>& bound,
                                      const std::vector<TrainExample>& batch, const MhmConfig& cfg, bool with_mhm) {
  if (batch.empty()) throw DomainError("mitigation loss over an empty batch");
  if (with_mhm && cfg.layers_mlp.empty() && cfg.layers_attn.empty()) {
    throw ConfigError("MHM loss needs at least one MLP or attention layer");
  }
  std::vector<TokenSeq> seqs;
  std::vector<std::size_t> rows;
  std::size_t base = 0;
  for (const auto& e : batch) {
    validate_example(e);
    seqs.push_back(e.joined());
    for (std::size_t i = 0; i + 1 < seqs.back().size(); ++i) rows.push_back(base + i);
    base += seqs.back().size();
  }
  ForwardOptions<T> opt;
  opt.logit_rows = &rows;
  auto res = forward(w, bound, seqs, opt);
  MitigationLosses<T> out;
  std::optional<detail::LensReadout<T>> lens;
  if (with_mhm) lens.emplace(w, bound, cfg.detach_readout);
  std::size_t logit_row = 0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto& s = seqs[k];
    std::vector<std::size_t> mine(s.size() - 1);
    std::iota(mine.begin(), mine.end(), logit_row);
    logit_row += s.size() - 1;
    out.nll.push_back(cross_entropy(select_rows(res.logits, mine), std::vector<std::size_t>(s.begin() + 1, s.end())));
    if (!with_mhm) continue;
    const std::size_t last = res.segments[k] + batch[k].x.size() - 1;
    std::optional<Var<T>> total;
    auto add = [&](const Var<T>& v) { total = total ? *total + v : v; };
    for (auto l : cfg.layers_mlp) add(scale(detail::lens_log_prob(res.mlp_vars.at(l - 1), last, *lens, batch[k].y), T(-1)));
    for (auto l : cfg.layers_attn) {
      const auto& a = res.attn_vars.at(l - 1);
      add(detail::lens_log_prob(a, last, *lens, batch[k].y_prime) - detail::lens_log_prob(a, last, *lens, batch[k].y));
    }
    out.mhm.push_back(*total);
  }
  return out;
}

template <std::floating_point T>
Var<T> mhm_loss(const TransformerWeights<T>& w, const BoundWeights<T>& bound, const TrainExample& e,
                const MhmConfig& cfg) {
  return mitigation_losses(w, bound, {e}, cfg, true).mhm.front();
}

template <std::floating_point T>
Var<T> nll_loss(const TransformerWeights<T>& w, const BoundWeights<T>& bound, const TrainExample& e) {
  return mitigation_losses(w, bound, {e}, MhmConfig{}, false).nll.front();
}

/// L_NLL + lambda L_MHM; with lambda = 0 this is the NLL node itself.
template <std::floating_point T>
Var<T> combined_loss(const TransformerWeights<T>& w, const BoundWeights<T>& bound, const TrainExample& e,
                     const MhmConfig& cfg) {
  if (cfg.lambda == 0) return nll_loss(w, bound, e);
  auto parts = mitigation_losses(w, bound, {e}, cfg, true);
  return parts.nll.front() + scale(parts.mhm.front(), static_cast<T>(cfg.lambda));
}

struct MitigationStep {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double nll = 0;       // batch means
  double mhm = 0;
  double combined = 0;
};

struct MitigationRun {
  TransformerWeights<float> weights;
  std::vector<MitigationStep> log;
};

/// Plain SGD on the batch mean of the combined loss. Batch order is a
/// function of cfg.seed only. A non-finite loss aborts with the weights from
/// before that step.
inline MitigationRun train_mhm(const TransformerWeights<float>& start, const std::vector<TrainExample>& examples,
                               MhmConfig cfg, const std::function<void(const MitigationStep&)>& on_step = {}) {
  if (examples.empty()) throw DomainError("mitigation training needs at least one example");
  cfg = resolve_mhm_config(std::move(cfg), start.config.n_layers);
  for (const auto& e : examples) validate_example(e);
  MitigationRun run{start, {}};
  auto& w = run.weights;
  const bool with_mhm = cfg.lambda != 0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(examples.size(), cfg.batch_size, cfg.seed, epoch)) {
      std::vector<TrainExample> batch;
      for (auto i : idx) batch.push_back(examples[i]);
      w.reset_grads();
      auto parts = mitigation_losses(w, BoundWeights<float>::parameters(w), batch, cfg, with_mhm);
      const float inv = 1.0f / static_cast<float>(batch.size());
      std::optional<Var<float>> total;
      MitigationStep rec;
      rec.step = step + 1;
      rec.epoch = epoch;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        Var<float> item = parts.nll[k];
        rec.nll += parts.nll[k].value()[0] * inv;
        if (with_mhm) {
          item = item + scale(parts.mhm[k], static_cast<float>(cfg.lambda));
          rec.mhm += parts.mhm[k].value()[0] * inv;
        }
        total = total ? *total + item : item;
      }
      auto loss = scale(*total, inv);
      rec.combined = loss.value()[0];
      if (!std::isfinite(rec.combined)) {
        throw DivergenceError("mitigation loss became non-finite at step " + std::to_string(step + 1), step, w);
      }
      backward(loss);
      if (cfg.grad_clip > 0) {
        const double norm = global_grad_norm(w);
        if (!std::isfinite(norm)) {
          throw DivergenceError("non-finite mitigation gradient at step " + std::to_string(step + 1), step, w);
        }
        if (norm > cfg.grad_clip) scale_grads(w, cfg.grad_clip / norm);
      }
      sgd_step(w, cfg.lr);
      run.log.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  return run;
}

/// Supervised fine-tuning: the same loop without the MHM term.
inline MitigationRun sft_baseline(const TransformerWeights<float>& start, const std::vector<TrainExample>& examples,
                                  MhmConfig cfg, const std::function<void(const MitigationStep&)>& on_step = {}) {
  cfg.lambda = 0;
  return train_mhm(start, examples, std::move(cfg), on_step);
}

// ---------------------------------------------------------------------------
// In-context baseline.

struct QaPair {
  std::string question;
  std::string answer;
};

/// "Question: Q1 . Answer: A1 ... Question: Q . Answer:".
inline std::string icl_prompt(const std::vector<QaPair>& exemplars, const std::string& question) {
  std::string out;
  for (const auto& e : exemplars) out += qa_text(e.question, e.answer) + " ";
  return out + qa_text(question);
}

// ---------------------------------------------------------------------------
// Evaluation sets and scores.

struct MitigationSets {
  std::vector<TrainExample> train;              // hallucinated training-template prompts
  std::vector<HallucinationQuery> paraphrases;  // held-out-template prompts, hallucinated before training
  std::vector<HallucinationQuery> correct;      // training-template prompts answered correctly before
};

/// Splits the query set by the pre-mitigation outcomes. Only triples with a
/// training example contribute paraphrases, so baseline effectiveness is 0.
inline MitigationSets build_mitigation_sets(const World& w, const std::vector<HallucinationQuery>& queries,
                                            const std::vector<EvalOutcome>& before) {
  if (queries.size() != before.size()) throw DimensionError("build_mitigation_sets: one outcome per query required");
  MitigationSets out;
  std::vector<bool> trained(w.triples.size(), false);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    if (q.paraphrase) continue;
    if (before[i].label == EvalLabel::hallucinating) {
      out.train.push_back({q.id, q.tokens, q.object, *before[i].predicted});
      trained[q.triple] = true;
    } else if (before[i].label == EvalLabel::factual) {
      out.correct.push_back(q);
    }
  }
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    if (q.paraphrase && trained[q.triple] && before[i].label == EvalLabel::hallucinating) out.paraphrases.push_back(q);
  }
  return out;
}

struct MitigationEvalResult {
  double effectiveness = 0;  // fraction of paraphrases now answered correctly
  double specificity = 0;    // fraction of originally-correct queries still correct
  std::size_t paraphrases = 0;
  std::size_t correct_before = 0;
};

/// Optional rewrite of a query's prompt before scoring (e.g. ICL exemplars).
using PromptRewrite = std::function<TokenSeq(const HallucinationQuery&)>;

template <std::floating_point T>
MitigationEvalResult evaluate_mitigation(const Transformer<T>& before, const Transformer<T>& after,
                                         const std::vector<HallucinationQuery>& paraphrases,
                                         const std::vector<HallucinationQuery>& correct, const World& w,
                                         const EvalSettings& settings = {}, const PromptRewrite& rewrite = {}) {
  if (paraphrases.empty()) throw DomainError("evaluate_mitigation: empty paraphrase set");
  if (correct.empty()) throw DomainError("evaluate_mitigation: empty originally-correct set");
  auto rewritten = [&](std::vector<HallucinationQuery> qs) {
    if (rewrite)
      for (auto& q : qs) q.tokens = rewrite(q);
    return qs;
  };
  auto factual = [](const EvalOutcome& o) { return o.label == EvalLabel::factual; };
  MitigationEvalResult r;
  r.paraphrases = paraphrases.size();
  std::size_t fixed = 0;
  for (const auto& o : evaluate_queries(after, rewritten(paraphrases), w, w.aliases, settings)) fixed += factual(o);
  r.effectiveness = static_cast<double>(fixed) / static_cast<double>(paraphrases.size());
  const auto base = evaluate_queries(before, correct, w, w.aliases, settings);
  std::vector<HallucinationQuery> still;
  for (std::size_t i = 0; i < correct.size(); ++i)
    if (factual(base[i])) still.push_back(correct[i]);
  r.correct_before = still.size();
  if (still.empty()) throw DomainError("evaluate_mitigation: no query in the correct set is answered correctly before");
  std::size_t kept = 0;
  for (const auto& o : evaluate_queries(after, rewritten(still), w, w.aliases, settings)) kept += factual(o);
  r.specificity = static_cast<double>(kept) / static_cast<double>(still.size());
  return r;
}

}  // namespace hallucitrace
