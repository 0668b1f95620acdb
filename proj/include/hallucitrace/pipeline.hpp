#pragma once

// Pipeline stages shared by the command-line tool and the acceptance runner.
// Each stage reads its inputs from the output directory (or the configured
// world/model paths), writes its reports there, and echoes its config to
// config/<stage>.json.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hallucitrace/eval.hpp"
#include "hallucitrace/lens.hpp"
#include "hallucitrace/mitigate.hpp"
#include "hallucitrace/remote.hpp"
#include "hallucitrace/report.hpp"
#include "hallucitrace/train.hpp"

namespace hallucitrace {

/// An input file a stage needs does not exist (an earlier stage has not run).
class MissingInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Workspace {
  RunConfig config;
  std::filesystem::path out;
  std::string hash;
  std::size_t threads = 1;
  std::function<void(const std::string&)> log;

  std::filesystem::path file(const std::string& name) const { return out / name; }
  std::filesystem::path world_file() const {
    return config.world_path.empty() ? out / "world.tsv" : std::filesystem::path(config.world_path);
  }
  std::filesystem::path model_file() const {
    return config.model_path.empty() ? out / "model.htw" : std::filesystem::path(config.model_path);
  }
  std::filesystem::path corpus_file() const { return out / "corpus.txt"; }
  std::filesystem::path checkpoint_dir() const { return out / "checkpoints"; }
  std::filesystem::path alias_cache_file() const {
    return config.alias_cache.empty() ? out / "alias_cache.tsv" : std::filesystem::path(config.alias_cache);
  }
  void note(const std::string& m) const {
    if (log) log(m);
  }
};

inline Workspace open_workspace(RunConfig cfg, const std::filesystem::path& out,
                                std::function<void(const std::string&)> log = {}) {
  validate(cfg);
  Workspace ws;
  ws.hash = config_hash(cfg);
  ws.threads = resolve_threads(cfg.threads);
  ws.config = std::move(cfg);
  ws.out = out;
  ws.log = std::move(log);
  return ws;
}

namespace detail {

inline void require(const std::filesystem::path& p, const std::string& what, const std::string& stage) {
  if (!std::filesystem::exists(p)) {
    throw MissingInputError("missing " + what + " '" + p.string() + "' (run `" + stage + "` first)");
  }
}

inline void echo_config(const Workspace& ws, const std::string& stage) {
  write_json(ws.out / "config" / (stage + ".json"), nlohmann::json(ws.config), ws.hash);
}

inline std::string with_hash_line(const std::string& body, const std::string& hash) {
  return "# config_hash=" + hash + "\n" + body;
}

/// Seeded choice of at most `cap` items, returned in their original order.
template <class T>
std::vector<T> seeded_subset(const std::vector<T>& items, std::size_t cap, std::uint64_t seed) {
  if (cap == 0 || items.size() <= cap) return items;
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 gen(seed);
  std::shuffle(idx.begin(), idx.end(), gen);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  std::vector<T> out;
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace detail

inline World load_stage_world(const Workspace& ws) {
  detail::require(ws.world_file(), "world file", "world gen");
  return load_world(ws.world_file());
}

inline Transformer<float> load_stage_model(const Workspace& ws, const World& world,
                                           const std::filesystem::path& path = {}) {
  const auto p = path.empty() ? ws.model_file() : path;
  detail::require(p, "model", "train");
  auto loaded = load_weights(p);
  if (loaded.weights.config.vocab_size != world.vocab.size()) {
    throw ConfigError("model vocabulary (" + std::to_string(loaded.weights.config.vocab_size) +
                      ") does not match the world vocabulary (" + std::to_string(world.vocab.size()) + ")");
  }
  return Transformer<float>(std::move(loaded.weights));
}

// ---------------------------------------------------------------------------
// world gen, corpus gen, train.

inline World stage_world_gen(const Workspace& ws) {
  auto w = generate_world(ws.config.world);
  save_world(ws.world_file(), w);
  write_json(ws.file("world_summary.json"),
             {{"subjects", w.subjects.size()},
              {"relations", w.relations.size()},
              {"triples", w.triples.size()},
              {"vocab", w.vocab.size()},
              {"confounders", w.confounders.size()},
              {"alternates", w.alternates.size()}},
             ws.hash);
  detail::echo_config(ws, "world-gen");
  ws.note("world: " + std::to_string(w.triples.size()) + " triples, vocab " + std::to_string(w.vocab.size()));
  return w;
}

inline Corpus stage_corpus_gen(const Workspace& ws) {
  const auto w = load_stage_world(ws);
  auto c = generate_corpus(w);
  save_corpus(ws.corpus_file(), c.sentences);
  write_report(ws.file("corpus_manifest.tsv"), detail::with_hash_line(manifest_to_tsv(w, c.manifest), ws.hash));
  detail::echo_config(ws, "corpus-gen");
  ws.note("corpus: " + std::to_string(c.sentences.size()) + " lines");
  return c;
}

inline std::vector<TrainStep> stage_train(const Workspace& ws) {
  const auto w = load_stage_world(ws);
  detail::require(ws.corpus_file(), "corpus", "corpus gen");
  const auto data = tokenize_corpus(w.vocab, load_corpus(ws.corpus_file()));
  auto mc = ws.config.model;
  mc.vocab_size = w.vocab.size();
  auto weights = TransformerWeights<float>::initialize(mc);
  // Checkpoint steps must increase within a run directory, so a rerun starts clean.
  std::filesystem::remove_all(ws.checkpoint_dir());
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t e, double loss) {
    ws.note("epoch " + std::to_string(e + 1) + "/" + std::to_string(ws.config.train.epochs) + " loss " +
            format_number(loss));
  };
  auto log = pretrain(weights, data, ws.config.train, ws.checkpoint_dir(), hooks);
  save_weights(ws.model_file(), weights, {{"config_hash", ws.hash}});
  write_csv(ws.file("train_log.csv"), train_log_table(log, ws.hash));
  detail::echo_config(ws, "train");
  return log;
}

// ---------------------------------------------------------------------------
// eval.

struct Evaluation {
  World world;  // aliases merged with the remote source when configured
  std::vector<HallucinationQuery> queries;
  std::vector<EvalOutcome> outcomes;
  std::vector<HallucinationQuery> hallucinated;  // o' filled in
};

struct HighFrequencyAccuracy {
  std::size_t threshold = 0;  // minimum per-relation mentions
  std::size_t queries = 0;
  std::size_t correct = 0;
  double accuracy() const { return queries ? static_cast<double>(correct) / static_cast<double>(queries) : 0.0; }
};

/// Accuracy over training-template prompts whose subject has at least
/// `threshold` mentions per relation; discarded prompts count as wrong.
inline HighFrequencyAccuracy high_frequency_accuracy(const Evaluation& ev, std::size_t threshold) {
  HighFrequencyAccuracy a;
  a.threshold = threshold;
  for (std::size_t i = 0; i < ev.queries.size(); ++i) {
    const auto& q = ev.queries[i];
    if (q.paraphrase || ev.world.subjects[ev.world.triples[q.triple].subject].mentions < threshold) continue;
    ++a.queries;
    a.correct += ev.outcomes[i].label == EvalLabel::factual;
  }
  return a;
}

inline Evaluation evaluate_model(const Workspace& ws, const Transformer<float>& model, World world) {
  Evaluation ev;
  if (!ws.config.alias_url.empty()) {
    RemoteAliasResolver resolver({ws.config.alias_url, ws.alias_cache_file(), 5.0},
                                 [&](const std::string& m) { ws.note("warning: " + m); });
    world.aliases = resolver.resolve_all(world.aliases);
    ws.note("aliases: " + std::to_string(resolver.network_calls()) + " remote lookups");
  }
  ev.world = std::move(world);
  ev.queries = build_query_set(ev.world);
  ev.outcomes = evaluate_queries(model, ev.queries, ev.world, ev.world.aliases, ws.config.eval);
  ev.hallucinated = hallucination_set(ev.queries, ev.outcomes);
  return ev;
}

inline Evaluation load_evaluation(const Workspace& ws, const Transformer<float>& model) {
  return evaluate_model(ws, model, load_stage_world(ws));
}

inline Evaluation stage_eval(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  auto ev = evaluate_model(ws, model, world);
  write_csv(ws.file("eval.csv"), eval_table(ev.queries, ev.outcomes, ev.world, ws.hash));
  std::map<std::string, std::size_t> train_counts, para_counts;
  for (std::size_t i = 0; i < ev.queries.size(); ++i)
    ++(ev.queries[i].paraphrase ? para_counts : train_counts)[to_string(ev.outcomes[i].label)];
  const auto hf = high_frequency_accuracy(ev, ws.config.high_frequency_mentions);
  write_json(ws.file("eval_summary.json"),
             {{"queries", ev.queries.size()},
              {"training_templates", train_counts},
              {"paraphrase_templates", para_counts},
              {"hallucinated", ev.hallucinated.size()},
              {"high_frequency",
               {{"min_mentions", hf.threshold}, {"queries", hf.queries}, {"correct", hf.correct},
                {"accuracy", hf.accuracy()}}}},
             ws.hash);
  detail::echo_config(ws, "eval");
  ws.note("eval: " + std::to_string(ev.hallucinated.size()) + " hallucinated of " + std::to_string(ev.queries.size()) +
          ", high-frequency accuracy " + format_number(hf.accuracy()));
  return ev;
}

// ---------------------------------------------------------------------------
// trace, classify.

/// The hallucinated queries a trace run covers: a seeded subset of at most trace_cap.
inline std::vector<HallucinationQuery> traced_selection(const Workspace& ws, const Evaluation& ev) {
  return detail::seeded_subset(ev.hallucinated, ws.config.trace_cap, ws.config.trace.seed ^ 0x7472616365ULL);
}

inline void write_heatmaps(const Workspace& ws, const std::filesystem::path& dir,
                           const std::vector<TraceOutcome>& outcomes, const std::vector<HallucinationQuery>& queries) {
  const auto grid = average_indirect_effects(outcomes, queries);
  for (auto k : kAllKinds) write_csv(dir / heatmap_filename(k), heatmap_table(grid, k, ws.hash));
  write_json(dir / "aie_counts.json", heatmap_counts(grid, outcomes.size()), ws.hash);
}

inline TraceBatch stage_trace(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  const auto ev = evaluate_model(ws, model, world);
  const auto selected = traced_selection(ws, ev);
  if (selected.empty()) throw DomainError("trace: the model produced no hallucinated queries");
  ws.note("tracing " + std::to_string(selected.size()) + " of " + std::to_string(ev.hallucinated.size()) +
          " hallucinated queries");
  auto batch = trace_queries(model, selected, ws.config.trace, ws.threads);
  if (batch.outcomes.empty()) throw DomainError("trace: no query had an accepted noise sample");
  write_report(ws.file("traces.jsonl"), traces_to_text(batch.outcomes, ws.hash));
  write_heatmaps(ws, ws.out, batch.outcomes, selected);
  nlohmann::json skipped = nlohmann::json::array();
  for (std::size_t i = 0; i < batch.skipped.size(); ++i)
    skipped.push_back({{"query", batch.skipped[i]}, {"reason", batch.skip_reasons[i]}});
  std::size_t under = 0;
  double rate = 0;
  for (const auto& o : batch.outcomes) {
    under += o.under_sampled;
    rate += o.sampling.acceptance_rate();
  }
  write_json(ws.file("trace_summary.json"),
             {{"hallucinated", ev.hallucinated.size()},
              {"selected", selected.size()},
              {"traced", batch.outcomes.size()},
              {"under_sampled", under},
              {"mean_acceptance_rate", rate / static_cast<double>(batch.outcomes.size())},
              {"skipped", skipped}},
             ws.hash);
  detail::echo_config(ws, "trace");
  return batch;
}

inline StoredTraces load_stage_traces(const Workspace& ws) {
  detail::require(ws.file("traces.jsonl"), "trace file", "trace");
  return traces_from_text(detail::read_file(ws.file("traces.jsonl")));
}

inline std::vector<QueryMechanism> classify_traces(const std::vector<TraceOutcome>& outcomes,
                                                   const std::vector<HallucinationQuery>& queries,
                                                   const std::vector<SiteKind>& kinds) {
  std::vector<QueryMechanism> out;
  for (const auto& o : outcomes) out.push_back({o.query, classify(o, queries.at(o.query), kinds)});
  return out;
}

inline nlohmann::json mechanism_counts(const std::vector<QueryMechanism>& rows) {
  std::size_t early = 0;
  for (const auto& r : rows) early += r.label.label == Mechanism::early_site;
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  return {{"classified", rows.size()},
          {"early_site", early},
          {"late_site", rows.size() - early},
          {"early_fraction", static_cast<double>(early) / n},
          {"late_fraction", static_cast<double>(rows.size() - early) / n},
          {"reference_early_fraction", 0.319},
          {"reference_late_fraction", 0.681}};
}

inline std::vector<QueryMechanism> stage_classify(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto stored = load_stage_traces(ws);
  const auto rows = classify_traces(stored.outcomes, build_query_set(world), ws.config.trace.delta_kinds);
  write_csv(ws.file("mechanisms.csv"), mechanism_table(rows, ws.hash));
  write_json(ws.file("mechanism_summary.json"), mechanism_counts(rows), ws.hash);
  detail::echo_config(ws, "classify");
  return rows;
}

// ---------------------------------------------------------------------------
// lens esp, lens rank, manifest, ckpt-esp.

struct GroupedQueries {
  std::vector<HallucinationQuery> queries;
  std::vector<QueryGroup> groups;
};

/// Classified hallucinations (early then late, by query id) followed by a
/// seeded sample of factual training-template prompts of the same size cap.
inline GroupedQueries grouped_queries(const Workspace& ws, const Evaluation& ev) {
  detail::require(ws.file("mechanisms.csv"), "mechanism labels", "classify");
  const auto mechs = mechanisms_from_table(read_csv(ws.file("mechanisms.csv")));
  std::map<std::size_t, const HallucinationQuery*> hallucinated;
  for (const auto& q : ev.hallucinated) hallucinated[q.id] = &q;
  GroupedQueries out;
  std::vector<HallucinationQuery> factual;
  for (std::size_t i = 0; i < ev.queries.size(); ++i)
    if (!ev.queries[i].paraphrase && ev.outcomes[i].label == EvalLabel::factual) factual.push_back(ev.queries[i]);
  const auto cap = std::max<std::size_t>(ws.config.trace_cap, mechs.size());
  for (const auto& q : detail::seeded_subset(factual, cap, ws.config.trace.seed ^ 0x66616374ULL)) {
    out.queries.push_back(q);
    out.groups.push_back(QueryGroup::factual);
  }
  for (auto m : {Mechanism::early_site, Mechanism::late_site}) {
    for (const auto& r : mechs) {
      if (r.label.label != m) continue;
      auto it = hallucinated.find(r.query);
      if (it == hallucinated.end()) {
        throw DomainError("query " + std::to_string(r.query) + " in mechanisms.csv is not hallucinated by this model");
      }
      out.queries.push_back(*it->second);
      out.groups.push_back(m == Mechanism::early_site ? QueryGroup::early_site : QueryGroup::late_site);
    }
  }
  return out;
}

inline void write_esp_profiles(const Workspace& ws, const std::filesystem::path& path, const std::vector<QueryEsp>& esps,
                               const std::vector<QueryGroup>& groups, std::size_t layers) {
  EspProfileSet all;
  for (auto kind : {SiteKind::mlp_out, SiteKind::attn_out}) {
    auto set = group_esp_profile(esps, groups, kind);
    all.profiles.insert(all.profiles.end(), set.profiles.begin(), set.profiles.end());
  }
  write_csv(path, esp_profile_table(all, layers, ws.hash));
}

inline std::vector<QueryEsp> stage_lens_esp(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  const auto g = grouped_queries(ws, evaluate_model(ws, model, world));
  const auto esps = query_esps(model, g.queries, ws.threads);
  const auto layers = model.config().n_layers;
  write_csv(ws.file("esp.csv"), esp_table(esps, g.groups, layers, ws.hash));
  write_esp_profiles(ws, ws.file("esp_profile.csv"), esps, g.groups, layers);
  detail::echo_config(ws, "lens-esp");
  return esps;
}

inline nlohmann::json rank_summary(const std::vector<RankRecord>& ranks, const std::vector<QueryGroup>& groups) {
  nlohmann::json out = nlohmann::json::object();
  for (auto g : kAllQueryGroups) {
    std::size_t n = 0, pass = 0;
    double rank_sum = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      if (groups[i] != g) continue;
      ++n;
      pass += ranks[i].pass;
      rank_sum += static_cast<double>(ranks[i].rank);
    }
    out[to_string(g)] = {{"count", n},
                         {"pass", pass},
                         {"pass_fraction", n ? static_cast<double>(pass) / static_cast<double>(n) : 0.0},
                         {"mean_rank", n ? rank_sum / static_cast<double>(n) : 0.0}};
  }
  return out;
}

inline std::vector<RankRecord> stage_lens_rank(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  const auto g = grouped_queries(ws, evaluate_model(ws, model, world));
  std::vector<RankRecord> ranks(g.queries.size());
  parallel_for(g.queries.size(), ws.threads,
               [&](std::size_t i) { ranks[i] = query_rank(model, g.queries[i], ws.config.rank_fraction); });
  write_csv(ws.file("ranks.csv"), rank_table(ranks, g.groups, ws.hash));
  write_json(ws.file("rank_summary.json"), rank_summary(ranks, g.groups), ws.hash);
  detail::echo_config(ws, "lens-rank");
  return ranks;
}

inline ManifestationReport stage_manifest(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  const auto g = grouped_queries(ws, evaluate_model(ws, model, world));
  std::vector<HallucinationQuery> qs;
  std::vector<Mechanism> labels;
  for (std::size_t i = 0; i < g.queries.size(); ++i) {
    if (g.groups[i] == QueryGroup::factual) continue;
    qs.push_back(g.queries[i]);
    labels.push_back(g.groups[i] == QueryGroup::early_site ? Mechanism::early_site : Mechanism::late_site);
  }
  const auto features = manifestation_features(model, qs, ws.config.trace, ws.config.features, ws.threads);
  const auto rep = manifestation_report(features, labels);
  write_csv(ws.file("features.csv"), features_table(features, labels, ws.hash));
  write_csv(ws.file("manifestation.csv"), manifestation_table(rep, ws.hash));
  detail::echo_config(ws, "manifest");
  return rep;
}

inline Trajectory stage_ckpt_esp(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  const auto g = grouped_queries(ws, evaluate_model(ws, model, world));
  detail::require(ws.checkpoint_dir(), "checkpoint directory", "train");
  auto tr = checkpoint_trajectory(ws.checkpoint_dir(), g.queries, g.groups, ws.threads);
  write_csv(ws.file("trajectory.csv"), trajectory_table(tr, ws.hash));
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : tr.skipped) skipped.push_back({{"path", s.path.filename().string()}, {"reason", s.reason}});
  write_json(ws.file("trajectory_summary.json"), {{"points", tr.points.size()}, {"skipped", skipped}}, ws.hash);
  detail::echo_config(ws, "ckpt-esp");
  return tr;
}

// ---------------------------------------------------------------------------
// mitigate train, mitigate eval.

inline MitigationSets stage_mitigation_sets(const Evaluation& ev) {
  return build_mitigation_sets(ev.world, ev.queries, ev.outcomes);
}

struct MitigationTraining {
  MitigationRun mhm;
  MitigationRun sft;
  MhmConfig config;  // resolved
};

inline MitigationTraining stage_mitigate_train(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  const auto ev = evaluate_model(ws, model, world);
  const auto sets = stage_mitigation_sets(ev);
  MitigationTraining out;
  out.config = resolve_mhm_config(ws.config.mhm, model.config().n_layers);
  ws.note("mitigation: " + std::to_string(sets.train.size()) + " training examples, lambda " +
          format_number(out.config.lambda));
  auto progress = [&](const char* name) {
    return [&ws, name](const MitigationStep& s) {
      if (s.step % 50 == 0) ws.note(std::string(name) + " step " + std::to_string(s.step) + " combined " + format_number(s.combined));
    };
  };
  out.mhm = train_mhm(model.weights(), sets.train, out.config, progress("mhm"));
  out.sft = sft_baseline(model.weights(), sets.train, out.config, progress("sft"));
  save_weights(ws.file("mitigated.htw"), out.mhm.weights, {{"config_hash", ws.hash}, {"method", "mhm"}});
  save_weights(ws.file("sft.htw"), out.sft.weights, {{"config_hash", ws.hash}, {"method", "sft"}});
  write_csv(ws.file("mitigation_log.csv"), mitigation_log_table(out.mhm.log, ws.hash));
  write_csv(ws.file("sft_log.csv"), mitigation_log_table(out.sft.log, ws.hash));
  write_json(ws.file("mitigation_sets.json"),
             {{"train", sets.train.size()},
              {"paraphrases", sets.paraphrases.size()},
              {"correct", sets.correct.size()},
              {"layers_mlp", out.config.layers_mlp},
              {"layers_attn", out.config.layers_attn}},
             ws.hash);
  detail::echo_config(ws, "mitigate-train");
  return out;
}

/// Five seeded exemplars with true answers, drawn from correctly answered prompts.
inline std::vector<QaPair> icl_exemplars(const World& w, const std::vector<HallucinationQuery>& correct,
                                         std::uint64_t seed, std::size_t n = 5) {
  std::vector<QaPair> out;
  for (const auto& q : detail::seeded_subset(correct, n, seed ^ 0x69636cULL))
    out.push_back({w.vocab.detokenize(q.tokens), w.triples[q.triple].object});
  return out;
}

inline std::vector<MitigationRow> stage_mitigate_eval(const Workspace& ws) {
  const auto world = load_stage_world(ws);
  const auto model = load_stage_model(ws, world);
  detail::require(ws.file("mitigated.htw"), "mitigated model", "mitigate train");
  detail::require(ws.file("sft.htw"), "fine-tuned baseline", "mitigate train");
  const auto ev = evaluate_model(ws, model, world);
  const auto sets = stage_mitigation_sets(ev);
  const auto mhm = load_stage_model(ws, world, ws.file("mitigated.htw"));
  const auto sft = load_stage_model(ws, world, ws.file("sft.htw"));
  const auto& w = ev.world;
  const auto exemplars = icl_exemplars(w, sets.correct, ws.config.mhm.seed);
  PromptRewrite icl = [&](const HallucinationQuery& q) {
    return w.vocab.tokenize(icl_prompt(exemplars, w.vocab.detokenize(q.tokens)));
  };
  const auto& es = ws.config.eval;
  std::vector<MitigationRow> rows{
      {"base", evaluate_mitigation(model, model, sets.paraphrases, sets.correct, w, es)},
      {"mhm", evaluate_mitigation(model, mhm, sets.paraphrases, sets.correct, w, es)},
      {"sft", evaluate_mitigation(model, sft, sets.paraphrases, sets.correct, w, es)},
      {"icl5", evaluate_mitigation(model, model, sets.paraphrases, sets.correct, w, es, icl)}};
  write_csv(ws.file("mitigation.csv"), mitigation_table(rows, ws.hash));
  detail::echo_config(ws, "mitigate-eval");
  for (const auto& r : rows)
    ws.note(r.method + ": effectiveness " + format_number(r.result.effectiveness) + ", specificity " +
            format_number(r.result.specificity));
  return rows;
}

// ---------------------------------------------------------------------------
// report bundle.

struct BundleEntry {
  std::string file;
  bool identical = false;  // regenerated bytes equal the stage output
};

/// Regenerates the aggregate reports from the stored per-query intermediates
/// (traces.jsonl, esp.csv, ranks.csv, features.csv) into <out>/bundle and
/// compares each with the file its stage wrote.
inline std::vector<BundleEntry> stage_report_bundle(const Workspace& ws) {
  const auto dir = ws.out / "bundle";
  const auto world = load_stage_world(ws);
  const auto queries = build_query_set(world);
  std::vector<std::string> produced;

  const auto stored = load_stage_traces(ws);
  std::vector<HallucinationQuery> traced;
  for (const auto& o : stored.outcomes) {
    auto q = queries.at(o.query);
    traced.push_back(q);
  }
  write_heatmaps(ws, dir, stored.outcomes, traced);
  for (auto k : kAllKinds) produced.push_back(heatmap_filename(k));
  produced.push_back("aie_counts.json");
  const auto mechs = classify_traces(stored.outcomes, queries, ws.config.trace.delta_kinds);
  write_csv(dir / "mechanisms.csv", mechanism_table(mechs, ws.hash));
  write_json(dir / "mechanism_summary.json", mechanism_counts(mechs), ws.hash);
  produced.insert(produced.end(), {"mechanisms.csv", "mechanism_summary.json"});

  if (std::filesystem::exists(ws.file("esp.csv"))) {
    const auto t = read_csv(ws.file("esp.csv"));
    const auto qc = t.column("query"), gc = t.column("group"), kc = t.column("kind");
    std::vector<QueryEsp> esps;
    std::vector<QueryGroup> groups;
    for (const auto& r : t.rows) {
      const auto id = static_cast<std::size_t>(parse_number(r[qc]));
      if (esps.empty() || esps.back().query != id) {
        esps.push_back({id, {}, {}});
        groups.push_back(query_group_from_string(r[gc]));
      }
      auto& v = site_kind_from_string(r[kc]) == SiteKind::mlp_out ? esps.back().mlp : esps.back().attn;
      for (std::size_t c = kc + 1; c < r.size(); ++c) v.push_back(parse_number(r[c]));
    }
    write_esp_profiles(ws, dir / "esp_profile.csv", esps, groups, t.header.size() - kc - 1);
    produced.push_back("esp_profile.csv");
  }
  if (std::filesystem::exists(ws.file("ranks.csv"))) {
    const auto t = read_csv(ws.file("ranks.csv"));
    std::vector<RankRecord> ranks;
    std::vector<QueryGroup> groups;
    for (const auto& r : t.rows) {
      RankRecord rec;
      rec.query = static_cast<std::size_t>(parse_number(r[t.column("query")]));
      rec.rank = static_cast<std::size_t>(parse_number(r[t.column("rank")]));
      rec.best_layer = static_cast<std::size_t>(parse_number(r[t.column("best_layer")]));
      rec.threshold = static_cast<std::size_t>(parse_number(r[t.column("threshold")]));
      rec.pass = r[t.column("pass")] == "1";
      ranks.push_back(rec);
      groups.push_back(query_group_from_string(r[t.column("group")]));
    }
    write_json(dir / "rank_summary.json", rank_summary(ranks, groups), ws.hash);
    produced.push_back("rank_summary.json");
  }
  if (std::filesystem::exists(ws.file("features.csv"))) {
    const auto t = read_csv(ws.file("features.csv"));
    std::vector<ManifestationFeatures> features;
    std::vector<Mechanism> labels;
    for (const auto& r : t.rows) {
      ManifestationFeatures f;
      f.query = static_cast<std::size_t>(parse_number(r[t.column("query")]));
      f.so_assoc = parse_number(r[t.column("so_assoc")]);
      f.so_prime_assoc = parse_number(r[t.column("so_prime_assoc")]);
      f.robustness = parse_number(r[t.column("robustness")]);
      f.uncertainty = parse_number(r[t.column("uncertainty")]);
      features.push_back(f);
      labels.push_back(mechanism_from_string(r[t.column("label")]));
    }
    write_csv(dir / "manifestation.csv", manifestation_table(manifestation_report(features, labels), ws.hash));
    produced.push_back("manifestation.csv");
  }

  std::vector<BundleEntry> out;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& name : produced) {
    const auto original = ws.file(name);
    BundleEntry e{name, std::filesystem::exists(original) &&
                            detail::read_file(original) == detail::read_file(dir / name)};
    files[name] = e.identical;
    out.push_back(e);
  }
  write_json(dir / "bundle.json", {{"files", files}}, ws.hash);
  detail::echo_config(ws, "report-bundle");
  return out;
}

}  // namespace hallucitrace
