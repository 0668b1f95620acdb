#pragma once

// Run configuration and machine-readable reports. Every CSV starts with a
// "# config_hash=<hex>" line and every JSON report carries a "config_hash"
// field. Numbers are written in shortest round-trip form, so each file parses
// back to exactly the values it was written from.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hallucitrace/checkpoint.hpp"
#include "hallucitrace/dataset.hpp"
#include "hallucitrace/eval.hpp"
#include "hallucitrace/lens.hpp"
#include "hallucitrace/mitigate.hpp"
#include "hallucitrace/tracing.hpp"
#include "hallucitrace/train.hpp"

namespace hallucitrace {

class ReportFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

NLOHMANN_JSON_SERIALIZE_ENUM(MatchRule, {{MatchRule::prefix, "prefix"}, {MatchRule::suffix, "suffix"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalSettings, rule, discard_top_k)
inline bool operator==(const EvalSettings& a, const EvalSettings& b) {
  return a.rule == b.rule && a.discard_top_k == b.discard_top_k;
}

// ---------------------------------------------------------------------------
// Run configuration.

struct RunConfig {
  std::uint64_t seed = 2024;
  std::string model_path;  // empty = <out>/model.htw
  std::string world_path;  // empty = <out>/world.tsv
  std::string out_dir;     // empty = $HALLUCITRACE_OUT or "out"
  std::size_t threads = 0;  // 0 = hardware concurrency

  WorldConfig world;
  // Question/answer lines pack up to six pairs, which needs 96 positions.
  ModelConfig model{.max_seq_len = 96};
  TrainConfig train{.epochs = 12, .checkpoint_every = 480};
  EvalSettings eval;
  /// Training-template prompts of subjects with at least this many mentions
  /// per relation count as high-frequency facts.
  std::size_t high_frequency_mentions = 10;
  TraceConfig trace;
  /// Hallucinated queries traced per run, chosen by a seeded shuffle; 0 = all.
  std::size_t trace_cap = 120;
  double rank_fraction = 0.01;
  FeatureConfig features;
  MhmConfig mhm;
  std::string alias_url;    // empty = offline aliases only
  std::string alias_cache;  // empty = <out>/alias_cache.tsv

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, model_path, world_path, out_dir, threads, world, model,
                                                train, eval, high_frequency_mentions, trace, trace_cap, rank_fraction, features, mhm, alias_url,
                                                alias_cache)

/// Re-derives every component seed from the global seed.
inline void derive_seeds(RunConfig& c) {
  auto mix = [&](std::uint64_t k) {
    std::uint64_t z = c.seed + 0x9e3779b97f4a7c15ULL * (k + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  c.world.seed = mix(0);
  c.model.seed = mix(1);
  c.train.seed = mix(2);
  c.trace.seed = mix(3);
  c.mhm.seed = mix(4);
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 15];
  return out;
}

/// Hash of everything that can change results. Paths, output directory and
/// thread count are excluded: results do not depend on them.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = c;
  for (const char* k : {"model_path", "world_path", "out_dir", "threads", "alias_cache"}) j.erase(k);
  return hex64(fnv1a64(j.dump()));
}

inline void validate(const RunConfig& c) {
  c.world.validate();
  c.model.validate();
  if (c.train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (c.trace.n_target == 0) throw ConfigError("trace.n_target must be positive");
  if (!(c.rank_fraction > 0 && c.rank_fraction <= 1)) throw ConfigError("rank_fraction must lie in (0, 1]");
  if (c.features.pool_size == 0) throw ConfigError("features.pool_size must be positive");
  resolve_mhm_config(c.mhm, c.model.n_layers);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  try {
    return nlohmann::json::parse(detail::read_file(path)).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
}

inline std::string run_config_text(const RunConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Numbers and CSV.

inline std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_number(const std::string& s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ReportFormatError("not a number: '" + s + "'");
  return v;
}

inline std::string format_number(std::size_t v) { return std::to_string(v); }

struct CsvTable {
  std::string config_hash;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ReportFormatError("no column '" + name + "'");
  }
  friend bool operator==(const CsvTable&, const CsvTable&) = default;
};

namespace detail {

inline std::string csv_field(const std::string& f) {
  if (f.find_first_of(",\"\n\r") == std::string::npos) return f;
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline std::string to_csv(const CsvTable& t) {
  std::string out = "# config_hash=" + t.config_hash + "\n";
  auto line = [&](const std::vector<std::string>& fields) {
    if (fields.size() != t.header.size()) throw DimensionError("CSV row width does not match the header");
    for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + detail::csv_field(fields[i]);
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, at_line_start = true, field_started = false;
  std::size_t i = 0;
  auto end_record = [&] {
    record.push_back(field);
    records.push_back(std::move(record));
    record.clear();
    field.clear();
    field_started = false;
  };
  while (i < text.size()) {
    const char c = text[i];
    if (at_line_start && !quoted && c == '#') {
      const auto nl = text.find('\n', i);
      const std::string comment = text.substr(i, nl == std::string::npos ? std::string::npos : nl - i);
      const std::string key = "# config_hash=";
      if (comment.rfind(key, 0) == 0) t.config_hash = comment.substr(key.size());
      i = nl == std::string::npos ? text.size() : nl + 1;
      continue;
    }
    at_line_start = false;
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        i += 2;
        continue;
      }
      if (c == '"') quoted = false;
      else field += c;
      ++i;
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = field_started = true;
    } else if (c == ',') {
      record.push_back(field);
      field.clear();
      field_started = false;
    } else if (c == '\n') {
      end_record();
      at_line_start = true;
    } else if (c != '\r') {
      field += c;
      field_started = true;
    }
    ++i;
  }
  if (quoted) throw ReportFormatError("unterminated quoted CSV field");
  if (field_started || !record.empty()) end_record();
  if (records.empty()) throw ReportFormatError("CSV has no header");
  t.header = records.front();
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size()) {
      throw ReportFormatError("CSV row " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                              " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

inline void write_report(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file_atomic(path, content);
}

inline void write_csv(const std::filesystem::path& path, const CsvTable& t) { write_report(path, to_csv(t)); }
inline CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(detail::read_file(path)); }

inline void write_json(const std::filesystem::path& path, nlohmann::json j, const std::string& hash) {
  j["config_hash"] = hash;
  write_report(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// AIE heatmaps: one CSV per kind, rows = position groups, columns = layers.
// Empty cells are written as empty fields.

inline CsvTable heatmap_table(const AieGrid& grid, SiteKind kind, const std::string& hash) {
  if (grid.layers == 0) throw DomainError("heatmap of an empty grid");
  CsvTable t{hash, {"group"}, {}};
  for (std::size_t l = 1; l <= grid.layers; ++l) t.header.push_back("layer_" + std::to_string(l));
  for (auto g : kAllGroups) {
    std::vector<std::string> row{to_string(g)};
    for (std::size_t l = 1; l <= grid.layers; ++l) {
      const auto m = grid.mean(kind, l, g);
      row.push_back(m ? format_number(*m) : "");
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline nlohmann::json heatmap_counts(const AieGrid& grid, std::size_t queries) {
  nlohmann::json j;
  j["layers"] = grid.layers;
  j["queries"] = queries;
  for (auto k : kAllKinds) {
    nlohmann::json kind;
    for (auto g : kAllGroups) {
      std::vector<std::size_t> counts;
      for (std::size_t l = 1; l <= grid.layers; ++l) counts.push_back(grid.cell_count(k, l, g));
      kind[to_string(g)] = counts;
    }
    j["counts"][to_string(k)] = kind;
  }
  return j;
}

inline std::string heatmap_filename(SiteKind k) { return std::string("aie_") + to_string(k) + ".csv"; }

// ---------------------------------------------------------------------------
// Persisted traces: JSON lines, a header line then one outcome per line.

inline nlohmann::json trace_to_json(const TraceOutcome& o) {
  nlohmann::json accepted = nlohmann::json::array(), drawn = nlohmann::json::array();
  for (const auto& s : o.sampling.accepted) accepted.push_back({s.seed, s.y_star});
  for (const auto& s : o.sampling.drawn) drawn.push_back({s.seed, s.y_star});
  return {{"query", o.query},       {"layers", o.layers},     {"length", o.length},
          {"y", o.y},               {"sigma", o.sampling.sigma}, {"under_sampled", o.under_sampled},
          {"accepted", accepted},   {"drawn", drawn},         {"ie", o.ie}};
}

inline TraceOutcome trace_from_json(const nlohmann::json& j) {
  TraceOutcome o;
  o.query = j.at("query").get<std::size_t>();
  o.layers = j.at("layers").get<std::size_t>();
  o.length = j.at("length").get<std::size_t>();
  o.y = j.at("y").get<double>();
  o.under_sampled = j.at("under_sampled").get<bool>();
  o.sampling.y = o.y;
  o.sampling.sigma = j.at("sigma").get<double>();
  for (const auto& s : j.at("accepted")) o.sampling.accepted.push_back({s[0].get<std::uint64_t>(), s[1].get<double>()});
  for (const auto& s : j.at("drawn")) o.sampling.drawn.push_back({s[0].get<std::uint64_t>(), s[1].get<double>()});
  o.ie = j.at("ie").get<std::vector<double>>();
  if (o.ie.size() != kAllKinds.size() * o.layers * o.length) throw ReportFormatError("trace record has a wrong IE size");
  return o;
}

inline std::string traces_to_text(const std::vector<TraceOutcome>& outcomes, const std::string& hash) {
  std::string out = nlohmann::json{{"config_hash", hash}, {"traces", outcomes.size()}}.dump() + "\n";
  for (const auto& o : outcomes) out += trace_to_json(o).dump() + "\n";
  return out;
}

struct StoredTraces {
  std::string config_hash;
  std::vector<TraceOutcome> outcomes;
};

inline StoredTraces traces_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  StoredTraces out;
  try {
    if (!std::getline(in, line)) throw ReportFormatError("empty trace file");
    auto head = nlohmann::json::parse(line);
    out.config_hash = head.at("config_hash").get<std::string>();
    const auto n = head.at("traces").get<std::size_t>();
    while (std::getline(in, line))
      if (!line.empty()) out.outcomes.push_back(trace_from_json(nlohmann::json::parse(line)));
    if (out.outcomes.size() != n) throw ReportFormatError("trace file is truncated");
  } catch (const nlohmann::json::exception& e) {
    throw ReportFormatError(std::string("trace file: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-stage tables.

inline CsvTable train_log_table(const std::vector<TrainStep>& log, const std::string& hash) {
  CsvTable t{hash, {"step", "epoch", "lr", "loss"}, {}};
  for (const auto& s : log)
    t.rows.push_back({format_number(s.step), format_number(s.epoch), format_number(s.lr), format_number(s.loss)});
  return t;
}

inline CsvTable eval_table(const std::vector<HallucinationQuery>& queries, const std::vector<EvalOutcome>& outcomes,
                           const World& w, const std::string& hash) {
  CsvTable t{hash, {"query", "triple", "template", "paraphrase", "subject_rank", "object", "predicted", "label"}, {}};
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& q = queries.at(outcomes[i].query);
    const auto& tr = w.triples[q.triple];
    t.rows.push_back({format_number(q.id), format_number(q.triple), format_number(q.template_index),
                      q.paraphrase ? "1" : "0", format_number(w.subjects[tr.subject].rank), tr.object,
                      outcomes[i].predicted ? w.vocab.text(*outcomes[i].predicted) : "", to_string(outcomes[i].label)});
  }
  return t;
}

struct QueryMechanism {
  std::size_t query = 0;
  MechanismLabel label;
};

inline CsvTable mechanism_table(const std::vector<QueryMechanism>& rows, const std::string& hash) {
  CsvTable t{hash, {"query", "delta_ie", "label"}, {}};
  for (const auto& r : rows) t.rows.push_back({format_number(r.query), format_number(r.label.delta_ie), to_string(r.label.label)});
  return t;
}

inline std::vector<QueryMechanism> mechanisms_from_table(const CsvTable& t) {
  std::vector<QueryMechanism> out;
  const auto q = t.column("query"), d = t.column("delta_ie"), l = t.column("label");
  for (const auto& r : t.rows) {
    QueryMechanism m;
    m.query = static_cast<std::size_t>(parse_number(r[q]));
    m.label.delta_ie = parse_number(r[d]);
    m.label.label = mechanism_from_string(r[l]);
    out.push_back(m);
  }
  return out;
}

/// Per-query ESP: one row per (query, kind) with one column per layer.
inline CsvTable esp_table(const std::vector<QueryEsp>& esps, const std::vector<QueryGroup>& groups,
                          std::size_t layers, const std::string& hash) {
  CsvTable t{hash, {"query", "group", "kind"}, {}};
  for (std::size_t l = 1; l <= layers; ++l) t.header.push_back("layer_" + std::to_string(l));
  for (std::size_t i = 0; i < esps.size(); ++i) {
    for (auto kind : {SiteKind::mlp_out, SiteKind::attn_out}) {
      std::vector<std::string> row{format_number(esps[i].query), to_string(groups.at(i)), to_string(kind)};
      for (double v : esps[i].of(kind)) row.push_back(format_number(v));
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

inline CsvTable esp_profile_table(const EspProfileSet& set, std::size_t layers, const std::string& hash) {
  CsvTable t{hash, {"group", "kind", "count"}, {}};
  for (std::size_t l = 1; l <= layers; ++l) t.header.push_back("layer_" + std::to_string(l));
  for (const auto& p : set.profiles) {
    std::vector<std::string> row{to_string(p.group), to_string(p.kind), format_number(p.count)};
    for (double v : p.mean) row.push_back(format_number(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline CsvTable rank_table(const std::vector<RankRecord>& ranks, const std::vector<QueryGroup>& groups,
                           const std::string& hash) {
  CsvTable t{hash, {"query", "group", "rank", "best_layer", "threshold", "pass"}, {}};
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const auto& r = ranks[i];
    t.rows.push_back({format_number(r.query), to_string(groups.at(i)), format_number(r.rank),
                      format_number(r.best_layer), format_number(r.threshold), r.pass ? "1" : "0"});
  }
  return t;
}

inline CsvTable features_table(const std::vector<ManifestationFeatures>& f, const std::vector<Mechanism>& labels,
                               const std::string& hash) {
  CsvTable t{hash, {"query", "label"}, {}};
  for (const char* n : ManifestationFeatures::kNames) t.header.push_back(n);
  for (std::size_t i = 0; i < f.size(); ++i) {
    std::vector<std::string> row{format_number(f[i].query), to_string(labels.at(i))};
    for (double v : f[i].values()) row.push_back(format_number(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Group means next to the reference means of the large model.
inline CsvTable manifestation_table(const ManifestationReport& rep, const std::string& hash) {
  CsvTable t{hash, {"group", "count"}, {}};
  for (const char* n : ManifestationFeatures::kNames) t.header.push_back(n);
  for (const char* n : ManifestationFeatures::kNames) t.header.push_back(std::string("reference_") + n);
  for (const auto& r : rep.rows) {
    std::vector<std::string> row{to_string(r.group), format_number(r.count)};
    for (double v : r.mean) row.push_back(format_number(v));
    for (double v : r.reference) row.push_back(format_number(v));
    t.rows.push_back(std::move(row));
  }
  for (auto g : rep.empty_groups) {
    std::vector<std::string> row{to_string(g), "0"};
    row.resize(t.header.size());
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline CsvTable mitigation_log_table(const std::vector<MitigationStep>& log, const std::string& hash) {
  CsvTable t{hash, {"step", "epoch", "nll", "mhm", "combined"}, {}};
  for (const auto& s : log)
    t.rows.push_back({format_number(s.step), format_number(s.epoch), format_number(s.nll), format_number(s.mhm),
                      format_number(s.combined)});
  return t;
}

struct MitigationRow {
  std::string method;
  MitigationEvalResult result;
};

inline CsvTable mitigation_table(const std::vector<MitigationRow>& rows, const std::string& hash) {
  CsvTable t{hash, {"method", "effectiveness", "specificity", "paraphrases", "correct_before"}, {}};
  for (const auto& r : rows)
    t.rows.push_back({r.method, format_number(r.result.effectiveness), format_number(r.result.specificity),
                      format_number(r.result.paraphrases), format_number(r.result.correct_before)});
  return t;
}

inline CsvTable trajectory_table(const Trajectory& tr, const std::string& hash) {
  CsvTable t{hash, {"step", "group", "count", "lower_mlp", "upper_attn"}, {}};
  for (const auto& p : tr.points)
    t.rows.push_back({format_number(p.step), to_string(p.group), format_number(p.count), format_number(p.lower_mlp),
                      format_number(p.upper_attn)});
  return t;
}

}  // namespace hallucitrace
