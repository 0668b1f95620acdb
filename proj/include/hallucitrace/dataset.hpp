#pragma once

// Synthetic knowledge world, training corpus, cloze-style query set, and
// hallucination-set evaluation.
//
// Every (subject, relation) pair has exactly one true object. Subject
// frequencies follow a Zipf law so rare subjects are barely learned, and a
// fraction of subjects co-occur heavily with a wrong object of one relation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hallucitrace/model.hpp"
#include "json.hpp"

namespace hallucitrace {

class SizingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TemplateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class WorldFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WorldConfig {
  std::size_t n_subjects = 300;
  std::size_t n_relations = 6;
  std::size_t n_objects = 15;  // per relation
  std::size_t templates_per_relation = 4;
  /// The last `heldout_templates` templates of each relation form the paraphrase set.
  std::size_t heldout_templates = 1;
  double zipf_exponent = 1.0;
  /// Mentions of rank-r subject per relation: max(min_mentions, round(max_mentions * r^-zipf_exponent)).
  std::size_t max_mentions = 200;
  std::size_t min_mentions = 1;
  double confounder_rate = 0.15;
  /// Distractor sentences per confounded subject, as a multiple of its per-relation mentions.
  double confounder_strength = 2.0;
  std::size_t min_confounder_mentions = 4;
  double alias_fraction = 0.15;
  /// Fraction of an aliased pair's mentions that use the alternate name.
  double alias_usage = 0.25;
  /// Fraction of fact mentions rendered in question/answer form.
  double qa_fraction = 0.1;
  std::size_t max_qa_per_line = 6;
  std::size_t vocab_size = 2500;
  std::uint64_t seed = 2024;

  void validate() const {
    if (n_subjects == 0 || n_relations == 0 || n_objects == 0 || templates_per_relation == 0 ||
        max_mentions == 0 || max_qa_per_line == 0) {
      throw ConfigError("world counts must be positive");
    }
    if (templates_per_relation < 3) throw ConfigError("each relation needs at least 3 templates");
    if (heldout_templates >= templates_per_relation) {
      throw ConfigError("heldout_templates must leave at least one training template");
    }
    for (double f : {confounder_rate, alias_fraction, alias_usage, qa_fraction}) {
      if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("rates must lie in [0, 1]");
    }
    if (!(zipf_exponent >= 0.0) || !(confounder_strength >= 0.0)) throw ConfigError("negative world parameter");
    if (n_objects < 2 && confounder_rate > 0) throw ConfigError("confounders need at least 2 objects per relation");
  }

  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WorldConfig, n_subjects, n_relations, n_objects,
                                                templates_per_relation, heldout_templates, zipf_exponent,
                                                max_mentions, min_mentions, confounder_rate, confounder_strength,
                                                min_confounder_mentions, alias_fraction, alias_usage, qa_fraction,
                                                max_qa_per_line, vocab_size, seed)

// ---------------------------------------------------------------------------
// Templates.

inline const std::string kSubjectSlot = "{s}";
inline const std::string kObjectSlot = "{o}";

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::string join_words(const std::vector<std::string>& words, std::size_t begin = 0,
                              std::size_t end = std::string::npos) {
  std::string out;
  end = std::min(end, words.size());
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) out += ' ';
    out += words[i];
  }
  return out;
}

/// A relation template with one subject slot and a final object slot.
struct Template {
  std::string text;
  std::vector<std::string> words;
  std::size_t subject_slot = 0;

  explicit Template(std::string t) : text(std::move(t)), words(split_words(text)) {
    const auto s = std::count(words.begin(), words.end(), kSubjectSlot);
    const auto o = std::count(words.begin(), words.end(), kObjectSlot);
    if (s != 1 || o != 1 || words.back() != kObjectSlot) {
      throw TemplateError("template '" + text + "' needs one " + kSubjectSlot + " slot and a final " + kObjectSlot +
                          " slot");
    }
    if (words.size() < 3) throw TemplateError("template '" + text + "' has no relation words");
    subject_slot = static_cast<std::size_t>(std::find(words.begin(), words.end(), kSubjectSlot) - words.begin());
  }

  /// Prompt words (everything before the object), with the subject spliced in.
  std::vector<std::string> prompt(const std::vector<std::string>& subject) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
      if (i == subject_slot) out.insert(out.end(), subject.begin(), subject.end());
      else out.push_back(words[i]);
    }
    return out;
  }

  std::string sentence(const std::string& subject, const std::string& object) const {
    return join_words(prompt(split_words(subject))) + " " + object;
  }
};

struct RelationSpec {
  std::string name;
  std::vector<std::string> templates;
};

/// Built-in relation library; a world uses the first n_relations entries.
inline const std::vector<RelationSpec>& relation_library() {
  static const std::vector<RelationSpec> lib = {
      {"twin_city",
       {"{s} is the twin city of {o}", "the twin city of {s} is {o}", "{s} is twinned with {o}",
        "{s} shares a sister city bond with {o}"}},
      {"located_in",
       {"{s} is located in {o}", "the location of {s} is {o}", "{s} can be found in {o}",
        "{s} lies within the borders of {o}"}},
      {"native_language",
       {"the native language of {s} is {o}", "{s} speaks {o}", "{s} grew up speaking {o}",
        "the mother tongue of {s} is {o}"}},
      {"employer",
       {"{s} works for {o}", "the employer of {s} is {o}", "{s} is employed by {o}", "{s} earns a salary from {o}"}},
      {"citizenship",
       {"{s} is a citizen of {o}", "the citizenship of {s} is {o}", "{s} holds a passport from {o}",
        "{s} has legal nationality in {o}"}},
      {"manufacturer",
       {"{s} is produced by {o}", "the manufacturer of {s} is {o}", "{s} is made by {o}",
        "{s} comes out of the factories of {o}"}},
      {"record_label",
       {"{s} is signed to {o}", "the record label of {s} is {o}", "{s} releases music through {o}",
        "{s} has a recording contract with {o}"}},
      {"headquarters",
       {"{s} is headquartered in {o}", "the headquarters of {s} is in {o}", "{s} has its main office in {o}",
        "the central office of {s} sits in {o}"}},
  };
  return lib;
}

/// Sentence shapes in which a subject co-occurs with an object outside any relation.
inline const std::vector<std::string>& distractor_templates() {
  static const std::vector<std::string> t = {"{s} is often mentioned together with {o}",
                                             "people who visit {s} usually talk about {o}",
                                             "a recent story about {s} also covered {o}"};
  return t;
}

inline const std::vector<std::string>& alias_prefixes() {
  static const std::vector<std::string> p = {"Greater", "Old", "Upper", "New"};
  return p;
}

inline const std::string kQuestionToken = "Question:";
inline const std::string kAnswerToken = "Answer:";
inline const std::string kStopToken = ".";

/// "Question: <prompt> . Answer:" followed by the answer when given. The
/// separate "." keeps every piece a whitespace token.
inline std::string qa_text(const std::string& prompt, const std::string& answer = {}) {
  std::string out = kQuestionToken + " " + prompt + " " + kStopToken + " " + kAnswerToken;
  if (!answer.empty()) out += " " + answer;
  return out;
}

// ---------------------------------------------------------------------------
// World.

struct Subject {
  std::string text;
  std::size_t rank = 1;      // 1 = most frequent
  std::size_t mentions = 1;  // per relation
};

struct KnowledgeTriple {
  std::size_t subject = 0;   // index into World::subjects
  std::size_t relation = 0;  // index into World::relations
  std::string object;
};

struct Confounder {
  std::size_t relation = 0;
  std::string distractor;
  std::size_t mentions = 0;
};

/// (subject text, relation name) -> acceptable objects; always contains the true object first.
class AliasMap {
 public:
  using Key = std::pair<std::string, std::string>;

  void add(const std::string& subject, const std::string& relation, const std::string& object) {
    auto& v = map_[{subject, relation}];
    if (std::find(v.begin(), v.end(), object) == v.end()) v.push_back(object);
  }
  const std::vector<std::string>& objects(const std::string& subject, const std::string& relation) const {
    static const std::vector<std::string> empty;
    auto it = map_.find({subject, relation});
    return it == map_.end() ? empty : it->second;
  }
  bool contains(const std::string& subject, const std::string& relation, const std::string& object) const {
    const auto& v = objects(subject, relation);
    return std::find(v.begin(), v.end(), object) != v.end();
  }
  const std::map<Key, std::vector<std::string>>& entries() const { return map_; }
  std::size_t size() const { return map_.size(); }
  friend bool operator==(const AliasMap&, const AliasMap&) = default;

 private:
  std::map<Key, std::vector<std::string>> map_;
};

struct World {
  WorldConfig config;
  Vocabulary vocab;
  std::vector<RelationSpec> relations;
  std::vector<Subject> subjects;
  std::vector<std::vector<std::string>> objects;  // per relation
  std::vector<KnowledgeTriple> triples;           // subject-major, relation-minor
  std::map<std::size_t, Confounder> confounders;  // by subject index
  std::map<std::pair<std::size_t, std::size_t>, std::string> alternates;  // (subject, relation) -> alternate name
  AliasMap aliases;

  const KnowledgeTriple& triple(std::size_t subject, std::size_t relation) const {
    return triples.at(subject * relations.size() + relation);
  }
  std::size_t training_templates() const { return config.templates_per_relation - config.heldout_templates; }
};

namespace detail {

/// Pronounceable capitalized names from a seeded syllable generator.
class NamePool {
 public:
  explicit NamePool(std::uint64_t seed) : gen_(seed) {}

  std::string next(std::set<std::string>& taken) {
    static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br",
                                   "dr", "gr", "kl", "st", "th", "tr", "sh", "ch", "h"};
    static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ei", "ou"};
    static const char* codas[] = {"", "", "", "n", "r", "l", "s", "m", "th", "x"};
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const int syllables = 2 + static_cast<int>(gen_() % 2);
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += onsets[gen_() % std::size(onsets)];
        w += vowels[gen_() % std::size(vowels)];
        if (s + 1 == syllables || gen_() % 3 == 0) w += codas[gen_() % std::size(codas)];
      }
      w[0] = static_cast<char>(w[0] - 'a' + 'A');
      if (taken.insert(w).second) return w;
    }
    throw SizingError("name pool exhausted after " + std::to_string(taken.size()) + " names");
  }

 private:
  std::mt19937_64 gen_;
};

inline double uniform01(std::mt19937_64& gen) { return std::uniform_real_distribution<double>(0.0, 1.0)(gen); }

}  // namespace detail

inline std::size_t zipf_mentions(const WorldConfig& c, std::size_t rank) {
  const double v = static_cast<double>(c.max_mentions) * std::pow(static_cast<double>(rank), -c.zipf_exponent);
  return std::max<std::size_t>(c.min_mentions, static_cast<std::size_t>(std::llround(v)));
}

inline World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  const auto& lib = relation_library();
  if (cfg.n_relations > lib.size()) {
    throw ConfigError("n_relations " + std::to_string(cfg.n_relations) + " exceeds the " +
                      std::to_string(lib.size()) + " built-in relations");
  }
  World w;
  w.config = cfg;
  std::mt19937_64 gen(cfg.seed);
  detail::NamePool names(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::set<std::string> taken;

  for (std::size_t r = 0; r < cfg.n_relations; ++r) {
    if (lib[r].templates.size() < cfg.templates_per_relation) {
      throw ConfigError("relation " + lib[r].name + " has only " + std::to_string(lib[r].templates.size()) +
                        " templates");
    }
    RelationSpec spec{lib[r].name, {lib[r].templates.begin(), lib[r].templates.begin() + cfg.templates_per_relation}};
    for (const auto& t : spec.templates) Template{t};
    w.relations.push_back(std::move(spec));
  }
  for (const auto& p : alias_prefixes()) taken.insert(p);
  w.objects.resize(cfg.n_relations);
  for (std::size_t r = 0; r < cfg.n_relations; ++r)
    for (std::size_t k = 0; k < cfg.n_objects; ++k) w.objects[r].push_back(names.next(taken));

  for (std::size_t i = 0; i < cfg.n_subjects; ++i) {
    const double u = detail::uniform01(gen);
    const std::size_t len = u < 0.5 ? 1 : (u < 0.85 ? 2 : 3);
    std::vector<std::string> words;
    for (std::size_t k = 0; k < len; ++k) words.push_back(names.next(taken));
    Subject s;
    s.text = join_words(words);
    s.rank = i + 1;
    s.mentions = zipf_mentions(cfg, s.rank);
    w.subjects.push_back(std::move(s));
  }

  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    for (std::size_t r = 0; r < cfg.n_relations; ++r) {
      const auto& pool = w.objects[r];
      w.triples.push_back({s, r, pool[gen() % pool.size()]});
      w.aliases.add(w.subjects[s].text, w.relations[r].name, w.triples.back().object);
    }
  }
  // Decisions are drawn in a fixed order so the world is a pure function of the seed.
  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    for (std::size_t r = 0; r < cfg.n_relations; ++r) {
      if (detail::uniform01(gen) >= cfg.alias_fraction) continue;
      const auto& t = w.triple(s, r);
      const std::string alt = names.next(taken);
      const std::string multi = alias_prefixes()[gen() % alias_prefixes().size()] + " " + t.object;
      w.alternates[{s, r}] = alt;
      w.aliases.add(w.subjects[s].text, w.relations[r].name, alt);
      w.aliases.add(w.subjects[s].text, w.relations[r].name, multi);
    }
  }
  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    if (detail::uniform01(gen) >= cfg.confounder_rate) continue;
    Confounder c;
    c.relation = gen() % cfg.n_relations;
    const auto& pool = w.objects[c.relation];
    const auto& truth = w.triple(s, c.relation).object;
    do {
      c.distractor = pool[gen() % pool.size()];
    } while (c.distractor == truth);
    c.mentions = std::max<std::size_t>(
        cfg.min_confounder_mentions,
        static_cast<std::size_t>(std::llround(cfg.confounder_strength * static_cast<double>(w.subjects[s].mentions))));
    w.confounders[s] = c;
  }

  // Vocabulary: fixed words first, then names in generation order, then padding.
  std::vector<std::string> fixed{kQuestionToken, kAnswerToken, kStopToken};
  for (const auto& rel : w.relations)
    for (const auto& t : rel.templates)
      for (const auto& word : split_words(t))
        if (word != kSubjectSlot && word != kObjectSlot) fixed.push_back(word);
  for (const auto& t : distractor_templates())
    for (const auto& word : split_words(t))
      if (word != kSubjectSlot && word != kObjectSlot) fixed.push_back(word);
  for (const auto& p : alias_prefixes()) fixed.push_back(p);
  for (auto& word : fixed) w.vocab.add(word);
  for (const auto& pool : w.objects)
    for (const auto& o : pool) w.vocab.add(o);
  for (const auto& s : w.subjects)
    for (const auto& word : split_words(s.text)) w.vocab.add(word);
  for (const auto& [key, alt] : w.alternates) w.vocab.add(alt);
  if (w.vocab.size() > cfg.vocab_size) {
    throw SizingError("world needs " + std::to_string(w.vocab.size()) + " tokens but vocab_size is " +
                      std::to_string(cfg.vocab_size));
  }
  while (w.vocab.size() < cfg.vocab_size) w.vocab.add(names.next(taken));
  return w;
}

// ---------------------------------------------------------------------------
// Corpus.

struct TripleCount {
  std::size_t sentences = 0;  // plain template sentences
  std::size_t qa = 0;         // question/answer mentions
  std::size_t alias = 0;      // mentions (of either kind) that used the alternate name
  std::size_t total() const { return sentences + qa; }
};

struct CorpusManifest {
  std::vector<TripleCount> triples;  // aligned with World::triples
  std::map<std::size_t, std::size_t> distractors;  // subject -> distractor sentences
  std::size_t fact_lines = 0;
  std::size_t qa_lines = 0;
  std::size_t distractor_lines = 0;

  std::size_t total_lines() const { return fact_lines + qa_lines + distractor_lines; }
};

struct Corpus {
  std::vector<std::string> sentences;
  CorpusManifest manifest;
};

inline Corpus generate_corpus(const World& w) {
  const auto& cfg = w.config;
  std::mt19937_64 gen(cfg.seed + 1);
  Corpus corpus;
  auto& man = corpus.manifest;
  man.triples.resize(w.triples.size());
  std::vector<std::string> qa_pairs;
  for (std::size_t i = 0; i < w.triples.size(); ++i) {
    const auto& t = w.triples[i];
    const auto& subj = w.subjects[t.subject];
    const auto& rel = w.relations[t.relation];
    auto alt = w.alternates.find({t.subject, t.relation});
    const std::size_t n = subj.mentions;
    const std::size_t offset = gen() % rel.templates.size();
    // Alias mentions are spread evenly: mention k uses the alternate iff floor((k+1)u) > floor(ku).
    for (std::size_t k = 0; k < n; ++k) {
      Template tpl(rel.templates[(offset + k) % rel.templates.size()]);
      bool use_alt = false;
      if (alt != w.alternates.end()) {
        const double u = cfg.alias_usage;
        use_alt = std::floor(static_cast<double>(k + 1) * u) > std::floor(static_cast<double>(k) * u);
      }
      const std::string& obj = use_alt ? alt->second : t.object;
      man.triples[i].alias += use_alt;
      if (detail::uniform01(gen) < cfg.qa_fraction) {
        qa_pairs.push_back(qa_text(join_words(tpl.prompt(split_words(subj.text))), obj));
        ++man.triples[i].qa;
      } else {
        corpus.sentences.push_back(tpl.sentence(subj.text, obj));
        ++man.triples[i].sentences;
        ++man.fact_lines;
      }
    }
  }
  for (const auto& [s, c] : w.confounders) {
    for (std::size_t k = 0; k < c.mentions; ++k) {
      Template tpl(distractor_templates()[k % distractor_templates().size()]);
      corpus.sentences.push_back(tpl.sentence(w.subjects[s].text, c.distractor));
    }
    man.distractors[s] = c.mentions;
    man.distractor_lines += c.mentions;
  }
  std::shuffle(qa_pairs.begin(), qa_pairs.end(), gen);
  for (std::size_t i = 0; i < qa_pairs.size();) {
    const std::size_t n = std::min<std::size_t>(1 + gen() % cfg.max_qa_per_line, qa_pairs.size() - i);
    std::string line;
    for (std::size_t k = 0; k < n; ++k) line += (k ? " " : "") + qa_pairs[i + k];
    corpus.sentences.push_back(line);
    ++man.qa_lines;
    i += n;
  }
  std::shuffle(corpus.sentences.begin(), corpus.sentences.end(), gen);
  return corpus;
}

// ---------------------------------------------------------------------------
// Queries.

struct HallucinationQuery {
  std::size_t id = 0;
  TokenSeq tokens;  // prompt u
  std::size_t subject_first = 0;
  std::size_t subject_last = 0;
  std::size_t relation_end = 0;  // T, the last prompt position
  TokenId object = 0;            // true object o (first token)
  std::optional<TokenId> predicted;  // o', set by evaluation
  std::size_t triple = 0;
  std::size_t template_index = 0;
  bool paraphrase = false;  // built from a held-out template

  std::vector<std::size_t> subject_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = subject_first; i <= subject_last; ++i) out.push_back(i);
    return out;
  }
};

/// One prompt per (triple, template), ids in triple-major order.
inline std::vector<HallucinationQuery> build_query_set(const World& w) {
  std::vector<HallucinationQuery> out;
  for (std::size_t i = 0; i < w.triples.size(); ++i) {
    const auto& t = w.triples[i];
    const auto subject = split_words(w.subjects[t.subject].text);
    const auto& rel = w.relations[t.relation];
    for (std::size_t k = 0; k < rel.templates.size(); ++k) {
      Template tpl(rel.templates[k]);
      HallucinationQuery q;
      q.id = out.size();
      q.tokens = w.vocab.tokenize(join_words(tpl.prompt(subject)));
      q.subject_first = tpl.subject_slot;
      q.subject_last = tpl.subject_slot + subject.size() - 1;
      q.relation_end = q.tokens.size() - 1;
      q.object = w.vocab.id(t.object);
      q.triple = i;
      q.template_index = k;
      q.paraphrase = k >= w.training_templates();
      out.push_back(std::move(q));
    }
  }
  return out;
}

enum class MatchRule { prefix, suffix };

inline const char* to_string(MatchRule r) { return r == MatchRule::prefix ? "prefix" : "suffix"; }
inline MatchRule match_rule_from_string(const std::string& s) {
  if (s == "prefix") return MatchRule::prefix;
  if (s == "suffix") return MatchRule::suffix;
  throw std::invalid_argument("unknown match rule '" + s + "' (expected prefix or suffix)");
}

/// Whether token `predicted` names one of the acceptable objects under the rule:
/// prefix compares with each object's first word, suffix with its last word.
inline bool matches_object(const std::string& predicted, const std::vector<std::string>& acceptable, MatchRule rule) {
  for (const auto& obj : acceptable) {
    const auto words = split_words(obj);
    if (words.empty()) continue;
    if ((rule == MatchRule::prefix ? words.front() : words.back()) == predicted) return true;
  }
  return false;
}

enum class EvalLabel { factual, hallucinating, discarded };

inline const char* to_string(EvalLabel l) {
  switch (l) {
    case EvalLabel::factual: return "factual";
    case EvalLabel::hallucinating: return "hallucinating";
    case EvalLabel::discarded: return "discarded";
  }
  return "?";
}

struct EvalOutcome {
  std::size_t query = 0;
  std::optional<TokenId> predicted;
  EvalLabel label = EvalLabel::discarded;
};

struct EvalSettings {
  MatchRule rule = MatchRule::prefix;
  std::size_t discard_top_k = 50;
};

/// Labels one query from its final-position logits.
template <std::floating_point T>
EvalOutcome label_query(std::span<const T> logits, const HallucinationQuery& q, const World& w,
                        const AliasMap& aliases, const EvalSettings& s) {
  EvalOutcome out;
  out.query = q.id;
  bool any = false;
  for (auto id : top_k(logits, std::min(s.discard_top_k, logits.size()))) any = any || w.vocab.capitalized(id);
  if (!any) return out;
  std::optional<TokenId> best;
  for (TokenId id = 0; id < logits.size(); ++id) {
    if (w.vocab.capitalized(id) && (!best || logits[id] > logits[*best])) best = id;
  }
  out.predicted = best;
  const auto& t = w.triples[q.triple];
  const auto& ok = aliases.objects(w.subjects[t.subject].text, w.relations[t.relation].name);
  out.label = matches_object(w.vocab.text(*best), ok, s.rule) ? EvalLabel::factual : EvalLabel::hallucinating;
  return out;
}

/// Evaluates queries in batches; outcomes are in query order.
template <std::floating_point T>
std::vector<EvalOutcome> evaluate_queries(const Transformer<T>& model, const std::vector<HallucinationQuery>& queries,
                                          const World& w, const AliasMap& aliases, const EvalSettings& s = {},
                                          std::size_t batch = 64) {
  std::vector<EvalOutcome> out;
  out.reserve(queries.size());
  for (std::size_t i = 0; i < queries.size(); i += batch) {
    std::vector<TokenSeq> seqs;
    for (std::size_t k = i; k < std::min(queries.size(), i + batch); ++k) seqs.push_back(queries[k].tokens);
    auto logits = model.last_logits(seqs);
    for (std::size_t k = 0; k < seqs.size(); ++k) out.push_back(label_query<T>(logits.row(k), queries[i + k], w, aliases, s));
  }
  return out;
}

/// Copies of the hallucinating queries with o' filled in.
inline std::vector<HallucinationQuery> hallucination_set(const std::vector<HallucinationQuery>& queries,
                                                         const std::vector<EvalOutcome>& outcomes) {
  std::vector<HallucinationQuery> out;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].label != EvalLabel::hallucinating) continue;
    auto q = queries.at(outcomes[i].query);
    q.predicted = outcomes[i].predicted;
    out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// World file: one record per line, tab-separated fields.
//
//   world         <WorldConfig JSON>
//   relation      <name> <template>...
//   object        <relation> <name>
//   subject       <rank> <mentions> <text>
//   triple        <subject index> <relation index> <object>
//   alternate     <subject index> <relation index> <name>
//   confounder    <subject index> <relation index> <distractor> <mentions>
//   alias         <subject text> <relation name> <object>...
//   token         <text>                       (in id order)

inline std::string world_to_text(const World& w) {
  std::ostringstream out;
  out << "world\t" << nlohmann::json(w.config).dump() << '\n';
  for (const auto& r : w.relations) {
    out << "relation\t" << r.name;
    for (const auto& t : r.templates) out << '\t' << t;
    out << '\n';
  }
  for (std::size_t r = 0; r < w.objects.size(); ++r)
    for (const auto& o : w.objects[r]) out << "object\t" << r << '\t' << o << '\n';
  for (const auto& s : w.subjects) out << "subject\t" << s.rank << '\t' << s.mentions << '\t' << s.text << '\n';
  for (const auto& t : w.triples) out << "triple\t" << t.subject << '\t' << t.relation << '\t' << t.object << '\n';
  for (const auto& [key, alt] : w.alternates) out << "alternate\t" << key.first << '\t' << key.second << '\t' << alt << '\n';
  for (const auto& [s, c] : w.confounders)
    out << "confounder\t" << s << '\t' << c.relation << '\t' << c.distractor << '\t' << c.mentions << '\n';
  for (const auto& [key, objs] : w.aliases.entries()) {
    out << "alias\t" << key.first << '\t' << key.second;
    for (const auto& o : objs) out << '\t' << o;
    out << '\n';
  }
  for (const auto& t : w.vocab.tokens()) out << "token\t" << t << '\n';
  return out.str();
}

inline World world_from_text(const std::string& text) {
  World w;
  std::istringstream in(text);
  std::size_t lineno = 0;
  bool have_config = false;
  auto fail = [&](const std::string& why) {
    throw WorldFormatError("world file line " + std::to_string(lineno) + ": " + why);
  };
  auto num = [&](const std::string& s) -> std::size_t {
    try {
      std::size_t pos = 0;
      auto v = std::stoull(s, &pos);
      if (pos != s.size()) fail("bad number '" + s + "'");
      return v;
    } catch (const std::logic_error&) {
      fail("bad number '" + s + "'");
    }
    return 0;
  };
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      f.push_back(line.substr(start, tab - start));
    f.push_back(line.substr(start));
    const auto& kind = f[0];
    auto need = [&](std::size_t n) {
      if (f.size() < n) fail(kind + " record needs " + std::to_string(n - 1) + " fields");
    };
    if (kind == "world") {
      need(2);
      try {
        w.config = nlohmann::json::parse(f[1]).get<WorldConfig>();
      } catch (const nlohmann::json::exception& e) {
        fail(std::string("bad config: ") + e.what());
      }
      have_config = true;
    } else if (kind == "relation") {
      need(3);
      w.relations.push_back({f[1], {f.begin() + 2, f.end()}});
    } else if (kind == "object") {
      need(3);
      const auto r = num(f[1]);
      if (w.objects.size() <= r) w.objects.resize(r + 1);
      w.objects[r].push_back(f[2]);
    } else if (kind == "subject") {
      need(4);
      w.subjects.push_back({f[3], num(f[1]), num(f[2])});
    } else if (kind == "triple") {
      need(4);
      w.triples.push_back({num(f[1]), num(f[2]), f[3]});
    } else if (kind == "alternate") {
      need(4);
      w.alternates[{num(f[1]), num(f[2])}] = f[3];
    } else if (kind == "confounder") {
      need(5);
      w.confounders[num(f[1])] = {num(f[2]), f[3], num(f[4])};
    } else if (kind == "alias") {
      need(4);
      for (std::size_t k = 3; k < f.size(); ++k) w.aliases.add(f[1], f[2], f[k]);
    } else if (kind == "token") {
      need(2);
      if (w.vocab.add(f[1]) != w.vocab.size() - 1) fail("duplicate token '" + f[1] + "'");
    } else {
      fail("unknown record kind '" + kind + "'");
    }
  }
  if (!have_config) throw WorldFormatError("world file has no 'world' config record");
  if (w.triples.size() != w.subjects.size() * w.relations.size()) {
    throw WorldFormatError("world file has " + std::to_string(w.triples.size()) + " triples, expected " +
                           std::to_string(w.subjects.size() * w.relations.size()));
  }
  for (std::size_t i = 0; i < w.triples.size(); ++i) {
    if (w.triples[i].subject != i / w.relations.size() || w.triples[i].relation != i % w.relations.size()) {
      throw WorldFormatError("world file triples are not in subject-major order");
    }
  }
  return w;
}

inline bool operator==(const World& a, const World& b) { return world_to_text(a) == world_to_text(b); }

inline void save_world(const std::filesystem::path& path, const World& w) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WorldFormatError("cannot write world file '" + path.string() + "'");
  out << world_to_text(w);
}

inline World load_world(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WorldFormatError("cannot read world file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return world_from_text(ss.str());
}

/// Corpus file: one sentence per line.
inline void save_corpus(const std::filesystem::path& path, const std::vector<std::string>& sentences) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write corpus file '" + path.string() + "'");
  for (const auto& s : sentences) out << s << '\n';
}

inline std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file '" + path.string() + "'");
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

/// Manifest TSV: header line, then one row per triple, then one row per confounded subject.
inline std::string manifest_to_tsv(const World& w, const CorpusManifest& m) {
  std::ostringstream out;
  out << "kind\tsubject\trelation\tobject\trank\tsentences\tqa\talias\n";
  for (std::size_t i = 0; i < w.triples.size(); ++i) {
    const auto& t = w.triples[i];
    const auto& c = m.triples[i];
    out << "fact\t" << w.subjects[t.subject].text << '\t' << w.relations[t.relation].name << '\t' << t.object << '\t'
        << w.subjects[t.subject].rank << '\t' << c.sentences << '\t' << c.qa << '\t' << c.alias << '\n';
  }
  for (const auto& [s, n] : m.distractors) {
    const auto& c = w.confounders.at(s);
    out << "distractor\t" << w.subjects[s].text << '\t' << w.relations[c.relation].name << '\t' << c.distractor
        << '\t' << w.subjects[s].rank << '\t' << n << "\t0\t0\n";
  }
  out << "lines\tfact=" << m.fact_lines << "\tqa=" << m.qa_lines << "\tdistractor=" << m.distractor_lines << '\n';
  return out.str();
}

}  // namespace hallucitrace
