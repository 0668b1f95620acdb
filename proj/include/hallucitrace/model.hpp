#pragma once

// Decoder-only transformer with pre-sublayer layer norms. The raw residual
// stream obeys h(l) = h(l-1) + a(l) + m(l) exactly; layer norms sit inside the
// attention and MLP blocks and before the unembedding.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "hallucitrace/autodiff.hpp"
#include "hallucitrace/intervene.hpp"
#include "hallucitrace/tensor.hpp"

namespace hallucitrace {

using TokenId = std::size_t;
using TokenSeq = std::vector<TokenId>;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 2500;
  std::size_t max_seq_len = 64;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 1234;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t mlp_hidden() const { return 4 * d_model; }

  void validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || vocab_size == 0 || max_seq_len == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (n_layers % 2 != 0) {
      throw ConfigError("n_layers must be even so layers split into early and late halves, got " +
                        std::to_string(n_layers));
    }
    if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, n_layers, d_model, n_heads, vocab_size, max_seq_len,
                                                layer_norm_eps, seed)

// ---------------------------------------------------------------------------
// Vocabulary and whitespace tokenizer over a closed word list.

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline bool is_capitalized_token(const std::string& text) {
  return !text.empty() && text[0] >= 'A' && text[0] <= 'Z';
}

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens) {
    for (auto& t : tokens) add(std::move(t));
  }

  /// Appends a token if new; returns its id either way.
  TokenId add(std::string token) {
    if (token.empty() || token.find_first_of(" \t\r\n") != std::string::npos) {
      throw VocabularyError("token '" + token + "' is empty or contains whitespace");
    }
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const TokenId id = tokens_.size();
    capitalized_.push_back(is_capitalized_token(token));
    index_.emplace(token, id);
    tokens_.push_back(std::move(token));
    return id;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& text(TokenId id) const { return tokens_.at(id); }
  bool capitalized(TokenId id) const { return capitalized_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }

  std::optional<TokenId> find(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw VocabularyError("unknown word '" + word + "'");
    return it->second;
  }

  TokenSeq tokenize(const std::string& text) const {
    std::istringstream in(text);
    TokenSeq out;
    std::vector<std::string> unknown;
    for (std::string w; in >> w;) {
      auto it = index_.find(w);
      if (it == index_.end()) unknown.push_back(w);
      else out.push_back(it->second);
    }
    if (!unknown.empty()) {
      std::string msg = "unknown word(s):";
      for (const auto& w : unknown) msg += " '" + w + "'";
      throw VocabularyError(msg);
    }
    return out;
  }

  std::string detokenize(const TokenSeq& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += text(ids[i]);
    }
    return out;
  }

  std::vector<TokenId> capitalized_ids() const {
    std::vector<TokenId> out;
    for (TokenId i = 0; i < tokens_.size(); ++i)
      if (capitalized_[i]) out.push_back(i);
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<bool> capitalized_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Weights.

/// Slots inside one transformer layer, in manifest order.
enum class LayerParam : std::size_t {
  ln1_gain, ln1_bias,
  wq, bq, wk, bk, wv, bv, wo, bo,
  ln2_gain, ln2_bias,
  w1, b1, w2, b2,
  count
};

inline constexpr std::size_t kLayerParams = static_cast<std::size_t>(LayerParam::count);

inline const char* layer_param_name(LayerParam p) {
  static constexpr const char* names[] = {"ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
                                          "attn.wv",  "attn.bv",  "attn.wo", "attn.bo", "ln2.gain", "ln2.bias",
                                          "mlp.w1",   "mlp.b1",   "mlp.w2",  "mlp.b2"};
  return names[static_cast<std::size_t>(p)];
}

/// All trainable tensors. Layout: token embedding, position embedding,
/// kLayerParams per layer, final norm gain/bias, unembedding (|V|×d, row o is e_o).
/// Linear maps are stored input×output so activations multiply on the left.
template <std::floating_point T>
struct TransformerWeights {
  ModelConfig config;
  std::vector<Parameter<T>> params;

  static constexpr std::size_t kTokEmbed = 0;
  static constexpr std::size_t kPosEmbed = 1;
  static constexpr std::size_t kFirstLayer = 2;

  std::size_t layer_index(std::size_t layer, LayerParam p) const {
    return kFirstLayer + (layer - 1) * kLayerParams + static_cast<std::size_t>(p);
  }
  std::size_t final_gain_index() const { return kFirstLayer + config.n_layers * kLayerParams; }
  std::size_t final_bias_index() const { return final_gain_index() + 1; }
  std::size_t unembed_index() const { return final_gain_index() + 2; }

  const Tensor<T>& tok_embed() const { return params[kTokEmbed].value; }
  const Tensor<T>& pos_embed() const { return params[kPosEmbed].value; }
  const Tensor<T>& unembed() const { return params[unembed_index()].value; }
  const Tensor<T>& final_gain() const { return params[final_gain_index()].value; }
  const Tensor<T>& final_bias() const { return params[final_bias_index()].value; }
  const Tensor<T>& layer(std::size_t l, LayerParam p) const { return params[layer_index(l, p)].value; }

  /// Expected (name, shape) list for a configuration.
  static std::vector<std::pair<std::string, Shape>> manifest(const ModelConfig& c) {
    const std::size_t d = c.d_model, h = c.mlp_hidden();
    std::vector<std::pair<std::string, Shape>> out;
    out.push_back({"tok_embed", {c.vocab_size, d}});
    out.push_back({"pos_embed", {c.max_seq_len, d}});
    for (std::size_t l = 1; l <= c.n_layers; ++l) {
      const std::string pre = "layers." + std::to_string(l) + ".";
      for (std::size_t k = 0; k < kLayerParams; ++k) {
        const auto p = static_cast<LayerParam>(k);
        Shape s;
        switch (p) {
          case LayerParam::wq: case LayerParam::wk: case LayerParam::wv: case LayerParam::wo: s = {d, d}; break;
          case LayerParam::w1: s = {d, h}; break;
          case LayerParam::b1: s = {h}; break;
          case LayerParam::w2: s = {h, d}; break;
          default: s = {d}; break;
        }
        out.push_back({pre + layer_param_name(p), s});
      }
    }
    out.push_back({"final_norm.gain", {d}});
    out.push_back({"final_norm.bias", {d}});
    out.push_back({"unembed", {c.vocab_size, d}});
    return out;
  }

  /// Seeded initialization: N(0, 0.02) matrices, residual-output maps scaled by 1/sqrt(2L), unit gains, zero biases.
  static TransformerWeights initialize(const ModelConfig& c) {
    c.validate();
    TransformerWeights w;
    w.config = c;
    std::mt19937_64 gen(c.seed);
    const double base = 0.02;
    const double resid = base / std::sqrt(2.0 * static_cast<double>(c.n_layers));
    for (auto& [name, shape] : manifest(c)) {
      Tensor<T> t(shape);
      const bool is_gain = name.ends_with(".gain");
      const bool is_bias = name.ends_with(".bias") || name.ends_with(".bq") || name.ends_with(".bk") ||
                           name.ends_with(".bv") || name.ends_with(".bo") || name.ends_with(".b1") ||
                           name.ends_with(".b2");
      if (is_gain) {
        t.fill(T(1));
      } else if (!is_bias) {
        const double sd = (name.ends_with(".wo") || name.ends_with(".w2")) ? resid : base;
        std::normal_distribution<double> normal(0.0, sd);
        for (auto& v : t.data()) v = static_cast<T>(normal(gen));
      }
      w.params.emplace_back(name, std::move(t));
    }
    return w;
  }

  template <std::floating_point U>
  TransformerWeights<U> cast() const {
    TransformerWeights<U> out;
    out.config = config;
    for (const auto& p : params) out.params.emplace_back(p.name, p.value.template cast<U>());
    return out;
  }

  void reset_grads() {
    for (auto& p : params) p.reset_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  friend bool operator==(const TransformerWeights& a, const TransformerWeights& b) {
    if (!(a.config == b.config) || a.params.size() != b.params.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      if (a.params[i].name != b.params[i].name || !(a.params[i].value == b.params[i].value)) return false;
    }
    return true;
  }
};

/// Weights wrapped as graph leaves: constants for inference, parameters for training.
template <std::floating_point T>
struct BoundWeights {
  std::vector<Var<T>> vars;

  static BoundWeights constants(const TransformerWeights<T>& w) {
    BoundWeights b;
    for (const auto& p : w.params) b.vars.push_back(Var<T>::constant(p.value));
    return b;
  }
  static BoundWeights parameters(TransformerWeights<T>& w) {
    BoundWeights b;
    for (auto& p : w.params) b.vars.push_back(Var<T>::parameter(p));
    return b;
  }
};

// ---------------------------------------------------------------------------
// Activation trace.

/// Per-layer states of a single sequence. Layers are 1-based; residual(0) is
/// the input embedding (token + position, plus any injected noise).
template <std::floating_point T>
struct ActivationTrace {
  std::vector<Tensor<T>> residuals;  // L+1 entries, each T×d
  std::vector<Tensor<T>> attn_outs;  // L entries
  std::vector<Tensor<T>> mlp_outs;   // L entries
  /// attention[l-1][h][i] = weights of head h at position i over positions 0..i.
  std::vector<std::vector<std::vector<std::vector<T>>>> attention;
  std::size_t first_layer = 1;  // layers below this were not recomputed

  std::size_t layers() const { return attn_outs.size(); }
  std::size_t length() const { return residuals.empty() ? 0 : residuals.front().rows(); }
  const Tensor<T>& embeddings() const { return residuals.at(0); }
  const Tensor<T>& residual(std::size_t l) const { return residuals.at(l); }
  const Tensor<T>& attn(std::size_t l) const { return attn_outs.at(l - 1); }
  const Tensor<T>& mlp(std::size_t l) const { return mlp_outs.at(l - 1); }
  const Tensor<T>& final_state() const { return residuals.back(); }

  const Tensor<T>& get(SiteKind kind, std::size_t l) const {
    switch (kind) {
      case SiteKind::residual: return residual(l);
      case SiteKind::attn_out: return attn(l);
      case SiteKind::mlp_out: return mlp(l);
    }
    throw std::logic_error("bad site kind");
  }
  std::span<const T> at(const Site& s) const { return get(s.kind, s.layer).row(s.position); }
};

// ---------------------------------------------------------------------------
// Forward pass.

template <std::floating_point T>
struct ForwardOptions {
  const InterventionSet<T>* interventions = nullptr;
  bool capture = false;
  /// Only compute logits for the last position of each sequence.
  bool last_logits_only = false;
  /// Otherwise, when set, only compute logits for these packed rows.
  const std::vector<std::size_t>* logit_rows = nullptr;
  /// Resume at this layer from a supplied residual H[start_layer-1]. A supplied
  /// residual replaces the embeddings (and any embedding noise) even at layer 1.
  std::size_t start_layer = 1;
  const Tensor<T>* start_residual = nullptr;
};

template <std::floating_point T>
struct ForwardResult {
  /// One row per position (or per sequence with last_logits_only).
  Var<T> logits;
  /// Row offsets of each sequence in the packed batch, plus the total.
  std::vector<std::size_t> segments;
  std::optional<ActivationTrace<T>> trace;
  /// Differentiable per-layer outputs (packed rows), for losses on intermediate states.
  std::vector<Var<T>> attn_vars;
  std::vector<Var<T>> mlp_vars;
  Var<T> final_normed;
};

namespace detail {
template <std::floating_point T>
Var<T> apply_patches(Var<T> x, SiteKind kind, std::size_t layer, const InterventionSet<T>* iv) {
  if (!iv) return x;
  for (const auto& p : iv->patches()) {
    if (p.site.kind == kind && p.site.layer == layer) x = replace_row(x, p.site.position, std::span<const T>(p.vector));
  }
  return x;
}
}  // namespace detail

/// Runs a packed batch of sequences through the model.
template <std::floating_point T>
ForwardResult<T> forward(const TransformerWeights<T>& weights, const BoundWeights<T>& bound,
                         const std::vector<TokenSeq>& batch, const ForwardOptions<T>& opt = {}) {
  const ModelConfig& c = weights.config;
  const auto& W = bound.vars;
  if (batch.empty()) throw DimensionError("forward: empty batch");
  ForwardResult<T> res;
  res.segments.push_back(0);
  std::vector<std::size_t> ids, positions;
  for (const auto& seq : batch) {
    if (seq.empty()) throw DimensionError("forward: empty sequence");
    if (seq.size() > c.max_seq_len) {
      throw DimensionError("forward: sequence of " + std::to_string(seq.size()) + " tokens exceeds max_seq_len " +
                           std::to_string(c.max_seq_len));
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] >= c.vocab_size) throw VocabularyError("token id " + std::to_string(seq[i]) + " outside vocabulary");
      ids.push_back(seq[i]);
      positions.push_back(i);
    }
    res.segments.push_back(ids.size());
  }
  const std::size_t rows = ids.size();
  const InterventionSet<T>* iv = opt.interventions;
  if (iv && !iv->empty()) {
    if (batch.size() != 1) throw InterventionError("interventions require a single-sequence batch");
    iv->validate(c.n_layers, c.d_model, rows);
  }
  if (opt.start_layer < 1 || opt.start_layer > c.n_layers + 1) throw InterventionError("bad start layer");
  if (opt.start_layer > 1 && (!opt.start_residual || opt.start_residual->shape() != Shape{rows, c.d_model})) {
    throw InterventionError("resuming a forward pass needs the residual stream of the previous layer");
  }

  ActivationTrace<T> trace;
  if (opt.capture) {
    trace.residuals.resize(c.n_layers + 1);
    trace.attn_outs.resize(c.n_layers);
    trace.mlp_outs.resize(c.n_layers);
    trace.attention.resize(c.n_layers);
    trace.first_layer = opt.start_layer;
  }

  if (opt.start_residual && opt.start_residual->shape() != Shape{rows, c.d_model}) {
    throw InterventionError("supplied residual stream does not match the batch");
  }

  Var<T> h;
  if (!opt.start_residual) {
    h = embedding(W[TransformerWeights<T>::kTokEmbed], ids) + embedding(W[TransformerWeights<T>::kPosEmbed], positions);
    if (iv && iv->embedding_noise()) {
      const auto& n = *iv->embedding_noise();
      h = h + Var<T>::constant(
                  embedding_noise<T>(h.shape(), std::span<const std::size_t>(n.positions), n.sigma, n.seed));
    }
  } else {
    h = Var<T>::constant(*opt.start_residual);
  }
  if (opt.capture) trace.residuals[opt.start_layer - 1] = h.value();

  const T eps = static_cast<T>(c.layer_norm_eps);
  for (std::size_t l = opt.start_layer; l <= c.n_layers; ++l) {
    auto P = [&](LayerParam p) -> const Var<T>& { return W[weights.layer_index(l, p)]; };
    Var<T> x = layer_norm(h, P(LayerParam::ln1_gain), P(LayerParam::ln1_bias), eps);
    Var<T> q = add_row_bias(matmul(x, P(LayerParam::wq)), P(LayerParam::bq));
    Var<T> k = add_row_bias(matmul(x, P(LayerParam::wk)), P(LayerParam::bk));
    Var<T> v = add_row_bias(matmul(x, P(LayerParam::wv)), P(LayerParam::bv));
    auto att = causal_attention(q, k, v, c.n_heads, res.segments);
    Var<T> a = add_row_bias(matmul(att.output, P(LayerParam::wo)), P(LayerParam::bo));
    a = detail::apply_patches(a, SiteKind::attn_out, l, iv);
    Var<T> mid = h + a;
    Var<T> x2 = layer_norm(mid, P(LayerParam::ln2_gain), P(LayerParam::ln2_bias), eps);
    Var<T> hidden = gelu(add_row_bias(matmul(x2, P(LayerParam::w1)), P(LayerParam::b1)));
    Var<T> m = add_row_bias(matmul(hidden, P(LayerParam::w2)), P(LayerParam::b2));
    m = detail::apply_patches(m, SiteKind::mlp_out, l, iv);
    h = mid + m;
    h = detail::apply_patches(h, SiteKind::residual, l, iv);
    res.attn_vars.push_back(a);
    res.mlp_vars.push_back(m);
    if (opt.capture) {
      trace.attn_outs[l - 1] = a.value();
      trace.mlp_outs[l - 1] = m.value();
      trace.residuals[l] = h.value();
      auto& heads = trace.attention[l - 1];
      heads.resize(c.n_heads);
      for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
        heads[hd].assign(att.weights->begin() + static_cast<std::ptrdiff_t>(hd * rows),
                         att.weights->begin() + static_cast<std::ptrdiff_t>((hd + 1) * rows));
      }
    }
  }

  Var<T> top = h;
  if (opt.last_logits_only) {
    std::vector<std::size_t> last;
    for (std::size_t s = 1; s < res.segments.size(); ++s) last.push_back(res.segments[s] - 1);
    top = select_rows(h, std::move(last));
  } else if (opt.logit_rows) {
    top = select_rows(h, *opt.logit_rows);
  }
  res.final_normed = layer_norm(top, W[weights.final_gain_index()], W[weights.final_bias_index()], eps);
  res.logits = matmul_nt(res.final_normed, W[weights.unembed_index()]);
  if (opt.capture) res.trace = std::move(trace);
  return res;
}

/// Owns weights plus a reusable constant binding for inference.
template <std::floating_point T>
class Transformer {
 public:
  Transformer() = default;
  explicit Transformer(TransformerWeights<T> w) : weights_(std::move(w)) { refresh(); }

  const ModelConfig& config() const { return weights_.config; }
  const TransformerWeights<T>& weights() const { return weights_; }
  /// Mutable access; call refresh() after modifying.
  TransformerWeights<T>& mutable_weights() { return weights_; }
  void refresh() { bound_ = BoundWeights<T>::constants(weights_); }
  const BoundWeights<T>& bound() const { return bound_; }

  struct Output {
    Tensor<T> logits;  // T×|V| (or 1×|V| with last_only)
    std::optional<ActivationTrace<T>> trace;
  };

  /// Inference forward over one sequence.
  Output run(const TokenSeq& tokens, const InterventionSet<T>& interventions = {}, bool capture = false,
             bool last_only = false) const {
    NoGradGuard ng;
    ForwardOptions<T> opt;
    opt.interventions = &interventions;
    opt.capture = capture;
    opt.last_logits_only = last_only;
    auto r = forward(weights_, bound_, {tokens}, opt);
    return {r.logits.value(), std::move(r.trace)};
  }

  /// Resumes from layer `start_layer` given H[start_layer-1]; returns final-position logits.
  Tensor<T> resume_last_logits(const TokenSeq& tokens, std::size_t start_layer, const Tensor<T>& residual,
                               const InterventionSet<T>& interventions) const {
    NoGradGuard ng;
    ForwardOptions<T> opt;
    opt.interventions = &interventions;
    opt.last_logits_only = true;
    opt.start_layer = start_layer;
    opt.start_residual = &residual;
    return forward(weights_, bound_, {tokens}, opt).logits.value();
  }

  /// Final-position logits for many sequences at once (one row per sequence).
  Tensor<T> last_logits(const std::vector<TokenSeq>& batch) const {
    NoGradGuard ng;
    ForwardOptions<T> opt;
    opt.last_logits_only = true;
    return forward(weights_, bound_, batch, opt).logits.value();
  }

 private:
  TransformerWeights<T> weights_;
  BoundWeights<T> bound_;
};

/// Softmax of one logits row.
template <std::floating_point T>
std::vector<T> next_token_distribution(std::span<const T> logits) {
  Tensor<T> t({logits.size()}, std::vector<T>(logits.begin(), logits.end()));
  return softmax(t, 0).storage();
}

}  // namespace hallucitrace
