#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <numeric>

#include "hallucitrace/mitigate.hpp"
#include "support/gradcheck.hpp"
#include "support/scripted.hpp"

using namespace hallucitrace;
using namespace hallucitrace::testing;

namespace {

TrainExample example(TokenSeq x = {1, 5, 6, 2}, TokenId y = 7, TokenId y_prime = 9) { return {0, std::move(x), y, y_prime}; }

// Normalized final state of the layer-`l` MLP output at the last question token.
std::vector<double> lens_state(const TransformerWeights<double>& w, const TrainExample& e, std::size_t l) {
  Transformer<double> m(w);
  auto run = m.run(e.joined(), {}, true);
  auto z = run.trace->mlp(l).row(e.x.size() - 1);
  Tensor<double> row({1, z.size()}, std::vector<double>(z.begin(), z.end()));
  return layer_norm(row, w.final_gain(), w.final_bias(), w.config.layer_norm_eps).storage();
}

double value(const Var<double>& v) { return v.value()[0]; }

MhmConfig config(std::vector<std::size_t> mlp, std::vector<std::size_t> attn, double lambda = 1.0) {
  MhmConfig c;
  c.layers_mlp = std::move(mlp);
  c.layers_attn = std::move(attn);
  c.lambda = lambda;
  return c;
}

}  // namespace

TEST(MitigationLayersTest, SixLayersAroundThreeQuarters) {
  EXPECT_EQ(default_mitigation_layers(8), (std::vector<std::size_t>{3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(default_mitigation_layers(32), (std::vector<std::size_t>{22, 23, 24, 25, 26, 27}));
  EXPECT_EQ(default_mitigation_layers(4), (std::vector<std::size_t>{1, 2, 3, 4}));
  auto c = resolve_mhm_config({}, 8);
  EXPECT_EQ(c.layers_mlp, default_mitigation_layers(8));
  EXPECT_EQ(c.layers_attn, default_mitigation_layers(8));
  EXPECT_THROW(resolve_mhm_config(config({9}, {}), 8), ConfigError);
  EXPECT_THROW(resolve_mhm_config(config({}, {0}), 8), ConfigError);
  EXPECT_THROW(resolve_mhm_config(config({}, {}, -1.0), 8), ConfigError);
}

TEST(MhmLossTest, SingleMlpLayerAtInverseE) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  auto e = example();
  // Choose e_y so that the lens logit of y is ln(S / (e - 1)), making p_m(y) = 1/e.
  auto n = lens_state(w, e, 1);
  double norm2 = 0;
  for (double v : n) norm2 += v * v;
  double others = 0;
  for (TokenId t = 0; t < c.vocab_size; ++t) {
    if (t == e.y) continue;
    double logit = 0;
    for (std::size_t j = 0; j < n.size(); ++j) logit += n[j] * w.unembed()(t, j);
    others += std::exp(logit);
  }
  const double target = std::log(others / (std::exp(1.0) - 1.0));
  auto row = w.params[w.unembed_index()].value.row(e.y);
  for (std::size_t j = 0; j < n.size(); ++j) row[j] = target * n[j] / norm2;
  NoGradGuard ng;
  EXPECT_NEAR(value(mhm_loss(w, BoundWeights<double>::constants(w), e, config({1}, {}))), 1.0, 1e-9);
}

TEST(MhmLossTest, ZeroWhenTargetsAreMet) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  auto e = example();
  // Identical unembedding rows for y and y' zero the attention ratio exactly.
  auto& U = w.params[w.unembed_index()].value;
  for (std::size_t j = 0; j < c.d_model; ++j) U(e.y_prime, j) = U(e.y, j);
  NoGradGuard ng;
  auto b = BoundWeights<double>::constants(w);
  EXPECT_EQ(value(mhm_loss(w, b, e, config({}, {1, 2}))), 0.0);
  EXPECT_EQ(value(combined_loss(w, b, e, config({}, {1, 2}, 1.0))), value(nll_loss(w, b, e)));
  // A huge e_y aligned with the MLP state drives p_m(y) to 1.
  auto n = lens_state(w, e, 2);
  for (std::size_t j = 0; j < c.d_model; ++j) U(e.y, j) = 1e3 * n[j];
  EXPECT_NEAR(value(mhm_loss(w, BoundWeights<double>::constants(w), e, config({2}, {}))), 0.0, 1e-9);
}

TEST(MhmLossTest, MatchesLensOracleSum) {
  auto c = small_config(4, 8, 2, 23);
  auto w = scrambled<double>(c);
  auto e = example({3, 4, 5}, 11, 2);
  Transformer<double> m(w);
  auto run = m.run(e.joined(), {}, true);
  auto lp = [&](const Tensor<double>& states, TokenId t) {
    auto z = states.row(e.x.size() - 1);
    Tensor<double> row({1, z.size()}, std::vector<double>(z.begin(), z.end()));
    auto logits = matmul_nt(layer_norm(row, w.final_gain(), w.final_bias(), c.layer_norm_eps), w.unembed());
    return log_softmax<double>(logits.row(0))[t];
  };
  double oracle = 0;
  for (std::size_t l : {2, 4}) oracle -= lp(run.trace->mlp(l), e.y);
  for (std::size_t l : {1, 3}) oracle -= lp(run.trace->attn(l), e.y) - lp(run.trace->attn(l), e.y_prime);
  NoGradGuard ng;
  auto b = BoundWeights<double>::constants(w);
  EXPECT_NEAR(value(mhm_loss(w, b, e, config({2, 4}, {1, 3}))), oracle, 1e-9);
  // NLL over [x; y] is the mean next-token loss of the joined sequence.
  auto logits = m.run(e.joined()).logits;
  double nll = 0;
  for (std::size_t i = 0; i + 1 < e.joined().size(); ++i) nll -= log_softmax<double>(logits.row(i))[e.joined()[i + 1]];
  nll /= static_cast<double>(e.joined().size() - 1);
  EXPECT_NEAR(value(nll_loss(w, b, e)), nll, 1e-9);
  EXPECT_NEAR(value(combined_loss(w, b, e, config({2, 4}, {1, 3}, 2.5))), nll + 2.5 * oracle, 1e-9);
  EXPECT_THROW(mhm_loss(w, b, e, config({}, {})), ConfigError);
}

TEST(MhmLossTest, LambdaZeroIsExactlyNll) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  auto e = example();
  NoGradGuard ng;
  auto b = BoundWeights<double>::constants(w);
  EXPECT_EQ(value(combined_loss(w, b, e, config({1}, {2}, 0.0))), value(nll_loss(w, b, e)));
}

TEST(MhmLossTest, PackedBatchMatchesSingleExamples) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  std::vector<TrainExample> batch{example({1, 2, 3}, 4, 5), example({6, 7}, 8, 9), example({10, 11, 12, 13}, 14, 15)};
  NoGradGuard ng;
  auto b = BoundWeights<double>::constants(w);
  auto cfg = config({1, 2}, {2});
  auto parts = mitigation_losses(w, b, batch, cfg, true);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    EXPECT_NEAR(value(parts.nll[k]), value(nll_loss(w, b, batch[k])), 1e-12);
    EXPECT_NEAR(value(parts.mhm[k]), value(mhm_loss(w, b, batch[k], cfg)), 1e-12);
  }
  EXPECT_THROW(mitigation_losses(w, b, {example({1}, 3, 3)}, cfg, true), DomainError);
}

TEST(MhmGradientTest, MhmAndCombinedMatchFiniteDifferences) {
  auto c = small_config(2, 8, 2, 11);
  auto w = scrambled<double>(c);
  auto e = example({1, 5, 6, 2}, 7, 9);
  auto cfg = config({1, 2}, {1, 2}, 1.0);
  for (bool combined : {false, true}) {
    w.reset_grads();
    auto b = BoundWeights<double>::parameters(w);
    backward(combined ? combined_loss(w, b, e, cfg) : mhm_loss(w, b, e, cfg));
    auto coords = gradcheck::sample_coordinates(w.params, 250, combined ? 3 : 4);
    auto res = gradcheck::check(w.params, coords, [&] {
      NoGradGuard ng;
      auto wl = w.cast<long double>();
      auto bl = BoundWeights<long double>::constants(wl);
      return (combined ? combined_loss(wl, bl, e, cfg) : mhm_loss(wl, bl, e, cfg)).value()[0];
    });
    EXPECT_LE(res.max_relative_error, 1e-6) << (combined ? "combined " : "mhm ") << res.worst;
  }
}

class MitigationTrainingTest : public ::testing::Test {
 protected:
  MitigationTrainingTest() : w(scrambled<float>(small_config(2, 8, 2, 23), 0.1)) {}
  TransformerWeights<float> w;
  std::vector<TrainExample> data{example({1, 2, 3}, 4, 5), example({6, 7}, 8, 9), example({10, 11, 12}, 13, 15)};
};

TEST_F(MitigationTrainingTest, ZeroEpochsAndZeroRateLeaveWeightsUnchanged) {
  auto cfg = config({1}, {2});
  cfg.epochs = 0;
  auto run = train_mhm(w, data, cfg);
  EXPECT_TRUE(run.log.empty());
  for (std::size_t i = 0; i < w.params.size(); ++i) EXPECT_EQ(run.weights.params[i].value.storage(), w.params[i].value.storage());
  cfg.epochs = 1;
  cfg.lr = 0;
  run = train_mhm(w, data, cfg);
  EXPECT_FALSE(run.log.empty());
  for (std::size_t i = 0; i < w.params.size(); ++i) EXPECT_EQ(run.weights.params[i].value.storage(), w.params[i].value.storage());
  EXPECT_THROW(train_mhm(w, {}, cfg), DomainError);
}

TEST_F(MitigationTrainingTest, DeterministicAndSftIsLambdaZero) {
  auto cfg = config({1}, {2});
  cfg.epochs = 3;
  cfg.batch_size = 2;
  auto a = train_mhm(w, data, cfg);
  auto b = train_mhm(w, data, cfg);
  auto zero = cfg;
  zero.lambda = 0;
  auto sft = sft_baseline(w, data, cfg);
  auto lam0 = train_mhm(w, data, zero);
  bool differs = false;
  for (std::size_t i = 0; i < w.params.size(); ++i) {
    EXPECT_EQ(a.weights.params[i].value.storage(), b.weights.params[i].value.storage());
    EXPECT_EQ(sft.weights.params[i].value.storage(), lam0.weights.params[i].value.storage());
    differs = differs || a.weights.params[i].value.storage() != sft.weights.params[i].value.storage();
  }
  EXPECT_TRUE(differs);
  ASSERT_EQ(sft.log.size(), lam0.log.size());
  for (std::size_t i = 0; i < sft.log.size(); ++i) {
    EXPECT_EQ(sft.log[i].combined, lam0.log[i].combined);
    EXPECT_EQ(sft.log[i].mhm, 0.0);
    EXPECT_FLOAT_EQ(sft.log[i].nll, sft.log[i].combined);
  }
}

TEST_F(MitigationTrainingTest, SingleExampleOverfitAndSftDecreases) {
  auto cfg = config({1}, {2});
  cfg.epochs = 60;
  cfg.batch_size = 1;
  cfg.lr = 0.1;
  auto run = train_mhm(w, {data[0]}, cfg);
  EXPECT_LT(run.log.back().combined, 0.1 * run.log.front().combined);
  auto sft = sft_baseline(w, data, cfg);
  const double first = sft.log[0].nll + sft.log[1].nll + sft.log[2].nll;
  const auto n = sft.log.size();
  const double last = sft.log[n - 1].nll + sft.log[n - 2].nll + sft.log[n - 3].nll;
  EXPECT_LT(last, first);
}

TEST_F(MitigationTrainingTest, DivergenceKeepsLastGoodWeights) {
  auto cfg = config({1}, {2});
  cfg.epochs = 50;
  cfg.lr = 1e30;
  cfg.grad_clip = 0;
  try {
    train_mhm(w, data, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    for (const auto& p : e.last_good().params)
      for (float v : p.value.data()) ASSERT_TRUE(std::isfinite(v));
    EXPECT_GE(e.step(), 1u);
  }
}

TEST(IclPromptTest, TemplateCountsAndRoundTrip) {
  Vocabulary vocab({"Question:", "Answer:", ".", "Toulouse", "is", "the", "twin", "city", "of", "Atlanta", "Paris",
                    "Bologna", "Lyon", "in", "located"});
  EXPECT_EQ(icl_prompt({}, "Toulouse is the twin city of"), "Question: Toulouse is the twin city of . Answer:");
  std::vector<QaPair> shots{{"Paris is located in", "Lyon"}, {"Lyon is the twin city of", "Bologna"},
                            {"Bologna is located in", "Paris"}, {"Atlanta is the twin city of", "Toulouse"},
                            {"Toulouse is located in", "Paris"}};
  const std::string q = "Toulouse is the twin city of";
  const auto text = icl_prompt(shots, q);
  const auto toks = vocab.tokenize(text);
  std::size_t parts = vocab.tokenize(qa_text(q)).size();
  for (const auto& s : shots) parts += vocab.tokenize(qa_text(s.question, s.answer)).size();
  EXPECT_EQ(toks.size(), parts);
  EXPECT_EQ(vocab.detokenize(toks), text);
}

TEST(MitigationEvalTest, SetsIdentityAndRecount) {
  WorldConfig wc;
  wc.n_subjects = 16;
  wc.n_relations = 2;
  wc.n_objects = 3;
  wc.max_mentions = 12;
  wc.vocab_size = 200;
  auto world = generate_world(wc);
  auto qs = build_query_set(world);
  ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.vocab_size = world.vocab.size();
  mc.max_seq_len = 48;
  auto w = TransformerWeights<float>::initialize(mc);
  TrainConfig tc;
  tc.epochs = 6;
  tc.lr = 1e-2;
  tc.warmup_steps = 10;
  pretrain(w, tokenize_corpus(world.vocab, generate_corpus(world).sentences), tc);
  Transformer<float> before(w);
  auto outcomes = evaluate_queries(before, qs, world, world.aliases);

  auto sets = build_mitigation_sets(world, qs, outcomes);
  std::size_t train = 0, correct = 0;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    train += !qs[i].paraphrase && outcomes[i].label == EvalLabel::hallucinating;
    correct += !qs[i].paraphrase && outcomes[i].label == EvalLabel::factual;
  }
  EXPECT_EQ(sets.train.size(), train);
  EXPECT_EQ(sets.correct.size(), correct);
  ASSERT_FALSE(sets.paraphrases.empty());
  ASSERT_FALSE(sets.correct.empty());
  for (const auto& q : sets.paraphrases) {
    EXPECT_TRUE(q.paraphrase);
    EXPECT_TRUE(std::any_of(sets.train.begin(), sets.train.end(),
                            [&](const TrainExample& e) { return qs[e.query].triple == q.triple; }));
  }
  for (const auto& e : sets.train) EXPECT_NE(e.y, e.y_prime);

  auto same = evaluate_mitigation(before, before, sets.paraphrases, sets.correct, world);
  EXPECT_EQ(same.effectiveness, 0.0);
  EXPECT_EQ(same.specificity, 1.0);
  EXPECT_EQ(same.correct_before, sets.correct.size());

  auto cc = mc;
  cc.seed = 99;
  Transformer<float> other(scrambled<float>(cc, 0.5));
  auto r = evaluate_mitigation(before, other, sets.paraphrases, sets.correct, world);
  auto after = evaluate_queries(other, sets.paraphrases, world, world.aliases);
  auto kept = evaluate_queries(other, sets.correct, world, world.aliases);
  std::size_t fixed = 0, still = 0;
  for (const auto& o : after) fixed += o.label == EvalLabel::factual;
  for (const auto& o : kept) still += o.label == EvalLabel::factual;
  EXPECT_DOUBLE_EQ(r.effectiveness, static_cast<double>(fixed) / sets.paraphrases.size());
  EXPECT_DOUBLE_EQ(r.specificity, static_cast<double>(still) / sets.correct.size());
  EXPECT_THROW(evaluate_mitigation(before, other, {}, sets.correct, world), DomainError);
  EXPECT_THROW(evaluate_mitigation(before, other, sets.paraphrases, {}, world), DomainError);
}
