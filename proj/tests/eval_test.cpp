#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hallucitrace/eval.hpp"
#include "support/scripted.hpp"

using namespace hallucitrace;
using namespace hallucitrace::testing;

namespace {

template <typename T>
HallucinationQuery hallucinated(const Transformer<T>& model, TokenSeq toks, std::size_t first, std::size_t last,
                                std::size_t id = 0) {
  HallucinationQuery q;
  q.id = id;
  q.tokens = std::move(toks);
  q.subject_first = first;
  q.subject_last = last;
  q.relation_end = q.tokens.size() - 1;
  const auto row_logits = model.run(q.tokens, {}, false, true).logits;
  auto row = row_logits.row(0);
  q.predicted = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
  q.object = static_cast<TokenId>(std::min_element(row.begin(), row.end()) - row.begin());
  return q;
}

}  // namespace

TEST(AssociationTest, ZeroIdenticalAndSeeded) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  auto zeroed = w;
  for (std::size_t j = 0; j < c.d_model; ++j) zeroed.params[TransformerWeights<double>::kTokEmbed].value(4, j) = 0;
  std::vector<TokenId> subj{1, 2};
  EXPECT_EQ(association_strength<double>(zeroed, subj, 4), 0.0);

  auto same = w;
  auto& E = same.params[TransformerWeights<double>::kTokEmbed].value;
  for (std::size_t j = 0; j < c.d_model; ++j) E(1, j) = E(2, j) = E(9, j);
  double norm2 = 0;
  for (std::size_t j = 0; j < c.d_model; ++j) norm2 += E(9, j) * E(9, j);
  EXPECT_NEAR(association_strength<double>(same, subj, 9), norm2, 1e-12);

  double oracle = 0;
  for (TokenId s : subj)
    for (std::size_t j = 0; j < c.d_model; ++j) oracle += w.tok_embed()(s, j) * w.tok_embed()(7, j) / 2;
  EXPECT_NEAR(association_strength<double>(w, subj, 7), oracle, 1e-12);
  EXPECT_THROW(association_strength<double>(w, std::vector<TokenId>{}, 7), DomainError);
}

TEST(RobustnessTest, ExtremesAndRecount) {
  std::vector<NoiseSample> flip{{1, -0.5}, {2, -1.0}};
  std::vector<NoiseSample> keep{{1, 0.5}, {2, 2.0}};
  EXPECT_EQ(robustness(flip, 1.0), 0.0);
  EXPECT_EQ(robustness(keep, 1.0), 1.0);
  EXPECT_EQ(robustness(flip, 1.0, RobustnessRule::parenthetical), 1.0);
  EXPECT_THROW(robustness({}, 1.0), DomainError);

  auto c = small_config(2, 8, 2, 23);
  Transformer<double> model(scrambled<double>(c));
  auto q = hallucinated(model, {1, 5, 6, 2, 3}, 1, 2);
  TraceConfig tc;
  tc.sigma_mode = SigmaMode::unit;
  tc.noise_scope = NoiseScope::all_subject;
  auto pool = draw_noise_pool(model, q, tc, 40);
  ASSERT_EQ(pool.size(), 40u);
  std::size_t kept = 0;
  for (std::size_t a = 0; a < pool.size(); ++a) {
    InterventionSet<double> iv;
    iv.noise({{1, 2}, 1.0, noise_seed(tc.seed, q.id, a)});
    const auto row_logits = model.run(q.tokens, iv).logits;
    auto row = row_logits.row(q.relation_end);
    if (row[*q.predicted] - row[q.object] > 0) ++kept;
  }
  EXPECT_DOUBLE_EQ(robustness(pool, 1.0), kept / 40.0);
  // Same seeds twice give the same pool.
  auto again = draw_noise_pool(model, q, tc, 40);
  for (std::size_t a = 0; a < pool.size(); ++a) EXPECT_EQ(again[a].y_star, pool[a].y_star);
  // The pool shares seeds with the filtered sampler.
  tc.n_target = 3;
  auto sampled = sample_mitigating_noises(model, q, tc);
  for (std::size_t a = 0; a < sampled.drawn.size(); ++a) EXPECT_EQ(sampled.drawn[a].y_star, pool[a].y_star);
}

TEST(UncertaintyTest, MatchesEntropyOracle) {
  auto c = small_config(2, 8, 2, 23);
  Transformer<double> model(scrambled<double>(c));
  auto q = hallucinated(model, {1, 5, 6, 2, 3}, 1, 2);
  const auto row_logits = model.run(q.tokens).logits;
  auto row = row_logits.row(q.relation_end);
  double mx = *std::max_element(row.begin(), row.end()), z = 0;
  for (double v : row) z += std::exp(v - mx);
  double h = 0;
  for (double v : row) {
    const double p = std::exp(v - mx) / z;
    h -= p * std::log(p);
  }
  const double u = prediction_uncertainty(model, q);
  EXPECT_NEAR(u, h, 1e-9);
  EXPECT_GE(u, 0.0);
  EXPECT_LE(u, std::log(static_cast<double>(c.vocab_size)));
}

TEST(ManifestationTest, FeaturesCombineTheParts) {
  auto c = small_config(2, 8, 2, 23);
  Transformer<double> model(scrambled<double>(c));
  auto q = hallucinated(model, {1, 5, 6, 2, 3}, 1, 2, 4);
  TraceConfig tc;
  FeatureConfig fc;
  fc.pool_size = 10;
  auto f = manifestation_features(model, q, tc, fc);
  EXPECT_EQ(f.query, 4u);
  std::vector<TokenId> subj{5, 6};
  EXPECT_EQ(f.so_assoc, association_strength<double>(model.weights(), subj, q.object));
  EXPECT_EQ(f.so_prime_assoc, association_strength<double>(model.weights(), subj, *q.predicted));
  EXPECT_EQ(f.uncertainty, prediction_uncertainty(model, q));
  EXPECT_EQ(f.robustness, robustness(draw_noise_pool(model, q, tc, 10), 1.0));
  auto many = manifestation_features(model, std::vector<HallucinationQuery>{q, q}, tc, fc, 2);
  EXPECT_EQ(many[1].values(), f.values());
}

TEST(ManifestationTest, GroupMeansAndFlags) {
  std::mt19937_64 gen(8);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<ManifestationFeatures> feats;
  std::vector<Mechanism> labels;
  for (std::size_t i = 0; i < 20; ++i) {
    feats.push_back({i, u(gen), u(gen), u(gen), u(gen)});
    labels.push_back(i % 4 == 0 ? Mechanism::late_site : Mechanism::early_site);
  }
  auto rep = manifestation_report(feats, labels);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_TRUE(rep.empty_groups.empty());
  const auto& early = rep.rows[0];
  const auto& late = rep.rows[1];
  EXPECT_EQ(early.count, 15u);
  EXPECT_EQ(late.count, 5u);
  EXPECT_EQ(early.reference, (std::array<double, 4>{0.40, 0.85, 0.78, 4.39}));
  EXPECT_EQ(late.reference, (std::array<double, 4>{0.88, 2.03, 0.51, 4.17}));
  for (std::size_t k = 0; k < 4; ++k) {
    double s = 0, all = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      if (labels[i] == Mechanism::early_site) s += feats[i].values()[k];
      all += feats[i].values()[k];
    }
    EXPECT_NEAR(early.mean[k], s / 15, 1e-12);
    EXPECT_NEAR((15 * early.mean[k] + 5 * late.mean[k]) / 20, all / 20, 1e-12);
  }
  auto single = manifestation_report({feats[3]}, {Mechanism::early_site});
  EXPECT_EQ(single.rows.at(0).mean, feats[3].values());
  EXPECT_EQ(single.empty_groups, std::vector<Mechanism>{Mechanism::late_site});
  EXPECT_THROW(manifestation_report(feats, {}), DimensionError);
}
