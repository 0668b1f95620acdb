#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "hallucitrace/lens.hpp"
#include "support/scripted.hpp"

using namespace hallucitrace;
using namespace hallucitrace::testing;

namespace {

std::vector<double> seeded_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(gen);
  return v;
}

// Naive oracle: layer norm then explicit unembedding loop.
std::vector<double> lens_oracle(const std::vector<double>& z, const TransformerWeights<double>& w) {
  const std::size_t d = z.size();
  double mean = 0, var = 0;
  for (double v : z) mean += v / d;
  for (double v : z) var += (v - mean) * (v - mean) / d;
  std::vector<double> n(d);
  for (std::size_t j = 0; j < d; ++j)
    n[j] = (z[j] - mean) / std::sqrt(var + w.config.layer_norm_eps) * w.final_gain()[j] + w.final_bias()[j];
  std::vector<double> out(w.config.vocab_size, 0.0);
  for (std::size_t o = 0; o < out.size(); ++o)
    for (std::size_t j = 0; j < d; ++j) out[o] += n[j] * w.unembed()(o, j);
  return out;
}

HallucinationQuery query(std::size_t id, TokenSeq toks, std::size_t first, std::size_t last, TokenId object) {
  HallucinationQuery q;
  q.id = id;
  q.tokens = std::move(toks);
  q.subject_first = first;
  q.subject_last = last;
  q.relation_end = q.tokens.size() - 1;
  q.object = object;
  return q;
}

}  // namespace

TEST(EspTest, AlignedOrthogonalAndSeeded) {
  auto c = small_config(2, 8, 2, 11);
  auto w = scrambled<double>(c);
  const auto e = w.unembed().row(3);
  std::vector<double> z(e.begin(), e.end());
  double norm2 = 0;
  for (double v : z) norm2 += v * v;
  EXPECT_NEAR(esp<double>(z, w, 3), norm2, 1e-12);

  // Gram-Schmidt a seeded vector against e_3.
  auto r = seeded_vector(c.d_model, 5);
  double proj = 0;
  for (std::size_t j = 0; j < r.size(); ++j) proj += r[j] * e[j];
  for (std::size_t j = 0; j < r.size(); ++j) r[j] -= proj / norm2 * e[j];
  EXPECT_NEAR(esp<double>(r, w, 3), 0.0, 1e-12);

  auto s = seeded_vector(c.d_model, 9);
  double naive = 0;
  for (std::size_t j = 0; j < s.size(); ++j) naive += s[j] * w.unembed()(7, j);
  EXPECT_NEAR(esp<double>(s, w, 7), naive, 1e-9);
  // Bilinear in z.
  auto s3 = s;
  for (auto& v : s3) v *= -2.5;
  EXPECT_NEAR(esp<double>(s3, w, 7), -2.5 * naive, 1e-9);
  EXPECT_THROW(esp<double>(s, w, 11), DomainError);
}

TEST(LogitLensTest, DistributionAndTopFiveMatchFullSortOracle) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto z = seeded_vector(c.d_model, seed);
    auto p = logit_lens<double>(z, w);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
    auto oracle = lens_oracle(z, w);
    auto lens = lens_logits<double>(z, w);
    for (std::size_t o = 0; o < oracle.size(); ++o) EXPECT_NEAR(lens[o], oracle[o], 1e-9);
    std::vector<std::size_t> order(oracle.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return oracle[a] > oracle[b]; });
    auto top = top_k<double>(p, 5);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(top[k], order[k]);
    EXPECT_EQ(rank_of<double>(p, argmax<double>(p)), 1u);
  }
}

TEST(LogitLensTest, RankDecreasesAsLogitRises) {
  std::vector<double> v{0.1, 0.5, -0.2, 0.3};
  const auto before = rank_of<double>(v, 2);
  v[2] = 0.4;
  EXPECT_LT(rank_of<double>(v, 2), before);
}

TEST(EnrichmentTest, MlpInfoMatchesOracleAndAlignedCase) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  Transformer<double> model(w);
  TokenSeq toks{4, 9, 2, 6};
  auto run = model.run(toks, {}, true);
  const auto& tr = *run.trace;
  for (std::size_t l = 1; l <= 2; ++l) {
    auto m = tr.mlp(l).row(2);
    auto oracle = lens_oracle(std::vector<double>(m.begin(), m.end()), w);
    EXPECT_NEAR(mlp_enriched_info(tr, w, l, 2, 5), oracle[5], 1e-9);
  }

  // Identity final norm and a zero-mean, unit-variance e_o: LN(e_o) = e_o up to eps.
  auto w2 = w;
  for (auto& g : w2.params[w2.final_gain_index()].value.data()) g = 1.0;
  for (auto& b : w2.params[w2.final_bias_index()].value.data()) b = 0.0;
  auto row = w2.params[w2.unembed_index()].value.row(5);
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = (j % 2 ? 1.0 : -1.0);
  ActivationTrace<double> t;
  t.mlp_outs.push_back(Tensor<double>({1, c.d_model}, std::vector<double>(row.begin(), row.end())));
  t.attn_outs.push_back(Tensor<double>({1, c.d_model}));
  EXPECT_NEAR(mlp_enriched_info(t, w2, 1, 0, 5), static_cast<double>(c.d_model), 1e-4);
}

TEST(ExtractionTest, DefinitionCasesAndOracle) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  Transformer<double> model(w);
  TokenSeq toks{4, 9, 2, 6};
  auto run = model.run(toks, {}, true);
  const auto& tr = *run.trace;
  const auto a = tr.attn(2).row(3);
  // |O'| = 1: a . (e_o - e_o').
  double single = 0;
  for (std::size_t j = 0; j < c.d_model; ++j) single += a[j] * (w.unembed()(5, j) - w.unembed()(8, j));
  EXPECT_NEAR(attn_extracted_info(tr, w, 2, 3, 5, {8}), single, 1e-12);
  // o itself twice in O' with nothing else: e_o equals the mean, so 0.
  EXPECT_NEAR(attn_extracted_info(tr, w, 2, 3, 5, {5, 5}), 0.0, 1e-12);
  EXPECT_THROW(attn_extracted_info(tr, w, 2, 3, 5, {}), DomainError);

  auto alts = enriched_alternatives(tr, w, 1, 2, 5, 10);
  ASSERT_EQ(alts.size(), 10u);
  EXPECT_EQ(std::count(alts.begin(), alts.end(), 5u), 0);
  double oracle = 0;
  for (std::size_t j = 0; j < c.d_model; ++j) {
    double mean = 0;
    for (auto t : alts) mean += w.unembed()(t, j) / alts.size();
    oracle += a[j] * (w.unembed()(5, j) - mean);
  }
  EXPECT_NEAR(attn_extracted_info(tr, w, 2, 3, 5, alts), oracle, 1e-6);
  // The full alternative set excludes o and is capped by |V| - 1.
  EXPECT_EQ(enriched_alternatives(tr, w, 1, 2, 5).size(), c.vocab_size - 1);
}

TEST(MinRankTest, MatchesPerLayerFullSortOracle) {
  auto c = small_config(4, 8, 2, 23);
  auto w = scrambled<double>(c);
  Transformer<double> model(w);
  TokenSeq toks{4, 9, 2, 6, 1};
  auto run = model.run(toks, {}, true);
  for (TokenId o = 0; o < c.vocab_size; ++o) {
    std::size_t best = c.vocab_size;
    for (std::size_t l = 1; l <= 4; ++l) {
      auto m = run.trace->mlp(l).row(2);
      auto logits = lens_oracle(std::vector<double>(m.begin(), m.end()), w);
      std::vector<std::size_t> order(logits.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return logits[a] > logits[b]; });
      best = std::min<std::size_t>(best, std::find(order.begin(), order.end(), o) - order.begin() + 1);
    }
    auto r = min_object_rank(*run.trace, w, 2, o);
    EXPECT_EQ(r.rank, best);
    EXPECT_GE(r.rank, 1u);
    EXPECT_LE(r.rank, c.vocab_size);
  }
}

TEST(MinRankTest, AlignedStateRanksFirst) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<double>(c);
  for (auto& g : w.params[w.final_gain_index()].value.data()) g = 1.0;
  for (auto& b : w.params[w.final_bias_index()].value.data()) b = 0.0;
  ActivationTrace<double> t;
  t.mlp_outs.push_back(Tensor<double>({1, c.d_model}, seeded_vector(c.d_model, 3)));
  auto e = w.unembed().row(6);
  std::vector<double> big(e.begin(), e.end());
  for (auto& v : big) v *= 50.0;
  t.mlp_outs.push_back(Tensor<double>({1, c.d_model}, big));
  t.attn_outs.resize(2);
  // Make e_6 zero-mean so LN keeps its direction.
  auto row = w.params[w.unembed_index()].value.row(6);
  double mean = std::accumulate(row.begin(), row.end(), 0.0) / row.size();
  for (auto& v : row) v -= mean;
  for (std::size_t j = 0; j < row.size(); ++j) t.mlp_outs[1](0, j) = 50.0 * row[j];
  auto r = min_object_rank(t, w, 0, 6);
  EXPECT_EQ(r.rank, 1u);
  EXPECT_EQ(r.best_layer, 2u);
}

TEST(MinRankTest, ThresholdIsOnePercentOfVocabulary) {
  EXPECT_EQ(rank_threshold(32000), 320u);
  EXPECT_EQ(rank_threshold(50277), 502u);
  EXPECT_EQ(rank_threshold(2500), 25u);
}

TEST(GroupProfileTest, MeansUnionsAndEmptyGroups) {
  std::vector<QueryEsp> esps;
  std::vector<QueryGroup> groups;
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < 20; ++i) {
    QueryEsp e;
    e.query = i;
    for (int l = 0; l < 4; ++l) {
      e.mlp.push_back(nd(gen));
      e.attn.push_back(nd(gen));
    }
    esps.push_back(e);
    groups.push_back(i < 1 ? QueryGroup::early_site : QueryGroup::factual);
  }
  auto set = group_esp_profile(esps, groups, SiteKind::mlp_out);
  ASSERT_EQ(set.profiles.size(), 2u);
  EXPECT_EQ(set.empty_groups, std::vector<QueryGroup>{QueryGroup::late_site});
  const auto& fact = set.profiles[0];
  const auto& early = set.profiles[1];
  EXPECT_EQ(fact.count, 19u);
  EXPECT_EQ(early.mean, esps[0].mlp);
  for (int l = 0; l < 4; ++l) {
    double s = 0;
    for (std::size_t i = 1; i < 20; ++i) s += esps[i].mlp[l];
    EXPECT_NEAR(fact.mean[l], s / 19, 1e-12);
  }
  // The union of both groups is their count-weighted mean.
  std::vector<QueryGroup> all(20, QueryGroup::late_site);
  auto uni = group_esp_profile(esps, all, SiteKind::mlp_out).profiles.at(0);
  for (int l = 0; l < 4; ++l) EXPECT_NEAR(uni.mean[l], (19 * fact.mean[l] + early.mean[l]) / 20, 1e-12);
  EXPECT_THROW(group_esp_profile(esps, {}, SiteKind::mlp_out), DimensionError);
  EXPECT_THROW(group_esp_profile(esps, groups, SiteKind::residual), DomainError);
}

TEST(GroupProfileTest, QueryEspUsesLastSubjectAndLastToken) {
  auto c = small_config(2, 8, 2, 23);
  Transformer<double> model(scrambled<double>(c));
  auto q = query(3, {4, 9, 2, 6, 1}, 1, 2, 7);
  auto run = model.run(q.tokens, {}, true);
  auto e = query_esp(*run.trace, model.weights(), q);
  auto grid_m = esp_grid(*run.trace, model.weights(), SiteKind::mlp_out, 7);
  auto grid_a = esp_grid(*run.trace, model.weights(), SiteKind::attn_out, 7);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(e.mlp[l], grid_m[l][2]);
    EXPECT_EQ(e.attn[l], grid_a[l][4]);
  }
  EXPECT_EQ(query_esps(model, {q, q}, 2)[1].mlp, e.mlp);
}

class TrajectoryTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = std::filesystem::temp_directory_path() / ("ht_traj_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
  }
  void TearDown() override { std::filesystem::remove_all(dir); }
  std::filesystem::path dir;
};

TEST_F(TrajectoryTest, FiveCheckpointsMatchPerCheckpointRecomputation) {
  auto c = small_config(2, 8, 2, 23);
  std::vector<HallucinationQuery> qs{query(0, {4, 9, 2, 6}, 0, 1, 7), query(1, {3, 3, 8, 1, 2}, 1, 1, 5),
                                     query(2, {1, 2, 3}, 0, 0, 9)};
  std::vector<QueryGroup> groups{QueryGroup::factual, QueryGroup::late_site, QueryGroup::factual};
  std::vector<TransformerWeights<float>> saved;
  for (std::size_t k = 0; k < 5; ++k) {
    auto cc = c;
    cc.seed = 100 + k;
    saved.push_back(scrambled<float>(cc));
    write_checkpoint(dir, 10 * k, saved.back());
  }
  auto traj = checkpoint_trajectory(dir, qs, groups, 2);
  EXPECT_TRUE(traj.skipped.empty());
  ASSERT_EQ(traj.points.size(), 10u);
  for (std::size_t k = 0; k < 5; ++k) {
    Transformer<float> m(saved[k]);
    // Oracle: factual = queries 0 and 2, late = query 1; L = 2 so the halves are single layers.
    std::vector<double> lower(3), upper(3);
    for (std::size_t i = 0; i < 3; ++i) {
      auto run = m.run(qs[i].tokens, {}, true);
      lower[i] = esp<float>(run.trace->mlp(1).row(qs[i].subject_last), m.weights(), qs[i].object);
      upper[i] = esp<float>(run.trace->attn(2).row(qs[i].relation_end), m.weights(), qs[i].object);
    }
    const auto& f = traj.points[2 * k];
    const auto& l = traj.points[2 * k + 1];
    EXPECT_EQ(f.step, 10 * k);
    EXPECT_EQ(f.group, QueryGroup::factual);
    EXPECT_EQ(l.group, QueryGroup::late_site);
    EXPECT_NEAR(f.lower_mlp, (lower[0] + lower[2]) / 2, 1e-9);
    EXPECT_NEAR(f.upper_attn, (upper[0] + upper[2]) / 2, 1e-9);
    EXPECT_NEAR(l.lower_mlp, lower[1], 1e-9);
    EXPECT_NEAR(l.upper_attn, upper[1], 1e-9);
  }
  for (std::size_t i = 1; i < traj.points.size(); ++i) EXPECT_LE(traj.points[i - 1].step, traj.points[i].step);
}

TEST_F(TrajectoryTest, UnreadableCheckpointsAreSkippedAndIdenticalWeightsAgree) {
  auto c = small_config(2, 8, 2, 23);
  auto w = scrambled<float>(c);
  write_checkpoint(dir, 1, w);
  write_checkpoint(dir, 2, w);
  {
    std::ofstream bad(dir / checkpoint_filename(3), std::ios::binary);
    bad << "not a checkpoint";
  }
  std::vector<HallucinationQuery> qs{query(0, {4, 9, 2, 6}, 0, 1, 7)};
  auto traj = checkpoint_trajectory(dir, qs, {QueryGroup::early_site});
  ASSERT_EQ(traj.skipped.size(), 1u);
  EXPECT_EQ(traj.skipped[0].path.filename(), checkpoint_filename(3));
  ASSERT_EQ(traj.points.size(), 2u);
  EXPECT_EQ(traj.points[0].lower_mlp, traj.points[1].lower_mlp);
  EXPECT_EQ(traj.points[0].upper_attn, traj.points[1].upper_attn);
  // A single checkpoint reduces its group profile.
  Transformer<float> m(w);
  auto prof = group_esp_profile(query_esps(m, qs), {QueryGroup::early_site}, SiteKind::mlp_out);
  EXPECT_NEAR(traj.points[0].lower_mlp, prof.profiles[0].mean[0], 1e-12);
}
