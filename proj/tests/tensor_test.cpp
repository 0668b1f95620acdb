#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hallucitrace/tensor.hpp"

using namespace hallucitrace;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n;
  Tensor<double> t({r, c});
  for (auto& v : t.data()) v = n(gen);
  return t;
}

// Independent triple loop, i-j-k order.
Tensor<double> naive_product(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(TensorTest, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(Tensor<float>({0, 3}), DimensionError);
  Tensor<float> t({2, 3}, std::vector<float>(6, 1.f));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(MatmulTest, IdentityLeavesMatrixUnchanged) {
  auto x = Tensor<double>::matrix({{1, 2, 3}, {4, 5, 6}});
  auto eye = Tensor<double>::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(matmul(eye, x), x);
}

TEST(MatmulTest, HandArithmetic) {
  auto a = Tensor<double>::matrix({{1, 2}, {3, 4}});
  auto b = Tensor<double>::matrix({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Tensor<double>::matrix({{2}, {4}}));
}

TEST(MatmulTest, MatchesNaiveTripleLoop) {
  auto a = random_matrix(8, 8, 11);
  auto b = random_matrix(8, 8, 12);
  auto c = matmul(a, b);
  auto oracle = naive_product(a, b);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], oracle[i], 1e-6);
}

TEST(MatmulTest, OddShapesAndFloatAgreeWithOracle) {
  // Exercises both the four-row tiles and the remainder rows/columns.
  auto a = random_matrix(7, 13, 3);
  auto b = random_matrix(13, 150, 4);
  auto c = matmul(a.cast<float>(), b.cast<float>());
  auto oracle = naive_product(a, b);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], oracle[i], 1e-4);
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
  Tensor<float> a({2, 3}), b({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(MatmulTest, RowsAreIndependentOfBatchComposition) {
  // A row's result must not depend on which other rows share the call.
  auto a = random_matrix(9, 32, 5).cast<float>();
  auto b = random_matrix(32, 70, 6).cast<float>();
  auto full = matmul(a, b);
  for (std::size_t r = 0; r < 9; ++r) {
    Tensor<float> one({1, 32}, std::vector<float>(a.row(r).begin(), a.row(r).end()));
    auto single = matmul(one, b);
    for (std::size_t j = 0; j < 70; ++j) EXPECT_EQ(single[j], full(r, j));
  }
}

TEST(MatmulTest, TransposedVariantsAgree) {
  auto a = random_matrix(5, 6, 7);
  auto b = random_matrix(4, 6, 8);
  auto nt = matmul_nt(a, b);
  auto ref = naive_product(a, transpose(b));
  for (std::size_t i = 0; i < nt.size(); ++i) EXPECT_NEAR(nt[i], ref[i], 1e-12);
  auto c = random_matrix(5, 3, 9);
  auto tn = matmul_tn(a, c);
  auto ref2 = naive_product(transpose(a), c);
  for (std::size_t i = 0; i < tn.size(); ++i) EXPECT_NEAR(tn[i], ref2[i], 1e-12);
}

TEST(SoftmaxTest, UniformLogitsGiveUniformDistribution) {
  Tensor<double> x({1, 5}, 3.0);
  auto p = softmax(x);
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(SoftmaxTest, LargeLogitIsNearlyOneHot) {
  auto x = Tensor<double>::vector({0.0, 1000.0, -5.0});
  auto p = softmax(x, 0);
  EXPECT_NEAR(p[1], 1.0, 1e-12);
  EXPECT_NEAR(p[0], 0.0, 1e-12);
}

TEST(SoftmaxTest, MatchesExpNormalizeOracle) {
  auto x = Tensor<double>::vector({0.0, 1.0, 2.0});
  auto p = softmax(x, 0);
  const double z = 1.0 + std::exp(1.0) + std::exp(2.0);
  EXPECT_NEAR(p[0], 1.0 / z, 1e-9);
  EXPECT_NEAR(p[1], std::exp(1.0) / z, 1e-9);
  EXPECT_NEAR(p[2], std::exp(2.0) / z, 1e-9);
}

TEST(SoftmaxTest, SlicesSumToOneAndKeepArgmaxOnRandomInputs) {
  std::mt19937_64 gen(99);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<float> x({3, 17});
    for (auto& v : x.data()) v = static_cast<float>(n(gen));
    for (std::size_t axis : {0u, 1u}) {
      auto p = softmax(x, axis);
      if (axis == 1) {
        for (std::size_t r = 0; r < 3; ++r) {
          double s = 0;
          for (float v : p.row(r)) s += v;
          EXPECT_NEAR(s, 1.0, 1e-6);
          EXPECT_EQ(argmax<float>(p.row(r)), argmax<float>(x.row(r)));
        }
      } else {
        for (std::size_t c = 0; c < 17; ++c) {
          double s = 0;
          for (std::size_t r = 0; r < 3; ++r) s += p(r, c);
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
      }
    }
  }
}

TEST(LayerNormTest, ConstantRowCollapsesToZero) {
  Tensor<double> x({1, 4}, 7.5);
  Tensor<double> g({4}, 1.0), b({4}, 0.0);
  auto y = layer_norm(x, g, b, 1e-5);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNormTest, StandardizedRowIsUnchangedUpToEps) {
  auto x = Tensor<double>::matrix({{-1.0, 1.0, -1.0, 1.0}});
  Tensor<double> g({4}, 1.0), b({4}, 0.0);
  auto y = layer_norm(x, g, b, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(LayerNormTest, MatchesMeanVarianceOracle) {
  auto x = random_matrix(3, 10, 21);
  auto g = random_matrix(1, 10, 22).reshaped({10});
  auto b = random_matrix(1, 10, 23).reshaped({10});
  auto y = layer_norm(x, g, b, 1e-5);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, sq = 0;
    for (std::size_t j = 0; j < 10; ++j) mean += x(r, j) / 10.0;
    for (std::size_t j = 0; j < 10; ++j) sq += (x(r, j) - mean) * (x(r, j) - mean) / 10.0;
    for (std::size_t j = 0; j < 10; ++j) {
      EXPECT_NEAR(y(r, j), (x(r, j) - mean) / std::sqrt(sq + 1e-5) * g[j] + b[j], 1e-6);
    }
  }
}

TEST(EntropyTest, OneHotIsZero) {
  std::vector<double> p{0, 1, 0, 0};
  EXPECT_DOUBLE_EQ(entropy<double>(p), 0.0);
}

TEST(EntropyTest, UniformIsLogOfSupport) {
  std::vector<double> p(37, 1.0 / 37);
  EXPECT_NEAR(entropy<double>(p), std::log(37.0), 1e-12);
}

TEST(EntropyTest, HandEvaluatedDistribution) {
  std::vector<double> p{0.5, 0.25, 0.25};
  EXPECT_NEAR(entropy<double>(p), 1.0397, 1e-4);
}

TEST(EntropyTest, RejectsNonDistributions) {
  std::vector<double> bad{0.5, 0.6};
  EXPECT_THROW(entropy<double>(bad), DomainError);
  std::vector<double> neg{1.5, -0.5};
  EXPECT_THROW(entropy<double>(neg), DomainError);
}

TEST(EntropyTest, AcceptsFloatSoftmaxOverLargeVocabulary) {
  std::mt19937_64 gen(12);
  std::normal_distribution<float> n(0.0f, 4.0f);
  std::vector<float> logits(2500);
  for (auto& v : logits) v = n(gen);
  const auto p = softmax(Tensor<float>({logits.size()}, logits), 0).storage();
  EXPECT_NO_THROW(entropy<float>(p));
  std::vector<float> off(p);
  off[0] += 0.01f;
  EXPECT_THROW(entropy<float>(off), DomainError);
}

TEST(TopKTest, OrderAndTieBreaking) {
  std::vector<double> v{1, 5, 3, 5, 0};
  auto idx = top_k<double>(v, 3);
  ASSERT_EQ(idx.size(), 3u);
  EXPECT_EQ(idx[0], 1u);
  EXPECT_EQ(idx[1], 3u);
  EXPECT_EQ(idx[2], 2u);
  EXPECT_EQ(rank_of<double>(v, 3), 2u);
  EXPECT_EQ(rank_of<double>(v, 4), 5u);
}

TEST(CrossEntropyTest, MatchesLogSoftmax) {
  auto logits = Tensor<double>::matrix({{0.0, 1.0, 2.0}, {3.0, 0.0, 0.0}});
  std::vector<std::size_t> targets{2, 1};
  const auto l0 = log_softmax<double>(logits.row(0));
  const auto l1 = log_softmax<double>(logits.row(1));
  EXPECT_NEAR(cross_entropy(logits, targets), -(l0[2] + l1[1]) / 2.0, 1e-12);
}

TEST(CheckedModeTest, NonFiniteOutputThrows) {
  CheckedModeGuard guard(true);
  auto a = Tensor<double>::matrix({{1e308}});
  auto b = Tensor<double>::matrix({{1e308}});
  EXPECT_THROW(matmul(a, b), NumericError);
}

TEST(GeluTest, DerivativeMatchesFiniteDifference) {
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double h = 1e-6;
    const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    EXPECT_NEAR(gelu_derivative(x), fd, 1e-8);
  }
}

TEST(EmbeddingGatherTest, OutOfRangeIdThrows) {
  Tensor<float> table({3, 2});
  std::vector<std::size_t> ids{0, 3};
  EXPECT_THROW(embedding_gather(table, ids), DomainError);
}
