#include <gtest/gtest.h>

#include <random>

#include "hallucitrace/autodiff.hpp"
#include "support/gradcheck.hpp"

using namespace hallucitrace;

namespace {

Parameter<double> random_param(const std::string& name, Shape shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n(0.0, sd);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = n(gen);
  return Parameter<double>(name, std::move(t));
}

// Runs `build` with gradients, then checks every coordinate against finite differences.
double max_op_error(std::vector<Parameter<double>>& params,
                    const std::function<Var<double>(std::vector<Var<double>>&)>& build) {
  for (auto& p : params) p.reset_grad();
  {
    std::vector<Var<double>> vars;
    for (auto& p : params) vars.push_back(Var<double>::parameter(p));
    backward(build(vars));
  }
  std::vector<gradcheck::Coordinate> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params[i].value.size(); ++j) coords.push_back({i, j});
  auto loss = [&] {
    NoGradGuard ng;
    std::vector<Var<double>> vars;
    for (auto& p : params) vars.push_back(Var<double>::constant(p.value));
    return build(vars).value()[0];
  };
  return gradcheck::check(params, coords, loss, 1e-5, 1e-6).max_relative_error;
}

}  // namespace

TEST(BackwardTest, SumOfSquaresGivesTwiceTheWeights) {
  auto w = random_param("w", {3, 4}, 1);
  backward(sum_squares(Var<double>::parameter(w)));
  for (std::size_t i = 0; i < w.value.size(); ++i) EXPECT_DOUBLE_EQ(w.grad[i], 2 * w.value[i]);
}

TEST(BackwardTest, UnusedParameterGetsZeroGradient) {
  auto w = random_param("w", {5}, 2);
  auto v = random_param("v", {5}, 3);
  auto wv = Var<double>::parameter(w);
  backward(sum_squares(Var<double>::parameter(v)));
  for (double g : w.grad.data()) EXPECT_EQ(g, 0.0);
  (void)wv;
}

TEST(BackwardTest, GradientsAccumulateAcrossCalls) {
  auto w = random_param("w", {4}, 4);
  backward(sum(Var<double>::parameter(w)));
  backward(sum(Var<double>::parameter(w)));
  for (double g : w.grad.data()) EXPECT_DOUBLE_EQ(g, 2.0);
  w.reset_grad();
  for (double g : w.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(BackwardTest, WithoutForwardIsStateError) {
  EXPECT_THROW(backward(Var<double>{}), StateError);
  EXPECT_THROW(backward(Var<double>::constant(Tensor<double>({1}, 2.0))), StateError);
  auto w = random_param("w", {3}, 5);
  {
    NoGradGuard ng;
    auto loss = sum_squares(Var<double>::parameter(w));
    EXPECT_THROW(backward(loss), StateError);
  }
}

TEST(BackwardTest, NonScalarLossIsRejected) {
  auto w = random_param("w", {2, 2}, 6);
  EXPECT_THROW(backward(gelu(Var<double>::parameter(w))), DimensionError);
}

TEST(OpGradientTest, MatmulAndBias) {
  std::vector<Parameter<double>> ps{random_param("a", {3, 4}, 10), random_param("b", {4, 5}, 11),
                                    random_param("c", {5}, 12)};
  auto err = max_op_error(ps, [](auto& v) { return sum_squares(add_row_bias(matmul(v[0], v[1]), v[2])); });
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradientTest, TransposedProduct) {
  std::vector<Parameter<double>> ps{random_param("a", {2, 4}, 13), random_param("b", {6, 4}, 14)};
  auto err = max_op_error(ps, [](auto& v) { return sum_squares(matmul_nt(v[0], v[1])); });
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradientTest, LayerNormGelu) {
  std::vector<Parameter<double>> ps{random_param("x", {3, 6}, 15), random_param("g", {6}, 16),
                                    random_param("b", {6}, 17), random_param("w", {3, 6}, 18)};
  auto err = max_op_error(ps, [](auto& v) {
    auto y = gelu(layer_norm(v[0], v[1], v[2], 1e-5));
    return dot(y, v[3]);
  });
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradientTest, EmbeddingRowsAndReplace) {
  std::vector<Parameter<double>> ps{random_param("table", {5, 3}, 19), random_param("w", {4, 3}, 20)};
  auto err = max_op_error(ps, [](auto& v) {
    auto e = embedding(v[0], {4, 1, 4, 0});
    std::vector<double> patch{0.5, -0.5, 1.0};
    auto patched = replace_row(e, 2, std::span<const double>(patch));
    return dot(patched, v[1]) + sum_squares(select_rows(e, {3, 0})) + sum(select_row(e, 1));
  });
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradientTest, CrossEntropyAndLogProb) {
  std::vector<Parameter<double>> ps{random_param("logits", {3, 7}, 21)};
  auto err = max_op_error(ps, [](auto& v) {
    return cross_entropy(v[0], {1, 6, 0}) + scale(log_prob(select_row(v[0], 2), 3), 2.0) -
           log_prob(select_row(v[0], 1), 5);
  });
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradientTest, CausalAttentionOverPackedSegments) {
  std::vector<Parameter<double>> ps{random_param("q", {7, 8}, 22), random_param("k", {7, 8}, 23),
                                    random_param("v", {7, 8}, 24), random_param("w", {7, 8}, 25)};
  auto err = max_op_error(ps, [](auto& v) {
    auto att = causal_attention(v[0], v[1], v[2], 2, {0, 3, 7});
    return dot(att.output, v[3]);
  });
  EXPECT_LT(err, 1e-6);
}

TEST(AttentionTest, WeightsAreCausalAndNormalized) {
  auto q = random_param("q", {5, 4}, 30), k = random_param("k", {5, 4}, 31), v = random_param("v", {5, 4}, 32);
  auto att = causal_attention(Var<double>::constant(q.value), Var<double>::constant(k.value),
                              Var<double>::constant(v.value), 2, {0, 2, 5});
  const std::size_t starts[] = {0, 0, 2, 2, 2};
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& w = (*att.weights)[h * 5 + i];
      EXPECT_EQ(w.size(), i - starts[i] + 1);
      double s = 0;
      for (double x : w) s += x;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  // The first row of each sequence attends only to itself, so it copies v.
  EXPECT_DOUBLE_EQ(att.output.value()(2, 0), v.value(2, 0));
}
