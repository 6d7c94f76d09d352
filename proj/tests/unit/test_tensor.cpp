#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "hybrid/tensor.hpp"

using namespace hyb;
using gradcheck::random_tensor;
using gradcheck::weighted_sum;

namespace {

Tensor<double> away_from_zero(Shape s, Rng& rng) {
  Tensor<double> t = random_tensor(s, rng);
  for (double& v : t.data()) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

}  // namespace

TEST(Tensor, ConstructionAndAccess) {
  auto t = Tensor<float>::zeros({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  t.at(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t.data()[119], 7.0f);
  EXPECT_THROW(Tensor<float>::from_data({1, 1, 2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_EQ(Tensor<float>::scalar(3.0f).item(), 3.0f);
}

TEST(Tensor, BroadcastAddMul) {
  auto a = Tensor<double>::from_data({2, 1, 1, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from_data({1, 1, 1, 2}, {10, 20});
  auto s = add(a, b);
  EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()), (std::vector<double>{11, 22, 13, 24}));
  auto m = mul(a, b);
  EXPECT_EQ(std::vector<double>(m.data().begin(), m.data().end()), (std::vector<double>{10, 40, 30, 80}));
  EXPECT_THROW(add(a, Tensor<double>::zeros({1, 1, 1, 3})), ShapeError);
}

TEST(Tensor, BackwardRequiresScalar) {
  auto a = Tensor<double>::zeros({1, 1, 2, 2}, true);
  EXPECT_THROW(relu(a).backward(), ShapeError);
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  auto a = Tensor<double>::from_data({1, 1, 1, 2}, {1, 2}, true);
  sum(scale(a, 3.0)).backward();
  sum(scale(a, 3.0)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 6.0);
  a.zero_grad();
  EXPECT_DOUBLE_EQ(a.grad()[1], 0.0);
}

TEST(Tensor, NoGradGuardSkipsTape) {
  auto a = Tensor<double>::from_data({1, 1, 1, 1}, {2}, true);
  NoGradGuard g;
  auto b = scale(a, 2.0);
  EXPECT_FALSE(b.requires_grad());
}

TEST(Tensor, SharedSubexpressionGradient) {
  // f = sum(a * a + a): df/da = 2a + 1
  auto a = Tensor<double>::from_data({1, 1, 1, 3}, {1, -2, 0.5}, true);
  sum(add(mul(a, a), a)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], -3.0);
  EXPECT_DOUBLE_EQ(a.grad()[2], 2.0);
}

TEST(Tensor, GeluMatchesErfForm) {
  auto a = Tensor<double>::from_data({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
  auto g = gelu(a);
  for (std::size_t i = 0; i < 3; ++i) {
    const double x = a.data()[i];
    EXPECT_NEAR(g.data()[i], 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Tensor, AbsSubgradientAtZeroIsZero) {
  auto a = Tensor<double>::from_data({1, 1, 1, 3}, {0.0, -2.0, 3.0}, true);
  sum(abs(a)).backward();
  EXPECT_EQ(a.grad()[0], 0.0);
  EXPECT_EQ(a.grad()[1], -1.0);
  EXPECT_EQ(a.grad()[2], 1.0);
}

TEST(Tensor, SoftmaxRowsAreStochasticAndShiftInvariant) {
  Rng rng(3);
  auto a = random_tensor({2, 1, 3, 5}, rng, -4, 4);
  auto p = softmax_rows(a);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_GE(p.data()[r * 5 + c], 0.0);
      s += p.data()[r * 5 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto shifted = add(a, Tensor<double>::full({1, 1, 3, 5}, 100.0));
  auto q = softmax_rows(shifted);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p.data()[i], q.data()[i], 1e-12);
}

TEST(Tensor, SoftmaxMaskedKeysGetZeroWeight) {
  auto a = Tensor<double>::from_data({1, 1, 1, 3}, {1.0, 5.0, 2.0});
  KeyMask m{{1, 0, 1}, 3};
  auto p = softmax_rows(a, &m);
  EXPECT_EQ(p.data()[1], 0.0);
  EXPECT_NEAR(p.data()[0], std::exp(1.0) / (std::exp(1.0) + std::exp(2.0)), 1e-14);
}

TEST(Tensor, SoftmaxRejectsNonFinite) {
  auto a = Tensor<double>::from_data({1, 1, 1, 2}, {1.0, std::nan("")});
  EXPECT_THROW(softmax_rows(a), NumericError);
}

TEST(Tensor, LogSoftmaxNll) {
  auto a = Tensor<double>::from_data({2, 1, 1, 2}, {0.0, 0.0, 10.0, 0.0});
  auto l = nll_rows(log_softmax_rows(a), {0, 1});
  const double expected = 0.5 * (std::log(2.0) + (10.0 + std::log1p(std::exp(-10.0))));
  EXPECT_NEAR(l.item(), expected, 1e-12);
  EXPECT_THROW(nll_rows(log_softmax_rows(a), {0, 2}), std::invalid_argument);
}

TEST(Tensor, SliceCropReshapeValues) {
  auto a = Tensor<double>::zeros({1, 3, 3, 3});
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = static_cast<double>(i);
  auto s = slice_channels(a, 1, 2);
  EXPECT_EQ(s.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(s.data()[0], 9.0);
  auto c = crop(a, 2, 2);
  EXPECT_EQ(c.shape(), (Shape{1, 3, 2, 2}));
  EXPECT_EQ(c.data()[3], 4.0);
  EXPECT_THROW(reshape(a, Shape{1, 1, 1, 5}), ShapeError);
}

// ---- finite-difference checks for every elementwise / structural op ----

struct OpCase {
  const char* name;
  std::function<Tensor<double>(const Tensor<double>&)> f;
  bool away_from_kinks;
};

class UnaryGrad : public ::testing::TestWithParam<OpCase> {};

TEST_P(UnaryGrad, MatchesFiniteDifferences) {
  const OpCase& op = GetParam();
  Rng rng(17);
  Tensor<double> x = op.away_from_kinks ? away_from_zero({2, 3, 4, 5}, rng) : random_tensor({2, 3, 4, 5}, rng);
  auto rep = gradcheck::check({{"x", x}}, [&] { return weighted_sum(op.f(x), 99); }, 25, 5);
  EXPECT_TRUE(rep.all_ok()) << op.name << ": " << rep.first_failure();
  EXPECT_GE(rep.coords.size(), 20u);
}

INSTANTIATE_TEST_SUITE_P(
    Ops, UnaryGrad,
    ::testing::Values(OpCase{"relu", [](const Tensor<double>& x) { return relu(x); }, true},
                      OpCase{"gelu", [](const Tensor<double>& x) { return gelu(x); }, false},
                      OpCase{"abs", [](const Tensor<double>& x) { return abs(x); }, true},
                      OpCase{"scale", [](const Tensor<double>& x) { return scale(x, -1.7); }, false},
                      OpCase{"mean", [](const Tensor<double>& x) { return mean(x); }, false},
                      OpCase{"reshape", [](const Tensor<double>& x) { return reshape(x, Shape{2, 1, 12, 5}); }, false},
                      OpCase{"slice", [](const Tensor<double>& x) { return slice_channels(x, 1, 3); }, false},
                      OpCase{"crop", [](const Tensor<double>& x) { return crop(x, 3, 2); }, false},
                      OpCase{"softmax", [](const Tensor<double>& x) { return softmax_rows(x); }, false},
                      OpCase{"softmax_masked",
                             [](const Tensor<double>& x) {
                               KeyMask m{std::vector<unsigned char>(2 * 5, 1), 5};
                               m.keep[3] = 0;
                               m.keep[9] = 0;
                               return softmax_rows(x, &m);
                             },
                             false},
                      OpCase{"log_softmax", [](const Tensor<double>& x) { return log_softmax_rows(x); }, false},
                      OpCase{"layer_norm", [](const Tensor<double>& x) { return channel_layer_norm(x); }, false}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(TensorGrad, BinaryOpsWithBroadcast) {
  Rng rng(4);
  auto a = random_tensor({3, 2, 2, 2}, rng);
  auto b = random_tensor({1, 2, 2, 2}, rng);
  auto rep = gradcheck::check({{"a", a}, {"b", b}}, [&] { return weighted_sum(add(mul(a, b), b), 1); }, 24, 9);
  EXPECT_TRUE(rep.all_ok()) << rep.first_failure();
}

TEST(TensorGrad, NllOfLogSoftmax) {
  Rng rng(8);
  auto a = random_tensor({4, 1, 1, 3}, rng, -2, 2);
  auto rep = gradcheck::check({{"a", a}}, [&] { return nll_rows(log_softmax_rows(a), {0, 2, 1, 1}); }, 12, 3);
  EXPECT_TRUE(rep.all_ok()) << rep.first_failure();
}
