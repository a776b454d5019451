#include <gtest/gtest.h>

#include <cmath>

#include "davit/gradcheck.hpp"
#include "davit/ops.hpp"
#include "davit/optim.hpp"
#include "oracles.hpp"

using namespace davit;
using davit::testing::random_tensor;

namespace {

ConvSpec same_spec(int k, int r = 1, int groups = 1, int stride = 1) {
  ConvSpec s;
  s.kernel_h = s.kernel_w = k;
  s.dilation = r;
  s.groups = groups;
  s.stride = stride;
  return s;
}

}  // namespace

TEST(Conv2d, IdentityKernelReturnsInput) {
  Tensor x = random_tensor({2, 1, 5, 7}, 1);
  Tensor w = Tensor::ones({1, 1, 1, 1});
  Tensor y = ops::conv2d(x, w, same_spec(1));
  ASSERT_EQ(y.shape(), x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, OnesKernelSamePaddingCountsWindow) {
  Tensor y = ops::conv2d(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}), same_spec(3));
  EXPECT_EQ(y.at({0, 0, 1, 1}), 9.0);
  EXPECT_EQ(y.at({0, 0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({0, 0, 2, 2}), 4.0);
  EXPECT_EQ(y.at({0, 0, 0, 1}), 6.0);
}

TEST(Conv2d, DilatedMatchesZeroInflatedNaive) {
  uint64_t seed = 10;
  for (int k : {3, 5, 7}) {
    for (int r : {1, 2, 3}) {
      Tensor x = random_tensor({2, 3, 11, 9}, seed++);
      Tensor w = random_tensor({4, 3, k, k}, seed++);
      Tensor y = ops::conv2d(x, w, same_spec(k, r));
      auto ref = davit::testing::dilated_conv_oracle(x, w, 1, r);
      EXPECT_LE(davit::testing::max_abs_diff(y.data(), ref), 1e-12) << "k=" << k << " r=" << r;
    }
  }
}

TEST(Conv2d, DepthwiseMatchesNaive) {
  Tensor x = random_tensor({1, 4, 10, 10}, 3);
  Tensor w = random_tensor({4, 1, 5, 5}, 4);
  Tensor y = ops::conv2d(x, w, same_spec(5, 2, 4));
  auto ref = davit::testing::dilated_conv_oracle(x, w, 4, 2);
  EXPECT_LE(davit::testing::max_abs_diff(y.data(), ref), 1e-12);
}

TEST(Conv2d, StridedBiasedMatchesNaive) {
  Tensor x = random_tensor({2, 3, 13, 10}, 5);
  Tensor w = random_tensor({6, 3, 7, 7}, 6);
  Tensor b = random_tensor({6}, 7);
  ConvSpec spec = same_spec(7, 1, 1, 4);
  Tensor y = ops::conv2d(x, w, &b, spec);
  ASSERT_EQ(y.shape(), (Shape{2, 6, 4, 3}));
  // ceil(13/4)=4: total pad = 3*4+7-13 = 6 -> top 3; ceil(10/4)=3: 2*4+7-10 = 5 -> left 2.
  auto ref = davit::testing::naive_conv({x.data().begin(), x.data().end()}, 2, 3, 13, 10,
                                        {w.data().begin(), w.data().end()}, 6, 7, 7, 1, 4, 3, 2, 4, 3);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 6; ++c)
      for (int64_t i = 0; i < 12; ++i) ref[static_cast<size_t>((n * 6 + c) * 12 + i)] += b.data()[c];
  EXPECT_LE(davit::testing::max_abs_diff(y.data(), ref), 1e-12);
}

TEST(Conv2d, ExplicitPadding) {
  ConvSpec spec = same_spec(3);
  spec.padding = Padding::explicit_pad(0);
  Tensor y = ops::conv2d(Tensor::ones({1, 1, 5, 5}), Tensor::ones({1, 1, 3, 3}), spec);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 9.0);
}

TEST(Conv2d, Linearity) {
  Tensor x = random_tensor({1, 2, 8, 8}, 11);
  Tensor z = random_tensor({1, 2, 8, 8}, 12);
  Tensor w = random_tensor({3, 2, 5, 5}, 13);
  const double a = 0.7, b = -1.3;
  auto spec = same_spec(5, 3);
  Tensor lhs = ops::conv2d(ops::add(ops::scale(x, a), ops::scale(z, b)), w, spec);
  Tensor rhs = ops::add(ops::scale(ops::conv2d(x, w, spec), a), ops::scale(ops::conv2d(z, w, spec), b));
  EXPECT_LE(davit::testing::max_abs_diff(lhs.data(), rhs.data()), 1e-10);
}

TEST(Conv2d, SamePaddingPreservesShapeForDcsaPairs) {
  for (auto [k, r] : {std::pair{5, 1}, {3, 1}, {5, 2}, {7, 3}, {9, 3}, {4, 2}}) {
    Tensor y = ops::conv2d(Tensor::ones({1, 2, 9, 6}), Tensor::ones({2, 1, k, k}), same_spec(k, r, 2));
    EXPECT_EQ(y.shape(), (Shape{1, 2, 9, 6})) << k << "," << r;
  }
}

TEST(Conv2d, EvenKernelPutsExtraPadBottomRight) {
  // k=2: total pad 1 -> top 0, bottom 1. Output(y) = x(y) + x(y+1).
  Tensor x = Tensor::from_data({1, 1, 1, 3}, {1, 2, 3});
  ConvSpec spec;
  spec.kernel_h = 1;
  spec.kernel_w = 2;
  Tensor y = ops::conv2d(x, Tensor::ones({1, 1, 1, 2}), spec);
  EXPECT_EQ(y.data()[0], 3.0);
  EXPECT_EQ(y.data()[1], 5.0);
  EXPECT_EQ(y.data()[2], 3.0);
}

TEST(Conv2d, RejectsMismatchedChannelsNamingAxis) {
  Tensor x = Tensor::ones({1, 3, 4, 4});
  Tensor w = Tensor::ones({2, 2, 3, 3});
  try {
    ops::conv2d(x, w, same_spec(3));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ops::conv2d(Tensor::ones({1, 3, 4, 4}), Tensor::ones({3, 1, 3, 3}), same_spec(3, 1, 2)),
               ShapeError);
  EXPECT_THROW(ops::conv2d(Tensor::ones({1, 4, 4, 4}), Tensor::ones({3, 2, 3, 3}), same_spec(3, 1, 2)),
               ShapeError);
  ConvSpec bad = same_spec(3);
  bad.dilation = 0;
  EXPECT_THROW(ops::conv2d(Tensor::ones({1, 2, 4, 4}), Tensor::ones({2, 2, 3, 3}), bad), ShapeError);
}

TEST(Conv2d, FlopCounterMatchesFormula) {
  ConvFlopCounter::reset();
  ConvFlopCounter::set_enabled(true);
  ops::conv2d(Tensor::ones({1, 3, 4, 4}), Tensor::ones({5, 3, 1, 1}), same_spec(1));
  ConvFlopCounter::set_enabled(false);
  EXPECT_EQ(ConvFlopCounter::value(), 480);
}

TEST(Elementwise, Examples) {
  Tensor x = random_tensor({2, 3}, 21);
  Tensor y = ops::mul(x, Tensor::ones({2, 3}));
  for (int64_t i = 0; i < 6; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  Tensor z = ops::add(x, 0.0);
  for (int64_t i = 0; i < 6; ++i) EXPECT_EQ(z.data()[i], x.data()[i]);
  Tensor p = ops::mul(Tensor::from_data({2, 2}, {1, 2, 3, 4}), Tensor::from_data({2, 2}, {2, 0, 0, 2}));
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{2, 0, 0, 8}));
}

TEST(Elementwise, BroadcastsUnitAxes) {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({1, 3}, {10, 20, 30});
  Tensor c = ops::add(a, b);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  Tensor col = Tensor::from_data({2, 1}, {2, 3});
  Tensor d = ops::mul(a, col);
  EXPECT_EQ(std::vector<double>(d.data().begin(), d.data().end()), (std::vector<double>{2, 4, 6, 12, 15, 18}));
  Tensor e = ops::mul(a, Tensor::scalar(2.0));
  EXPECT_EQ(e.data()[5], 12.0);
  EXPECT_THROW(ops::add(a, Tensor::ones({2, 2})), ShapeError);
}

TEST(LayerNorm, Examples) {
  Tensor gamma = Tensor::ones({2}), beta = Tensor::zeros({2});
  Tensor c = ops::layer_norm(Tensor::full({1, 2, 2, 2}, 3.5), gamma, beta);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);

  Tensor b = Tensor::from_data({2}, {0.25, -4.0});
  Tensor g0 = ops::layer_norm(random_tensor({1, 2, 3, 3}, 31), Tensor::zeros({2}), b);
  for (int64_t i = 0; i < 9; ++i) EXPECT_EQ(g0.data()[i], 0.25);
  for (int64_t i = 9; i < 18; ++i) EXPECT_EQ(g0.data()[i], -4.0);

  Tensor pair = ops::layer_norm(Tensor::from_data({1, 2, 1, 1}, {1, 3}), gamma, beta, 1e-12);
  EXPECT_NEAR(pair.data()[0], -1.0, 1e-10);
  EXPECT_NEAR(pair.data()[1], 1.0, 1e-10);

  EXPECT_THROW(ops::layer_norm(Tensor::ones({1, 2, 1, 1}), gamma, beta, 0.0), std::invalid_argument);
  EXPECT_THROW(ops::layer_norm(Tensor::ones({1, 3, 1, 1}), gamma, beta), ShapeError);
}

TEST(Gelu, Examples) {
  Tensor y = ops::gelu(Tensor::from_data({3}, {0.0, 10.0, -10.0}));
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 10.0, 1e-6);
  EXPECT_NEAR(y.data()[2], 0.0, 1e-6);
  // x * Phi(x) at x = 1.
  EXPECT_NEAR(ops::gelu(Tensor::scalar(1.0)).item(), 0.8413447460685429, 1e-15);
}

TEST(BilinearUpsample, Examples) {
  Tensor x = random_tensor({1, 2, 3, 4}, 41);
  Tensor same = ops::bilinear_upsample(x, 1);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same.data()[i], x.data()[i]);

  Tensor c = ops::bilinear_upsample(Tensor::full({1, 1, 2, 3}, 1.75), 4);
  ASSERT_EQ(c.shape(), (Shape{1, 1, 8, 12}));
  for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 1.75);

  Tensor line = ops::bilinear_upsample(Tensor::from_data({1, 1, 1, 2}, {0, 2}), 2);
  ASSERT_EQ(line.shape(), (Shape{1, 1, 2, 4}));
  const std::vector<double> expected{0, 0.5, 1.5, 2};
  for (int row = 0; row < 2; ++row)
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(line.data()[row * 4 + i], expected[i]);

  EXPECT_THROW(ops::bilinear_upsample(x, 0), std::invalid_argument);
}

TEST(CrossEntropy, Examples) {
  IndexMap t(1, 2, 2, 1);
  Tensor uniform = Tensor::zeros({1, 5, 2, 2});
  EXPECT_NEAR(ops::softmax_cross_entropy(uniform, t).item(), std::log(5.0), 1e-15);

  Tensor margin = Tensor::zeros({1, 3, 2, 2});
  for (int p = 0; p < 4; ++p) margin.mutable_data()[4 + p] = 50.0;
  EXPECT_LT(ops::softmax_cross_entropy(margin, t).item(), 1e-10);

  IndexMap ignored(1, 2, 2, 255);
  Tensor logits = random_tensor({1, 3, 2, 2}, 51, true);
  Tensor loss = ops::softmax_cross_entropy(logits, ignored, 255);
  EXPECT_EQ(loss.item(), 0.0);
  loss.backward();
  for (double g : logits.grad()) EXPECT_EQ(g, 0.0);

  IndexMap bad(1, 2, 2, 3);
  EXPECT_THROW(ops::softmax_cross_entropy(Tensor::zeros({1, 3, 2, 2}), bad), std::out_of_range);
  EXPECT_THROW(ops::softmax_cross_entropy(Tensor::zeros({1, 3, 2, 3}), t), ShapeError);
}

TEST(Backward, PolynomialExamples) {
  Tensor x = random_tensor({3, 4}, 61, true);
  ops::sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  x.zero_grad();
  ops::sum(ops::mul(x, x)).backward();
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
}

TEST(Backward, AccumulatesAcrossCallsAndReleasesGraph) {
  Tensor x = random_tensor({4}, 62, true);
  Tensor loss = ops::sum(x);
  loss.backward();
  EXPECT_THROW(loss.backward(), GraphError);
  ops::sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, SharedReleasedSubgraphIsAnError) {
  Tensor x = random_tensor({4}, 63, true);
  Tensor h = ops::mul(x, x);
  ops::sum(h).backward();
  EXPECT_THROW(ops::sum(h).backward(), GraphError);
}

TEST(Backward, RejectsNonScalarAndUntracked) {
  Tensor x = random_tensor({4}, 64, true);
  EXPECT_THROW(ops::mul(x, x).backward(), GraphError);
  EXPECT_THROW(ops::sum(Tensor::ones({2})).backward(), GraphError);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor x = random_tensor({4}, 65, true);
  NoGradGuard guard;
  Tensor y = ops::sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Adam, ZeroLearningRateLeavesParams) {
  Tensor p = random_tensor({5}, 71, true);
  auto before = std::vector<double>(p.data().begin(), p.data().end());
  ops::sum(ops::mul(p, p)).backward();
  AdamState st;
  std::vector<Tensor> params{p};
  adam_step(params, st, {.lr = 0.0});
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), before);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::scalar(0.5, true);
  ops::sum(p).backward();  // grad = 1
  AdamState st;
  std::vector<Tensor> params{p};
  adam_step(params, st, {.lr = 1e-3});
  EXPECT_NEAR(0.5 - p.item(), 1e-3, 1e-3 * 1e-7);  // eps in the denominator
}

TEST(Adam, ZeroGradientLeavesParams) {
  Tensor p = random_tensor({3}, 72, true);
  auto before = std::vector<double>(p.data().begin(), p.data().end());
  ops::scale(ops::sum(p), 0.0).backward();
  AdamState st;
  std::vector<Tensor> params{p};
  adam_step(params, st, {});
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), before);
}

TEST(Adam, RejectsNegativeLearningRateAndMismatchedState) {
  Tensor p = random_tensor({3}, 73, true);
  AdamState st;
  std::vector<Tensor> params{p};
  EXPECT_THROW(adam_step(params, st, {.lr = -1.0}), std::invalid_argument);
  adam_step(params, st, {});
  std::vector<Tensor> other{random_tensor({4}, 74, true)};
  EXPECT_THROW(adam_step(other, st, {}), ShapeError);
}

TEST(GradCheck, SumAndSquares) {
  Tensor x = random_tensor({2, 3, 4}, 81, true);
  auto r = finite_difference_check([](const Tensor& t) { return ops::sum(t); }, x);
  EXPECT_LE(r.max_relative_error, 1e-9);
  auto r2 = finite_difference_check([](const Tensor& t) { return ops::sum(ops::mul(t, t)); }, x);
  EXPECT_LT(r2.max_relative_error, 1e-8);
  EXPECT_EQ(r2.coordinates_checked, 24);
}

TEST(GradCheck, RejectsNonLeafAndBadStep) {
  Tensor x = random_tensor({3}, 82, true);
  GradCheckOptions bad;
  bad.step = 0.0;
  EXPECT_THROW(finite_difference_check([](const Tensor& t) { return ops::sum(t); }, x, bad),
               std::invalid_argument);
  Tensor y = ops::scale(x, 2.0);
  EXPECT_THROW(finite_difference_check([](const Tensor& t) { return ops::sum(t); }, y), std::invalid_argument);
}
