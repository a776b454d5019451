#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "davit/dcsa.hpp"
#include "davit/gradcheck.hpp"
#include "davit/ops.hpp"
#include "oracles.hpp"

using namespace davit;
using davit::testing::random_tensor;

namespace {

dcsa::Config config(int64_t c) {
  dcsa::Config cfg;
  cfg.channels = c;
  return cfg;
}

// Recomputes Att * x from the weights with zero-inflated dense convolutions.
std::vector<double> oracle_apply(const Tensor& x, const dcsa::Weights& w) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto u_vec = davit::testing::dilated_conv_oracle(x, w.local, C, 1);
  Tensor u = Tensor::from_data(x.shape(), u_vec);
  std::vector<double> s = u_vec;
  for (size_t b = 0; b < w.branches.size(); ++b) {
    auto part = davit::testing::dilated_conv_oracle(u, w.branches[b], C, w.config.branches[b].dilation);
    for (size_t i = 0; i < s.size(); ++i) s[i] += part[i];
  }
  auto att = davit::testing::naive_conv(s, N, C, H, W, {w.mixer.data().begin(), w.mixer.data().end()}, C, 1, 1, 1, 1,
                                        0, 0, H, W);
  for (size_t i = 0; i < att.size(); ++i) att[i] *= x.data()[i];
  return att;
}

}  // namespace

TEST(EquivalentKernel, Examples) {
  EXPECT_EQ(dcsa::equivalent_kernel_size(7, 3), 19);
  for (int k : {1, 3, 5, 9}) EXPECT_EQ(dcsa::equivalent_kernel_size(k, 1), k);
  EXPECT_EQ(dcsa::equivalent_kernel_size(5, 2), 9);
  EXPECT_THROW(dcsa::equivalent_kernel_size(0, 1), std::invalid_argument);
}

TEST(ParamReductionRho, Examples) {
  const std::vector<int> k{3, 5, 7};
  EXPECT_NEAR(dcsa::param_reduction_rho(k, 19, 19), 1.0 - 83.0 / 361.0, 1e-15);
  EXPECT_NEAR(dcsa::param_reduction_rho(k, 19, 19), 0.770083, 1e-6);
  EXPECT_NEAR(dcsa::param_reduction_rho(k, 21, 21), 0.811791, 1e-6);
  EXPECT_EQ(dcsa::param_reduction_rho(std::vector<int>{19}, 19, 19), 0.0);
  EXPECT_THROW(dcsa::param_reduction_rho(std::vector<int>{}, 19, 19), std::invalid_argument);
  EXPECT_THROW(dcsa::param_reduction_rho(k, 0, 19), std::invalid_argument);
}

TEST(ParamReductionRho, IndependentOfChannels) {
  const std::vector<int> k{3, 5, 7};
  for (int h0 : {7, 19, 21, 25}) {
    const double base = dcsa::param_reduction_rho(k, h0, h0, 1);
    for (int64_t c : {2, 3, 32, 64, 97, 512, 100000}) EXPECT_EQ(dcsa::param_reduction_rho(k, h0, h0, c), base);
  }
}

TEST(AttentionMap, ZeroFiltersGiveZeros) {
  auto w = dcsa::Weights::zeros(config(3));
  Tensor att = dcsa::attention_map(random_tensor({2, 3, 6, 5}, 1), w);
  for (double v : att.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttentionMap, PassthroughReproducesInput) {
  auto w = dcsa::Weights::passthrough(config(4));
  Tensor x = random_tensor({1, 4, 9, 7}, 2);
  Tensor att = dcsa::attention_map(x, w);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(att.data()[i], x.data()[i]);
}

TEST(AttentionMap, ImpulseSupportWithinComposedField) {
  Rng rng(3);
  auto w = dcsa::Weights::random(config(1), rng, 1.0);
  const int64_t side = 41;
  Tensor x = Tensor::zeros({1, 1, side, side});
  x.mutable_data()[static_cast<size_t>(20 * side + 20)] = 1.0;
  Tensor att = dcsa::attention_map(x, w);
  for (int64_t y = 0; y < side; ++y)
    for (int64_t xx = 0; xx < side; ++xx) {
      const bool inside = std::abs(y - 20) <= 11 && std::abs(xx - 20) <= 11;
      if (!inside) EXPECT_EQ(att.data()[static_cast<size_t>(y * side + xx)], 0.0) << y << "," << xx;
    }
  EXPECT_NE(att.data()[static_cast<size_t>(9 * side + 9)], 0.0);  // corner of the 23x23 box
}

TEST(AttentionMap, PreservesShapeAcrossConfigs) {
  Rng rng(4);
  for (auto branches : {std::vector<dcsa::Branch>{{3, 1}}, std::vector<dcsa::Branch>{{3, 1}, {3, 2}, {3, 3}},
                        std::vector<dcsa::Branch>{{5, 1}, {7, 2}, {9, 3}}}) {
    dcsa::Config cfg = config(2);
    cfg.branches = branches;
    auto w = dcsa::Weights::random(cfg, rng);
    Tensor x = random_tensor({2, 2, 5, 3}, 5);
    EXPECT_EQ(dcsa::attention_map(x, w).shape(), x.shape());
  }
}

TEST(AttentionMap, RejectsChannelMismatch) {
  auto w = dcsa::Weights::zeros(config(3));
  EXPECT_THROW(dcsa::attention_map(Tensor::ones({1, 2, 4, 4}), w), ShapeError);
  dcsa::Config bad = config(3);
  bad.branches.clear();
  EXPECT_THROW(dcsa::Weights::zeros(bad), std::invalid_argument);
  bad.branches = {{4, 1}};
  EXPECT_THROW(dcsa::Weights::zeros(bad), std::invalid_argument);
}

TEST(AttentionMap, DepthwiseIsolationWithIdentityMixer) {
  Rng rng(6);
  auto w = dcsa::Weights::random(config(3), rng, 0.5);
  std::fill(w.mixer.mutable_data().begin(), w.mixer.mutable_data().end(), 0.0);
  for (int c = 0; c < 3; ++c) w.mixer.mutable_data()[static_cast<size_t>(c * 3 + c)] = 1.0;
  Tensor x = random_tensor({1, 3, 8, 8}, 7);
  Tensor base = dcsa::attention_map(x, w);
  for (int j = 0; j < 3; ++j) {
    Tensor xp = x.clone();
    xp.mutable_data()[static_cast<size_t>(j * 64 + 27)] += 0.5;
    Tensor moved = dcsa::attention_map(xp, w);
    for (int c = 0; c < 3; ++c) {
      const double diff = davit::testing::max_abs_diff(base.data().subspan(c * 64, 64), moved.data().subspan(c * 64, 64));
      if (c == j) EXPECT_GT(diff, 0.0);
      else EXPECT_EQ(diff, 0.0);
    }
  }
}

TEST(Apply, UnitAndZeroAttention) {
  Tensor x = random_tensor({1, 3, 6, 6}, 8);
  auto unit = dcsa::Weights::unit_attention(config(3));
  Tensor att = dcsa::attention_map(x, unit);
  for (double v : att.data()) EXPECT_EQ(v, 1.0);
  Tensor out = dcsa::apply(x, unit);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.data()[i], x.data()[i]);
  Tensor zero = dcsa::apply(x, dcsa::Weights::zeros(config(3)));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Apply, MatchesDenseOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 3; ++trial) {
    auto w = dcsa::Weights::random(config(3), rng, 0.3);
    Tensor x = random_tensor({2, 3, 12, 10}, 10 + static_cast<uint64_t>(trial));
    Tensor out = dcsa::apply(x, w);
    EXPECT_LE(davit::testing::max_abs_diff(out.data(), oracle_apply(x, w)), 1e-10);
  }
}

TEST(Apply, GradientFlowsThroughBothFactors) {
  Rng rng(11);
  auto w = dcsa::Weights::random(config(2), rng, 0.3);
  Tensor x = random_tensor({1, 2, 6, 6}, 12, true);
  auto f = [&](const Tensor& t) { return ops::sum(dcsa::apply(t, w)); };
  GradCheckOptions opt;
  auto r = finite_difference_check(f, x, opt);
  EXPECT_LT(r.max_relative_error, 1e-6);

  x.zero_grad();
  f(x).backward();
  Tensor att = dcsa::attention_map(x.detach(), w);
  EXPECT_GT(davit::testing::max_abs_diff(x.grad(), att.data()), 1e-3);
}

TEST(Apply, WeightGradientsMatchFiniteDifferences) {
  Rng rng(13);
  dcsa::Config cfg = config(2);
  cfg.bias = true;
  auto w = dcsa::Weights::random(cfg, rng, 0.3);
  for (Tensor b : {w.local_bias, w.mixer_bias})
    for (auto& v : b.mutable_data()) v = rng.uniform(-0.5, 0.5);
  Tensor x = random_tensor({1, 2, 7, 7}, 14);
  for (Tensor p : w.parameters()) {
    auto r = finite_difference_check([&](const Tensor&) { return ops::mean(dcsa::apply(x, w)); }, p, {});
    EXPECT_LT(r.max_relative_error, 1e-6) << shape_str(p.shape());
  }
}

TEST(SoftmaxAttention, Examples) {
  Tensor v = random_tensor({1, 3}, 15);
  Tensor single = dcsa::softmax_attention_reference(random_tensor({1, 3}, 16), random_tensor({1, 3}, 17), v);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(single.data()[i], v.data()[i], 1e-15);

  Tensor q = Tensor::from_data({2, 2}, {1, 0, 2, 0});
  Tensor k = Tensor::from_data({3, 2}, {0, 1, 0, -2, 0, 5});
  Tensor vv = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 9});
  Tensor out = dcsa::softmax_attention_reference(q, k, vv);
  for (int row = 0; row < 2; ++row) {
    EXPECT_NEAR(out.data()[row * 2 + 0], 3.0, 1e-14);
    EXPECT_NEAR(out.data()[row * 2 + 1], 5.0, 1e-14);
  }

  Tensor sat = dcsa::softmax_attention_reference(Tensor::from_data({2, 1}, {10, -10}), Tensor::from_data({2, 1}, {10, -10}),
                                                 Tensor::from_data({2, 1}, {1, 0}));
  EXPECT_NEAR(sat.data()[0], 1.0, 1e-8);
  EXPECT_NEAR(sat.data()[1], 0.0, 1e-8);

  EXPECT_THROW(dcsa::softmax_attention_reference(Tensor::ones({2, 3}), Tensor::ones({2, 2}), Tensor::ones({2, 2})),
               ShapeError);
}

TEST(ImpulseReceptiveField, Examples) {
  auto def = dcsa::impulse_receptive_field(dcsa::Weights::zeros(config(2)));
  EXPECT_EQ(def.height, 23);
  EXPECT_EQ(def.width, 23);

  dcsa::Config single = config(1);
  single.local_kernel = 1;
  single.branches = {{3, 1}};
  auto s = dcsa::impulse_receptive_field(dcsa::Weights::zeros(single));
  EXPECT_EQ(s.height, 3);
  EXPECT_EQ(s.width, 3);

  dcsa::Config local_only = config(1);
  local_only.branches = {{1, 1}};
  auto l = dcsa::impulse_receptive_field(dcsa::Weights::zeros(local_only));
  EXPECT_EQ(l.height, 5);
  EXPECT_EQ(l.width, 5);
}

TEST(DcsaWeights, DefaultParameterCount) {
  for (int64_t c : {1, 4, 32, 64}) {
    EXPECT_EQ(dcsa::Weights::zeros(config(c)).parameter_count(), c * (25 + 9 + 25 + 49) + c * c);
  }
}

TEST(DecompositionReport, ListsBranchesAndRho) {
  auto report = dcsa::decomposition_report(config(32));
  ASSERT_EQ(report.rows.size(), 5u);
  EXPECT_EQ(report.rows[3].name, "LD-Conv");
  EXPECT_EQ(report.rows[3].equivalent, 19);
  EXPECT_EQ(report.rows[3].params, 49 * 32);
  EXPECT_NEAR(report.rho_configured, 0.770083, 1e-6);
  EXPECT_NEAR(report.rho_21, 0.811791, 1e-6);
  std::ostringstream text, csv;
  dcsa::write_report_text(text, report);
  dcsa::write_report_csv(csv, report);
  EXPECT_NE(text.str().find("81.18%"), std::string::npos);
  EXPECT_NE(csv.str().find("LD-Conv,7,3,19,1568"), std::string::npos);
}
