#include <cmath>

#include <gtest/gtest.h>

#include "smc/gradcheck.hpp"
#include "smc/pairloss.hpp"
#include "smc/verify.hpp"

using namespace smc;

namespace {

MixRecord rec(std::uint32_t fg, std::uint32_t bg, double lambda = 0.5) {
  MixRecord r;
  r.fg_class = fg;
  r.bg_class = bg;
  r.lambda_sampled = r.lambda_effective = lambda;
  return r;
}

double smc_value(const Tensor& emb, const std::vector<MixRecord>& recs, double tau,
                 WeightingScheme scheme = WeightingScheme::weighted) {
  Tape tape;
  return smc_loss(tape.constant(emb), classify_pairs(recs), recs, tau, scheme).item();
}

Tensor random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Tensor t = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += (t(i, j) = normal(rng)) * t(i, j);
    for (std::size_t j = 0; j < d; ++j) t(i, j) /= std::sqrt(norm);
  }
  return t;
}

}  // namespace

TEST(PairTaxonomy, MixedBatch) {
  enum : std::uint32_t { A, B, C, D, E };
  const std::vector<MixRecord> recs{rec(A, B), rec(A, C), rec(D, B), rec(B, E), rec(C, D)};
  const auto s = classify_pairs(recs);
  EXPECT_EQ(s.fg[0], (std::vector<std::size_t>{1}));
  EXPECT_EQ(s.bg[0], (std::vector<std::size_t>{2}));
  EXPECT_EQ(s.cross[0], (std::vector<std::size_t>{3}));
  EXPECT_EQ(s.neg[0], (std::vector<std::size_t>{4}));
  EXPECT_TRUE(pair_set_violation(s).empty());
  const auto brute = brute_force_pairs(recs);
  EXPECT_EQ(brute.fg, s.fg);
  EXPECT_EQ(brute.cross, s.cross);
}

TEST(PairTaxonomy, IdenticalRecords) {
  const std::vector<MixRecord> recs(4, rec(0, 1));
  const auto s = classify_pairs(recs);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(s.fg[i].size(), 3u);
    EXPECT_EQ(s.bg[i], s.fg[i]);
    EXPECT_TRUE(s.cross[i].empty());
    EXPECT_TRUE(s.neg[i].empty());
  }
}

TEST(PairTaxonomy, DistinctClasses) {
  const std::vector<MixRecord> recs{rec(0, 1), rec(2, 3), rec(4, 5)};
  const auto s = classify_pairs(recs);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(s.fg[i].empty() && s.bg[i].empty() && s.cross[i].empty());
    EXPECT_EQ(s.neg[i].size(), 2u);
  }
}

TEST(PairTaxonomy, FuzzAgainstBruteForce) {
  auto rng = seeded(21);
  for (int b = 0; b < 200; ++b) {
    const auto recs = detail::random_records(2 + uniform_index(rng, 63), 1 + uniform_index(rng, 10), rng);
    const auto s = classify_pairs(recs);
    const auto o = brute_force_pairs(recs);
    ASSERT_EQ(s.fg, o.fg);
    ASSERT_EQ(s.bg, o.bg);
    ASSERT_EQ(s.cross, o.cross);
    ASSERT_EQ(s.neg, o.neg);
    ASSERT_EQ(pair_set_violation(s), "");
  }
}

TEST(LossWeights, Values) {
  const auto mid = loss_weights(0.5);
  EXPECT_DOUBLE_EQ(mid.fg, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mid.bg, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mid.cross, 1.0 / 3.0);
  const auto w = loss_weights(0.8);
  EXPECT_NEAR(w.fg, 0.53333333333333333, 1e-15);
  EXPECT_NEAR(w.bg, 0.13333333333333333, 1e-15);
  EXPECT_NEAR(w.cross, 0.33333333333333333, 1e-15);
}

TEST(LossWeights, SumToOne) {
  auto rng = seeded(22);
  for (int i = 0; i < 1000; ++i) {
    const auto w = loss_weights(uniform01(rng));
    EXPECT_NEAR(w.fg + w.bg + w.cross, 1.0, 1e-12);
  }
}

TEST(SmcLoss, ForegroundPairsOnly) {
  const std::vector<MixRecord> recs{rec(0, 1), rec(0, 2), rec(3, 4)};
  const Tensor emb = Tensor::matrix(3, 2, {1, 0, 1, 0, 0, 1});
  EXPECT_NEAR(smc_value(emb, recs, 0.1), 1.5132966405621549e-05, 1e-15);
}

TEST(SmcLoss, OrthogonalPositive) {
  const std::vector<MixRecord> recs{rec(0, 1), rec(0, 2), rec(3, 4)};
  const Tensor emb = Tensor::matrix(3, 2, {1, 0, 0, 1, 0, 1});
  EXPECT_NEAR(smc_value(emb, recs, 0.1), 1.78219876, 1e-8);
  // Anchor 0 alone: -log(e^0 / (e^0 + e^0)) weighted by 1/3.
  Tape tape;
  const auto lp = detail::pairwise_log_probs(tape.constant(emb), 0.1).value();
  EXPECT_NEAR(-lp(0, 1) * loss_weights(0.5).fg, 0.23104906018664844, 1e-15);
}

TEST(SmcLoss, GradientMatchesFiniteDifferences) {
  auto rng = seeded(23);
  const auto recs = detail::random_records(8, 5, rng);
  const auto sets = classify_pairs(recs);
  ScalarGraph f = [&](Tape&, const std::vector<Var>& v) { return smc_loss(l2_normalize(v[0]), sets, recs, 0.1); };
  const auto r = finite_diff_check(f, {detail::random_tensor({8, 6}, rng)}, kGradEpsilon);
  EXPECT_LT(r.max_relative_error, kGradTolerance) << detail::describe_check(r);
}

TEST(SmcLoss, WeightedEqualsAveragingAtHalf) {
  auto rng = seeded(24);
  auto recs = detail::random_records(12, 4, rng);
  for (auto& r : recs) r.lambda_effective = 0.5;
  const auto emb = random_unit_rows(12, 5, rng);
  EXPECT_EQ(smc_value(emb, recs, 0.1), smc_value(emb, recs, 0.1, WeightingScheme::averaging));
}

TEST(SmcLoss, AssignLargerIsSupConOnForeground) {
  auto rng = seeded(25);
  auto recs = detail::random_records(12, 4, rng);
  std::vector<std::uint32_t> fg;
  for (auto& r : recs) {
    r.lambda_effective = 0.8;
    fg.push_back(r.fg_class);
  }
  const auto emb = random_unit_rows(12, 5, rng);
  Tape tape;
  const double oracle = supcon_loss(tape.constant(emb), fg, 0.1).item();
  EXPECT_NEAR(smc_value(emb, recs, 0.1, WeightingScheme::assign_larger), oracle, 1e-12);
}

TEST(SmcLoss, AssignLargerWithoutPositivesIsZero) {
  const std::vector<MixRecord> recs{rec(0, 3, 0.7), rec(1, 3, 0.7), rec(2, 3, 0.7)};
  auto rng = seeded(26);
  EXPECT_EQ(smc_value(random_unit_rows(3, 4, rng), recs, 0.1, WeightingScheme::assign_larger), 0.0);
}

TEST(BalancedCe, HandValues) {
  Tape tape;
  const auto z = tape.constant(Tensor::matrix(1, 2, {0, 0}));
  const std::vector<double> uniform{std::log(0.5), std::log(0.5)};
  EXPECT_NEAR(balanced_ce(z, Tensor::matrix(1, 2, {1, 0}), uniform).item(), 0.6931471805599453, 1e-12);
  const std::vector<double> skew{std::log(0.9), std::log(0.1)};
  EXPECT_NEAR(balanced_ce(z, Tensor::matrix(1, 2, {0, 1}), skew).item(), 2.302585092994046, 1e-12);
}

TEST(BalancedCe, UniformPriorAndShiftInvariance) {
  auto rng = seeded(27);
  for (int trial = 0; trial < 20; ++trial) {
    const auto logits = detail::random_tensor({6, 5}, rng);
    const auto labels = detail::soft_label_tensor(detail::random_records(6, 5, rng), 5);
    std::vector<double> uniform(5, std::log(0.2)), prior(5), shifted(5);
    for (std::size_t k = 0; k < 5; ++k) {
      prior[k] = normal(rng);
      shifted[k] = prior[k] + 3.7;
    }
    Tape tape;
    const auto z = tape.constant(logits);
    EXPECT_NEAR(balanced_ce(z, labels, uniform).item(), soft_cross_entropy(z, labels).item(), 1e-9);
    EXPECT_NEAR(balanced_ce(z, labels, prior).item(), balanced_ce(z, labels, shifted).item(), 1e-9);
  }
}

TEST(BalancedCe, GradientMatchesFiniteDifferences) {
  auto rng = seeded(28);
  const auto labels = detail::soft_label_tensor(detail::random_records(8, 5, rng), 5);
  const std::vector<double> prior{-0.1, -1.0, -2.0, -3.0, -4.0};
  ScalarGraph f = [&](Tape&, const std::vector<Var>& v) { return balanced_ce(v[0], labels, prior); };
  EXPECT_LT(finite_diff_check(f, {detail::random_tensor({8, 5}, rng)}, kGradEpsilon).max_relative_error, 1e-6);
}

TEST(BalancedCe, RejectsBadLabels) {
  Tape tape;
  const auto z = tape.constant(Tensor::matrix(1, 2, {0, 0}));
  EXPECT_THROW(balanced_ce(z, Tensor::matrix(1, 2, {0.5, 0.4}), {}), ContractViolation);
  EXPECT_THROW(balanced_ce(z, Tensor::matrix(1, 3, {1, 0, 0}), {}), ContractViolation);
}

TEST(TotalLoss, Arithmetic) {
  Tape tape;
  const auto bce = tape.constant(Tensor::scalar(1.0)), smc = tape.constant(Tensor::scalar(2.0));
  EXPECT_DOUBLE_EQ(total_loss(bce, smc, 0.0).item(), 1.0);
  EXPECT_NEAR(total_loss(bce, smc, 0.1).item(), 1.2, 1e-15);
}
