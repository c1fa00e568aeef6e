#include <cmath>

#include <gtest/gtest.h>

#include "smc/gradcheck.hpp"
#include "smc/model.hpp"
#include "smc/pairloss.hpp"
#include "smc/verify.hpp"

using namespace smc;

namespace {

double abs_sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values) s += std::abs(v);
  return s;
}

}  // namespace

TEST(Model, SameSeedSameParams) {
  const std::size_t widths[] = {32, 16};
  const ImageDims in{1, 8, 8};
  EXPECT_TRUE(init_model(widths, 4, in, 9) == init_model(widths, 4, in, 9));
  EXPECT_FALSE(init_model(widths, 4, in, 9) == init_model(widths, 4, in, 10));
}

TEST(Model, BiasesStartAtZero) {
  const std::size_t widths[] = {32, 16};
  auto p = init_model(widths, 4, {1, 8, 8}, 1);
  for (auto& [name, t] : p.named_tensors())
    if (name.ends_with(".bias")) {
      for (double v : t->values) EXPECT_EQ(v, 0.0) << name;
    }
}

TEST(Model, UniformInitVariance) {
  const std::size_t widths[] = {512, 512};
  const auto p = init_model(widths, 2, {2, 16, 16}, 3, 8);
  const auto& w = p.encoder[1].weight.values;
  double mean = 0.0, var = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size());
  EXPECT_NEAR(var, 2.0 / 1024.0, 0.2 * 2.0 / 1024.0);
}

TEST(Model, ShapeContract) {
  const std::size_t widths[] = {64};
  const auto p = init_model(widths, 7, {1, 8, 8}, 2);
  auto rng = seeded(4);
  const auto x = detail::random_tensor({4, 64}, rng, 0.0, 1.0);
  const auto f = encode(p, x);
  EXPECT_EQ(f.shape, (Shape{4, 64}));
  const auto e = project(p, f);
  EXPECT_EQ(e.shape, (Shape{4, 128}));
  for (std::size_t r = 0; r < 4; ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < 128; ++c) n += e(r, c) * e(r, c);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  }
  EXPECT_EQ(classify(p, f).shape, (Shape{4, 7}));
}

TEST(Model, ZeroClassifierGivesUniformSoftmax) {
  const std::size_t widths[] = {16};
  auto p = init_model(widths, 5, {1, 8, 8}, 2);
  std::fill(p.classifier.weight.values.begin(), p.classifier.weight.values.end(), 0.0);
  auto rng = seeded(5);
  Tape tape;
  ModelGraph g(tape, p, false);
  const auto logits = g.classify(g.encode(tape.constant(detail::random_tensor({3, 64}, rng, 0.0, 1.0))));
  for (double v : logits.value().values) EXPECT_EQ(v, 0.0);
  for (double v : softmax(logits).value().values) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Model, LogitGradientMatchesFiniteDifferences) {
  const std::size_t widths[] = {6};
  auto p = init_model(widths, 3, {1, 3, 3}, 6, 4);
  for (auto* t : p.tensors())
    for (auto& v : t->values) v += 0.05;
  auto rng = seeded(6);
  const auto x = detail::random_tensor({4, 9}, rng, 0.0, 1.0);
  std::vector<Tensor> point;
  for (auto& nt : p.named_tensors()) point.push_back(*nt.second);
  ScalarGraph f = [&](Tape& tape, const std::vector<Var>& v) {
    ModelGraph g(p.input, v, p.encoder.size());
    return sum(g.classify(g.encode(tape.constant(x))));
  };
  const auto r = finite_diff_check(f, point, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-5) << detail::describe_check(r);
}

TEST(Model, TotalLossReachesBothHeads) {
  const std::size_t widths[] = {16};
  const auto p = init_model(widths, 4, {1, 4, 4}, 7, 8);
  auto rng = seeded(7);
  const auto recs = detail::random_records(8, 4, rng);
  const auto labels = detail::soft_label_tensor(recs, 4);
  Tape tape;
  ModelGraph g(tape, p);
  const auto features = g.encode(tape.constant(detail::random_tensor({8, 16}, rng, 0.0, 1.0)));
  const auto loss = total_loss(balanced_ce(g.classify(features), labels, {}),
                               smc_loss(g.project(features), classify_pairs(recs), recs, 0.1), 0.1);
  const auto grads = tape.eval_with_grad(loss, g.parameters()).grads;
  const auto names = p.named_tensors();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].first == "classifier.weight" || names[i].first == "head.out.weight") {
      EXPECT_GT(abs_sum(grads[i]), 0.0) << names[i].first;
    }
  }
}

TEST(Model, WrongInputWidthIsRejected) {
  const std::size_t widths[] = {8};
  const auto p = init_model(widths, 2, {1, 4, 4}, 1);
  EXPECT_THROW(encode(p, Tensor::zeros({2, 15})), ContractViolation);
}
