#pragma once

// Mixed-class supervised contrastive loss and the prior-compensated
// classification loss.
//
// Positives of an anchor i in a batch of blended samples come in three kinds:
//   F_i  samples with the same foreground class,
//   B_i  samples with the same background class,
//   C_i  samples sharing a class only in crossed position (neither F nor B).
// Everything else is a negative. The softmax denominator of every positive
// term runs over the whole batch minus the anchor.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smc/autodiff.hpp"
#include "smc/mixer.hpp"

namespace smc {

struct PairSets {
  std::vector<std::vector<std::size_t>> fg, bg, cross, neg;

  std::size_t size() const noexcept { return fg.size(); }
};

inline PairSets classify_pairs(std::span<const MixRecord> records) {
  const auto n = records.size();
  require(n >= 2, "classify_pairs: batch needs at least two samples");
  PairSets s;
  s.fg.resize(n);
  s.bg.resize(n);
  s.cross.resize(n);
  s.neg.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto fi = records[i].fg_class, bi = records[i].bg_class;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto fj = records[j].fg_class, bj = records[j].bg_class;
      const bool same_fg = fi == fj, same_bg = bi == bj;
      if (same_fg) s.fg[i].push_back(j);
      if (same_bg) s.bg[i].push_back(j);
      if (!same_fg && !same_bg) {
        if (fi == bj || bi == fj) s.cross[i].push_back(j);
        else s.neg[i].push_back(j);
      }
    }
  }
  return s;
}

struct LossWeights {
  double fg = 0.0, bg = 0.0, cross = 0.0;
};

/// (λ, 1−λ, 0.5) / 1.5
inline LossWeights loss_weights(double lambda_w) {
  require(lambda_w >= 0.0 && lambda_w <= 1.0, "loss_weights: lambda outside [0,1]");
  return {lambda_w / 1.5, (1.0 - lambda_w) / 1.5, 0.5 / 1.5};
}

enum class WeightingScheme : std::uint8_t { weighted, averaging, assign_larger };

struct ContrastiveStats {
  std::array<std::size_t, 3> anchors{};  // anchors with a nonempty F, B, C set
  bool empty = false;                    // no positives of any kind in the batch
};

namespace detail {

/// Entry excluded from the softmax: exp(kExcluded - max) underflows to 0.
inline constexpr double kExcluded = -1e30;

/// log( exp(z_i·z_j/τ) / Σ_{k≠i} exp(z_i·z_k/τ) ) for all i, j (diagonal is junk).
inline Var pairwise_log_probs(Var embeddings, double tau) {
  require(tau > 0.0, "contrastive loss: temperature must be positive");
  const auto n = embeddings.rows();
  require(n >= 2, "contrastive loss: batch needs at least two samples");
  auto logits = scale(matmul(embeddings, embeddings, true), 1.0 / tau);
  std::vector<std::uint8_t> off_diagonal(n * n, 1);
  for (std::size_t i = 0; i < n; ++i) off_diagonal[i * n + i] = 0;
  return log_softmax(mask_apply(logits, std::move(off_diagonal), kExcluded));
}

/// −Σ W ⊙ logp, or an exact zero constant when W has no entries.
inline Var weighted_log_prob_sum(Var embeddings, double tau, Tensor weights, bool any) {
  auto& tape = embeddings.tape();
  if (!any) return tape.constant(Tensor::scalar(0.0));
  auto logp = pairwise_log_probs(embeddings, tau);
  return scale(sum(multiply(logp, tape.constant(std::move(weights)))), -1.0);
}

}  // namespace detail

/// Single-label supervised contrastive loss: positives share `labels[i]`;
/// averaged over anchors that have at least one positive.
inline Var supcon_loss(Var embeddings, std::span<const std::uint32_t> labels, double tau) {
  const auto n = embeddings.rows();
  require(labels.size() == n, "supcon_loss: one label per embedding required");
  require(n >= 2, "supcon_loss: batch needs at least two samples");
  std::vector<std::vector<std::size_t>> positives(n);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) positives[i].push_back(j);
    anchors += !positives[i].empty();
  }
  Tensor w = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (auto p : positives[i]) w(i, p) += 1.0 / (static_cast<double>(anchors) * positives[i].size());
  return detail::weighted_log_prob_sum(embeddings, tau, std::move(w), anchors > 0);
}

/// L = Σ_t mean_{i: S_t(i) ≠ ∅} w_t(λ_i) · (−1/|S_t(i)|) Σ_{p∈S_t(i)} log p_ip
/// with λ_i the anchor's own effective combination ratio.
inline Var smc_loss(Var embeddings, const PairSets& sets, std::span<const MixRecord> records, double tau,
                    WeightingScheme scheme = WeightingScheme::weighted, ContrastiveStats* stats = nullptr) {
  const auto n = embeddings.rows();
  require(n >= 2, "smc_loss: batch needs at least two samples");
  require(sets.size() == n && records.size() == n, "smc_loss: pair sets, records and embeddings disagree in size");

  if (scheme == WeightingScheme::assign_larger) {
    std::vector<std::uint32_t> majority(n);
    for (std::size_t i = 0; i < n; ++i)
      majority[i] = records[i].lambda_effective >= 0.5 ? records[i].fg_class : records[i].bg_class;
    return supcon_loss(embeddings, majority, tau);
  }

  const std::array<const std::vector<std::vector<std::size_t>>*, 3> by_type = {&sets.fg, &sets.bg, &sets.cross};
  ContrastiveStats local;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < n; ++i) local.anchors[t] += !(*by_type[t])[i].empty();

  Tensor w = Tensor::zeros({n, n});
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    const auto lw = scheme == WeightingScheme::averaging ? LossWeights{0.5 / 1.5, 0.5 / 1.5, 0.5 / 1.5}
                                                         : loss_weights(records[i].lambda_effective);
    const std::array<double, 3> type_weight = {lw.fg, lw.bg, lw.cross};
    for (std::size_t t = 0; t < 3; ++t) {
      const auto& set = (*by_type[t])[i];
      if (set.empty()) continue;
      any = true;
      const double coeff = type_weight[t] / (static_cast<double>(local.anchors[t]) * set.size());
      for (auto p : set) w(i, p) += coeff;
    }
  }
  local.empty = !any;
  if (stats) *stats = local;
  return detail::weighted_log_prob_sum(embeddings, tau, std::move(w), any);
}

/// Mean over the batch of −Σ_k y_k log softmax(z + m)_k. An empty log_prior
/// means no compensation (plain soft-target cross entropy).
inline Var balanced_ce(Var logits, const Tensor& soft_labels, std::span<const double> log_prior) {
  const auto& z = logits.value();
  require(z.rank() == 2, "balanced_ce: logits must be batch x classes");
  require(soft_labels.shape == z.shape, "balanced_ce: soft labels " + shape_string(soft_labels.shape) +
                                            " do not match logits " + shape_string(z.shape));
  const auto batch = z.shape[0], classes = z.shape[1];
  for (std::size_t r = 0; r < batch; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += soft_labels(r, c);
    require(std::abs(total - 1.0) < 1e-9, "balanced_ce: soft label row " + std::to_string(r) + " does not sum to 1");
  }
  auto& tape = logits.tape();
  Var shifted = logits;
  if (!log_prior.empty()) {
    require(log_prior.size() == classes, "balanced_ce: log prior has wrong length");
    shifted = add(logits, tape.constant(Tensor({1, classes}, std::vector<double>(log_prior.begin(), log_prior.end()))));
  }
  auto lsm = log_softmax(shifted);
  return scale(sum(multiply(lsm, tape.constant(soft_labels))), -1.0 / static_cast<double>(batch));
}

inline Var soft_cross_entropy(Var logits, const Tensor& soft_labels) { return balanced_ce(logits, soft_labels, {}); }

/// L_bce + η · L_smc
inline Var total_loss(Var bce, Var smc, double eta) {
  require(eta >= 0.0, "total_loss: eta must be >= 0");
  return add(bce, scale(smc, eta));
}

}  // namespace smc
