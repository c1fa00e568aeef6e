#pragma once

// Built-in oracle suite behind `smc verify`: finite-difference checks of every
// primitive and of the composed losses, a brute-force pair taxonomy fuzz,
// sampler chi-square tests, the mask/label sweep and loss-weight sums.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "smc/autodiff.hpp"
#include "smc/dataset.hpp"
#include "smc/gradcheck.hpp"
#include "smc/mixer.hpp"
#include "smc/model.hpp"
#include "smc/pairloss.hpp"
#include "smc/rng.hpp"

namespace smc {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradEpsilon = 1e-5;
inline constexpr double kChiSquareMinP = 0.01;

struct VerifyOptions {
  bool quick = false;
  std::uint64_t seed = 20240229;
  TapeOptions tape;  // corrupt_backward injects a faulty primitive
};

struct OracleResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyReport {
  std::vector<OracleResult> results;

  bool passed() const {
    for (const auto& r : results)
      if (!r.passed) return false;
    return true;
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& r : results)
      if (!r.passed) out.push_back(r.name);
    return out;
  }
};

/// Chi-square goodness of fit of observed counts against expected probabilities.
inline double chi_square_p_value(std::span<const std::uint64_t> observed, std::span<const double> expected_probs) {
  require(observed.size() == expected_probs.size() && observed.size() >= 2, "chi-square: need matching bins");
  double total = 0.0;
  for (auto o : observed) total += static_cast<double>(o);
  double stat = 0.0;
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const double e = total * expected_probs[k];
    require(e > 0.0, "chi-square: expected count must be positive");
    stat += (observed[k] - e) * (observed[k] - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

/// Magnitudes in [0.2, 1] with random sign: away from relu's kink.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values) v = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * (0.2 + 0.8 * uniform01(rng));
  return t;
}

/// Scalar readout sum(y ⊙ w) with a fixed random w, so every output entry
/// carries a distinct gradient.
inline Var readout(Var y, const Tensor& w) { return sum(multiply(y, y.tape().constant(w))); }

struct PrimitiveCase {
  std::vector<Tensor> point;
  ScalarGraph graph;
};

inline PrimitiveCase primitive_case(Op op, Rng& rng) {
  const auto r = 2 + uniform_index(rng, 3), c = 2 + uniform_index(rng, 4);
  const Tensor w = random_tensor({r, c}, rng);
  PrimitiveCase pc;
  switch (op) {
    case Op::add:
      pc.point = {random_tensor({r, c}, rng), random_tensor({r, c}, rng), random_tensor({1, c}, rng),
                  random_tensor({1, 1}, rng)};
      // same-shape, row and scalar broadcasts
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(add(add(v[0], v[1]), add(v[2], v[3])), w); };
      break;
    case Op::multiply:
      pc.point = {random_tensor({r, c}, rng), random_tensor({r, c}, rng), random_tensor({1, c}, rng),
                  random_tensor({1, 1}, rng)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) {
        return readout(multiply(multiply(v[0], v[1]), multiply(v[2], v[3])), w);
      };
      break;
    case Op::scale:
      pc.point = {random_tensor({r, c}, rng)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(scale(v[0], -2.5), w); };
      break;
    case Op::matmul: {
      const auto k = 2 + uniform_index(rng, 3);
      pc.point = {random_tensor({r, k}, rng), random_tensor({k, c}, rng), random_tensor({c, k}, rng)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) {
        return readout(add(matmul(v[0], v[1]), matmul(v[0], v[2], true)), w);
      };
      break;
    }
    case Op::exp:
      pc.point = {random_tensor({r, c}, rng, -2.0, 2.0)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(exp(v[0]), w); };
      break;
    case Op::log:
      pc.point = {random_tensor({r, c}, rng, 0.5, 3.0)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(log(v[0]), w); };
      break;
    case Op::sum:
      pc.point = {random_tensor({r, c}, rng)};
      pc.graph = [](Tape&, const std::vector<Var>& v) { return scale(sum(multiply(v[0], v[0])), 0.5); };
      break;
    case Op::mean:
      pc.point = {random_tensor({r, c}, rng)};
      pc.graph = [](Tape&, const std::vector<Var>& v) { return mean(multiply(v[0], v[0])); };
      break;
    case Op::max: {
      // Distinct entries spaced well beyond epsilon keep the arg-max stable.
      Tensor t = Tensor::zeros({r, c});
      for (std::size_t i = 0; i < t.size(); ++i) t.values[i] = 0.1 * static_cast<double>(i);
      std::shuffle(t.values.begin(), t.values.end(), rng);
      pc.point = {t};
      pc.graph = [](Tape&, const std::vector<Var>& v) { return max(multiply(v[0], v[0])); };
      break;
    }
    case Op::softmax:
      pc.point = {random_tensor({r, c}, rng, -3.0, 3.0)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(softmax(v[0]), w); };
      break;
    case Op::log_softmax:
      pc.point = {random_tensor({r, c}, rng, -3.0, 3.0)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(log_softmax(v[0]), w); };
      break;
    case Op::l2_normalize:
      pc.point = {away_from_zero({r, c}, rng)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(l2_normalize(v[0]), w); };
      break;
    case Op::relu:
      pc.point = {away_from_zero({r, c}, rng)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(relu(v[0]), w); };
      break;
    case Op::concat: {
      const auto top = 1 + uniform_index(rng, r - 1);
      pc.point = {random_tensor({top, c}, rng), random_tensor({r - top, c}, rng)};
      pc.graph = [w](Tape&, const std::vector<Var>& v) { return readout(concat(v), w); };
      break;
    }
    case Op::index_select: {
      std::vector<std::size_t> idx(r);
      for (auto& i : idx) i = uniform_index(rng, 3);
      pc.point = {random_tensor({3, c}, rng)};
      pc.graph = [w, idx](Tape&, const std::vector<Var>& v) { return readout(index_select(v[0], idx), w); };
      break;
    }
    case Op::mask_apply: {
      std::vector<std::uint8_t> keep(r * c);
      for (auto& k : keep) k = uniform01(rng) < 0.6;
      pc.point = {random_tensor({r, c}, rng)};
      pc.graph = [w, keep](Tape&, const std::vector<Var>& v) { return readout(mask_apply(v[0], keep, -7.0), w); };
      break;
    }
    case Op::leaf: break;
  }
  return pc;
}

/// Random batch records over `vocab` classes with per-sample effective ratios.
inline std::vector<MixRecord> random_records(std::size_t n, std::uint32_t vocab, Rng& rng) {
  std::vector<MixRecord> recs(n);
  for (auto& r : recs) {
    r.fg_class = static_cast<std::uint32_t>(uniform_index(rng, vocab));
    r.bg_class = static_cast<std::uint32_t>(uniform_index(rng, vocab));
    r.lambda_effective = 0.2 + 0.6 * uniform01(rng);
    r.lambda_sampled = r.lambda_effective;
    r.soft_label = soft_label(r.fg_class, r.bg_class, r.lambda_effective, vocab);
  }
  return recs;
}

inline Tensor soft_label_tensor(std::span<const MixRecord> recs, std::size_t classes) {
  Tensor t = Tensor::zeros({recs.size(), classes});
  for (std::size_t r = 0; r < recs.size(); ++r)
    for (std::size_t k = 0; k < classes; ++k) t(r, k) = recs[r].soft_label[k];
  return t;
}

inline std::string describe_check(const GradCheckResult& g) {
  std::ostringstream out;
  out.precision(3);
  out << "max rel err " << std::scientific << g.max_relative_error << " (tensor " << g.worst_tensor << " index "
      << g.worst_index << ")";
  return out.str();
}

template <typename F>
OracleResult timed(std::string name, F&& body) {
  const auto start = std::chrono::steady_clock::now();
  OracleResult r;
  r.name = std::move(name);
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Individual oracles

/// `trials` random small inputs through one primitive.
inline OracleResult check_primitive(Op op, std::size_t trials, std::uint64_t seed, const TapeOptions& tape = {}) {
  return detail::timed("gradient:" + std::string(op_name(op)), [&](OracleResult& r) {
    auto rng = seeded(seed, 0x6AD + static_cast<std::uint64_t>(op));
    GradCheckResult worst;
    for (std::size_t t = 0; t < trials; ++t) {
      const auto pc = detail::primitive_case(op, rng);
      const auto g = finite_diff_check(pc.graph, pc.point, kGradEpsilon, tape);
      if (t == 0 || g.max_relative_error > worst.max_relative_error) worst = g;
    }
    r.passed = worst.max_relative_error < kGradTolerance;
    r.detail = std::to_string(trials) + " inputs, " + detail::describe_check(worst);
  });
}

/// L_SMC through l2_normalize on a random 8-sample batch over 5 classes.
inline OracleResult check_smc_gradient(std::uint64_t seed, const TapeOptions& tape = {}) {
  return detail::timed("gradient:L_smc", [&](OracleResult& r) {
    auto rng = seeded(seed, 0x5AC);
    const auto recs = detail::random_records(8, 5, rng);
    const auto sets = classify_pairs(recs);
    const auto x = detail::random_tensor({8, 6}, rng);
    ScalarGraph f = [&](Tape&, const std::vector<Var>& v) { return smc_loss(l2_normalize(v[0]), sets, recs, 0.1); };
    const auto g = finite_diff_check(f, {x}, kGradEpsilon, tape);
    r.passed = g.max_relative_error < kGradTolerance;
    r.detail = detail::describe_check(g);
  });
}

inline OracleResult check_bce_gradient(std::uint64_t seed, const TapeOptions& tape = {}) {
  return detail::timed("gradient:L_bce", [&](OracleResult& r) {
    auto rng = seeded(seed, 0xBCE);
    const auto recs = detail::random_records(8, 5, rng);
    const auto labels = detail::soft_label_tensor(recs, 5);
    const auto stats = make_class_stats({200, 80, 30, 12, 5});
    const auto z = detail::random_tensor({8, 5}, rng, -2.0, 2.0);
    ScalarGraph f = [&](Tape&, const std::vector<Var>& v) { return balanced_ce(v[0], labels, stats.log_prior); };
    const auto g = finite_diff_check(f, {z}, kGradEpsilon, tape);
    r.passed = g.max_relative_error < kGradTolerance;
    r.detail = detail::describe_check(g);
  });
}

/// L_bce + eta L_smc through the full model, differentiated w.r.t. every parameter.
inline OracleResult check_train_gradient(std::uint64_t seed, const TapeOptions& tape = {}) {
  return detail::timed("gradient:L_train", [&](OracleResult& r) {
    auto rng = seeded(seed, 0x7A1);
    const ImageDims dims{1, 3, 3};
    const std::vector<std::size_t> widths = {6};
    const auto params = init_model(widths, 5, dims, seed, 4);
    const auto recs = detail::random_records(8, 5, rng);
    const auto sets = classify_pairs(recs);
    const auto labels = detail::soft_label_tensor(recs, 5);
    const auto stats = make_class_stats({200, 80, 30, 12, 5});
    const auto images = detail::random_tensor({8, dims.size()}, rng, 0.0, 1.0);
    std::vector<Tensor> point;
    for (const auto& [name, t] : params.named_tensors()) point.push_back(*t);
    // Nonzero biases keep relu pre-activations off their kink.
    for (auto& t : point)
      if (t.rows() == 1)
        for (auto& v : t.values) v = 0.05 + 0.1 * uniform01(rng);
    ScalarGraph f = [&](Tape& tp, const std::vector<Var>& v) {
      ModelGraph g(dims, v, widths.size());
      auto features = g.encode(tp.constant(images));
      auto bce = balanced_ce(g.classify(features), labels, stats.log_prior);
      return total_loss(bce, smc_loss(g.project(features), sets, recs, 0.1), 0.1);
    };
    const auto g = finite_diff_check(f, point, kGradEpsilon, tape);
    r.passed = g.max_relative_error < kGradTolerance;
    r.detail = std::to_string(point.size()) + " parameter tensors, " + detail::describe_check(g);
  });
}

/// Direct set-intersection reading of the taxonomy, independent of classify_pairs.
inline PairSets brute_force_pairs(std::span<const MixRecord> recs) {
  const auto n = recs.size();
  PairSets s;
  s.fg.resize(n);
  s.bg.resize(n);
  s.cross.resize(n);
  s.neg.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const std::set<std::uint32_t> a = {recs[i].fg_class, recs[i].bg_class}, b = {recs[j].fg_class, recs[j].bg_class};
      bool shares = false;
      for (auto x : a) shares = shares || b.count(x);
      const bool f = recs[i].fg_class == recs[j].fg_class;
      const bool bb = recs[i].bg_class == recs[j].bg_class;
      if (f) s.fg[i].push_back(j);
      if (bb) s.bg[i].push_back(j);
      if (shares && !f && !bb) s.cross[i].push_back(j);
      if (!f && !bb && !(shares && !f && !bb)) s.neg[i].push_back(j);
    }
  }
  return s;
}

/// Empty string when the partition and symmetry invariants hold.
inline std::string pair_set_violation(const PairSets& s) {
  const auto n = s.size();
  using Sets = std::vector<std::vector<std::size_t>>;
  const std::pair<const char*, const Sets*> kinds[] = {{"F", &s.fg}, {"B", &s.bg}, {"C", &s.cross}, {"N", &s.neg}};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> role(n, 0);
    const std::set<std::size_t> f(s.fg[i].begin(), s.fg[i].end()), b(s.bg[i].begin(), s.bg[i].end());
    for (const auto& [name, sets] : kinds)
      for (auto j : (*sets)[i]) {
        if (j == i) return "anchor " + std::to_string(i) + " is in its own " + name + " set";
        ++role[j];
      }
    for (auto j : s.cross[i])
      if (f.count(j) || b.count(j)) return "C and F/B overlap at anchor " + std::to_string(i);
    for (auto j : s.neg[i])
      if (f.count(j) || b.count(j) || role[j] != 1) return "N not disjoint at anchor " + std::to_string(i);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && role[j] == 0) return "sample " + std::to_string(j) + " missing from anchor " + std::to_string(i);
    for (const auto& [name, sets] : kinds) {
      if (std::string(name) == "N") continue;
      for (auto j : (*sets)[i]) {
        const auto& back = (*sets)[j];
        if (std::find(back.begin(), back.end(), i) == back.end())
          return std::string(name) + " not symmetric for (" + std::to_string(i) + "," + std::to_string(j) + ")";
      }
    }
  }
  return {};
}

inline OracleResult check_pair_taxonomy(std::size_t batches, std::uint64_t seed) {
  return detail::timed("pair-taxonomy", [&](OracleResult& r) {
    auto rng = seeded(seed, 0x7A0);
    for (std::size_t b = 0; b < batches; ++b) {
      const auto n = 2 + uniform_index(rng, 63);
      const auto vocab = static_cast<std::uint32_t>(1 + uniform_index(rng, 10));
      const auto recs = detail::random_records(n, vocab, rng);
      const auto got = classify_pairs(recs);
      const auto want = brute_force_pairs(recs);
      if (got.fg != want.fg || got.bg != want.bg || got.cross != want.cross || got.neg != want.neg) {
        r.detail = "batch " + std::to_string(b) + " differs from the brute-force oracle";
        return;
      }
      if (auto v = pair_set_violation(got); !v.empty()) {
        r.detail = "batch " + std::to_string(b) + ": " + v;
        return;
      }
    }
    r.passed = true;
    r.detail = std::to_string(batches) + " batches";
  });
}

/// Foreground classes against q and background classes against the counts.
inline OracleResult check_sampler(std::size_t draws, std::uint64_t seed) {
  return detail::timed("sampler-chi-square", [&](OracleResult& r) {
    const std::vector<std::uint32_t> counts = {100, 10, 1};
    std::vector<std::uint32_t> labels;
    for (std::uint32_t k = 0; k < counts.size(); ++k) labels.insert(labels.end(), counts[k], k);
    const ImageDims dims{1, 8, 8};
    Dataset data(dims, 3, std::vector<float>(labels.size() * dims.size(), 0.0f), labels);
    const auto q = foreground_sampling_probs(counts, 1.0);
    auto rng = seeded(seed, 0x5A3);
    const auto pairs = sample_mix_indices(data, q, draws, rng);
    std::vector<std::uint64_t> fg(3, 0), bg(3, 0);
    for (const auto& p : pairs) {
      ++fg[data.label(p.foreground)];
      ++bg[data.label(p.background)];
    }
    const std::vector<double> bg_probs = {100.0 / 111, 10.0 / 111, 1.0 / 111};
    const double p_fg = chi_square_p_value(fg, q), p_bg = chi_square_p_value(bg, bg_probs);
    r.passed = p_fg > kChiSquareMinP && p_bg > kChiSquareMinP;
    r.detail = std::to_string(draws) + " draws, foreground p=" + std::to_string(p_fg) +
               ", background p=" + std::to_string(p_bg);
  });
}

/// lambda on a 0.001 grid at 32x32: rounding bound and label consistency.
inline OracleResult check_mask_sweep(std::uint64_t seed) {
  return detail::timed("mask-lambda-sweep", [&](OracleResult& r) {
    constexpr std::size_t H = 32, W = 32;
    const double bound = static_cast<double>(H + W + 1) / (H * W);
    const ImageDims dims{1, H, W};
    const ImageSample fg{Image(dims, 0.7f), 0, 0}, bg{Image(dims, 0.2f), 1, 1};
    const AugmentPolicy none{0, 0.0, AugmentPlacement::none};
    auto rng = seeded(seed, 0x3A5);
    double worst = 0.0;
    for (int step = 1; step <= 999; ++step) {
      const double lambda = step / 1000.0;
      MixOptions opts;
      opts.lambda = lambda;
      const auto view = make_training_view(fg, bg, none, opts, 2, rng);
      const auto& rec = view.record;
      const double area = static_cast<double>(rec.rect.area()) / (H * W);
      worst = std::max(worst, std::abs(rec.lambda_effective - lambda));
      if (rec.lambda_effective != area || rec.soft_label[0] != rec.lambda_effective ||
          rec.soft_label[1] != 1.0 - rec.lambda_effective) {
        r.detail = "label mismatch at lambda=" + std::to_string(lambda);
        return;
      }
      if (std::abs(rec.lambda_effective - lambda) > bound) {
        r.detail = "rounding bound exceeded at lambda=" + std::to_string(lambda);
        return;
      }
    }
    r.passed = true;
    r.detail = "999 ratios, max |lambda_eff - lambda| = " + std::to_string(worst) + " <= " + std::to_string(bound);
  });
}

inline OracleResult check_loss_weights(std::size_t draws, std::uint64_t seed) {
  return detail::timed("loss-weight-sum", [&](OracleResult& r) {
    auto rng = seeded(seed, 0x3E1);
    std::vector<double> lambdas = {0.0, 0.2, 0.5, 0.8, 1.0};
    for (std::size_t i = 0; i < draws; ++i) lambdas.push_back(uniform01(rng));
    double worst = 0.0;
    for (double l : lambdas) {
      const auto w = loss_weights(l);
      worst = std::max(worst, std::abs(w.fg + w.bg + w.cross - 1.0));
    }
    r.passed = worst <= 1e-12;
    r.detail = std::to_string(lambdas.size()) + " ratios, max |sum - 1| = " + std::to_string(worst);
  });
}

inline OracleResult check_bce_invariance(std::uint64_t seed) {
  return detail::timed("bce-invariance", [&](OracleResult& r) {
    auto rng = seeded(seed, 0x1CE);
    double worst_uniform = 0.0, worst_shift = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto recs = detail::random_records(6, 4, rng);
      const auto labels = detail::soft_label_tensor(recs, 4);
      const auto z = detail::random_tensor({6, 4}, rng, -3.0, 3.0);
      std::vector<double> prior = {std::log(0.25), std::log(0.25), std::log(0.25), std::log(0.25)};
      std::vector<double> skewed = {std::log(0.6), std::log(0.25), std::log(0.1), std::log(0.05)};
      auto shifted = skewed;
      const double c = -5.0 + 10.0 * uniform01(rng);
      for (auto& v : shifted) v += c;
      Tape tape;
      const auto logits = tape.constant(z);
      worst_uniform = std::max(worst_uniform, std::abs(balanced_ce(logits, labels, prior).item() -
                                                       soft_cross_entropy(logits, labels).item()));
      worst_shift = std::max(worst_shift, std::abs(balanced_ce(logits, labels, skewed).item() -
                                                   balanced_ce(logits, labels, shifted).item()));
    }
    r.passed = worst_uniform < 1e-9 && worst_shift < 1e-9;
    r.detail = "uniform-prior gap " + std::to_string(worst_uniform) + ", shift gap " + std::to_string(worst_shift);
  });
}

/// The full suite. Quick mode trims trial counts, not coverage.
inline VerifyReport run_verify(const VerifyOptions& o) {
  VerifyReport report;
  const std::size_t trials = o.quick ? 20 : 100;
  for (auto op : kPrimitives) report.results.push_back(check_primitive(op, trials, o.seed, o.tape));
  report.results.push_back(check_smc_gradient(o.seed, o.tape));
  report.results.push_back(check_bce_gradient(o.seed, o.tape));
  report.results.push_back(check_train_gradient(o.seed, o.tape));
  report.results.push_back(check_pair_taxonomy(o.quick ? 200 : 1000, o.seed));
  report.results.push_back(check_sampler(o.quick ? 20000 : 100000, o.seed));
  report.results.push_back(check_mask_sweep(o.seed));
  report.results.push_back(check_loss_weights(1000, o.seed));
  report.results.push_back(check_bce_invariance(o.seed));
  return report;
}

}  // namespace smc
