#pragma once

// One-stage training: every step blends (foreground, background) pairs, runs
// both branches on the blended views and minimises L_bce + eta * L_smc.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smc/binary_io.hpp"
#include "smc/config.hpp"
#include "smc/dataset.hpp"
#include "smc/mixer.hpp"
#include "smc/model.hpp"
#include "smc/optim.hpp"
#include "smc/pairloss.hpp"

namespace smc {

/// Loss became non-finite. Carries the global step and the batch's records.
class DivergenceError : public std::runtime_error {
public:
  DivergenceError(std::size_t step, std::vector<MixRecord> records, const std::string& cause)
      : std::runtime_error(describe(step, records, cause)), step_(step), records_(std::move(records)) {}

  std::size_t step() const noexcept { return step_; }
  const std::vector<MixRecord>& records() const noexcept { return records_; }

private:
  static std::string describe(std::size_t step, const std::vector<MixRecord>& records, const std::string& cause) {
    std::string s = "training diverged at step " + std::to_string(step) + ": " + cause + "\nbatch records:";
    for (const auto& r : records) s += "\n  " + format_record(r);
    return s;
  }

  std::size_t step_;
  std::vector<MixRecord> records_;
};

/// Means of per-class accuracies within each split; absent when the split
/// has no class present in the evaluated data.
struct SplitAccuracy {
  std::optional<double> many, medium, few, all;

  std::optional<double> get(SplitTag t) const {
    switch (t) {
      case SplitTag::many: return many;
      case SplitTag::medium: return medium;
      case SplitTag::few: return few;
    }
    return std::nullopt;
  }
};

struct EpochLog {
  std::uint32_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss_bce = 0.0;
  std::optional<double> loss_smc;  // absent when eta == 0 (branch not evaluated)
  double loss_total = 0.0;
  std::optional<SplitAccuracy> accuracy;
  std::uint64_t self_mixes = 0;
  std::uint64_t degenerate_embeddings = 0;

  friend bool operator==(const EpochLog& a, const EpochLog& b) {
    auto same = [](const std::optional<SplitAccuracy>& x, const std::optional<SplitAccuracy>& y) {
      if (x.has_value() != y.has_value()) return false;
      return !x || (x->many == y->many && x->medium == y->medium && x->few == y->few && x->all == y->all);
    };
    return a.epoch == b.epoch && a.lr == b.lr && a.loss_bce == b.loss_bce && a.loss_smc == b.loss_smc &&
           a.loss_total == b.loss_total && same(a.accuracy, b.accuracy) && a.self_mixes == b.self_mixes &&
           a.degenerate_embeddings == b.degenerate_embeddings;
  }
};

namespace detail {

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
inline std::optional<double> optional_double(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

}  // namespace detail

inline json to_json(const SplitAccuracy& a) {
  return json{{"many", detail::optional_json(a.many)},
              {"medium", detail::optional_json(a.medium)},
              {"few", detail::optional_json(a.few)},
              {"all", detail::optional_json(a.all)}};
}

inline SplitAccuracy split_accuracy_from_json(const json& j) {
  return {detail::optional_double(j.at("many")), detail::optional_double(j.at("medium")),
          detail::optional_double(j.at("few")), detail::optional_double(j.at("all"))};
}

inline json to_json(const EpochLog& e) {
  return json{{"epoch", e.epoch},
              {"lr", e.lr},
              {"loss_bce", e.loss_bce},
              {"loss_smc", detail::optional_json(e.loss_smc)},
              {"loss_total", e.loss_total},
              {"accuracy", e.accuracy ? to_json(*e.accuracy) : json(nullptr)},
              {"self_mixes", e.self_mixes},
              {"degenerate_embeddings", e.degenerate_embeddings}};
}

inline EpochLog epoch_log_from_json(const json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<std::uint32_t>();
  e.lr = j.at("lr").get<double>();
  e.loss_bce = j.at("loss_bce").get<double>();
  e.loss_smc = detail::optional_double(j.at("loss_smc"));
  e.loss_total = j.at("loss_total").get<double>();
  if (!j.at("accuracy").is_null()) e.accuracy = split_accuracy_from_json(j.at("accuracy"));
  e.self_mixes = j.at("self_mixes").get<std::uint64_t>();
  e.degenerate_embeddings = j.at("degenerate_embeddings").get<std::uint64_t>();
  return e;
}

/// One JSON object per epoch per line.
inline void write_train_log(const std::vector<EpochLog>& log, std::ostream& out) {
  for (const auto& e : log) out << to_json(e).dump() << '\n';
}

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
  ClassStats stats;
  std::uint32_t epoch = 0;  // completed epochs
  std::string rng_state;
  SgdState optimizer;
  std::vector<EpochLog> log;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::vector<std::optional<double>> per_class;  // absent for classes missing from the data
  SplitAccuracy splits;
};

inline std::vector<std::uint32_t> predict(const ModelParams& params, const Dataset& data,
                                          std::span<const double> logit_shift = {}) {
  constexpr std::size_t kChunk = 256;
  std::vector<std::uint32_t> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
    const auto logits = classify(params, encode(params, dataset_rows(data, idx)));
    const auto classes = logits.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      double best_score = -INFINITY;
      for (std::size_t c = 0; c < classes; ++c) {
        const double s = logits(r, c) + (logit_shift.empty() ? 0.0 : logit_shift[c]);
        if (s > best_score) best_score = s, best = c;
      }
      out.push_back(static_cast<std::uint32_t>(best));
    }
  }
  return out;
}

inline SplitAccuracy aggregate_splits(const std::vector<std::optional<double>>& per_class, const SplitAssignment& splits) {
  auto mean_of = [&](auto&& include) -> std::optional<double> {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < per_class.size(); ++k)
      if (per_class[k] && include(k)) total += *per_class[k], ++n;
    return n ? std::optional<double>(total / n) : std::nullopt;
  };
  SplitAccuracy a;
  a.many = mean_of([&](std::size_t k) { return splits.tags[k] == SplitTag::many; });
  a.medium = mean_of([&](std::size_t k) { return splits.tags[k] == SplitTag::medium; });
  a.few = mean_of([&](std::size_t k) { return splits.tags[k] == SplitTag::few; });
  a.all = mean_of([](std::size_t) { return true; });
  return a;
}

/// Arg-max of the raw logits (no prior shift unless `with_prior`).
/// Splits come from the training class counts in `train_stats`.
inline EvalReport evaluate(const ModelParams& params, const Dataset& data, const ClassStats& train_stats,
                           SplitThresholds thresholds, bool with_prior = false) {
  require(data.num_classes() == params.num_classes(), "evaluate: class vocabulary of data and model differ");
  require(train_stats.counts.size() == params.num_classes(), "evaluate: class statistics do not match the model");
  const auto preds = predict(params, data, with_prior ? std::span<const double>(train_stats.log_prior) : std::span<const double>{});
  std::vector<std::size_t> hits(data.num_classes(), 0), seen(data.num_classes(), 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    ++seen[data.label(i)];
    hits[data.label(i)] += preds[i] == data.label(i);
  }
  EvalReport r;
  for (std::size_t k = 0; k < seen.size(); ++k)
    r.per_class.push_back(seen[k] ? std::optional<double>(static_cast<double>(hits[k]) / seen[k]) : std::nullopt);
  r.splits = aggregate_splits(r.per_class, split_classes(train_stats.counts, thresholds));
  return r;
}

inline EvalReport evaluate(const Checkpoint& ck, const Dataset& data) {
  return evaluate(ck.params, data, ck.stats, ck.config.thresholds(), ck.config.eval_with_prior);
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  const Dataset* eval_data = nullptr;        // accuracy is logged when set
  std::optional<std::uint32_t> stop_after;   // stop once this many epochs are complete
  std::function<void(const EpochLog&)> on_epoch;
};

inline double learning_rate_at(const TrainConfig& c, std::uint32_t epoch_index) {
  double lr = c.lr;
  for (auto e : c.lr_decay_epochs)
    if (epoch_index >= e) lr *= c.lr_decay_factor;
  return lr;
}

/// Class distribution of foreground draws under the configured sampling mode.
inline std::vector<double> foreground_class_probs(const TrainConfig& c, const ClassStats& stats) {
  auto q = foreground_sampling_probs(stats.counts, c.gamma);
  if (c.fg_sampling == FgSampling::class_first) return q;
  double total = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) total += q[k] *= static_cast<double>(stats.counts[k]);
  for (auto& v : q) v /= total;
  return q;
}

/// log of the class distribution behind the compensation vector m. `mixed`
/// is the expected soft-label mass of one blended sample,
/// E[lambda] q + (1 - E[lambda]) n / N, with E[lambda] = 1/2 for Beta(a, a).
inline std::vector<double> compensation_log_prior(const TrainConfig& c, const ClassStats& stats) {
  if (c.prior_source == PriorSource::dataset || c.mix_op == MixOp::none) return stats.log_prior;
  const auto q = foreground_class_probs(c, stats);
  std::vector<double> m(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) m[k] = std::log(0.5 * q[k] + 0.5 * stats.prior[k]);
  return m;
}

namespace detail {

struct Batch {
  std::vector<Image> images;
  std::vector<MixRecord> records;
  std::uint64_t self_mixes = 0;
};

inline Batch build_batch(const TrainConfig& c, const Dataset& data, std::span<const double> q, Rng& rng) {
  Batch b;
  const std::size_t views = c.two_views ? 2 : 1;
  const auto policy = c.augment_policy();
  MixOptions mix{c.alpha, c.lambda_range, c.mix_op, std::nullopt};

  std::vector<MixPair> pairs;
  if (c.mix_op == MixOp::none) {
    for (auto i : sample_uniform_indices(data, c.batch_size, rng)) pairs.push_back({i, i});
  } else {
    pairs = sample_mix_indices(data, q, c.batch_size, rng);
    for (const auto& p : pairs) b.self_mixes += p.self_mix();
  }

  for (const auto& p : pairs) {
    auto pair_rng = substream(rng);
    const auto fg = data.sample(p.foreground);
    const auto bg = data.sample(p.background);
    auto opts = mix;
    if (c.shared_lambda && c.mix_op != MixOp::none) opts.lambda = sample_lambda(c.alpha, c.lambda_range, pair_rng);
    for (std::size_t v = 0; v < views; ++v) {
      auto view = make_training_view(fg, bg, policy, opts, data.num_classes(), pair_rng);
      b.images.push_back(std::move(view.pixels));
      b.records.push_back(std::move(view.record));
    }
  }
  return b;
}

inline void run_epochs(Checkpoint& ck, const Dataset& data, const TrainOptions& options) {
  const auto& c = ck.config;
  require(data.num_classes() == ck.params.num_classes(), "train: dataset classes differ from the model's");
  require(data.dims() == ck.params.input, "train: image dimensions differ from the model's");
  const auto q = foreground_class_probs(c, ck.stats);
  const auto log_prior = compensation_log_prior(c, ck.stats);
  const auto steps = (data.size() + c.batch_size - 1) / c.batch_size;
  const std::uint32_t last = options.stop_after ? std::min(*options.stop_after, c.epochs) : c.epochs;
  auto rng = rng_from_state(ck.rng_state);
  auto tensors = ck.params.tensors();
  const auto classes = data.num_classes();

  for (std::uint32_t epoch = ck.epoch; epoch < last; ++epoch) {
    ck.optimizer.learning_rate = learning_rate_at(c, epoch);
    ck.optimizer.momentum = c.momentum;
    ck.optimizer.weight_decay = c.weight_decay;
    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.lr = ck.optimizer.learning_rate;
    double bce_sum = 0.0, smc_sum = 0.0, total_sum = 0.0;

    for (std::size_t step = 0; step < steps; ++step) {
      auto batch = build_batch(c, data, q, rng);
      entry.self_mixes += batch.self_mixes;
      Tensor labels = Tensor::zeros({batch.records.size(), classes});
      for (std::size_t r = 0; r < batch.records.size(); ++r)
        std::copy(batch.records[r].soft_label.begin(), batch.records[r].soft_label.end(),
                  labels.values.begin() + static_cast<std::ptrdiff_t>(r * classes));

      GradResult result;
      double bce_value = 0.0, smc_value = 0.0;
      try {
        Tape tape;
        ModelGraph graph(tape, ck.params);
        auto features = graph.encode(tape.constant(images_to_tensor(batch.images)));
        auto logits = graph.classify(features);
        auto bce = balanced_ce(logits, labels,
                               c.logit_compensation ? std::span<const double>(log_prior) : std::span<const double>{});
        auto root = bce;
        if (c.eta > 0.0) {
          auto embeddings = graph.project(features);
          const auto sets = classify_pairs(batch.records);
          auto smc = smc_loss(embeddings, sets, batch.records, c.tau, c.weighting);
          smc_value = smc.item();
          root = total_loss(bce, smc, c.eta);
        }
        bce_value = bce.item();
        result = tape.eval_with_grad(root, graph.parameters());
        entry.degenerate_embeddings += tape.degenerate_normalizations();
      } catch (const NumericFault& fault) {
        throw DivergenceError(epoch * steps + step, batch.records, fault.what());
      }
      if (!std::isfinite(result.value))
        throw DivergenceError(epoch * steps + step, batch.records, "non-finite loss");

      sgd_step(tensors, result.grads, ck.optimizer);
      bce_sum += bce_value;
      smc_sum += smc_value;
      total_sum += result.value;
    }

    entry.loss_bce = bce_sum / steps;
    if (c.eta > 0.0) entry.loss_smc = smc_sum / steps;
    entry.loss_total = total_sum / steps;
    if (options.eval_data && ((epoch + 1) % c.eval_every == 0 || epoch + 1 == c.epochs)) {
      entry.accuracy = evaluate(ck.params, *options.eval_data, ck.stats, c.thresholds(), c.eval_with_prior).splits;
    }
    ck.epoch = epoch + 1;
    ck.rng_state = rng_state(rng);
    ck.log.push_back(entry);
    if (options.on_epoch) options.on_epoch(entry);
  }
}

}  // namespace detail

/// Trains from a fresh initialisation. The returned checkpoint's log is the
/// per-epoch training record.
inline Checkpoint train(const TrainConfig& config, const Dataset& data, const TrainOptions& options = {}) {
  Checkpoint ck;
  ck.config = config;
  ck.stats = make_class_stats(data.counts());
  ck.params = init_model(config.encoder_widths, data.num_classes(), data.dims(), config.seed, config.embedding_dim);
  ck.rng_state = rng_state(seeded(config.seed, 0x7A1));
  detail::run_epochs(ck, data, options);
  return ck;
}

/// Continues a checkpoint to its configured epoch count.
inline Checkpoint resume(Checkpoint ck, const Dataset& data, const TrainOptions& options = {}) {
  require(ck.stats.counts == data.counts(), "resume: dataset class counts differ from the checkpoint's");
  detail::run_epochs(ck, data, options);
  return ck;
}

// ---------------------------------------------------------------------------
// Checkpoint file (SMCK)

inline constexpr char kCheckpointMagic[4] = {'S', 'M', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Layout: magic, u16 version, u32 + canonical JSON metadata (config, class
/// counts, epoch, image dims, log), u32 tensor count, per tensor {u16 name
/// length, name, u8 rank, u32 dims, u64 offset}, u64 value count, f64 values,
/// u32 + RNG state bytes. Velocity buffers are stored as "sgd.velocity.<name>".
inline void save_checkpoint(const Checkpoint& ck, std::ostream& out) {
  json meta;
  meta["config"] = to_json(ck.config);
  meta["class_counts"] = ck.stats.counts;
  meta["epoch"] = ck.epoch;
  meta["image_dims"] = {ck.params.input.channels, ck.params.input.height, ck.params.input.width};
  meta["log"] = json::array();
  for (const auto& e : ck.log) meta["log"].push_back(to_json(e));
  const auto meta_text = canonical_json(meta);

  std::vector<std::pair<std::string, const std::vector<double>*>> blobs;
  std::vector<Shape> shapes;
  const auto named = ck.params.named_tensors();
  for (const auto& [name, t] : named) {
    blobs.emplace_back(name, &t->values);
    shapes.push_back(t->shape);
  }
  if (!ck.optimizer.velocity.empty()) {
    require(ck.optimizer.velocity.size() == named.size(), "save_checkpoint: optimizer state does not match parameters");
    for (std::size_t i = 0; i < named.size(); ++i) {
      blobs.emplace_back("sgd.velocity." + named[i].first, &ck.optimizer.velocity[i]);
      shapes.push_back(named[i].second->shape);
    }
  }

  out.write(kCheckpointMagic, 4);
  io::write_le<std::uint16_t>(out, kCheckpointVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  io::write_bytes(out, meta_text);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(blobs.size()));
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    io::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(blobs[i].first.size()));
    io::write_bytes(out, blobs[i].first);
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(shapes[i].size()));
    for (auto d : shapes[i]) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    io::write_le<std::uint64_t>(out, offset);
    offset += blobs[i].second->size();
  }
  io::write_le<std::uint64_t>(out, offset);
  for (const auto& b : blobs)
    for (double v : *b.second) io::write_le<double>(out, v);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.rng_state.size()));
  io::write_bytes(out, ck.rng_state);
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open " + path + " for writing");
  save_checkpoint(ck, out);
  require(out.good(), "failed writing " + path);
}

inline Checkpoint load_checkpoint(std::istream& in) {
  if (io::read_bytes(in, 4, "magic") != std::string(kCheckpointMagic, 4))
    throw ParseError("not a checkpoint file (bad magic)", 0);
  const auto version = io::read_le<std::uint16_t>(in, "version");
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto meta_len = io::read_le<std::uint32_t>(in, "metadata length");
  const auto meta_offset = static_cast<std::uint64_t>(in.tellg());
  json meta;
  try {
    meta = json::parse(io::read_bytes(in, meta_len, "metadata"));
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed checkpoint metadata: ") + e.what(), meta_offset);
  }

  Checkpoint ck;
  try {
    ck.config = train_config_from_json(meta.at("config"));
    ck.stats = make_class_stats(meta.at("class_counts").get<std::vector<std::uint32_t>>());
    ck.epoch = meta.at("epoch").get<std::uint32_t>();
    const auto dims = meta.at("image_dims").get<std::vector<std::uint16_t>>();
    require(dims.size() == 3, "image_dims must have three entries");
    for (const auto& e : meta.at("log")) ck.log.push_back(epoch_log_from_json(e));
    ck.params = init_model(ck.config.encoder_widths, ck.stats.counts.size(), ImageDims{dims[0], dims[1], dims[2]}, 0,
                           ck.config.embedding_dim);
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid checkpoint metadata: ") + e.what(), meta_offset);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("invalid checkpoint config: ") + e.what(), meta_offset);
  }

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries(io::read_le<std::uint32_t>(in, "tensor count"));
  for (auto& e : entries) {
    const auto len = io::read_le<std::uint16_t>(in, "tensor name length");
    e.name = io::read_bytes(in, len, "tensor name");
    const auto rank = io::read_le<std::uint8_t>(in, "tensor rank");
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(io::read_le<std::uint32_t>(in, "tensor dims"));
    e.offset = io::read_le<std::uint64_t>(in, "tensor offset");
  }
  const auto count = io::read_le<std::uint64_t>(in, "value count");
  std::vector<double> values(count);
  for (auto& v : values) v = io::read_le<double>(in, "tensor values");
  const auto rng_len = io::read_le<std::uint32_t>(in, "rng state length");
  ck.rng_state = io::read_bytes(in, rng_len, "rng state");

  auto lookup = [&](const std::string& name, const Shape& shape) -> std::optional<std::vector<double>> {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].name != name) continue;
      if (entries[i].shape != shape) throw ParseError("tensor '" + name + "' has shape " + shape_string(entries[i].shape) +
                                                          ", expected " + shape_string(shape), 0);
      const auto n = shape_size(shape);
      if (entries[i].offset + n > values.size()) throw ParseError("tensor '" + name + "' exceeds the value block", 0);
      return std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(entries[i].offset),
                                 values.begin() + static_cast<std::ptrdiff_t>(entries[i].offset + n));
    }
    return std::nullopt;
  };
  for (auto& [name, t] : ck.params.named_tensors()) {
    auto v = lookup(name, t->shape);
    if (!v) throw ParseError("checkpoint is missing tensor '" + name + "'", 0);
    t->values = std::move(*v);
  }
  for (auto& [name, t] : ck.params.named_tensors()) {
    auto v = lookup("sgd.velocity." + name, t->shape);
    if (!v) {
      ck.optimizer.velocity.clear();
      break;
    }
    ck.optimizer.velocity.push_back(std::move(*v));
  }
  ck.optimizer.learning_rate = learning_rate_at(ck.config, ck.epoch);
  ck.optimizer.momentum = ck.config.momentum;
  ck.optimizer.weight_decay = ck.config.weight_decay;
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint file " + path, 0);
  return load_checkpoint(in);
}

}  // namespace smc
