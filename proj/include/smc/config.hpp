#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "smc/dataset.hpp"
#include "smc/mixer.hpp"
#include "smc/pairloss.hpp"

namespace smc {

using json = nlohmann::json;

/// Bad configuration value or unknown key; `key()` names the offender.
class ConfigError : public std::runtime_error {
public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error("config key '" + key + "': " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

private:
  std::string key_;
};

enum class InterClassMetric : std::uint8_t { l2, raw_sum };

/// Which class distribution supplies the compensation vector m.
enum class PriorSource : std::uint8_t { dataset, mixed };

/// class-first: q picks the class. instance-weighted: every instance of class k
/// carries weight q(k), so class k is drawn with probability proportional to n_k q(k).
enum class FgSampling : std::uint8_t { class_first, instance_weighted };

struct TrainConfig {
  std::uint32_t epochs = 60;
  std::uint32_t batch_size = 64;
  double lr = 0.1;
  std::vector<std::uint32_t> lr_decay_epochs = {40, 50};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  double eta = 0.1;        // contrastive loss weight
  double tau = 0.1;        // contrastive temperature
  double tau_prime = 10.0; // inter-class score temperature
  double alpha = 1.0;      // Beta(alpha, alpha)
  double gamma = 1.0;      // foreground sampling exponent

  LambdaRange lambda_range = LambdaRange::normalized;
  MixOp mix_op = MixOp::resize;
  AugmentPlacement placement = AugmentPlacement::before_mix;
  std::uint32_t pad = 4;
  double flip_prob = 0.5;
  WeightingScheme weighting = WeightingScheme::weighted;
  bool logit_compensation = true;
  PriorSource prior_source = PriorSource::dataset;
  FgSampling fg_sampling = FgSampling::class_first;
  bool two_views = true;
  bool shared_lambda = false;

  std::vector<std::size_t> encoder_widths = {256, 128};
  std::uint32_t embedding_dim = 128;
  std::uint64_t seed = 1;

  double split_many = 100.0;
  double split_few = 20.0;
  std::uint32_t eval_every = 1;
  bool eval_with_prior = false;
  bool centers_from_embeddings = false;
  InterClassMetric is_metric = InterClassMetric::l2;

  SplitThresholds thresholds() const { return {split_many, split_few}; }
  AugmentPolicy augment_policy() const { return {pad, flip_prob, placement}; }
};

namespace detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<LambdaRange> {
  static constexpr std::pair<LambdaRange, const char*> values[] = {{LambdaRange::normalized, "normalized"},
                                                                  {LambdaRange::full, "full"}};
};
template <>
struct EnumNames<MixOp> {
  static constexpr std::pair<MixOp, const char*> values[] = {
      {MixOp::resize, "resize"}, {MixOp::crop, "crop"}, {MixOp::none, "none"}};
};
template <>
struct EnumNames<AugmentPlacement> {
  static constexpr std::pair<AugmentPlacement, const char*> values[] = {{AugmentPlacement::before_mix, "before-mix"},
                                                                       {AugmentPlacement::after_mix, "after-mix"},
                                                                       {AugmentPlacement::none, "none"}};
};
template <>
struct EnumNames<WeightingScheme> {
  static constexpr std::pair<WeightingScheme, const char*> values[] = {{WeightingScheme::weighted, "weighted"},
                                                                      {WeightingScheme::averaging, "averaging"},
                                                                      {WeightingScheme::assign_larger, "assign-larger"}};
};
template <>
struct EnumNames<PriorSource> {
  static constexpr std::pair<PriorSource, const char*> values[] = {{PriorSource::dataset, "dataset"},
                                                                  {PriorSource::mixed, "mixed"}};
};
template <>
struct EnumNames<FgSampling> {
  static constexpr std::pair<FgSampling, const char*> values[] = {{FgSampling::class_first, "class-first"},
                                                                 {FgSampling::instance_weighted, "instance-weighted"}};
};
template <>
struct EnumNames<InterClassMetric> {
  static constexpr std::pair<InterClassMetric, const char*> values[] = {{InterClassMetric::l2, "l2"},
                                                                       {InterClassMetric::raw_sum, "raw-sum"}};
};

}  // namespace detail

template <typename E>
std::string enum_name(E value) {
  for (const auto& [v, name] : detail::EnumNames<E>::values)
    if (v == value) return name;
  return "?";
}

template <typename E>
E parse_enum(const std::string& key, const std::string& text) {
  std::string allowed;
  for (const auto& [v, name] : detail::EnumNames<E>::values) {
    if (text == name) return v;
    allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  }
  throw ConfigError(key, "invalid value '" + text + "' (expected one of " + allowed + ")");
}

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"lr_decay_epochs", c.lr_decay_epochs},
              {"lr_decay_factor", c.lr_decay_factor},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"eta", c.eta},
              {"tau", c.tau},
              {"tau_prime", c.tau_prime},
              {"alpha", c.alpha},
              {"gamma", c.gamma},
              {"lambda_range", enum_name(c.lambda_range)},
              {"mix_op", enum_name(c.mix_op)},
              {"augment_placement", enum_name(c.placement)},
              {"pad", c.pad},
              {"flip_prob", c.flip_prob},
              {"weighting", enum_name(c.weighting)},
              {"logit_compensation", c.logit_compensation},
              {"prior_source", enum_name(c.prior_source)},
              {"fg_sampling", enum_name(c.fg_sampling)},
              {"two_views", c.two_views},
              {"shared_lambda", c.shared_lambda},
              {"encoder_widths", c.encoder_widths},
              {"embedding_dim", c.embedding_dim},
              {"seed", c.seed},
              {"split_many", c.split_many},
              {"split_few", c.split_few},
              {"eval_every", c.eval_every},
              {"eval_with_prior", c.eval_with_prior},
              {"centers_from_embeddings", c.centers_from_embeddings},
              {"is_metric", enum_name(c.is_metric)}};
}

namespace detail {

template <typename T>
T get_as(const json& j, const std::string& key) {
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!j.is_number_unsigned()) throw ConfigError(key, "expected a non-negative integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw ConfigError(key, "expected a number");
  }
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(key, "wrong type (" + std::string(j.type_name()) + ")");
  }
}

inline void check(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

}  // namespace detail

/// Overlays `j` onto `base`. Unknown keys, wrong types and out-of-range
/// values raise ConfigError naming the key.
inline TrainConfig train_config_from_json(const json& j, TrainConfig base = {}) {
  using detail::check;
  using detail::get_as;
  if (!j.is_object()) throw ConfigError("<root>", "configuration must be a JSON object");
  auto& c = base;
  for (const auto& [key, v] : j.items()) {
    if (key == "epochs") c.epochs = get_as<std::uint32_t>(v, key);
    else if (key == "batch_size") c.batch_size = get_as<std::uint32_t>(v, key);
    else if (key == "lr") c.lr = get_as<double>(v, key);
    else if (key == "lr_decay_epochs") c.lr_decay_epochs = get_as<std::vector<std::uint32_t>>(v, key);
    else if (key == "lr_decay_factor") c.lr_decay_factor = get_as<double>(v, key);
    else if (key == "momentum") c.momentum = get_as<double>(v, key);
    else if (key == "weight_decay") c.weight_decay = get_as<double>(v, key);
    else if (key == "eta") c.eta = get_as<double>(v, key);
    else if (key == "tau") c.tau = get_as<double>(v, key);
    else if (key == "tau_prime") c.tau_prime = get_as<double>(v, key);
    else if (key == "alpha") c.alpha = get_as<double>(v, key);
    else if (key == "gamma") c.gamma = get_as<double>(v, key);
    else if (key == "lambda_range") c.lambda_range = parse_enum<LambdaRange>(key, get_as<std::string>(v, key));
    else if (key == "mix_op") c.mix_op = parse_enum<MixOp>(key, get_as<std::string>(v, key));
    else if (key == "augment_placement") c.placement = parse_enum<AugmentPlacement>(key, get_as<std::string>(v, key));
    else if (key == "pad") c.pad = get_as<std::uint32_t>(v, key);
    else if (key == "flip_prob") c.flip_prob = get_as<double>(v, key);
    else if (key == "weighting") c.weighting = parse_enum<WeightingScheme>(key, get_as<std::string>(v, key));
    else if (key == "logit_compensation") c.logit_compensation = get_as<bool>(v, key);
    else if (key == "prior_source") c.prior_source = parse_enum<PriorSource>(key, get_as<std::string>(v, key));
    else if (key == "fg_sampling") c.fg_sampling = parse_enum<FgSampling>(key, get_as<std::string>(v, key));
    else if (key == "two_views") c.two_views = get_as<bool>(v, key);
    else if (key == "shared_lambda") c.shared_lambda = get_as<bool>(v, key);
    else if (key == "encoder_widths") c.encoder_widths = get_as<std::vector<std::size_t>>(v, key);
    else if (key == "embedding_dim") c.embedding_dim = get_as<std::uint32_t>(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "split_many") c.split_many = get_as<double>(v, key);
    else if (key == "split_few") c.split_few = get_as<double>(v, key);
    else if (key == "eval_every") c.eval_every = get_as<std::uint32_t>(v, key);
    else if (key == "eval_with_prior") c.eval_with_prior = get_as<bool>(v, key);
    else if (key == "centers_from_embeddings") c.centers_from_embeddings = get_as<bool>(v, key);
    else if (key == "is_metric") c.is_metric = parse_enum<InterClassMetric>(key, get_as<std::string>(v, key));
    else throw ConfigError(key, "unknown key");
  }
  check(c.epochs >= 1, "epochs", "must be >= 1");
  check(c.batch_size >= 1, "batch_size", "must be >= 1");
  check(c.lr > 0.0, "lr", "must be positive");
  check(c.lr_decay_factor > 0.0, "lr_decay_factor", "must be positive");
  check(c.momentum >= 0.0 && c.momentum < 1.0, "momentum", "must lie in [0,1)");
  check(c.weight_decay >= 0.0, "weight_decay", "must be >= 0");
  check(c.eta >= 0.0, "eta", "must be >= 0");
  check(c.tau > 0.0, "tau", "must be positive");
  check(c.tau_prime > 0.0, "tau_prime", "must be positive");
  check(c.alpha > 0.0, "alpha", "must be positive");
  check(c.gamma >= 0.0, "gamma", "must be >= 0");
  check(c.flip_prob >= 0.0 && c.flip_prob <= 1.0, "flip_prob", "must lie in [0,1]");
  check(!c.encoder_widths.empty(), "encoder_widths", "needs at least one layer");
  for (auto w : c.encoder_widths) check(w > 0, "encoder_widths", "widths must be positive");
  check(c.embedding_dim > 0, "embedding_dim", "must be positive");
  check(c.split_many > c.split_few && c.split_few >= 0.0, "split_many", "thresholds need split_many > split_few >= 0");
  check(c.eval_every >= 1, "eval_every", "must be >= 1");
  check(c.two_views || c.batch_size >= 2, "batch_size",
        "a single-view batch needs at least two samples for the contrastive loss");
  return c;
}

/// Key-order independent rendering: nlohmann objects are sorted maps.
inline std::string canonical_json(const json& j) { return j.dump(); }

/// 64-bit FNV-1a of the canonical JSON, as 16 hex digits.
inline std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : canonical_json(j)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace smc
