// smc: dataset synthesis, training, evaluation, diagnostics, mix preview and
// self-verification.
//
// Exit codes: 0 success, 1 runtime failure (I/O, parse), 2 configuration
// error naming the key, 3 verification failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smc/smc.hpp"

namespace {

using smc::ConfigError;
using smc::json;

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

/// Shared flags plus the per-command overrides collected from the command line.
struct Invocation {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  json overrides = json::object();
  std::vector<std::string> sets;  // --set key=json
};

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  try {
    auto j = json::parse(in);
    if (!j.is_object()) throw ConfigError("<root>", "configuration must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON in ") + path + ": " + e.what());
  }
}

/// File values, then --set entries, then dedicated flags.
json merged_config(const Invocation& inv, const char* seed_key) {
  auto j = load_config_file(inv.config_path);
  for (const auto& s : inv.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(s, "--set expects key=value");
    const auto key = s.substr(0, eq), text = s.substr(eq + 1);
    try {
      j[key] = json::parse(text);
    } catch (const json::parse_error&) {
      j[key] = text;
    }
  }
  for (const auto& [k, v] : inv.overrides.items()) j[k] = v;
  if (inv.seed) j[seed_key] = *inv.seed;
  if (!inv.out.empty()) j["out"] = inv.out;
  return j;
}

/// Removes `keys` from `j` and returns them; leftover keys stay for the next schema.
json take_keys(json& j, const std::set<std::string>& keys) {
  json taken = json::object();
  for (const auto& k : keys)
    if (j.contains(k)) {
      taken[k] = j[k];
      j.erase(k);
    }
  return taken;
}

void reject_leftovers(const json& j) {
  for (const auto& [k, v] : j.items()) throw ConfigError(k, "unknown key");
}

template <typename T>
T value_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(key, "wrong type (" + std::string(j.at(key).type_name()) + ")");
  }
}

std::string required_path(const json& j, const std::string& key) {
  auto v = value_or<std::string>(j, key, "");
  if (v.empty()) throw ConfigError(key, "path is required");
  return v;
}

struct Manifest {
  std::string command;
  json config;
  std::vector<std::string> artifacts;
  double wall_time = 0.0;
  int exit_status = 0;
};

// File locations do not change what a run computes, so they stay out of the hash.
std::string settings_hash(json config) {
  if (config.is_object())
    for (const char* key : {"out", "data", "eval_data", "log", "resume", "checkpoint", "semantic", "records"})
      config.erase(key);
  return smc::config_hash(config);
}

void write_manifest(const Manifest& m, const std::string& out) {
  json j{{"command", m.command},
         {"config", m.config},
         {"config-hash", settings_hash(m.config)},
         {"artifacts", m.artifacts},
         {"wall_time_seconds", m.wall_time},
         {"exit_status", m.exit_status}};
  std::ofstream f(out + ".manifest.json");
  f << j.dump(2) << '\n';
}

std::ostream& log_stream(const Invocation& inv) {
  static std::ostream null(nullptr);
  return inv.quiet ? null : std::cout;
}

// ---------------------------------------------------------------------------
// Commands. Each returns the exit status and fills the manifest.

int cmd_synth(const Invocation& inv, Manifest& m) {
  auto j = merged_config(inv, "seed");
  auto io = take_keys(j, {"out", "semantic", "balanced_per_class"});
  auto spec_keys = take_keys(j, {"classes", "rho", "n_max", "image_size", "channels", "noise", "seed"});
  reject_leftovers(j);
  smc::SynthSpec spec;
  spec.classes = value_or<std::uint32_t>(spec_keys, "classes", spec.classes);
  spec.rho = value_or<double>(spec_keys, "rho", spec.rho);
  spec.n_max = value_or<std::uint32_t>(spec_keys, "n_max", spec.n_max);
  spec.image_size = value_or<std::uint16_t>(spec_keys, "image_size", spec.image_size);
  spec.channels = value_or<std::uint16_t>(spec_keys, "channels", spec.channels);
  spec.noise = value_or<double>(spec_keys, "noise", spec.noise);
  spec.seed = value_or<std::uint64_t>(spec_keys, "seed", spec.seed);
  if (spec.classes < 2) throw ConfigError("classes", "must be >= 2");
  if (spec.rho < 1.0) throw ConfigError("rho", "must be >= 1");
  if (spec.n_max < 1) throw ConfigError("n_max", "must be >= 1");
  if (spec.image_size < 8) throw ConfigError("image_size", "must be >= 8 (mask geometry degenerates below)");
  if (spec.noise < 0.0) throw ConfigError("noise", "must be >= 0");
  const auto per_class = value_or<std::uint32_t>(io, "balanced_per_class", 0);
  const auto out = required_path(io, "out");
  const auto semantic = value_or<std::string>(io, "semantic", "");

  m.config = {{"classes", spec.classes}, {"rho", spec.rho},     {"n_max", spec.n_max},
              {"image_size", spec.image_size}, {"channels", spec.channels}, {"noise", spec.noise},
              {"seed", spec.seed},       {"balanced_per_class", per_class}, {"out", out}};
  if (!semantic.empty()) m.config["semantic"] = semantic;

  const auto result = per_class ? smc::synth_balanced(spec, per_class) : smc::synth_longtail(spec);
  smc::save_dataset(result.dataset, out);
  m.artifacts.push_back(out);
  if (!semantic.empty()) {
    smc::save_semantic_vectors(result.semantics, semantic);
    m.artifacts.push_back(semantic);
  }
  auto& log = log_stream(inv);
  log << "wrote " << out << " (" << result.dataset.size() << " samples, counts";
  for (auto n : result.stats.counts) log << ' ' << n;
  log << ")\n";
  return 0;
}

int cmd_train(const Invocation& inv, Manifest& m) {
  auto j = merged_config(inv, "seed");
  auto io = take_keys(j, {"out", "data", "eval_data", "log", "resume", "stop_after"});
  const auto resume_path = value_or<std::string>(io, "resume", "");
  smc::TrainConfig base;
  std::optional<smc::Checkpoint> start;
  if (!resume_path.empty()) {
    start = smc::load_checkpoint(resume_path);
    base = start->config;
  }
  const auto config = smc::train_config_from_json(j, base);
  const auto data_path = required_path(io, "data");
  const auto out = required_path(io, "out");
  const auto log_path = value_or<std::string>(io, "log", out + ".log.jsonl");
  const auto eval_path = value_or<std::string>(io, "eval_data", "");
  std::optional<std::uint32_t> stop_after;
  if (io.contains("stop_after")) stop_after = value_or<std::uint32_t>(io, "stop_after", 0);

  m.config = smc::to_json(config);
  for (const auto& [k, v] : io.items()) m.config[k] = v;
  m.config["log"] = log_path;

  const auto data = smc::load_dataset(data_path);
  std::optional<smc::Dataset> eval;
  if (!eval_path.empty()) eval = smc::load_dataset(eval_path);

  auto& log = log_stream(inv);
  smc::TrainOptions options;
  options.eval_data = eval ? &*eval : nullptr;
  options.stop_after = stop_after;
  options.on_epoch = [&](const smc::EpochLog& e) { log << smc::to_json(e).dump() << '\n'; };

  smc::Checkpoint ck;
  if (start) {
    start->config = config;
    ck = smc::resume(std::move(*start), data, options);
  } else {
    ck = smc::train(config, data, options);
  }
  smc::save_checkpoint(ck, out);
  std::ofstream lf(log_path);
  smc::write_train_log(ck.log, lf);
  m.artifacts = {out, log_path};
  return 0;
}

json eval_json(const smc::EvalReport& r) {
  json per_class = json::array();
  for (const auto& v : r.per_class) per_class.push_back(smc::detail::optional_json(v));
  return {{"per_class", per_class}, {"accuracy", smc::to_json(r.splits)}};
}

int cmd_eval(const Invocation& inv, Manifest& m) {
  auto j = merged_config(inv, "seed");
  auto io = take_keys(j, {"out", "checkpoint", "data", "eval_with_prior", "seed"});
  reject_leftovers(j);
  const auto ck_path = required_path(io, "checkpoint");
  const auto data_path = required_path(io, "data");
  const auto out = required_path(io, "out");
  m.config = io;

  auto ck = smc::load_checkpoint(ck_path);
  if (io.contains("eval_with_prior")) ck.config.eval_with_prior = value_or<bool>(io, "eval_with_prior", false);
  const auto data = smc::load_dataset(data_path);
  const auto report = eval_json(smc::evaluate(ck, data));
  std::ofstream(out) << report.dump(2) << '\n';
  m.artifacts = {out};
  log_stream(inv) << report["accuracy"].dump() << '\n';
  return 0;
}

int cmd_analyze(const Invocation& inv, Manifest& m) {
  auto j = merged_config(inv, "seed");
  auto io = take_keys(j, {"out", "checkpoint", "data", "semantic", "tau_prime", "is_metric", "centers_from_embeddings", "seed"});
  reject_leftovers(j);
  const auto ck_path = required_path(io, "checkpoint");
  const auto data_path = required_path(io, "data");
  const auto sem_path = required_path(io, "semantic");
  const auto out = required_path(io, "out");
  m.config = io;

  auto ck = smc::load_checkpoint(ck_path);
  json overlay = json::object();
  for (const char* k : {"tau_prime", "is_metric", "centers_from_embeddings"})
    if (io.contains(k)) overlay[k] = io[k];
  ck.config = smc::train_config_from_json(overlay, ck.config);
  const auto data = smc::load_dataset(data_path);
  const auto semantics = smc::load_semantic_vectors(sem_path, data.num_classes());
  const auto report = smc::accuracy_report(ck, data, semantics);
  std::ofstream(out) << smc::to_json(report).dump(2) << '\n';
  m.artifacts = {out};
  log_stream(inv) << smc::format_report(report);
  return 0;
}

int cmd_mix_preview(const Invocation& inv, Manifest& m) {
  auto j = merged_config(inv, "seed");
  auto io = take_keys(j, {"out", "data", "count", "records"});
  const auto config = smc::train_config_from_json(j);
  const auto data_path = required_path(io, "data");
  const auto out = required_path(io, "out");
  const auto records_path = value_or<std::string>(io, "records", out + ".records.txt");
  const auto count = value_or<std::uint32_t>(io, "count", 16);
  if (count == 0) throw ConfigError("count", "must be >= 1");
  m.config = smc::to_json(config);
  for (const auto& [k, v] : io.items()) m.config[k] = v;
  m.config["records"] = records_path;

  const auto data = smc::load_dataset(data_path);
  auto batch_config = config;
  batch_config.batch_size = count;
  const auto stats = smc::make_class_stats(data.counts());
  const auto q = smc::foreground_class_probs(config, stats);
  auto rng = smc::seeded(config.seed, 0x7A1);
  const auto batch = smc::detail::build_batch(batch_config, data, q, rng);

  std::vector<float> pixels;
  std::vector<std::uint32_t> labels;
  for (std::size_t i = 0; i < batch.images.size(); ++i) {
    pixels.insert(pixels.end(), batch.images[i].pixels.begin(), batch.images[i].pixels.end());
    labels.push_back(batch.records[i].fg_class);
  }
  smc::save_dataset(smc::Dataset(data.dims(), data.num_classes(), std::move(pixels), std::move(labels)), out);
  std::ofstream rf(records_path);
  for (std::size_t i = 0; i < batch.records.size(); ++i) rf << "sample=" << i << ' ' << smc::format_record(batch.records[i]) << '\n';
  m.artifacts = {out, records_path};
  log_stream(inv) << "wrote " << batch.images.size() << " blended views to " << out << '\n';
  return 0;
}

int cmd_verify(const Invocation& inv, Manifest& m) {
  auto j = merged_config(inv, "seed");
  auto io = take_keys(j, {"out", "quick", "seed", "inject_fault"});
  reject_leftovers(j);
  smc::VerifyOptions options;
  options.quick = value_or<bool>(io, "quick", false);
  options.seed = value_or<std::uint64_t>(io, "seed", options.seed);
  const auto fault = value_or<std::string>(io, "inject_fault", "");
  if (!fault.empty()) {
    const auto op = smc::op_from_name(fault);
    if (!op) throw ConfigError("inject_fault", "unknown primitive '" + fault + "'");
    options.tape.corrupt_backward = *op;
  }
  const auto out = value_or<std::string>(io, "out", "verify-report.json");
  m.config = io;
  m.config["out"] = out;

  const auto report = smc::run_verify(options);
  json results = json::array();
  auto& log = log_stream(inv);
  for (const auto& r : report.results) {
    results.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
    log << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << '\n';
  }
  std::ofstream(out) << json{{"passed", report.passed()}, {"results", results}}.dump(2) << '\n';
  m.artifacts = {out};
  if (report.passed()) return 0;
  std::cerr << "verification failed:";
  for (const auto& name : report.failures()) std::cerr << ' ' << name;
  std::cerr << '\n';
  return kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised contrastive learning on mixed classes"};
  app.require_subcommand(1);
  Invocation inv;

  auto shared = [&](CLI::App* sub) {
    sub->add_option("--config", inv.config_path, "JSON config file; flags override its values");
    sub->add_option("--seed", inv.seed, "random seed");
    sub->add_option("-o,--out", inv.out, "output path");
    sub->add_flag("--quiet", inv.quiet, "suppress progress output");
    sub->add_option("--set", inv.sets, "override any config key: key=<json value>");
  };
  // Flags that map 1:1 onto config keys.
  auto keyed = [&](CLI::App* sub, const std::string& flag, const std::string& key, auto tag, const std::string& help) {
    using T = decltype(tag);
    return sub->add_option_function<T>(flag, [&inv, key](const T& v) { inv.overrides[key] = v; }, help);
  };
  auto keyed_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    sub->add_flag_function(flag, [&inv, key](std::int64_t n) { inv.overrides[key] = n > 0; }, help);
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic long-tailed dataset");
  shared(synth);
  keyed(synth, "--classes", "classes", std::uint32_t{}, "number of classes");
  keyed(synth, "--rho", "rho", double{}, "imbalance ratio");
  keyed(synth, "--n-max", "n_max", std::uint32_t{}, "largest class count");
  keyed(synth, "--image-size", "image_size", std::uint32_t{}, "image side length");
  keyed(synth, "--channels", "channels", std::uint32_t{}, "channels");
  keyed(synth, "--noise", "noise", double{}, "per-pixel noise standard deviation");
  keyed(synth, "--balanced-per-class", "balanced_per_class", std::uint32_t{}, "balanced set with this many per class");
  keyed(synth, "--semantic", "semantic", std::string{}, "write class semantic vectors here");

  auto train_flags = [&](CLI::App* sub) {
    keyed(sub, "--epochs", "epochs", std::uint32_t{}, "epochs");
    keyed(sub, "--batch-size", "batch_size", std::uint32_t{}, "pairs per step");
    keyed(sub, "--lr", "lr", double{}, "initial learning rate");
    keyed(sub, "--eta", "eta", double{}, "contrastive loss weight");
    keyed(sub, "--tau", "tau", double{}, "contrastive temperature");
    keyed(sub, "--alpha", "alpha", double{}, "Beta(alpha, alpha) parameter");
    keyed(sub, "--gamma", "gamma", double{}, "foreground sampling exponent");
    keyed(sub, "--lambda-range", "lambda_range", std::string{}, "normalized | full");
    keyed(sub, "--mix-op", "mix_op", std::string{}, "resize | crop | none");
    keyed(sub, "--augment-placement", "augment_placement", std::string{}, "before-mix | after-mix | none");
    keyed(sub, "--weighting", "weighting", std::string{}, "weighted | averaging | assign-larger");
    keyed(sub, "--fg-sampling", "fg_sampling", std::string{}, "class-first | instance-weighted");
    keyed(sub, "--prior-source", "prior_source", std::string{}, "dataset | mixed");
    keyed_flag(sub, "--logit-compensation,!--no-logit-compensation", "logit_compensation", "add log prior in the loss");
    keyed_flag(sub, "--two-views,!--one-view", "two_views", "two blended views per pair");
    keyed_flag(sub, "--shared-lambda", "shared_lambda", "share lambda between the views of a pair");
  };

  auto* train = app.add_subcommand("train", "train a model");
  shared(train);
  keyed(train, "--data", "data", std::string{}, "training dataset (.smcd)");
  keyed(train, "--eval-data", "eval_data", std::string{}, "evaluation dataset for per-epoch accuracy");
  keyed(train, "--log", "log", std::string{}, "train log path (default <out>.log.jsonl)");
  keyed(train, "--resume", "resume", std::string{}, "continue from this checkpoint");
  keyed(train, "--stop-after", "stop_after", std::uint32_t{}, "stop once this many epochs are complete");
  train_flags(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  shared(eval);
  keyed(eval, "--checkpoint", "checkpoint", std::string{}, "checkpoint (.smck)");
  keyed(eval, "--data", "data", std::string{}, "evaluation dataset");
  keyed_flag(eval, "--with-prior", "eval_with_prior", "add the log prior before arg-max");

  auto* analyze = app.add_subcommand("analyze", "feature-space diagnostics report");
  shared(analyze);
  keyed(analyze, "--checkpoint", "checkpoint", std::string{}, "checkpoint (.smck)");
  keyed(analyze, "--data", "data", std::string{}, "un-mixed dataset for centers and accuracy");
  keyed(analyze, "--semantic", "semantic", std::string{}, "class semantic vectors");
  keyed(analyze, "--tau-prime", "tau_prime", double{}, "inter-class score temperature");
  keyed(analyze, "--is-metric", "is_metric", std::string{}, "l2 | raw-sum");
  keyed_flag(analyze, "--centers-from-embeddings", "centers_from_embeddings", "use head embeddings for centers");

  auto* preview = app.add_subcommand("mix-preview", "write blended views and their records");
  shared(preview);
  keyed(preview, "--data", "data", std::string{}, "source dataset");
  keyed(preview, "--count", "count", std::uint32_t{}, "number of (fg, bg) pairs");
  keyed(preview, "--records", "records", std::string{}, "record sidecar path (default <out>.records.txt)");
  train_flags(preview);

  auto* verify = app.add_subcommand("verify", "run the built-in oracle suite");
  shared(verify);
  keyed_flag(verify, "--quick", "quick", "fewer random trials");
  keyed(verify, "--inject-fault", "inject_fault", std::string{}, "")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  Manifest manifest;
  CLI::App* active = app.get_subcommands().front();
  manifest.command = active->get_name();
  inv.command = manifest.command;
  const auto start = std::chrono::steady_clock::now();
  int status = 0;
  try {
    if (active == synth) status = cmd_synth(inv, manifest);
    else if (active == train) status = cmd_train(inv, manifest);
    else if (active == eval) status = cmd_eval(inv, manifest);
    else if (active == analyze) status = cmd_analyze(inv, manifest);
    else if (active == preview) status = cmd_mix_preview(inv, manifest);
    else status = cmd_verify(inv, manifest);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    status = kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    status = kExitRuntime;
  }
  manifest.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  manifest.exit_status = status;
  const std::string manifest_base =
      !inv.out.empty() ? inv.out : (manifest.artifacts.empty() ? std::string() : manifest.artifacts.front());
  if (!manifest_base.empty()) write_manifest(manifest, manifest_base);
  return status;
}
