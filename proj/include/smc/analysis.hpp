#pragma once

// Feature-space diagnostics: class centers, inter-class score and semantic
// similarity score, plus the combined report.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smc/config.hpp"
#include "smc/dataset.hpp"
#include "smc/model.hpp"
#include "smc/trainer.hpp"

namespace smc {

/// Per-split means share the accuracy container.
using SplitValues = SplitAccuracy;

struct ClassCenters {
  std::vector<std::vector<double>> centers;
  std::vector<std::size_t> counts;

  std::size_t num_classes() const noexcept { return centers.size(); }
};

/// Mean of `features` rows per label. Every class in [0, num_classes) must
/// have at least one row.
inline ClassCenters centers_from_features(const Tensor& features, std::span<const std::uint32_t> labels,
                                          std::size_t num_classes) {
  require(features.rank() == 2 && features.rows() == labels.size(), "class centers: one label per feature row");
  const auto d = features.cols();
  ClassCenters c{std::vector<std::vector<double>>(num_classes, std::vector<double>(d, 0.0)),
                 std::vector<std::size_t>(num_classes, 0)};
  for (std::size_t r = 0; r < labels.size(); ++r) {
    require(labels[r] < num_classes, "class centers: label out of range");
    ++c.counts[labels[r]];
    for (std::size_t j = 0; j < d; ++j) c.centers[labels[r]][j] += features(r, j);
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    require(c.counts[k] > 0, "class centers: class " + std::to_string(k) + " has no samples");
    if (c.counts[k] == 1) continue;
    for (auto& v : c.centers[k]) v /= static_cast<double>(c.counts[k]);
  }
  return c;
}

/// Encoder features (or head embeddings) of un-mixed samples, averaged per class.
inline ClassCenters class_centers(const ModelParams& params, const Dataset& data, bool from_embeddings = false) {
  require(data.num_classes() == params.num_classes(), "class_centers: class vocabulary of data and model differ");
  constexpr std::size_t kChunk = 256;
  require(data.size() > 0, "class_centers: empty dataset");
  for (std::uint32_t k = 0; k < data.num_classes(); ++k)
    require(!data.members(k).empty(), "class_centers: class " + std::to_string(k) + " has no samples");
  std::vector<std::size_t> idx;
  std::vector<double> rows;
  std::size_t width = 0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
    auto f = encode(params, dataset_rows(data, idx));
    if (from_embeddings) f = project(params, f);
    width = f.cols();
    rows.insert(rows.end(), f.values.begin(), f.values.end());
  }
  return centers_from_features(Tensor({data.size(), width}, std::move(rows)), data.labels(), data.num_classes());
}

namespace detail {

inline SplitValues split_means(const std::vector<double>& per_class, const SplitAssignment& splits) {
  std::vector<std::optional<double>> values(per_class.begin(), per_class.end());
  return aggregate_splits(values, splits);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline std::vector<std::vector<double>> cosine_matrix(const std::vector<std::vector<double>>& rows, const char* what) {
  const auto n = rows.size();
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (double v : rows[k]) norm += v * v;
    if (!(norm > 0.0)) throw std::invalid_argument(std::string(what) + " of class " + std::to_string(k) + " has zero norm");
  }
  std::vector<std::vector<double>> s(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s[i][j] = s[j][i] = cosine(rows[i], rows[j]);
  return s;
}

}  // namespace detail

struct InterClassScore {
  std::vector<double> per_class;
  SplitValues splits;
};

/// IS_k = exp(-(1/C) sum_j d(c_k, c_j) / tau'). With the l2 metric d is the
/// Euclidean distance; raw-sum uses the coordinate sum of c_k - c_j.
inline InterClassScore inter_class_score(const ClassCenters& centers, double tau_prime,
                                         InterClassMetric metric = InterClassMetric::l2,
                                         const std::optional<SplitAssignment>& splits = std::nullopt) {
  require(tau_prime > 0.0, "inter_class_score: tau' must be positive");
  const auto n = centers.num_classes();
  require(n >= 1, "inter_class_score: no classes");
  InterClassScore s;
  for (std::size_t k = 0; k < n; ++k) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t i = 0; i < centers.centers[k].size(); ++i) {
        const double diff = centers.centers[k][i] - centers.centers[j][i];
        d += metric == InterClassMetric::l2 ? diff * diff : diff;
      }
      total += metric == InterClassMetric::l2 ? std::sqrt(d) : d;
    }
    s.per_class.push_back(std::exp(-(total / static_cast<double>(n)) / tau_prime));
  }
  if (splits) s.splits = detail::split_means(s.per_class, *splits);
  s.splits.all = std::accumulate(s.per_class.begin(), s.per_class.end(), 0.0) / static_cast<double>(n);
  return s;
}

struct SimilarityMatrices {
  std::vector<std::vector<double>> semantic;  // S^s
  std::vector<std::vector<double>> centers;   // S^c
};

struct SemanticSimilarityScore {
  double score = 0.0;  // (1/C^2) sum_ij |S^s_ij - S^c_ij|
  SplitValues splits;  // rows restricted to the split, columns over all classes
  SimilarityMatrices matrices;
};

/// Zero-norm semantic vectors or centers raise std::invalid_argument naming the class.
inline SemanticSimilarityScore semantic_similarity_score(const ClassCenters& centers, const SemanticVectors& semantics,
                                                         const std::optional<SplitAssignment>& splits = std::nullopt) {
  const auto n = centers.num_classes();
  require(semantics.num_classes() == n, "semantic_similarity_score: semantic vectors cover " +
                                            std::to_string(semantics.num_classes()) + " classes, centers " +
                                            std::to_string(n));
  SemanticSimilarityScore s;
  s.matrices.semantic = detail::cosine_matrix(semantics.vectors, "semantic vector");
  s.matrices.centers = detail::cosine_matrix(centers.centers, "center");
  std::vector<double> row_mean(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row_mean[i] += std::abs(s.matrices.semantic[i][j] - s.matrices.centers[i][j]);
    s.score += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
  }
  s.score /= static_cast<double>(n * n);
  if (splits) s.splits = detail::split_means(row_mean, *splits);
  s.splits.all = s.score;
  return s;
}

// ---------------------------------------------------------------------------
// Report

struct AnalysisReport {
  SplitValues inter_class;
  SplitValues semantic_similarity;
  SplitValues accuracy;
  std::string config_hash;
};

/// Accuracy from `evaluate`, centers from the same un-mixed data, splits from
/// the checkpoint's training counts.
inline AnalysisReport accuracy_report(const Checkpoint& ck, const Dataset& data, const SemanticVectors& semantics) {
  const auto splits = split_classes(ck.stats.counts, ck.config.thresholds());
  const auto centers = class_centers(ck.params, data, ck.config.centers_from_embeddings);
  AnalysisReport r;
  r.inter_class = inter_class_score(centers, ck.config.tau_prime, ck.config.is_metric, splits).splits;
  r.semantic_similarity = semantic_similarity_score(centers, semantics, splits).splits;
  r.accuracy = evaluate(ck, data).splits;
  r.config_hash = config_hash(to_json(ck.config));
  return r;
}

inline json to_json(const AnalysisReport& r) {
  return json{{"inter_class", to_json(r.inter_class)},
              {"semantic_similarity", to_json(r.semantic_similarity)},
              {"accuracy", to_json(r.accuracy)},
              {"config-hash", r.config_hash}};
}

/// Empty string when `j` matches the report schema, otherwise the first problem.
inline std::string validate_report_json(const json& j) {
  if (!j.is_object()) return "report must be an object";
  static const char* sections[] = {"inter_class", "semantic_similarity", "accuracy"};
  static const char* split_keys[] = {"many", "medium", "few", "all"};
  for (const char* s : sections) {
    if (!j.contains(s)) return std::string("missing section '") + s + "'";
    const auto& sec = j.at(s);
    if (!sec.is_object()) return std::string("section '") + s + "' must be an object";
    for (const auto& [key, v] : sec.items()) {
      if (std::find_if(std::begin(split_keys), std::end(split_keys), [&](const char* k) { return key == k; }) ==
          std::end(split_keys))
        return std::string("section '") + s + "' has unknown split '" + key + "'";
      if (!v.is_number() && !v.is_null()) return std::string("section '") + s + "' split '" + key + "' must be a number";
    }
  }
  if (!j.contains("config-hash") || !j.at("config-hash").is_string()) return "missing string 'config-hash'";
  for (const auto& [key, v] : j.items()) {
    if (key != "config-hash" && std::find_if(std::begin(sections), std::end(sections),
                                             [&](const char* k) { return key == k; }) == std::end(sections))
      return "unknown top-level key '" + key + "'";
  }
  return {};
}

inline AnalysisReport report_from_json(const json& j) {
  const auto problem = validate_report_json(j);
  if (!problem.empty()) throw std::invalid_argument("invalid report: " + problem);
  auto split = [](const json& s) {
    SplitValues v;
    auto get = [&](const char* k) { return s.contains(k) ? detail::optional_double(s.at(k)) : std::nullopt; };
    v.many = get("many");
    v.medium = get("medium");
    v.few = get("few");
    v.all = get("all");
    return v;
  };
  return {split(j.at("inter_class")), split(j.at("semantic_similarity")), split(j.at("accuracy")),
          j.at("config-hash").get<std::string>()};
}

/// Aligned text table; the JSON form is the machine contract.
inline std::string format_report(const AnalysisReport& r) {
  std::ostringstream out;
  auto cell = [&](const std::optional<double>& v) {
    out << std::setw(10);
    if (v) out << std::fixed << std::setprecision(4) << *v;
    else out << "-";
  };
  out << std::left << std::setw(22) << "metric" << std::right << std::setw(10) << "many" << std::setw(10) << "medium"
      << std::setw(10) << "few" << std::setw(10) << "all" << '\n';
  const std::pair<const char*, const SplitValues*> rows[] = {
      {"inter-class score", &r.inter_class}, {"semantic similarity", &r.semantic_similarity}, {"accuracy", &r.accuracy}};
  for (const auto& [name, v] : rows) {
    out << std::left << std::setw(22) << name << std::right;
    cell(v->many);
    cell(v->medium);
    cell(v->few);
    cell(v->all);
    out << '\n';
  }
  out << "config-hash " << r.config_hash << '\n';
  return out.str();
}

}  // namespace smc
