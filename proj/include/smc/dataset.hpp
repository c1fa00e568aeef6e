#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "smc/binary_io.hpp"
#include "smc/rng.hpp"
#include "smc/tensor.hpp"

namespace smc {

struct ImageDims {
  std::uint16_t channels = 1;
  std::uint16_t height = 0;
  std::uint16_t width = 0;

  std::size_t size() const noexcept { return std::size_t{channels} * height * width; }
  std::size_t plane() const noexcept { return std::size_t{height} * width; }
  friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

/// Channels×height×width pixels in [0,1], stored planar (CHW).
struct Image {
  ImageDims dims;
  std::vector<float> pixels;

  Image() = default;
  explicit Image(ImageDims d, float fill = 0.0f) : dims(d), pixels(d.size(), fill) {}
  Image(ImageDims d, std::vector<float> p) : dims(d), pixels(std::move(p)) {
    require(pixels.size() == dims.size(), "image pixel count does not match its dimensions");
  }

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * dims.height + y) * dims.width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * dims.height + y) * dims.width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

struct ImageSample {
  Image image;
  std::uint32_t class_id = 0;
  std::uint64_t instance_id = 0;
};

/// Immutable labeled image collection. Samples are addressed by instance id,
/// which is their position in the file's sample order.
class Dataset {
public:
  Dataset() = default;

  Dataset(ImageDims dims, std::uint32_t num_classes, std::vector<float> pixels, std::vector<std::uint32_t> labels)
      : dims_(dims), num_classes_(num_classes), pixels_(std::move(pixels)), labels_(std::move(labels)) {
    require(num_classes_ >= 1, "dataset needs at least one class");
    require(dims_.size() > 0, "dataset image dimensions must be positive");
    require(pixels_.size() == labels_.size() * dims_.size(), "dataset pixel payload does not match sample count");
    members_.resize(num_classes_);
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      require(labels_[i] < num_classes_, "label " + std::to_string(labels_[i]) + " out of range");
      members_[labels_[i]].push_back(i);
    }
  }

  const ImageDims& dims() const noexcept { return dims_; }
  std::uint32_t num_classes() const noexcept { return num_classes_; }
  std::size_t size() const noexcept { return labels_.size(); }
  std::uint32_t label(std::size_t i) const { return labels_.at(i); }
  const std::vector<std::uint32_t>& labels() const noexcept { return labels_; }
  const std::vector<float>& pixel_payload() const noexcept { return pixels_; }

  std::span<const float> pixels(std::size_t i) const {
    require(i < size(), "sample index out of range");
    return std::span<const float>(pixels_).subspan(i * dims_.size(), dims_.size());
  }

  Image image(std::size_t i) const {
    auto p = pixels(i);
    return Image(dims_, std::vector<float>(p.begin(), p.end()));
  }

  ImageSample sample(std::size_t i) const { return {image(i), label(i), i}; }

  const std::vector<std::size_t>& members(std::uint32_t k) const { return members_.at(k); }

  std::vector<std::uint32_t> counts() const {
    std::vector<std::uint32_t> c(num_classes_);
    for (std::uint32_t k = 0; k < num_classes_; ++k) c[k] = static_cast<std::uint32_t>(members_[k].size());
    return c;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.dims_ == b.dims_ && a.num_classes_ == b.num_classes_ && a.labels_ == b.labels_ && a.pixels_ == b.pixels_;
  }

private:
  ImageDims dims_;
  std::uint32_t num_classes_ = 0;
  std::vector<float> pixels_;
  std::vector<std::uint32_t> labels_;
  std::vector<std::vector<std::size_t>> members_;
};

struct ClassStats {
  std::vector<std::uint32_t> counts;
  std::vector<double> prior;
  std::vector<double> log_prior;
  double imbalance_ratio = 1.0;
};

inline ClassStats make_class_stats(std::vector<std::uint32_t> counts) {
  require(!counts.empty(), "class statistics need at least one class");
  ClassStats s;
  double total = 0.0;
  for (auto n : counts) {
    require(n >= 1, "every class needs at least one sample");
    total += n;
  }
  for (auto n : counts) {
    s.prior.push_back(n / total);
    s.log_prior.push_back(std::log(s.prior.back()));
  }
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  s.imbalance_ratio = static_cast<double>(*hi) / *lo;
  s.counts = std::move(counts);
  return s;
}

// ---------------------------------------------------------------------------
// Many / medium / few splits

enum class SplitTag : std::uint8_t { many, medium, few };

inline const char* split_name(SplitTag t) {
  switch (t) {
    case SplitTag::many: return "many";
    case SplitTag::medium: return "medium";
    case SplitTag::few: return "few";
  }
  return "?";
}

struct SplitThresholds {
  double many = 100.0;  // n_k > many  -> many
  double few = 20.0;    // n_k < few   -> few
};

struct SplitAssignment {
  std::vector<SplitTag> tags;
  SplitThresholds thresholds;

  std::vector<std::uint32_t> classes_in(SplitTag t) const {
    std::vector<std::uint32_t> out;
    for (std::uint32_t k = 0; k < tags.size(); ++k)
      if (tags[k] == t) out.push_back(k);
    return out;
  }
};

inline SplitAssignment split_classes(std::span<const std::uint32_t> counts, SplitThresholds thresholds = {}) {
  require(thresholds.many > thresholds.few && thresholds.few >= 0.0,
          "split thresholds must satisfy many > few >= 0");
  SplitAssignment a{{}, thresholds};
  for (auto n : counts) {
    if (n > thresholds.many) a.tags.push_back(SplitTag::many);
    else if (n < thresholds.few) a.tags.push_back(SplitTag::few);
    else a.tags.push_back(SplitTag::medium);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Class semantic vectors

struct SemanticVectors {
  std::vector<std::vector<double>> vectors;  // one per class, uniform length

  std::size_t num_classes() const noexcept { return vectors.size(); }
  std::size_t dim() const noexcept { return vectors.empty() ? 0 : vectors.front().size(); }
};

inline void save_semantic_vectors(const SemanticVectors& sv, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot open " + path + " for writing");
  out.precision(17);
  for (std::size_t k = 0; k < sv.vectors.size(); ++k) {
    out << k;
    for (double v : sv.vectors[k]) out << ' ' << v;
    out << '\n';
  }
}

/// Parses `class_id v1 ... vd` lines. Every class in [0, num_classes) must
/// appear exactly once with the same dimensionality and a nonzero vector.
inline SemanticVectors load_semantic_vectors(const std::string& path, std::size_t num_classes) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open semantic vector file " + path, 0);
  std::vector<std::vector<double>> rows(num_classes);
  std::vector<bool> seen(num_classes, false);
  std::size_t dim = 0;
  std::string line;
  std::uint64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    long long id = -1;
    if (!(fields >> id)) throw ParseError("malformed class id", lineno, true);
    if (id < 0 || static_cast<std::size_t>(id) >= num_classes)
      throw ParseError("class id " + std::to_string(id) + " out of range", lineno, true);
    std::vector<double> v;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("malformed value '" + tok + "' for class " + std::to_string(id), lineno, true);
      }
    }
    if (v.empty()) throw ParseError("class " + std::to_string(id) + " has no values", lineno, true);
    if (dim == 0) dim = v.size();
    if (v.size() != dim)
      throw ParseError("dimension mismatch for class " + std::to_string(id) + ": expected " + std::to_string(dim) +
                           ", got " + std::to_string(v.size()),
                       lineno, true);
    if (seen[id]) throw ParseError("duplicate class " + std::to_string(id), lineno, true);
    if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; }))
      throw ParseError("zero semantic vector for class " + std::to_string(id), lineno, true);
    seen[id] = true;
    rows[id] = std::move(v);
  }
  for (std::size_t k = 0; k < num_classes; ++k)
    if (!seen[k]) throw ParseError("missing semantic vector for class " + std::to_string(k), lineno, true);
  return SemanticVectors{std::move(rows)};
}

// ---------------------------------------------------------------------------
// Dataset file (SMCD)

inline constexpr char kDatasetMagic[4] = {'S', 'M', 'C', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;

/// Pixels in sample order, then labels. load() checks the labels against the
/// per-class counts in the header.
inline void save_dataset(const Dataset& d, std::ostream& out) {
  out.write(kDatasetMagic, 4);
  io::write_le<std::uint16_t>(out, kDatasetVersion);
  io::write_le<std::uint32_t>(out, d.num_classes());
  for (auto n : d.counts()) io::write_le<std::uint32_t>(out, n);
  io::write_le<std::uint16_t>(out, d.dims().channels);
  io::write_le<std::uint16_t>(out, d.dims().height);
  io::write_le<std::uint16_t>(out, d.dims().width);
  for (float p : d.pixel_payload()) io::write_le<float>(out, p);
  for (auto l : d.labels()) io::write_le<std::uint32_t>(out, l);
}

inline void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open " + path + " for writing");
  save_dataset(d, out);
  require(out.good(), "failed writing " + path);
}

inline Dataset load_dataset(std::istream& in) {
  const auto magic = io::read_bytes(in, 4, "magic");
  if (magic != std::string(kDatasetMagic, 4)) throw ParseError("not a dataset file (bad magic)", 0);
  const auto version = io::read_le<std::uint16_t>(in, "version");
  if (version != kDatasetVersion) throw ParseError("unsupported dataset version " + std::to_string(version), 4);
  const auto classes = io::read_le<std::uint32_t>(in, "class count");
  if (classes == 0) throw ParseError("dataset declares zero classes", 6);
  std::vector<std::uint32_t> counts(classes);
  std::uint64_t total = 0;
  for (auto& n : counts) {
    n = io::read_le<std::uint32_t>(in, "class counts");
    total += n;
  }
  ImageDims dims;
  dims.channels = io::read_le<std::uint16_t>(in, "channels");
  dims.height = io::read_le<std::uint16_t>(in, "height");
  dims.width = io::read_le<std::uint16_t>(in, "width");
  if (dims.size() == 0) throw ParseError("zero image dimension", static_cast<std::uint64_t>(in.tellg()) - 6);
  std::vector<float> pixels(total * dims.size());
  for (auto& p : pixels) p = io::read_le<float>(in, "pixel payload");
  std::vector<std::uint32_t> labels(total);
  std::vector<std::uint32_t> seen(classes, 0);
  for (auto& l : labels) {
    const auto offset = static_cast<std::uint64_t>(in.tellg());
    l = io::read_le<std::uint32_t>(in, "labels");
    if (l >= classes) throw ParseError("label " + std::to_string(l) + " out of range", offset);
    ++seen[l];
  }
  for (std::uint32_t k = 0; k < classes; ++k)
    if (seen[k] != counts[k])
      throw ParseError("class " + std::to_string(k) + " count " + std::to_string(counts[k]) +
                           " disagrees with labels (" + std::to_string(seen[k]) + ")",
                       10 + 4ull * k);
  if (in.peek() != std::char_traits<char>::eof())
    throw ParseError("trailing bytes after label block", static_cast<std::uint64_t>(in.tellg()));
  return Dataset(dims, classes, std::move(pixels), std::move(labels));
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open dataset file " + path, 0);
  return load_dataset(in);
}

// ---------------------------------------------------------------------------
// Synthetic long-tailed data

struct SynthSpec {
  std::uint32_t classes = 10;
  double rho = 100.0;
  std::uint32_t n_max = 500;
  std::uint16_t image_size = 28;
  std::uint16_t channels = 1;
  std::uint64_t seed = 1;
  double noise = 0.2;  // per-pixel Gaussian noise stddev
};

struct SynthResult {
  Dataset dataset;
  ClassStats stats;
  SemanticVectors semantics;
};

/// n_k = round(n_max * rho^(-k/(C-1))), at least 1.
inline std::vector<std::uint32_t> longtail_counts(std::uint32_t classes, double rho, std::uint32_t n_max) {
  require(classes >= 2, "long-tailed profile needs at least two classes");
  require(rho >= 1.0, "imbalance ratio must be >= 1");
  require(n_max >= 1, "n_max must be >= 1");
  std::vector<std::uint32_t> counts(classes);
  for (std::uint32_t k = 0; k < classes; ++k) {
    const double n = n_max * std::pow(rho, -static_cast<double>(k) / (classes - 1));
    counts[k] = static_cast<std::uint32_t>(std::max(1.0, std::round(n)));
  }
  return counts;
}

namespace detail {

/// Generator parameters for one class. The semantic vector is derived from
/// these, so classes with close parameters render similar images.
struct ClassSignature {
  double orientation;   // radians in [0, pi)
  double frequency;     // grating cycles per frame
  double blob_x, blob_y;
  double brightness;
  std::vector<double> tint;  // per channel

  std::vector<double> semantic() const {
    std::vector<double> v = {std::cos(2 * orientation), std::sin(2 * orientation), (frequency - 2.75) / 1.25,
                             2 * (blob_x - 0.5), 2 * (blob_y - 0.5), 10 * brightness};
    for (double t : tint) v.push_back(10 * t);
    return v;
  }
};

inline std::vector<ClassSignature> class_signatures(const SynthSpec& spec) {
  auto rng = seeded(spec.seed, 0x5167);
  std::vector<ClassSignature> out;
  for (std::uint32_t k = 0; k < spec.classes; ++k) {
    ClassSignature s;
    s.orientation = std::numbers::pi * uniform01(rng);
    s.frequency = 1.5 + 2.5 * uniform01(rng);
    s.blob_x = 0.2 + 0.6 * uniform01(rng);
    s.blob_y = 0.2 + 0.6 * uniform01(rng);
    s.brightness = -0.1 + 0.2 * uniform01(rng);
    for (std::uint16_t c = 0; c < spec.channels; ++c) s.tint.push_back(-0.1 + 0.2 * uniform01(rng));
    out.push_back(std::move(s));
  }
  return out;
}

inline void render_instance(const ClassSignature& s, const SynthSpec& spec, Rng& rng, float* out) {
  const double amplitude = 0.7 + 0.6 * uniform01(rng);
  const double phase = std::numbers::pi * (uniform01(rng) - 0.5);
  const double bx = s.blob_x + 0.1 * (uniform01(rng) - 0.5);
  const double by = s.blob_y + 0.1 * (uniform01(rng) - 0.5);
  const double cx = std::cos(s.orientation), sy = std::sin(s.orientation);
  const std::size_t side = spec.image_size;
  for (std::uint16_t c = 0; c < spec.channels; ++c) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double u = (x + 0.5) / side, v = (y + 0.5) / side;
        const double grating = 0.25 * amplitude * std::sin(2 * std::numbers::pi * s.frequency * (u * cx + v * sy) + phase);
        const double d2 = (u - bx) * (u - bx) + (v - by) * (v - by);
        const double blob = 0.3 * std::exp(-d2 / (2 * 0.12 * 0.12));
        const double value = 0.35 + grating + blob + s.brightness + s.tint[c] + normal(rng, 0.0, spec.noise);
        out[(c * side + y) * side + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
}

inline Dataset render(const SynthSpec& spec, const std::vector<std::uint32_t>& counts, std::uint64_t stream) {
  require(spec.image_size >= 8, "image size must be at least 8 pixels per side");
  require(spec.channels >= 1, "images need at least one channel");
  const auto signatures = class_signatures(spec);
  const ImageDims dims{spec.channels, spec.image_size, spec.image_size};
  std::size_t total = 0;
  for (auto n : counts) total += n;
  std::vector<float> pixels(total * dims.size());
  std::vector<std::uint32_t> labels;
  labels.reserve(total);
  auto rng = seeded(spec.seed, stream);
  std::size_t i = 0;
  for (std::uint32_t k = 0; k < counts.size(); ++k) {
    for (std::uint32_t j = 0; j < counts[k]; ++j, ++i) {
      render_instance(signatures[k], spec, rng, pixels.data() + i * dims.size());
      labels.push_back(k);
    }
  }
  return Dataset(dims, static_cast<std::uint32_t>(counts.size()), std::move(pixels), std::move(labels));
}

inline SemanticVectors semantics_of(const SynthSpec& spec) {
  SemanticVectors sv;
  for (const auto& s : class_signatures(spec)) sv.vectors.push_back(s.semantic());
  return sv;
}

}  // namespace detail

/// Long-tailed training set with an exponential count profile. Class
/// signatures depend only on (seed, classes, channels), so a balanced test set
/// from synth_balanced() with the same spec shares them.
inline SynthResult synth_longtail(const SynthSpec& spec) {
  require(spec.image_size >= 8, "image size must be at least 8 pixels per side");
  auto counts = longtail_counts(spec.classes, spec.rho, spec.n_max);
  auto data = detail::render(spec, counts, 1);
  return {std::move(data), make_class_stats(std::move(counts)), detail::semantics_of(spec)};
}

/// Balanced held-out set drawn from the same class signatures as synth_longtail(spec).
inline SynthResult synth_balanced(const SynthSpec& spec, std::uint32_t per_class) {
  require(spec.classes >= 2, "synthetic data needs at least two classes");
  require(per_class >= 1, "per-class count must be >= 1");
  std::vector<std::uint32_t> counts(spec.classes, per_class);
  auto data = detail::render(spec, counts, 2);
  return {std::move(data), make_class_stats(std::move(counts)), detail::semantics_of(spec)};
}

// ---------------------------------------------------------------------------
// Sampling

/// q(k) = n_k^-gamma / sum_l n_l^-gamma
inline std::vector<double> foreground_sampling_probs(std::span<const std::uint32_t> counts, double gamma) {
  require(!counts.empty(), "foreground_sampling_probs: no classes");
  require(gamma >= 0.0, "foreground_sampling_probs: gamma must be >= 0");
  std::vector<double> q;
  q.reserve(counts.size());
  for (auto n : counts) {
    require(n >= 1, "foreground_sampling_probs: every count must be >= 1");
    q.push_back(std::pow(static_cast<double>(n), -gamma));
  }
  const double total = std::accumulate(q.begin(), q.end(), 0.0);
  for (auto& v : q) v /= total;
  return q;
}

struct MixPair {
  std::size_t foreground = 0;
  std::size_t background = 0;
  bool self_mix() const noexcept { return foreground == background; }
};

/// Foregrounds: class drawn from q, then an instance uniformly within it.
/// Backgrounds: uniform over all instances. Self-pairs are kept.
inline std::vector<MixPair> sample_mix_indices(const Dataset& data, std::span<const double> q, std::size_t batch_size,
                                               Rng& rng) {
  require(q.size() == data.num_classes(), "sample_mix_indices: q must have one entry per class");
  require(data.size() > 0, "sample_mix_indices: empty dataset");
  std::discrete_distribution<std::size_t> pick_class(q.begin(), q.end());
  std::vector<MixPair> out;
  out.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto k = static_cast<std::uint32_t>(pick_class(rng));
    const auto& members = data.members(k);
    require(!members.empty(), "sample_mix_indices: class " + std::to_string(k) + " has no samples");
    MixPair p;
    p.foreground = members[uniform_index(rng, members.size())];
    p.background = uniform_index(rng, data.size());
    out.push_back(p);
  }
  return out;
}

/// Instance-uniform draws with replacement (the un-mixed baseline sampler).
inline std::vector<std::size_t> sample_uniform_indices(const Dataset& data, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> out(batch_size);
  for (auto& i : out) i = uniform_index(rng, data.size());
  return out;
}

}  // namespace smc
