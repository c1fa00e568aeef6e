#pragma once

// Encoder MLP shared by two branches: a 2-layer projection head producing unit
// embeddings for the contrastive loss, and a linear classifier on the encoder
// features.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smc/autodiff.hpp"
#include "smc/dataset.hpp"
#include "smc/rng.hpp"

namespace smc {

inline constexpr std::size_t kEmbeddingDim = 128;

struct Linear {
  Tensor weight;  // fan_in × fan_out
  Tensor bias;    // 1 × fan_out

  std::size_t fan_in() const { return weight.shape[0]; }
  std::size_t fan_out() const { return weight.shape[1]; }
};

struct ModelParams {
  ImageDims input;
  std::vector<Linear> encoder;
  Linear head_hidden;  // feature → feature
  Linear head_out;     // feature → embedding
  Linear classifier;   // feature → classes

  std::size_t feature_width() const { return encoder.back().fan_out(); }
  std::size_t embedding_dim() const { return head_out.fan_out(); }
  std::size_t num_classes() const { return classifier.fan_out(); }

  /// Stable parameter order shared by gradients, optimizer state and checkpoints.
  std::vector<std::pair<std::string, Tensor*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      out.emplace_back("encoder." + std::to_string(i) + ".weight", &encoder[i].weight);
      out.emplace_back("encoder." + std::to_string(i) + ".bias", &encoder[i].bias);
    }
    out.emplace_back("head.hidden.weight", &head_hidden.weight);
    out.emplace_back("head.hidden.bias", &head_hidden.bias);
    out.emplace_back("head.out.weight", &head_out.weight);
    out.emplace_back("head.out.bias", &head_out.bias);
    out.emplace_back("classifier.weight", &classifier.weight);
    out.emplace_back("classifier.bias", &classifier.bias);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [name, t] : const_cast<ModelParams*>(this)->named_tensors()) out.emplace_back(name, t);
    return out;
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& nt : named_tensors()) out.push_back(nt.second);
    return out;
  }
};

inline bool operator==(const ModelParams& a, const ModelParams& b) {
  const auto ta = a.named_tensors(), tb = b.named_tensors();
  if (!(a.input == b.input) || ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (ta[i].first != tb[i].first || ta[i].second->shape != tb[i].second->shape ||
        ta[i].second->values != tb[i].second->values)
      return false;
  return true;
}

namespace detail {

inline Linear glorot_linear(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Linear l{Tensor::zeros({fan_in, fan_out}), Tensor::zeros({1, fan_out})};
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& w : l.weight.values) w = dist(rng);
  return l;
}

}  // namespace detail

/// Uniform ±sqrt(6/(fan_in+fan_out)) weights, zero biases.
inline ModelParams init_model(std::span<const std::size_t> encoder_widths, std::size_t num_classes, ImageDims input,
                              std::uint64_t seed, std::size_t embedding_dim = kEmbeddingDim) {
  require(!encoder_widths.empty(), "init_model: at least one encoder layer is required");
  require(num_classes >= 1, "init_model: at least one class is required");
  require(input.size() > 0, "init_model: empty input dimensions");
  for (auto w : encoder_widths) require(w > 0, "init_model: layer widths must be positive");
  auto rng = seeded(seed, 0x30DE1);
  ModelParams p;
  p.input = input;
  std::size_t fan_in = input.size();
  for (auto w : encoder_widths) {
    p.encoder.push_back(detail::glorot_linear(fan_in, w, rng));
    fan_in = w;
  }
  p.head_hidden = detail::glorot_linear(fan_in, fan_in, rng);
  p.head_out = detail::glorot_linear(fan_in, embedding_dim, rng);
  p.classifier = detail::glorot_linear(fan_in, num_classes, rng);
  return p;
}

/// Model parameters bound to a tape, either as trainable variables or constants.
class ModelGraph {
public:
  ModelGraph(Tape& tape, const ModelParams& params, bool trainable = true) : input_(params.input) {
    for (const auto& [name, t] : params.named_tensors())
      vars_.push_back(trainable ? tape.variable(*t) : tape.constant(*t));
    encoder_layers_ = params.encoder.size();
  }

  /// Binds already-recorded variables, in named_tensors() order.
  ModelGraph(ImageDims input, std::vector<Var> vars, std::size_t encoder_layers)
      : input_(input), vars_(std::move(vars)), encoder_layers_(encoder_layers) {
    require(vars_.size() == 2 * encoder_layers_ + 6, "ModelGraph: wrong number of parameter variables");
  }

  const std::vector<Var>& parameters() const noexcept { return vars_; }

  Var encode(Var images) const {
    require(images.cols() == input_.size(), "encode: image size " + std::to_string(images.cols()) +
                                                " does not match model input " + std::to_string(input_.size()));
    Var h = images;
    for (std::size_t i = 0; i < encoder_layers_; ++i) h = relu(linear(h, 2 * i));
    return h;
  }

  Var project(Var features) const {
    const auto base = 2 * encoder_layers_;
    return l2_normalize(linear(relu(linear(features, base)), base + 2));
  }

  Var classify(Var features) const { return linear(features, 2 * encoder_layers_ + 4); }

private:
  Var linear(Var x, std::size_t slot) const {
    require(x.cols() == vars_[slot].value().shape[0], "linear layer: input width mismatch");
    return add(matmul(x, vars_[slot]), vars_[slot + 1]);
  }

  ImageDims input_;
  std::vector<Var> vars_;
  std::size_t encoder_layers_ = 0;
};

/// Flattens images (CHW) into a batch × pixels tensor.
inline Tensor images_to_tensor(std::span<const Image> images) {
  require(!images.empty(), "images_to_tensor: empty batch");
  const auto width = images.front().pixels.size();
  Tensor t = Tensor::zeros({images.size(), width});
  for (std::size_t r = 0; r < images.size(); ++r) {
    require(images[r].pixels.size() == width, "images_to_tensor: mixed image sizes");
    std::copy(images[r].pixels.begin(), images[r].pixels.end(), t.values.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return t;
}

inline Tensor dataset_rows(const Dataset& data, std::span<const std::size_t> indices) {
  require(!indices.empty(), "dataset_rows: empty index list");
  const auto width = data.dims().size();
  Tensor t = Tensor::zeros({indices.size(), width});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto px = data.pixels(indices[r]);
    std::copy(px.begin(), px.end(), t.values.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return t;
}

// Tape-free inference.

inline Tensor encode(const ModelParams& params, const Tensor& images) {
  Tape tape;
  ModelGraph g(tape, params, false);
  return g.encode(tape.constant(images)).value();
}

inline Tensor project(const ModelParams& params, const Tensor& features) {
  Tape tape;
  ModelGraph g(tape, params, false);
  return g.project(tape.constant(features)).value();
}

inline Tensor classify(const ModelParams& params, const Tensor& features) {
  Tape tape;
  ModelGraph g(tape, params, false);
  return g.classify(tape.constant(features)).value();
}

}  // namespace smc
