#pragma once

// Blended training views: foreground resized into a rectangle pasted over a
// background, with augmentation applied before or after blending.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smc/dataset.hpp"
#include "smc/rng.hpp"

namespace smc {

inline constexpr double kLambdaLow = 0.2;
inline constexpr double kLambdaHigh = 0.8;

enum class LambdaRange : std::uint8_t { normalized, full };
enum class MixOp : std::uint8_t { resize, crop, none };
enum class AugmentPlacement : std::uint8_t { before_mix, after_mix, none };

struct AugmentPolicy {
  std::size_t pad = 4;
  double flip_prob = 0.5;
  AugmentPlacement placement = AugmentPlacement::before_mix;
};

struct MaskRect {
  std::size_t top = 0, left = 0, height = 0, width = 0;

  std::size_t area() const noexcept { return height * width; }
  bool contains(std::size_t y, std::size_t x) const noexcept {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
  friend bool operator==(const MaskRect&, const MaskRect&) = default;
};

struct MixRecord {
  std::uint32_t fg_class = 0;
  std::uint32_t bg_class = 0;
  std::size_t fg_index = 0;
  std::size_t bg_index = 0;
  double lambda_sampled = 1.0;
  double lambda_effective = 1.0;  // mask area / frame area; drives labels and loss weights
  MaskRect rect;
  std::vector<double> soft_label;
};

inline std::string format_record(const MixRecord& r) {
  std::ostringstream out;
  out.precision(17);
  out << "fg_class=" << r.fg_class << " bg_class=" << r.bg_class << " fg_index=" << r.fg_index
      << " bg_index=" << r.bg_index << " lambda_sampled=" << r.lambda_sampled
      << " lambda_effective=" << r.lambda_effective << " rect=" << r.rect.top << ',' << r.rect.left << ','
      << r.rect.height << ',' << r.rect.width;
  return out.str();
}

inline std::vector<double> soft_label(std::uint32_t fg, std::uint32_t bg, double lambda_effective, std::size_t classes) {
  require(fg < classes && bg < classes, "soft_label: class id out of range");
  std::vector<double> y(classes, 0.0);
  y[fg] += lambda_effective;
  y[bg] += 1.0 - lambda_effective;
  return y;
}

/// Affine map of [0,1] onto [0.2,0.8].
inline double normalize_lambda(double raw) { return kLambdaLow + (kLambdaHigh - kLambdaLow) * raw; }

/// lambda_raw ~ Beta(alpha, alpha); normalized range rescales it affinely.
inline double sample_lambda(double alpha, LambdaRange range, Rng& rng) {
  require(alpha > 0.0, "sample_lambda: alpha must be positive");
  const double raw = beta_sample(rng, alpha, alpha);
  return range == LambdaRange::normalized ? normalize_lambda(raw) : raw;
}

struct Mask {
  MaskRect rect;
  double lambda_effective = 0.0;
};

/// Patch of side round(side*sqrt(lambda)) (clamped to [1, side]) at a
/// uniformly random valid position.
inline Mask make_mask(std::size_t height, std::size_t width, double lambda, Rng& rng) {
  require(height >= 8 && width >= 8, "make_mask: frame must be at least 8x8");
  require(lambda >= 0.0 && lambda <= 1.0, "make_mask: lambda outside [0,1]");
  const double s = std::sqrt(lambda);
  const auto h = static_cast<std::size_t>(std::clamp(std::round(height * s), 1.0, static_cast<double>(height)));
  const auto w = static_cast<std::size_t>(std::clamp(std::round(width * s), 1.0, static_cast<double>(width)));
  Mask m;
  m.rect.height = h;
  m.rect.width = w;
  m.rect.top = uniform_index(rng, height - h + 1);
  m.rect.left = uniform_index(rng, width - w + 1);
  m.lambda_effective = static_cast<double>(h * w) / static_cast<double>(height * width);
  return m;
}

namespace detail {

// Written as v0 + a*(v1 - v0) so equal endpoints reproduce v0 exactly.
inline double lerp_exact(double v0, double v1, double a) { return v0 + a * (v1 - v0); }

inline std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * (static_cast<long long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<long long>(n) ? i : period - i);
}

}  // namespace detail

/// Bilinear (half-pixel centers) resample to out_h × out_w.
inline Image resize_bilinear(const Image& src, std::size_t out_h, std::size_t out_w) {
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: empty target");
  ImageDims d{src.dims.channels, static_cast<std::uint16_t>(out_h), static_cast<std::uint16_t>(out_w)};
  Image out(d);
  const std::size_t in_h = src.dims.height, in_w = src.dims.width;
  const double sy = static_cast<double>(in_h) / out_h, sx = static_cast<double>(in_w) / out_w;
  for (std::size_t c = 0; c < d.channels; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
      const auto y0 = static_cast<std::size_t>(fy);
      const auto y1 = std::min(y0 + 1, in_h - 1);
      const double ay = fy - y0;
      for (std::size_t x = 0; x < out_w; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
        const auto x0 = static_cast<std::size_t>(fx);
        const auto x1 = std::min(x0 + 1, in_w - 1);
        const double ax = fx - x0;
        const double top = detail::lerp_exact(src.at(c, y0, x0), src.at(c, y0, x1), ax);
        const double bottom = detail::lerp_exact(src.at(c, y1, x0), src.at(c, y1, x1), ax);
        out.at(c, y, x) = static_cast<float>(std::clamp(detail::lerp_exact(top, bottom, ay), 0.0, 1.0));
      }
    }
  }
  return out;
}

namespace detail {

inline void check_pair(const Image& fg, const Image& bg, const MaskRect& rect) {
  require(fg.dims == bg.dims, "mix: foreground and background dimensions differ");
  require(rect.height >= 1 && rect.width >= 1, "mix: empty mask rectangle");
  require(rect.top + rect.height <= bg.dims.height && rect.left + rect.width <= bg.dims.width,
          "mix: mask rectangle leaves the frame");
}

inline void paste(Image& canvas, const Image& patch, const MaskRect& rect) {
  for (std::size_t c = 0; c < canvas.dims.channels; ++c)
    for (std::size_t y = 0; y < rect.height; ++y)
      for (std::size_t x = 0; x < rect.width; ++x) canvas.at(c, rect.top + y, rect.left + x) = patch.at(c, y, x);
}

}  // namespace detail

/// M ⊙ R(fg) + (1 − M) ⊙ bg, where R resizes fg to exactly the mask rectangle.
inline Image resize_mix(const Image& fg, const Image& bg, const MaskRect& rect) {
  detail::check_pair(fg, bg, rect);
  Image out = bg;
  detail::paste(out, resize_bilinear(fg, rect.height, rect.width), rect);
  return out;
}

/// Pastes a same-size crop of fg, taken at a uniformly random position.
inline Image crop_mix(const Image& fg, const Image& bg, const MaskRect& rect, Rng& rng) {
  detail::check_pair(fg, bg, rect);
  const auto top = uniform_index(rng, fg.dims.height - rect.height + 1);
  const auto left = uniform_index(rng, fg.dims.width - rect.width + 1);
  Image patch(ImageDims{fg.dims.channels, static_cast<std::uint16_t>(rect.height), static_cast<std::uint16_t>(rect.width)});
  for (std::size_t c = 0; c < fg.dims.channels; ++c)
    for (std::size_t y = 0; y < rect.height; ++y)
      for (std::size_t x = 0; x < rect.width; ++x) patch.at(c, y, x) = fg.at(c, top + y, left + x);
  Image out = bg;
  detail::paste(out, patch, rect);
  return out;
}

/// Reflect-pad by `pad`, random crop back to the original size, then a
/// horizontal flip with probability flip_prob.
inline Image augment(const Image& src, const AugmentPolicy& policy, Rng& rng) {
  const auto h = src.dims.height, w = src.dims.width;
  const auto oy = static_cast<long long>(uniform_index(rng, 2 * policy.pad + 1)) - static_cast<long long>(policy.pad);
  const auto ox = static_cast<long long>(uniform_index(rng, 2 * policy.pad + 1)) - static_cast<long long>(policy.pad);
  const bool flip = uniform01(rng) < policy.flip_prob;
  Image out(src.dims);
  for (std::size_t c = 0; c < src.dims.channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const auto sy = detail::reflect_index(static_cast<long long>(y) + oy, h);
      for (std::size_t x = 0; x < w; ++x) {
        const auto xx = flip ? w - 1 - x : x;
        const auto sx = detail::reflect_index(static_cast<long long>(xx) + ox, w);
        out.at(c, y, x) = src.at(c, sy, sx);
      }
    }
  }
  return out;
}

struct MixOptions {
  double alpha = 1.0;
  LambdaRange range = LambdaRange::normalized;
  MixOp op = MixOp::resize;
  std::optional<double> lambda;  // overrides the Beta draw (shared-lambda views)
};

struct TrainingView {
  Image pixels;
  MixRecord record;
};

/// One blended view of (fg, bg). Placement decides whether augmentation acts
/// on the component images (before-mix), on the blend (after-mix) or not at
/// all. With MixOp::none the view is the (augmented) foreground alone.
inline TrainingView make_training_view(const ImageSample& fg, const ImageSample& bg, const AugmentPolicy& policy,
                                       const MixOptions& options, std::size_t num_classes, Rng& rng) {
  const auto& dims = fg.image.dims;
  TrainingView view;
  auto& rec = view.record;
  rec.fg_class = fg.class_id;
  rec.fg_index = fg.instance_id;
  rec.bg_index = bg.instance_id;

  if (options.op == MixOp::none) {
    rec.bg_class = fg.class_id;
    rec.bg_index = fg.instance_id;
    rec.rect = {0, 0, dims.height, dims.width};
    view.pixels = policy.placement == AugmentPlacement::none ? fg.image : augment(fg.image, policy, rng);
    rec.soft_label = soft_label(rec.fg_class, rec.bg_class, 1.0, num_classes);
    return view;
  }

  rec.bg_class = bg.class_id;
  const bool before = policy.placement == AugmentPlacement::before_mix;
  const Image fg_img = before ? augment(fg.image, policy, rng) : fg.image;
  const Image bg_img = before ? augment(bg.image, policy, rng) : bg.image;

  rec.lambda_sampled = options.lambda ? *options.lambda : sample_lambda(options.alpha, options.range, rng);
  const auto mask = make_mask(dims.height, dims.width, rec.lambda_sampled, rng);
  rec.rect = mask.rect;
  rec.lambda_effective = mask.lambda_effective;
  rec.soft_label = soft_label(rec.fg_class, rec.bg_class, rec.lambda_effective, num_classes);

  view.pixels = options.op == MixOp::resize ? resize_mix(fg_img, bg_img, mask.rect) : crop_mix(fg_img, bg_img, mask.rect, rng);
  if (policy.placement == AugmentPlacement::after_mix) view.pixels = augment(view.pixels, policy, rng);
  return view;
}

}  // namespace smc
