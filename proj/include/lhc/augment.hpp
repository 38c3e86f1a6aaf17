#pragma once

#include <random>
#include <string>
#include <vector>

#include "lhc/tensor.hpp"

namespace lhc {

// One geometric view of an image. Applied to content in this order:
// horizontal flip, then shift (pixels), then zoom about the center, then
// rotation about the center (radians; positive turns the content clockwise
// in screen coordinates, rows increasing downward).
struct AffineParams {
  bool flip = false;
  double dx = 0.0;
  double dy = 0.0;
  double rotation = 0.0;
  double zoom = 1.0;

  bool is_identity() const;
  bool operator==(const AffineParams&) const = default;
};

// Inverse-mapped bilinear resampling of a [H,W] tensor, zero fill outside
// the source. Exact identity parameters return the input unchanged.
Tensor apply_affine(const Tensor& img, const AffineParams& params);

// Same view applied to every channel of a [H,W,C] tensor.
Tensor apply_affine_channels(const Tensor& img, const AffineParams& params);

// Training-time augmentation ranges; all nonnegative. Draw order per image
// is fixed (flip, dx, dy, zoom, rotation) so a given generator state always
// produces the same view.
struct AugmentConfig {
  double rotation_deg = 0.0;  // rotation ~ U[-r, r], in degrees
  double shift_frac = 0.0;    // dx ~ U[-f*W, f*W], dy ~ U[-f*H, f*H]
  double zoom_frac = 0.0;     // zoom ~ U[1-z, 1+z]
  bool hflip = false;         // flip with probability 1/2

  void validate() const;
};

AffineParams sample_affine(const AugmentConfig& cfg, int height, int width,
                           std::mt19937_64& rng);

Tensor augment(const Tensor& img, const AugmentConfig& cfg,
               std::mt19937_64& rng);

struct TtaEntry {
  AffineParams transform;
  double weight = 1.0;
};

// Deterministic test-time view set. Two enumerated batches (flip x shift x
// rotation, then flip x zoom x rotation), deduplicated on the exact
// parameter tuple; the identity view carries weight 3, every other view 1.
struct TtaPlan {
  std::vector<TtaEntry> entries;

  void validate() const;  // nonempty, positive weights
  double weight_sum() const;
};

// flip in {no, yes} x dx,dy in {-10, 0, +10} x rot in {-0.4, 0, +0.4},
// then flip x zoom in {1.0, 1.1} x rot: 54 + 12 - 6 duplicates = 60 views.
TtaPlan default_tta_plan();

// Key/value rendering (schema line, then one "entry" per view); parse is
// the exact inverse. Throws ParseError / ConfigError on malformed text.
std::string tta_plan_to_text(const TtaPlan& plan);
TtaPlan tta_plan_from_text(const std::string& text);

struct TtaResult {
  Tensor probabilities;  // [classes]
  int predicted = 0;
};

// view_logits: [views, classes], one row per plan entry. Per-view softmax,
// weighted mean, argmax.
TtaResult tta_aggregate(const Tensor& view_logits, const TtaPlan& plan);

}  // namespace lhc
