#include "lhc/augment.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "lhc/config.hpp"
#include "lhc/errors.hpp"

namespace lhc {
namespace {

constexpr double kPi = 3.14159265358979323846;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Bilinear sample with zero fill: out-of-grid corners contribute nothing.
double sample_zero_fill(const Tensor& img, double src_r, double src_c) {
  const int h = static_cast<int>(img.dim(0));
  const int w = static_cast<int>(img.dim(1));
  const int r0 = static_cast<int>(std::floor(src_r));
  const int c0 = static_cast<int>(std::floor(src_c));
  const double fr = src_r - r0;
  const double fc = src_c - c0;
  double value = 0.0;
  for (int dr = 0; dr < 2; ++dr)
    for (int dc = 0; dc < 2; ++dc) {
      const int r = r0 + dr;
      const int c = c0 + dc;
      if (r < 0 || r >= h || c < 0 || c >= w) continue;
      const double weight =
          (dr == 0 ? 1.0 - fr : fr) * (dc == 0 ? 1.0 - fc : fc);
      value += weight * img.at(static_cast<std::size_t>(r),
                               static_cast<std::size_t>(c));
    }
  return value;
}

}  // namespace

bool AffineParams::is_identity() const {
  return !flip && dx == 0.0 && dy == 0.0 && rotation == 0.0 && zoom == 1.0;
}

Tensor apply_affine(const Tensor& img, const AffineParams& params) {
  if (img.rank() != 2)
    throw ShapeError("apply_affine expects a [H,W] tensor, got rank " +
                     std::to_string(img.rank()));
  if (!(params.zoom > 0.0))
    throw ValueError("apply_affine: zoom must be positive");
  if (params.is_identity()) return img;

  const std::size_t h = img.dim(0);
  const std::size_t w = img.dim(1);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cos_t = std::cos(params.rotation);
  const double sin_t = std::sin(params.rotation);

  Tensor out({h, w});
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      // Invert the content chain flip -> shift -> zoom -> rotate, so walk
      // it backwards from the destination pixel.
      double x = static_cast<double>(c) - cx;
      double y = static_cast<double>(r) - cy;
      if (params.rotation != 0.0) {
        // Positive rotation turns content clockwise (rows grow downward),
        // so the pull-back rotates by -rotation.
        const double rx = x * cos_t + y * sin_t;
        const double ry = -x * sin_t + y * cos_t;
        x = rx;
        y = ry;
      }
      if (params.zoom != 1.0) {
        x /= params.zoom;
        y /= params.zoom;
      }
      double src_c = x + cx - params.dx;
      double src_r = y + cy - params.dy;
      if (params.flip) src_c = (static_cast<double>(w) - 1.0) - src_c;
      out.at(r, c) = sample_zero_fill(img, src_r, src_c);
    }
  }
  return out;
}

Tensor apply_affine_channels(const Tensor& img, const AffineParams& params) {
  if (img.rank() != 3)
    throw ShapeError("apply_affine_channels expects a [H,W,C] tensor, got "
                     "rank " + std::to_string(img.rank()));
  if (params.is_identity()) return img;
  const std::size_t h = img.dim(0);
  const std::size_t w = img.dim(1);
  const std::size_t channels = img.dim(2);
  Tensor out({h, w, channels});
  Tensor plane({h, w});
  for (std::size_t ch = 0; ch < channels; ++ch) {
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) plane.at(r, c) = img.at(r, c, ch);
    const Tensor moved = apply_affine(plane, params);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) out.at(r, c, ch) = moved.at(r, c);
  }
  return out;
}

void AugmentConfig::validate() const {
  if (rotation_deg < 0.0)
    throw ConfigError("augment: rotation_deg must be nonnegative");
  if (shift_frac < 0.0)
    throw ConfigError("augment: shift_frac must be nonnegative");
  if (zoom_frac < 0.0 || zoom_frac >= 1.0)
    throw ConfigError("augment: zoom_frac must be in [0, 1)");
}

AffineParams sample_affine(const AugmentConfig& cfg, int height, int width,
                           std::mt19937_64& rng) {
  cfg.validate();
  if (height < 1 || width < 1)
    throw ValueError("sample_affine: image size must be positive");

  // Fixed draw order and count regardless of the ranges, so a generator
  // state maps to the same view under any config shape.
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double flip_roll = unit(rng);
  const double max_dx = cfg.shift_frac * width;
  const double max_dy = cfg.shift_frac * height;
  std::uniform_real_distribution<double> dx_draw(-max_dx, max_dx);
  std::uniform_real_distribution<double> dy_draw(-max_dy, max_dy);
  std::uniform_real_distribution<double> zoom_draw(1.0 - cfg.zoom_frac,
                                                   1.0 + cfg.zoom_frac);
  std::uniform_real_distribution<double> rot_draw(-cfg.rotation_deg,
                                                  cfg.rotation_deg);
  AffineParams p;
  p.dx = dx_draw(rng);
  p.dy = dy_draw(rng);
  p.zoom = zoom_draw(rng);
  p.rotation = rot_draw(rng) * kPi / 180.0;
  p.flip = cfg.hflip && flip_roll < 0.5;
  return p;
}

Tensor augment(const Tensor& img, const AugmentConfig& cfg,
               std::mt19937_64& rng) {
  if (img.rank() != 2)
    throw ShapeError("augment expects a [H,W] tensor, got rank " +
                     std::to_string(img.rank()));
  const AffineParams p = sample_affine(cfg, static_cast<int>(img.dim(0)),
                                       static_cast<int>(img.dim(1)), rng);
  return apply_affine(img, p);
}

void TtaPlan::validate() const {
  if (entries.empty())
    throw ConfigError("tta plan: no views");
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (!(entries[i].weight > 0.0))
      throw ConfigError("tta plan: view " + std::to_string(i) +
                        " has nonpositive weight");
}

double TtaPlan::weight_sum() const {
  double total = 0.0;
  for (const TtaEntry& e : entries) total += e.weight;
  return total;
}

TtaPlan default_tta_plan() {
  const double shifts[3] = {-10.0, 0.0, 10.0};
  const double rotations[3] = {-0.4, 0.0, 0.4};
  const double zooms[2] = {1.0, 1.1};

  TtaPlan plan;
  auto push_unique = [&plan](const AffineParams& p) {
    for (const TtaEntry& e : plan.entries)
      if (e.transform == p) return;
    plan.entries.push_back({p, p.is_identity() ? 3.0 : 1.0});
  };

  for (int flip = 0; flip < 2; ++flip)
    for (double dx : shifts)
      for (double dy : shifts)
        for (double rot : rotations) {
          AffineParams p;
          p.flip = flip == 1;
          p.dx = dx;
          p.dy = dy;
          p.rotation = rot;
          push_unique(p);
        }
  for (int flip = 0; flip < 2; ++flip)
    for (double zoom : zooms)
      for (double rot : rotations) {
        AffineParams p;
        p.flip = flip == 1;
        p.zoom = zoom;
        p.rotation = rot;
        push_unique(p);
      }
  return plan;
}

std::string tta_plan_to_text(const TtaPlan& plan) {
  KvFile kv;
  kv.add("schema", "tta-plan/1");
  for (const TtaEntry& e : plan.entries) {
    std::string row = e.transform.flip ? "1" : "0";
    row += ' ';
    row += fmt_double(e.transform.dx);
    row += ' ';
    row += fmt_double(e.transform.dy);
    row += ' ';
    row += fmt_double(e.transform.rotation);
    row += ' ';
    row += fmt_double(e.transform.zoom);
    row += ' ';
    row += fmt_double(e.weight);
    kv.add("entry", row);
  }
  return kv.serialize();
}

TtaPlan tta_plan_from_text(const std::string& text) {
  const KvFile kv = KvFile::parse_string(text);
  if (kv.get_or("schema", "") != "tta-plan/1")
    throw ConfigError("tta plan: expected schema tta-plan/1, got '" +
                      kv.get_or("schema", "<missing>") + "'");
  TtaPlan plan;
  for (const std::string& row : kv.all("entry")) {
    std::istringstream fields(row);
    int flip = 0;
    TtaEntry e;
    if (!(fields >> flip >> e.transform.dx >> e.transform.dy >>
          e.transform.rotation >> e.transform.zoom >> e.weight))
      throw ParseError("tta plan entry '" + row +
                       "': expected 'flip dx dy rotation zoom weight'");
    std::string extra;
    if (fields >> extra)
      throw ParseError("tta plan entry '" + row + "': trailing data '" +
                       extra + "'");
    if (flip != 0 && flip != 1)
      throw ParseError("tta plan entry '" + row + "': flip must be 0 or 1");
    e.transform.flip = flip == 1;
    plan.entries.push_back(e);
  }
  plan.validate();
  return plan;
}

TtaResult tta_aggregate(const Tensor& view_logits, const TtaPlan& plan) {
  plan.validate();
  if (view_logits.rank() != 2 ||
      view_logits.dim(0) != plan.entries.size())
    throw ShapeError("tta_aggregate expects [views, classes] logits with "
                     "one row per plan entry");
  const std::size_t views = view_logits.dim(0);
  const std::size_t classes = view_logits.dim(1);
  if (classes == 0) throw ShapeError("tta_aggregate: no classes");

  // Accumulate the weighted mean in extended precision so that 60 equal
  // rows pass through bit-tight.
  std::vector<long double> mix(classes, 0.0L);
  long double weight_total = 0.0L;
  std::vector<double> probs(classes);
  for (std::size_t v = 0; v < views; ++v) {
    double peak = view_logits.at(v, 0);
    for (std::size_t k = 1; k < classes; ++k)
      peak = std::max(peak, view_logits.at(v, k));
    double norm = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      probs[k] = std::exp(view_logits.at(v, k) - peak);
      norm += probs[k];
    }
    const double weight = plan.entries[v].weight;
    weight_total += weight;
    for (std::size_t k = 0; k < classes; ++k)
      mix[k] += static_cast<long double>(weight) * (probs[k] / norm);
  }

  TtaResult result;
  result.probabilities = Tensor({classes});
  for (std::size_t k = 0; k < classes; ++k)
    result.probabilities[k] = static_cast<double>(mix[k] / weight_total);
  result.predicted = 0;
  for (std::size_t k = 1; k < classes; ++k)
    if (result.probabilities[k] >
        result.probabilities[static_cast<std::size_t>(result.predicted)])
      result.predicted = static_cast<int>(k);
  return result;
}

}  // namespace lhc
