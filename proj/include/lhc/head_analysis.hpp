#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lhc/backbone.hpp"

namespace lhc {

// One hypothetical two-filter composition task split across local heads:
// of the n spatial sections, `single` see one of the two relevant
// activations, `dual` see both, `none` see neither.
struct EfficiencyPoint {
  int height = 0;
  int width = 0;
  int embed_dim = 0;
  int heads = 0;
  int single = 0;  // A
  int dual = 0;    // B
  int none = 0;    // C

  void validate() const;  // positives, nonnegative split, A+B+C = n
};

// Free parameters per modeled dimension (g1/l1) and per modeled
// relationship (g2/l2), for the global single head vs the local heads.
struct EfficiencyMeasures {
  double g1 = 0.0;
  double g2 = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
};

// g1 = HWd / (6(HW+d)); g2 = 1/6; with h = HW/n:
// l1 = (A*hd/(2(h+d)) + B*hd/(6(h+d))) / (A+B); l2 = (A/2 + B/6) / (A+B).
// Throws ValueError when A+B = 0 (the local measures are undefined).
EfficiencyMeasures efficiency_measures(const EfficiencyPoint& pt);

struct RegionRow {
  int single = 0;
  int dual = 0;
  double l1 = 0.0;
  double l2 = 0.0;
  bool l1_beats_g1 = false;
  bool l2_beats_g2 = false;
};

struct RegionScan {
  int height = 0;
  int width = 0;
  int heads = 0;
  int embed_dim = 0;
  double g1 = 0.0;
  double g2 = 0.0;
  std::vector<RegionRow> rows;
};

// Every (A, B) split with A, B >= 0 and 1 <= A+B <= heads, in
// lexicographic (A+B, A) order, compared against the global measures.
RegionScan region_scan(int height, int width, int heads, int embed_dim);

// One '#' summary line (geometry and the global measures), then a header
// row "single,dual,l1,l2,l1_beats_g1,l2_beats_g2", then one row per split
// (flags as 0/1).
std::string region_scan_csv(const RegionScan& scan);

// Pearson correlation; nullopt when either side has zero variance.
// Throws ShapeError on length mismatch, ValueError on empty input.
std::optional<double> pearson(std::span<const double> a,
                              std::span<const double> b);

struct HeadPairCorrelation {
  int first = 0;
  int second = 0;
  bool defined = false;
  double value = 0.0;
};

// Mean pairwise correlation over all unordered head pairs. Zero-variance
// pairs are excluded from the mean and counted, never imputed. `mean` is
// NaN when no pair is defined.
struct CorrelationReport {
  int heads = 0;
  std::size_t samples = 0;  // length of each flattened head vector
  std::vector<HeadPairCorrelation> pairs;
  int excluded = 0;
  double mean = 0.0;
};

// Correlations between pre-flattened per-head vectors (equal lengths).
// Throws ConfigError with fewer than two heads.
CorrelationReport correlation_report(
    const std::vector<std::vector<double>>& head_vectors);

// Flattens the pre-merge head outputs A_h of one insertion over a probe
// batch and correlates them head against head.
CorrelationReport head_output_correlation(const Model& model,
                                          std::span<const Tensor> probes,
                                          int block_index = 0);

// One '#' summary line (mean, excluded count), then
// "head_i,head_j,defined,correlation" rows (1-based head numbers).
std::string correlation_csv(const CorrelationReport& report);

enum class AblateMode { switch_off, detrain, reinit_seed };

// Returns a modified copy; the input model is never mutated.
//   switch_off:  the block is skipped, the residual passes x through.
//   detrain:     block weights return to the model's own seeded init.
//   reinit_seed: block weights are re-drawn from `seed`.
Model ablate_block(const Model& model, int block_index, AblateMode mode,
                   std::uint64_t seed = 0);

}  // namespace lhc
