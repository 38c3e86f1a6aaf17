#include "lhc/head_analysis.hpp"

#include <cmath>
#include <cstdio>
#include <string>

namespace lhc {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

void EfficiencyPoint::validate() const {
  if (height < 1 || width < 1 || embed_dim < 1 || heads < 1) {
    throw ConfigError("efficiency point needs positive H, W, d, n");
  }
  if (single < 0 || dual < 0 || none < 0) {
    throw ConfigError("section counts must be nonnegative");
  }
  if (single + dual + none != heads) {
    throw ConfigError("section split " + std::to_string(single) + "+" +
                      std::to_string(dual) + "+" + std::to_string(none) +
                      " does not sum to " + std::to_string(heads) + " heads");
  }
}

EfficiencyMeasures efficiency_measures(const EfficiencyPoint& pt) {
  pt.validate();
  if (pt.single + pt.dual == 0) {
    throw ValueError(
        "local measures are undefined when no section sees an activation "
        "(A + B = 0)");
  }

  const double hw = static_cast<double>(pt.height) * pt.width;
  const double d = pt.embed_dim;
  const double h = hw / pt.heads;  // positions per head
  const double a = pt.single;
  const double b = pt.dual;

  EfficiencyMeasures m;
  m.g1 = hw * d / (6.0 * (hw + d));
  m.g2 = 1.0 / 6.0;
  const double local1 = h * d / (2.0 * (h + d));  // one constraint
  const double local2 = h * d / (6.0 * (h + d));  // two constraints
  m.l1 = (a * local1 + b * local2) / (a + b);
  m.l2 = (a / 2.0 + b / 6.0) / (a + b);
  return m;
}

RegionScan region_scan(int height, int width, int heads, int embed_dim) {
  if (height < 1 || width < 1 || heads < 1 || embed_dim < 1) {
    throw ConfigError("region scan needs positive H, W, n, d");
  }

  RegionScan scan;
  scan.height = height;
  scan.width = width;
  scan.heads = heads;
  scan.embed_dim = embed_dim;

  for (int total = 1; total <= heads; ++total) {
    for (int a = 0; a <= total; ++a) {
      EfficiencyPoint pt;
      pt.height = height;
      pt.width = width;
      pt.embed_dim = embed_dim;
      pt.heads = heads;
      pt.single = a;
      pt.dual = total - a;
      pt.none = heads - total;
      const EfficiencyMeasures m = efficiency_measures(pt);
      scan.g1 = m.g1;
      scan.g2 = m.g2;
      RegionRow row;
      row.single = pt.single;
      row.dual = pt.dual;
      row.l1 = m.l1;
      row.l2 = m.l2;
      // The comparisons are decided in exact integer arithmetic by clearing
      // denominators: with h = HW/n, l1 > g1 becomes
      // (3A+B)(HW+d) > (HW+nd)(A+B), and l2 > g2 becomes 3A+B > A+B.
      // Floating evaluation would misclassify splits that tie exactly
      // (A = 0 computes one ulp off 1/6).
      const long long hw = static_cast<long long>(height) * width;
      const long long a64 = pt.single, b64 = pt.dual;
      row.l1_beats_g1 = (3 * a64 + b64) * (hw + embed_dim) >
                        (hw + static_cast<long long>(heads) * embed_dim) *
                            (a64 + b64);
      row.l2_beats_g2 = 3 * a64 + b64 > a64 + b64;
      scan.rows.push_back(row);
    }
  }
  return scan;
}

std::string region_scan_csv(const RegionScan& scan) {
  std::string out = "# height=" + std::to_string(scan.height) +
                    " width=" + std::to_string(scan.width) +
                    " heads=" + std::to_string(scan.heads) +
                    " embed_dim=" + std::to_string(scan.embed_dim) +
                    " g1=" + fmt(scan.g1) + " g2=" + fmt(scan.g2) + "\n";
  out += "single,dual,l1,l2,l1_beats_g1,l2_beats_g2\n";
  for (const RegionRow& row : scan.rows) {
    out += std::to_string(row.single) + "," + std::to_string(row.dual) + "," +
           fmt(row.l1) + "," + fmt(row.l2) + "," +
           (row.l1_beats_g1 ? "1" : "0") + "," +
           (row.l2_beats_g2 ? "1" : "0") + "\n";
  }
  return out;
}

std::optional<double> pearson(std::span<const double> a,
                              std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("pearson: length mismatch, " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw ValueError("pearson: empty input");

  const double n = static_cast<double>(a.size());
  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= n;
  mean_b /= n;

  double cov = 0.0, var_a = 0.0, var_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - mean_a;
    const double db = b[i] - mean_b;
    cov += da * db;
    var_a += da * da;
    var_b += db * db;
  }
  if (var_a == 0.0 || var_b == 0.0) return std::nullopt;
  return cov / std::sqrt(var_a * var_b);
}

CorrelationReport correlation_report(
    const std::vector<std::vector<double>>& head_vectors) {
  if (head_vectors.size() < 2) {
    throw ConfigError("correlation needs at least two heads, got " +
                      std::to_string(head_vectors.size()));
  }
  for (const std::vector<double>& v : head_vectors) {
    if (v.size() != head_vectors[0].size()) {
      throw ShapeError("head vectors differ in length: " +
                       std::to_string(v.size()) + " vs " +
                       std::to_string(head_vectors[0].size()));
    }
  }
  if (head_vectors[0].empty()) {
    throw ValueError("correlation over empty head vectors");
  }

  CorrelationReport rep;
  rep.heads = static_cast<int>(head_vectors.size());
  rep.samples = head_vectors[0].size();

  double sum = 0.0;
  int defined = 0;
  for (int i = 0; i < rep.heads; ++i) {
    for (int j = i + 1; j < rep.heads; ++j) {
      const std::optional<double> r = pearson(
          head_vectors[static_cast<std::size_t>(i)],
          head_vectors[static_cast<std::size_t>(j)]);
      HeadPairCorrelation pair;
      pair.first = i + 1;
      pair.second = j + 1;
      pair.defined = r.has_value();
      pair.value = r.value_or(0.0);
      rep.pairs.push_back(pair);
      if (r.has_value()) {
        sum += *r;
        ++defined;
      } else {
        ++rep.excluded;
      }
    }
  }
  rep.mean = defined > 0 ? sum / defined : std::nan("");
  return rep;
}

CorrelationReport head_output_correlation(const Model& model,
                                          std::span<const Tensor> probes,
                                          int block_index) {
  if (probes.empty()) throw ValueError("correlation needs >= 1 probe image");
  if (block_index < 0 || block_index >= model.num_blocks()) {
    throw ValueError("block index " + std::to_string(block_index) +
                     " outside [0, " + std::to_string(model.num_blocks() - 1) +
                     "]");
  }
  const int heads =
      model.spec().insertions[static_cast<std::size_t>(block_index)]
          .cfg.heads;
  if (heads < 2) {
    throw ConfigError("block has " + std::to_string(heads) +
                      " head(s); correlation needs at least two");
  }

  std::vector<std::vector<double>> vectors(
      static_cast<std::size_t>(heads));
  for (const Tensor& image : probes) {
    const std::vector<Tensor> outputs =
        model.head_outputs(image, block_index);
    for (std::size_t h = 0; h < outputs.size(); ++h) {
      const std::span<const double> data = outputs[h].data();
      vectors[h].insert(vectors[h].end(), data.begin(), data.end());
    }
  }
  return correlation_report(vectors);
}

std::string correlation_csv(const CorrelationReport& report) {
  std::string out = "# heads=" + std::to_string(report.heads) +
                    " samples=" + std::to_string(report.samples) +
                    " mean=" + fmt(report.mean) +
                    " excluded=" + std::to_string(report.excluded) + "\n";
  out += "head_i,head_j,defined,correlation\n";
  for (const HeadPairCorrelation& p : report.pairs) {
    out += std::to_string(p.first) + "," + std::to_string(p.second) + "," +
           (p.defined ? "1" : "0") + "," +
           (p.defined ? fmt(p.value) : "nan") + "\n";
  }
  return out;
}

Model ablate_block(const Model& model, int block_index, AblateMode mode,
                   std::uint64_t seed) {
  switch (mode) {
    case AblateMode::switch_off:
      return model.with_block_enabled(block_index, false);
    case AblateMode::detrain:
      return model.with_block_reinitialized(block_index, model.spec().seed);
    case AblateMode::reinit_seed:
      return model.with_block_reinitialized(block_index, seed);
  }
  throw ValueError("unknown ablation mode");
}

}  // namespace lhc
