// Command-line entry point: every library capability as a subcommand, for
// scripted experiments and CI. Subcommands print machine-readable key/value
// lines; with --out they also write CSV artifacts plus a replayable run
// manifest. All randomness is seeded, so repeated invocations with the same
// inputs produce byte-identical outputs (timestamps in manifests aside).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "lhc/attention.hpp"
#include "lhc/augment.hpp"
#include "lhc/backbone.hpp"
#include "lhc/checkpoint.hpp"
#include "lhc/config.hpp"
#include "lhc/errors.hpp"
#include "lhc/fer.hpp"
#include "lhc/head_analysis.hpp"
#include "lhc/ops.hpp"
#include "lhc/train.hpp"

namespace fs = std::filesystem;

using lhc::BackboneSpec;
using lhc::Checkpoint;
using lhc::Insertion;
using lhc::KvFile;
using lhc::LhcConfig;
using lhc::LhcVars;
using lhc::LhcWeights;
using lhc::Model;
using lhc::Sample;
using lhc::StageConfig;
using lhc::StageResult;
using lhc::Tape;
using lhc::Tensor;
using lhc::TtaPlan;
using lhc::Var;
namespace ops = lhc::ops;

namespace {

// ---------------------------------------------------------------- plumbing

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string fmt_sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

std::string now_stamp() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw lhc::IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw lhc::IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw lhc::IoError("short write to " + path.string());
}

fs::path ensure_out_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw lhc::IoError("cannot create " + out + ": " + ec.message());
  return dir;
}

using Extras = std::vector<std::pair<std::string, std::string>>;

// Every run that produces artifacts also records how to reproduce them.
void write_manifest(const fs::path& dir, const std::string& subcommand,
                    const std::string& argv_line, const Extras& extras) {
  KvFile kv;
  kv.add("schema", "run-manifest/1");
  kv.add("subcommand", subcommand);
  kv.add("argv", argv_line);
  kv.add("written_at", now_stamp());
  for (const auto& [key, value] : extras) kv.add(key, value);
  write_text_file(dir / "manifest.txt", kv.serialize());
}

BackboneSpec resolve_spec(const std::string& arg) {
  if (arg == "full") return lhc::build_full_spec();
  if (arg == "tiny") return lhc::build_tiny_spec();
  if (!fs::exists(arg)) {
    throw lhc::ConfigError("unknown spec '" + arg +
                           "' (expected full, tiny, or a spec file path)");
  }
  return lhc::spec_from_text(read_text_file(arg));
}

std::optional<TtaPlan> resolve_tta(const std::string& arg) {
  if (arg == "off") return std::nullopt;
  if (arg == "on") return lhc::default_tta_plan();
  if (!fs::exists(arg)) {
    throw lhc::ConfigError("unknown tta plan '" + arg +
                           "' (expected on, off, or a plan file path)");
  }
  return lhc::tta_plan_from_text(read_text_file(arg));
}

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& g,
                     double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(g);
  return t;
}

// One flag set shared across subcommands; only the parsed subcommand reads
// from it, so unused defaults are harmless.
struct Opts {
  std::string config;
  std::string out;
  std::string dataset;
  std::string spec = "tiny";
  std::string tta = "off";
  std::string weights;
  std::string split = "private";
  std::string val = "public";
  std::string mode;
  std::string protocol = "config";
  int block_index = 0;
  int resize = lhc::kFerSide;
  int probes = 8;
  int scan_heads = 8;
  int scan_height = 56;
  int scan_width = 56;
  double d_ratio = 0.5;
  std::uint64_t seed = 42;
  bool seed_given = false;
};

// --------------------------------------------------------------- datasets

// Splits stored by ingest inside one container file.
constexpr const char* kSplitKeys[3] = {"training", "public", "private"};

std::string dataset_split_key(const std::string& flag) {
  for (const char* key : kSplitKeys) {
    if (flag == key) return key;
  }
  throw lhc::ConfigError("unknown split '" + flag +
                         "' (expected training, public, or private)");
}

// Container rows -> labelled samples shaped for `spec`, intensities scaled
// to [0,1]. Side mismatches are bridged by bilinear resampling; a note is
// printed so the resample is never silent.
std::vector<Sample> load_split(const Checkpoint& ck, const std::string& name,
                               const BackboneSpec& spec) {
  if (!ck.has(name + ".images")) return {};
  const Tensor images = ck.get(name + ".images");
  const Tensor labels = ck.get(name + ".labels");
  if (images.rank() != 3) {
    throw lhc::ShapeError("container " + name + ".images must be [N,H,W]");
  }
  const std::size_t count = images.dim(0);
  const std::size_t side_h = images.dim(1);
  const std::size_t side_w = images.dim(2);
  if (labels.rank() != 1 || labels.dim(0) != count) {
    throw lhc::ShapeError("container " + name + ".labels must be [N]");
  }
  const int th = spec.input_height;
  const int tw = spec.input_width;
  if (spec.input_channels != 1 && spec.input_channels != 3) {
    throw lhc::ConfigError("spec wants " +
                           std::to_string(spec.input_channels) +
                           " input channels; container images are grayscale");
  }
  if (static_cast<int>(side_h) != th || static_cast<int>(side_w) != tw) {
    std::cout << "note: resampling " << name << " " << side_h << "x" << side_w
              << " -> " << th << "x" << tw << " to fit the spec\n";
  }

  std::vector<Sample> out;
  out.reserve(count);
  const std::size_t plane_size = side_h * side_w;
  for (std::size_t n = 0; n < count; ++n) {
    Tensor plane({side_h, side_w});
    for (std::size_t i = 0; i < plane_size; ++i) {
      plane[i] = images[n * plane_size + i] / 255.0;
    }
    if (static_cast<int>(side_h) != th || static_cast<int>(side_w) != tw) {
      plane = lhc::resize_bilinear(plane, th, tw);
    }
    Sample s;
    if (spec.input_channels == 3) {
      s.image = lhc::gray_to_rgb(plane);
    } else {
      s.image = plane.reshaped({static_cast<std::size_t>(th),
                                static_cast<std::size_t>(tw), 1});
    }
    const double raw = labels[n];
    s.label = static_cast<int>(raw);
    if (s.label < 0 || s.label >= spec.num_classes) {
      throw lhc::ValueError("container label " + std::to_string(s.label) +
                            " outside 0.." +
                            std::to_string(spec.num_classes - 1));
    }
    out.push_back(std::move(s));
  }
  return out;
}

Checkpoint open_dataset(const std::string& path) {
  if (path.empty()) {
    throw lhc::ConfigError("this subcommand needs --dataset <container>");
  }
  return Checkpoint::load(path);
}

Model build_model(const Opts& o) {
  BackboneSpec spec = resolve_spec(o.spec);
  if (o.seed_given) spec.seed = o.seed;
  Model model = Model::init(spec);
  if (!o.weights.empty()) {
    lhc::load_into_model(Checkpoint::load(o.weights), model);
  }
  return model;
}

std::string confusion_csv(const lhc::Evaluation& eval) {
  std::ostringstream out;
  out << "actual";
  for (std::size_t j = 0; j < eval.confusion.size(); ++j) out << "," << j;
  out << "\n";
  for (std::size_t i = 0; i < eval.confusion.size(); ++i) {
    out << i;
    for (std::size_t j = 0; j < eval.confusion[i].size(); ++j) {
      out << "," << eval.confusion[i][j];
    }
    out << "\n";
  }
  return out.str();
}

void print_evaluation(const lhc::Evaluation& eval, const std::string& split,
                      bool named_classes) {
  std::cout << "split = " << split << "\n";
  std::cout << "samples = " << eval.total << "\n";
  std::cout << "accuracy = " << fmt6(eval.accuracy) << "\n";
  for (std::size_t i = 0; i < eval.confusion.size(); ++i) {
    std::size_t row_total = 0;
    for (std::size_t c : eval.confusion[i]) row_total += c;
    std::cout << "confusion." << i << " =";
    for (std::size_t c : eval.confusion[i]) std::cout << " " << c;
    if (named_classes) {
      std::cout << "  # " << lhc::emotion_name(static_cast<int>(i)) << " ("
                << row_total << " samples)";
    }
    std::cout << "\n";
  }
}

// ------------------------------------------------------------ check-shapes

int run_check_shapes(const Opts& o, const std::string& argv_line) {
  const BackboneSpec full = lhc::build_full_spec();
  std::mt19937_64 g(o.seed);
  for (std::size_t i = 0; i < full.insertions.size(); ++i) {
    const LhcConfig& cfg = full.insertions[i].cfg;
    const Tensor x = random_tensor({static_cast<std::size_t>(cfg.height),
                                    static_cast<std::size_t>(cfg.width),
                                    static_cast<std::size_t>(cfg.channels)},
                                   g, -1.0, 1.0);
    const LhcWeights w = LhcWeights::init(cfg, g());
    const Tensor y = lhc_apply(x, cfg, w);
    if (!y.same_shape(x)) {
      throw lhc::ShapeError("configuration " + std::to_string(i) +
                            " changed the feature-map shape");
    }
    std::cout << "config " << i << ": " << cfg.height << "x" << cfg.width
              << "x" << cfg.channels << " heads=" << cfg.heads
              << " embed=" << cfg.embed_dim << " -> shape preserved\n";
  }
  std::cout << "all configurations preserve shape\n";
  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    write_manifest(dir, "check-shapes", argv_line,
                   {{"seed", std::to_string(o.seed)}});
  }
  return 0;
}

// -------------------------------------------------------------- grad-check

using BuildFn = std::function<Var(Tape&, std::vector<Var>&)>;

double loss_value(const BuildFn& build, const std::vector<Tensor>& leaves) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
  return build(tape, vars).value()[0];
}

// Central finite differences against the tape, on a seeded sample of
// entries per leaf. Relative error uses max(1, |analytic|, |numeric|) so
// near-zero gradients compare absolutely.
double fd_max_rel_err(const BuildFn& build, std::vector<Tensor> leaves,
                      std::size_t entries_per_leaf, std::mt19937_64& g) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
  const Var loss = build(tape, vars);
  tape.backward(loss);

  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor analytic = tape.grad(vars[li]);
    std::vector<std::size_t> order(leaves[li].size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), g);
    const std::size_t take = std::min(entries_per_leaf, order.size());
    for (std::size_t k = 0; k < take; ++k) {
      const std::size_t j = order[k];
      const double saved = leaves[li][j];
      leaves[li][j] = saved + eps;
      const double up = loss_value(build, leaves);
      leaves[li][j] = saved - eps;
      const double down = loss_value(build, leaves);
      leaves[li][j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom =
          std::max({1.0, std::abs(numeric), std::abs(analytic[j])});
      worst = std::max(worst, std::abs(numeric - analytic[j]) / denom);
    }
  }
  return worst;
}

// Smallest runnable network exercising every layer family: stem conv, a
// stage with projection shortcut, a gated attention insertion, dense head.
BackboneSpec micro_spec(std::uint64_t seed) {
  BackboneSpec s;
  s.input_height = 4;
  s.input_width = 4;
  s.input_channels = 1;
  s.stem_filters = 2;
  s.stem_kernel = 3;
  s.stem_stride = 1;
  s.stem_pool = 1;
  s.stages = {{3, 1, 1}};
  s.hidden_units = 4;
  s.num_classes = 3;
  s.gate_mode = lhc::GateMode::gated;
  Insertion ins;
  ins.position = 1;
  ins.cfg.heads = 2;
  ins.cfg.embed_dim = 2;
  ins.cfg.pool_size = 3;
  ins.cfg.value_kernel = 3;
  ins.cfg.height = 4;
  ins.cfg.width = 4;
  ins.cfg.channels = 3;
  ins.theta_init = 0.3;
  s.insertions = {ins};
  s.seed = seed;
  return s;
}

int run_grad_check(const Opts& o, const std::string& argv_line) {
  std::mt19937_64 g(o.seed);
  struct Check {
    std::string name;
    double tol;
    double err;
  };
  std::vector<Check> checks;

  auto run_check = [&](const std::string& name, double tol,
                       const BuildFn& build, std::vector<Tensor> leaves,
                       std::size_t entries_per_leaf) {
    const double err =
        fd_max_rel_err(build, std::move(leaves), entries_per_leaf, g);
    checks.push_back({name, tol, err});
    std::printf("%-28s max rel err = %-10s (tol %s)\n", name.c_str(),
                fmt_sci(err).c_str(), fmt_sci(tol).c_str());
  };

  // Dense chain: matmul + row bias + tanh.
  run_check(
      "dense chain", 1e-4,
      [](Tape&, std::vector<Var>& v) {
        return ops::mean(
            ops::tanh(ops::add_row_bias(ops::matmul(v[0], v[1]), v[2])));
      },
      {random_tensor({2, 4}, g, -1.0, 1.0), random_tensor({4, 3}, g, -1.0, 1.0),
       random_tensor({3}, g, -0.5, 0.5)},
      24);

  // Spatial kernels; inputs kept away from relu/max-pool kinks.
  run_check(
      "conv2d_same + relu", 1e-4,
      [](Tape&, std::vector<Var>& v) {
        return ops::mean(ops::relu(ops::conv2d_same(v[0], v[1], v[2])));
      },
      {random_tensor({5, 5, 2}, g, 0.2, 1.0),
       random_tensor({3, 3, 2, 3}, g, 0.2, 1.0),
       random_tensor({3}, g, 0.2, 0.5)},
      24);
  run_check(
      "pooling pair", 1e-4,
      [](Tape&, std::vector<Var>& v) {
        return ops::mean(ops::add(ops::avg_pool2d_same(v[0], 3),
                                  ops::max_pool2d_same(v[0], 3)));
      },
      {random_tensor({6, 6, 2}, g, 0.2, 1.0)}, 48);

  // Row-wise softmax machinery as the loss uses it.
  run_check(
      "softmax pick", 1e-4,
      [](Tape&, std::vector<Var>& v) {
        return ops::mean(
            ops::pick_per_row(ops::log_softmax_rows(v[0]), {0, 2, 1, 3}));
      },
      {random_tensor({4, 5}, g, -2.0, 2.0)}, 20);
  run_check(
      "sigmoid row scale", 1e-4,
      [](Tape&, std::vector<Var>& v) {
        return ops::mean(ops::row_scale(v[0], ops::sigmoid(v[1])));
      },
      {random_tensor({3, 4}, g, -1.0, 1.0), random_tensor({3}, g, -1.0, 1.0)},
      16);

  // The full block at the reduced geometry (H=W=4, C=3, n=2, d=2).
  {
    LhcConfig cfg;
    cfg.heads = 2;
    cfg.embed_dim = 2;
    cfg.pool_size = 3;
    cfg.value_kernel = 3;
    cfg.height = 4;
    cfg.width = 4;
    cfg.channels = 3;
    cfg.validate();
    const LhcWeights w = LhcWeights::init(cfg, g());
    std::vector<Tensor> leaves = {w.embed_weight[0], w.embed_bias[0],
                                  w.embed_weight[1], w.embed_bias[1],
                                  w.scale_weight,    w.scale_bias,
                                  w.value_kernel,    w.value_bias,
                                  random_tensor({4, 4, 3}, g, -1.0, 1.0)};
    run_check(
        "full attention block", 1e-3,
        [cfg](Tape&, std::vector<Var>& v) {
          LhcVars lv;
          lv.embed_weight = {v[0], v[2]};
          lv.embed_bias = {v[1], v[3]};
          lv.scale_weight = v[4];
          lv.scale_bias = v[5];
          lv.value_kernel = v[6];
          lv.value_bias = v[7];
          const Var y = lhc::lhc_forward(v[8], cfg, lv);
          return ops::mean(ops::mul(y, y));
        },
        std::move(leaves), 6);
  }

  // End to end through the micro network, crossentropy on two images.
  {
    const BackboneSpec spec = micro_spec(o.seed);
    const Model model = Model::init(spec);
    std::vector<Tensor> images;
    images.push_back(random_tensor({4, 4, 1}, g, 0.0, 1.0));
    images.push_back(random_tensor({4, 4, 1}, g, 0.0, 1.0));
    const std::vector<int> labels = {0, 2};
    std::vector<Tensor> leaves;
    for (const lhc::ParamInfo& p : model.manifest()) {
      leaves.push_back(model.param(p.name));
    }
    run_check(
        "micro model end-to-end", 1e-3,
        [&model, &images, &labels](Tape& tape, std::vector<Var>& v) {
          const Var logits = model.forward_batch(
              tape, std::span<const Tensor>(images), v);
          return lhc::crossentropy_loss(tape, logits, labels);
        },
        std::move(leaves), 4);
  }

  double worst = 0.0;
  bool ok = true;
  for (const Check& c : checks) {
    worst = std::max(worst, c.err);
    if (!(c.err < c.tol)) {
      std::cerr << "grad-check FAILED: " << c.name << " rel err "
                << fmt_sci(c.err) << " >= tol " << fmt_sci(c.tol) << "\n";
      ok = false;
    }
  }
  if (!ok) return 1;
  std::cout << "grad-check passed (worst = " << fmt_sci(worst) << ")\n";
  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    write_manifest(dir, "grad-check", argv_line,
                   {{"seed", std::to_string(o.seed)},
                    {"worst_rel_err", fmt_sci(worst)}});
  }
  return 0;
}

// ------------------------------------------------------------ count-params

int run_count_params(const Opts& o, const std::string& argv_line) {
  const BackboneSpec spec = resolve_spec(o.spec);
  const lhc::ParamCensus census = lhc::count_params(spec);
  std::ostringstream body;
  body << "spec = " << o.spec << "\n";
  body << "total = " << census.total << "\n";
  body << "backbone_only = " << census.backbone_only << "\n";
  body << "attention_only = " << census.attention_only << "\n";
  body << "gate_only = " << census.gate_only << "\n";
  body << "attention_share = " << fmt6(census.attention_share) << "\n";
  std::cout << body.str();
  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    write_text_file(dir / "params.txt", body.str());
    write_manifest(dir, "count-params", argv_line, {{"spec", o.spec}});
  }
  return 0;
}

// ----------------------------------------------------------------- ingest

int run_ingest(const Opts& o, const std::string& argv_line) {
  if (o.dataset.empty()) {
    throw lhc::ConfigError("ingest needs --dataset <fer2013 csv>");
  }
  if (o.out.empty()) throw lhc::ConfigError("ingest needs --out <dir>");
  if (o.resize < 1) throw lhc::ConfigError("--resize must be >= 1");

  std::ifstream in(o.dataset, std::ios::binary);
  if (!in) throw lhc::IoError("cannot open " + o.dataset);
  const lhc::FerDataset data = lhc::parse_fer_csv(in);
  for (const lhc::ParseIssue& issue : data.issues) {
    std::cerr << "row " << issue.row << ": " << issue.message << "\n";
  }
  const std::size_t kept =
      data.training.size() + data.public_test.size() + data.private_test.size();
  if (kept == 0) throw lhc::ValueError("no usable rows in " + o.dataset);

  const std::size_t side = static_cast<std::size_t>(o.resize);
  Checkpoint ck;
  const std::vector<lhc::FerRecord>* splits[3] = {
      &data.training, &data.public_test, &data.private_test};
  for (int s = 0; s < 3; ++s) {
    const std::vector<lhc::FerRecord>& records = *splits[s];
    if (records.empty()) continue;
    Tensor images({records.size(), side, side});
    Tensor labels({records.size()});
    for (std::size_t n = 0; n < records.size(); ++n) {
      Tensor img = lhc::to_tensor(records[n]);
      if (o.resize != lhc::kFerSide) {
        img = lhc::quantize_truncate(
            lhc::resize_bilinear(img, o.resize, o.resize));
      }
      std::copy(&img[0], &img[0] + img.size(),
                &images[n * side * side]);
      labels[n] = records[n].label;
    }
    ck.put(std::string(kSplitKeys[s]) + ".images", images,
           lhc::Precision::u8);
    ck.put(std::string(kSplitKeys[s]) + ".labels", labels,
           lhc::Precision::u8);
  }

  const fs::path dir = ensure_out_dir(o.out);
  const fs::path file = dir / "dataset.lhct";
  ck.save(file.string());

  std::ostringstream body;
  body << "rows = " << data.rows_seen << "\n";
  body << "rejected = " << data.issues.size() << "\n";
  body << "side = " << o.resize << "\n";
  body << "training = " << data.training.size() << "\n";
  body << "public = " << data.public_test.size() << "\n";
  body << "private = " << data.private_test.size() << "\n";
  const auto counts = lhc::class_counts(data.training);
  for (int c = 0; c < lhc::kEmotionClasses; ++c) {
    body << "training." << lhc::emotion_name(c) << " = " << counts[c] << "\n";
  }
  std::cout << body.str();
  std::cout << "wrote " << file.string() << "\n";
  write_manifest(dir, "ingest", argv_line,
                 {{"dataset", o.dataset},
                  {"resize", std::to_string(o.resize)},
                  {"rows", std::to_string(data.rows_seen)},
                  {"rejected", std::to_string(data.issues.size())}});
  return 0;
}

// ------------------------------------------------------------------ train

StageConfig stage_from_config(const KvFile& kv) {
  StageConfig cfg;
  const std::string kind = kv.has("optimizer") ? kv.get("optimizer") : "adam";
  if (kind == "adam") {
    cfg.optimizer.kind = lhc::OptimizerConfig::Kind::adam;
    cfg.optimizer.lr = 1e-3;
  } else if (kind == "sgd") {
    cfg.optimizer.kind = lhc::OptimizerConfig::Kind::sgd;
    cfg.optimizer.lr = 0.01;
  } else {
    throw lhc::ConfigError("optimizer must be adam or sgd, got '" + kind +
                           "'");
  }
  if (kv.has("lr")) cfg.optimizer.lr = kv.get_double("lr");
  if (kv.has("momentum")) cfg.optimizer.momentum = kv.get_double("momentum");
  cfg.batch_size = kv.has("batch") ? static_cast<int>(kv.get_int("batch")) : 32;
  cfg.patience =
      kv.has("patience") ? static_cast<int>(kv.get_int("patience")) : 10;
  cfg.max_epochs =
      kv.has("max_epochs") ? static_cast<int>(kv.get_int("max_epochs")) : 50;
  if (kv.has("rotation")) cfg.augment.rotation_deg = kv.get_double("rotation");
  if (kv.has("shift")) cfg.augment.shift_frac = kv.get_double("shift");
  if (kv.has("zoom")) cfg.augment.zoom_frac = kv.get_double("zoom");
  if (kv.has("hflip")) cfg.augment.hflip = kv.get_bool("hflip");
  if (kv.has("freeze_backbone")) {
    cfg.freeze_backbone = kv.get_bool("freeze_backbone");
  }
  return cfg;
}

int run_train(const Opts& o, const std::string& argv_line) {
  const Checkpoint ds = open_dataset(o.dataset);
  BackboneSpec spec = resolve_spec(o.spec);
  if (o.seed_given) spec.seed = o.seed;
  if (!spec.trainable()) {
    throw lhc::ConfigError(
        "spec '" + o.spec +
        "' is census-only (stride > 1 or batch norm); train needs a "
        "runnable spec such as tiny");
  }
  Model model = Model::init(spec);
  if (!o.weights.empty()) {
    lhc::load_into_model(Checkpoint::load(o.weights), model);
  }

  const std::vector<Sample> train = load_split(ds, "training", spec);
  const std::vector<Sample> val =
      load_split(ds, dataset_split_key(o.val), spec);
  if (train.empty()) throw lhc::ValueError("training split is empty");
  if (val.empty()) {
    throw lhc::ValueError("validation split '" + o.val + "' is empty");
  }

  std::vector<StageConfig> stages;
  if (o.protocol == "four-stage") {
    stages = lhc::four_stage_protocol();
  } else if (o.protocol == "config") {
    KvFile kv;
    if (!o.config.empty()) {
      kv = KvFile::parse_string(read_text_file(o.config));
      if (kv.get_or("schema", "") != "train-config/1") {
        throw lhc::ConfigError("config: expected 'schema = train-config/1'");
      }
    }
    stages.push_back(stage_from_config(kv));
  } else {
    throw lhc::ConfigError("--protocol must be config or four-stage, got '" +
                           o.protocol + "'");
  }
  for (std::size_t k = 0; k < stages.size(); ++k) {
    stages[k].seed = spec.seed + k;
    stages[k].validate();
  }

  std::optional<fs::path> dir;
  if (!o.out.empty()) dir = ensure_out_dir(o.out);

  Extras extras = {{"spec", o.spec},
                   {"dataset", o.dataset},
                   {"protocol", o.protocol},
                   {"seed", std::to_string(spec.seed)},
                   {"val", o.val}};
  if (!o.config.empty()) extras.emplace_back("config", o.config);
  if (!o.weights.empty()) extras.emplace_back("weights", o.weights);

  for (std::size_t k = 0; k < stages.size(); ++k) {
    const StageResult result = lhc::run_stage(model, train, val, stages[k]);
    std::cout << "stage " << (k + 1) << ": epochs=" << result.epochs_run
              << " baseline=" << fmt6(result.baseline_val_accuracy)
              << " best=" << fmt6(result.best_val_accuracy) << " (epoch "
              << result.best_epoch << ")"
              << (result.early_stopped ? " early-stopped" : "") << "\n";
    if (!result.history.empty()) {
      std::cout << "stage " << (k + 1) << " final train loss = "
                << fmt6(result.history.back().train_loss) << "\n";
    }
    extras.emplace_back("stage" + std::to_string(k + 1) + ".best",
                        fmt6(result.best_val_accuracy));
    if (dir) {
      write_text_file(*dir / ("history_stage" + std::to_string(k + 1) +
                              ".csv"),
                      lhc::history_csv(result.history));
    }
  }

  const lhc::Evaluation final_eval = lhc::evaluate(model, val);
  std::cout << "final val accuracy = " << fmt6(final_eval.accuracy) << "\n";
  if (dir) {
    const fs::path weights_file = *dir / "model.lhckpt";
    lhc::checkpoint_from_model(model).save(weights_file.string());
    std::cout << "wrote " << weights_file.string() << "\n";
    extras.emplace_back("final_val_accuracy", fmt6(final_eval.accuracy));
    write_manifest(*dir, "train", argv_line, extras);
  }
  return 0;
}

// ------------------------------------------------------- evaluate/tta-eval

int run_evaluate(const Opts& o, const std::string& argv_line,
                 const std::string& subcommand, const std::string& tta_arg) {
  const Checkpoint ds = open_dataset(o.dataset);
  const Model model = build_model(o);
  if (o.weights.empty()) {
    std::cout << "note: no --weights given; evaluating the seeded "
                 "initialization\n";
  }
  const std::string split = dataset_split_key(o.split);
  const std::vector<Sample> samples = load_split(ds, split, model.spec());
  if (samples.empty()) {
    throw lhc::ValueError("split '" + split + "' is empty");
  }
  const std::optional<TtaPlan> plan = resolve_tta(tta_arg);
  if (plan) std::cout << "tta views = " << plan->entries.size() << "\n";

  const lhc::Evaluation eval =
      lhc::evaluate(model, samples, plan ? &*plan : nullptr);
  print_evaluation(eval, split, model.spec().num_classes ==
                                    lhc::kEmotionClasses);
  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    write_text_file(dir / "confusion.csv", confusion_csv(eval));
    Extras extras = {{"spec", o.spec},
                     {"dataset", o.dataset},
                     {"split", split},
                     {"tta", tta_arg},
                     {"accuracy", fmt6(eval.accuracy)}};
    if (!o.weights.empty()) extras.emplace_back("weights", o.weights);
    write_manifest(dir, subcommand, argv_line, extras);
  }
  return 0;
}

// ------------------------------------------------------------ analyze-heads

int run_analyze_heads(const Opts& o, const std::string& argv_line) {
  if (o.probes < 1) throw lhc::ConfigError("--probes must be >= 1");
  const Model model = build_model(o);
  const BackboneSpec& spec = model.spec();

  std::vector<Tensor> probes;
  if (!o.dataset.empty()) {
    const Checkpoint ds = open_dataset(o.dataset);
    const std::vector<Sample> samples =
        load_split(ds, dataset_split_key(o.split), spec);
    if (samples.empty()) {
      throw lhc::ValueError("split '" + o.split + "' is empty");
    }
    const std::size_t take =
        std::min<std::size_t>(samples.size(), static_cast<std::size_t>(o.probes));
    for (std::size_t i = 0; i < take; ++i) probes.push_back(samples[i].image);
    std::cout << "probes = " << take << " (from " << o.split << " split)\n";
  } else {
    std::mt19937_64 g(o.seed);
    for (int i = 0; i < o.probes; ++i) {
      probes.push_back(
          random_tensor({static_cast<std::size_t>(spec.input_height),
                         static_cast<std::size_t>(spec.input_width),
                         static_cast<std::size_t>(spec.input_channels)},
                        g, 0.0, 1.0));
    }
    std::cout << "probes = " << o.probes << " (seeded random)\n";
  }

  const lhc::CorrelationReport report =
      lhc::head_output_correlation(model, probes, o.block_index);
  const std::string csv = lhc::correlation_csv(report);
  std::cout << csv;
  std::cout << "mean_correlation = " << fmt6(report.mean) << "\n";

  Extras extras = {{"spec", o.spec},
                   {"block_index", std::to_string(o.block_index)},
                   {"probes", std::to_string(probes.size())},
                   {"mean_correlation", fmt6(report.mean)}};
  if (!o.weights.empty()) extras.emplace_back("weights", o.weights);

  if (!o.mode.empty()) {
    lhc::AblateMode mode;
    if (o.mode == "switch_off") {
      mode = lhc::AblateMode::switch_off;
    } else if (o.mode == "detrain") {
      mode = lhc::AblateMode::detrain;
    } else {
      throw lhc::ConfigError("--mode must be switch_off or detrain, got '" +
                             o.mode + "'");
    }
    const Model ablated = lhc::ablate_block(model, o.block_index, mode);
    double delta_sum = 0.0;
    std::size_t delta_count = 0;
    std::size_t agree = 0;
    for (const Tensor& probe : probes) {
      const Tensor a = model.logits(probe);
      const Tensor b = ablated.logits(probe);
      std::size_t arg_a = 0, arg_b = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        delta_sum += std::abs(a[i] - b[i]);
        ++delta_count;
        if (a[i] > a[arg_a]) arg_a = i;
        if (b[i] > b[arg_b]) arg_b = i;
      }
      if (arg_a == arg_b) ++agree;
    }
    const double mean_delta = delta_sum / static_cast<double>(delta_count);
    const double agreement =
        static_cast<double>(agree) / static_cast<double>(probes.size());
    std::cout << "ablation_mode = " << o.mode << "\n";
    std::cout << "mean_abs_logit_delta = " << fmt6(mean_delta) << "\n";
    std::cout << "prediction_agreement = " << fmt6(agreement) << "\n";
    extras.emplace_back("ablation_mode", o.mode);
    extras.emplace_back("mean_abs_logit_delta", fmt6(mean_delta));
    extras.emplace_back("prediction_agreement", fmt6(agreement));
  }

  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    write_text_file(dir / "correlations.csv", csv);
    write_manifest(dir, "analyze-heads", argv_line, extras);
  }
  return 0;
}

// ---------------------------------------------------------- efficiency-scan

int run_efficiency_scan(const Opts& o, const std::string& argv_line) {
  if (o.scan_heads < 1) throw lhc::ConfigError("--n must be >= 1");
  if (o.scan_height < 1 || o.scan_width < 1) {
    throw lhc::ConfigError("--height/--width must be >= 1");
  }
  if (!(o.d_ratio > 0.0)) throw lhc::ConfigError("--d-ratio must be > 0");
  const double hw = static_cast<double>(o.scan_height) * o.scan_width;
  const int embed = static_cast<int>(
      std::llround(o.d_ratio * hw / static_cast<double>(o.scan_heads)));
  if (embed < 1) {
    throw lhc::ConfigError("--d-ratio " + fmt6(o.d_ratio) +
                           " gives an embedding below one dimension");
  }

  const lhc::RegionScan scan =
      lhc::region_scan(o.scan_height, o.scan_width, o.scan_heads, embed);
  const std::string csv = lhc::region_scan_csv(scan);

  std::size_t local_l2 = 0;
  for (const lhc::RegionRow& row : scan.rows) {
    if (row.l2_beats_g2) ++local_l2;
  }
  std::cout << "geometry = " << o.scan_height << "x" << o.scan_width
            << " heads=" << o.scan_heads << " embed=" << embed << "\n";
  std::cout << "rows = " << scan.rows.size() << "\n";
  std::cout << "l2_beats_g2 = " << local_l2 << "\n";

  if (o.out.empty()) {
    std::cout << csv;
  } else {
    const fs::path dir = ensure_out_dir(o.out);
    write_text_file(dir / "efficiency_scan.csv", csv);
    std::cout << "wrote " << (dir / "efficiency_scan.csv").string() << "\n";
    write_manifest(dir, "efficiency-scan", argv_line,
                   {{"height", std::to_string(o.scan_height)},
                    {"width", std::to_string(o.scan_width)},
                    {"n", std::to_string(o.scan_heads)},
                    {"d_ratio", fmt6(o.d_ratio)},
                    {"embed", std::to_string(embed)}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::string argv_line;
  for (int i = 0; i < argc; ++i) {
    if (i) argv_line += ' ';
    argv_line += argv[i];
  }

  CLI::App app{"local multi-head channel attention toolkit"};
  app.require_subcommand(1);

  Opts o;
  int rc = 0;

  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "rng seed")
        ->each([&](const std::string&) { o.seed_given = true; });
  };

  CLI::App* check = app.add_subcommand(
      "check-shapes",
      "run every built-in block configuration on seeded inputs and verify "
      "shape preservation");
  add_seed(check);
  check->add_option("--out", o.out, "output directory for the run manifest");
  check->callback([&] { rc = run_check_shapes(o, argv_line); });

  CLI::App* grad = app.add_subcommand(
      "grad-check",
      "finite-difference spot checks of the primitives, the attention block "
      "and a micro network");
  add_seed(grad);
  grad->add_option("--out", o.out, "output directory for the run manifest");
  grad->callback([&] { rc = run_grad_check(o, argv_line); });

  CLI::App* count = app.add_subcommand(
      "count-params", "exact parameter census of a backbone spec");
  count->add_option("--spec", o.spec, "full | tiny | spec file path")
      ->default_str("full");
  count->add_option("--out", o.out, "output directory");
  count->callback([&] {
    if (count->count("--spec") == 0) o.spec = "full";
    rc = run_count_params(o, argv_line);
  });

  CLI::App* ingest = app.add_subcommand(
      "ingest",
      "parse a FER2013-format csv into one reproducible dataset container");
  ingest->add_option("--dataset", o.dataset, "path to the csv")->required();
  ingest->add_option("--out", o.out, "output directory")->required();
  ingest->add_option("--resize", o.resize,
                     "target side length (bilinear + truncation)");
  ingest->callback([&] { rc = run_ingest(o, argv_line); });

  CLI::App* train = app.add_subcommand(
      "train", "train a runnable spec on an ingested dataset container");
  train->add_option("--dataset", o.dataset, "dataset container from ingest")
      ->required();
  train->add_option("--spec", o.spec, "tiny | spec file path");
  train->add_option("--config", o.config,
                    "train-config/1 key/value file (single stage)");
  train->add_option("--protocol", o.protocol,
                    "config | four-stage (the built-in schedule)");
  train->add_option("--weights", o.weights, "warm-start checkpoint");
  train->add_option("--val", o.val,
                    "validation split: training | public | private");
  train->add_option("--out", o.out,
                    "output directory (history, weights, manifest)");
  add_seed(train);
  train->callback([&] { rc = run_train(o, argv_line); });

  CLI::App* eval_cmd = app.add_subcommand(
      "evaluate", "accuracy and confusion matrix of a model on one split");
  CLI::App* tta_cmd = app.add_subcommand(
      "tta-eval", "evaluate through the weighted multi-view aggregate");
  for (CLI::App* sub : {eval_cmd, tta_cmd}) {
    sub->add_option("--dataset", o.dataset, "dataset container from ingest")
        ->required();
    sub->add_option("--spec", o.spec, "tiny | spec file path");
    sub->add_option("--weights", o.weights, "checkpoint to evaluate");
    sub->add_option("--split", o.split, "training | public | private");
    sub->add_option("--tta", o.tta, "on | off | plan file path");
    sub->add_option("--out", o.out, "output directory (confusion csv)");
    add_seed(sub);
  }
  eval_cmd->callback([&] {
    rc = run_evaluate(o, argv_line, "evaluate",
                      eval_cmd->count("--tta") ? o.tta : "off");
  });
  tta_cmd->callback([&] {
    rc = run_evaluate(o, argv_line, "tta-eval",
                      tta_cmd->count("--tta") ? o.tta : "on");
  });

  CLI::App* heads = app.add_subcommand(
      "analyze-heads",
      "head-output correlations of one attention block, with optional "
      "ablation comparison");
  heads->add_option("--spec", o.spec, "tiny | spec file path");
  heads->add_option("--weights", o.weights, "checkpoint to analyze");
  heads->add_option("--dataset", o.dataset,
                    "dataset container for probe images (optional)");
  heads->add_option("--split", o.split,
                    "probe split when --dataset is given");
  heads->add_option("--block-index", o.block_index, "insertion index");
  heads->add_option("--mode", o.mode,
                    "ablation comparison: switch_off | detrain");
  heads->add_option("--probes", o.probes, "number of probe images");
  heads->add_option("--out", o.out, "output directory (correlations csv)");
  add_seed(heads);
  heads->callback([&] {
    if (heads->count("--split") == 0) o.split = "training";
    rc = run_analyze_heads(o, argv_line);
  });

  CLI::App* scan = app.add_subcommand(
      "efficiency-scan",
      "parameter-efficiency region scan of local heads vs one global head");
  scan->add_option("--n", o.scan_heads, "number of local heads");
  scan->add_option("--d-ratio", o.d_ratio,
                   "embedding dimension as a fraction of HW/n");
  scan->add_option("--height", o.scan_height, "feature-map height");
  scan->add_option("--width", o.scan_width, "feature-map width");
  scan->add_option("--out", o.out, "output directory (scan csv)");
  scan->callback([&] { rc = run_efficiency_scan(o, argv_line); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const lhc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
