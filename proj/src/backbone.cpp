#include "lhc/backbone.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "lhc/config.hpp"

namespace lhc {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

// How one manifest entry gets its initial value. Only glorot entries consume
// generator draws, so replaying the walk with the same seed re-derives any
// single tensor no matter which entries a caller keeps.
struct InitRule {
  enum class Kind { glorot, zeros, ones, constant } kind = Kind::zeros;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  double value = 0.0;

  static InitRule glorot(std::size_t fi, std::size_t fo) {
    return {Kind::glorot, fi, fo, 0.0};
  }
  static InitRule zeros() { return {Kind::zeros, 0, 0, 0.0}; }
  static InitRule ones() { return {Kind::ones, 0, 0, 0.0}; }
  static InitRule constant(double v) { return {Kind::constant, 0, 0, v}; }
};

using ParamVisitor = std::function<void(const ParamInfo&, const InitRule&)>;

// Canonical parameter walk, in network order: stem, then per stage its
// residual blocks, with attention insertions spliced in after the stage
// (position 0 = after the stem pool), then the dense head. Every consumer
// (manifest, census, init, re-init) iterates exactly this sequence.
void walk_params(const BackboneSpec& spec, const ParamVisitor& visit) {
  const auto sz = [](int v) { return static_cast<std::size_t>(v); };

  const auto conv = [&](const std::string& prefix, int k, int cin, int f) {
    const std::size_t kk = sz(k) * sz(k);
    visit({prefix + ".kernel", {sz(k), sz(k), sz(cin), sz(f)},
           ParamKind::backbone},
          InitRule::glorot(kk * sz(cin), kk * sz(f)));
    if (spec.conv_bias) {
      visit({prefix + ".bias", {sz(f)}, ParamKind::backbone},
            InitRule::zeros());
    }
  };
  const auto bn = [&](const std::string& prefix, int f) {
    if (!spec.batch_norm) return;
    visit({prefix + ".gamma", {sz(f)}, ParamKind::backbone}, InitRule::ones());
    visit({prefix + ".beta", {sz(f)}, ParamKind::backbone}, InitRule::zeros());
  };
  const auto insertions_at = [&](int position) {
    for (std::size_t j = 0; j < spec.insertions.size(); ++j) {
      const Insertion& ins = spec.insertions[j];
      if (ins.position != position) continue;
      const std::string base = "block" + std::to_string(j + 1);
      const LhcConfig& c = ins.cfg;
      const std::size_t hs = c.head_size();
      const std::size_t d = sz(c.embed_dim);
      const std::size_t ch = sz(c.channels);
      const std::size_t s = sz(c.value_kernel);
      for (int h = 0; h < c.heads; ++h) {
        const std::string head = base + ".head" + std::to_string(h + 1);
        visit({head + ".w1", {hs, d}, ParamKind::attention},
              InitRule::glorot(hs, d));
        visit({head + ".b1", {d}, ParamKind::attention}, InitRule::zeros());
      }
      visit({base + ".w2", {ch, ch}, ParamKind::attention},
            InitRule::glorot(ch, ch));
      visit({base + ".b2", {ch}, ParamKind::attention}, InitRule::zeros());
      visit({base + ".value.kernel", {s, s, ch, ch}, ParamKind::attention},
            InitRule::glorot(s * s * ch, s * s * ch));
      visit({base + ".value.bias", {ch}, ParamKind::attention},
            InitRule::zeros());
      if (spec.gate_mode == GateMode::gated) {
        visit({base + ".gate.theta", {}, ParamKind::gate},
              InitRule::constant(ins.theta_init));
      }
    }
  };

  conv("stem.conv", spec.stem_kernel, spec.input_channels, spec.stem_filters);
  bn("stem.bn", spec.stem_filters);
  insertions_at(0);

  int cin = spec.stem_filters;
  for (std::size_t si = 0; si < spec.stages.size(); ++si) {
    const StageSpec& st = spec.stages[si];
    for (int b = 0; b < st.blocks; ++b) {
      const std::string base = "stage" + std::to_string(si + 1) + ".block" +
                               std::to_string(b + 1);
      const int in_ch = (b == 0) ? cin : st.filters;
      const bool project = (b == 0) && (in_ch != st.filters || st.stride != 1);
      conv(base + ".conv1", 3, in_ch, st.filters);
      bn(base + ".bn1", st.filters);
      conv(base + ".conv2", 3, st.filters, st.filters);
      bn(base + ".bn2", st.filters);
      if (project) {
        conv(base + ".proj", 1, in_ch, st.filters);
        bn(base + ".bn3", st.filters);
      }
    }
    cin = st.filters;
    insertions_at(static_cast<int>(si) + 1);
  }

  const std::array<int, 3> fm = spec.stage_output_shapes().back();
  const std::size_t flat = sz(fm[0]) * sz(fm[1]) * sz(fm[2]);
  const std::size_t hidden = sz(spec.hidden_units);
  const std::size_t classes = sz(spec.num_classes);
  visit({"head.dense1.weight", {flat, hidden}, ParamKind::backbone},
        InitRule::glorot(flat, hidden));
  visit({"head.dense1.bias", {hidden}, ParamKind::backbone},
        InitRule::zeros());
  visit({"head.dense2.weight", {hidden, classes}, ParamKind::backbone},
        InitRule::glorot(hidden, classes));
  visit({"head.dense2.bias", {classes}, ParamKind::backbone},
        InitRule::zeros());
}

Tensor materialize(const ParamInfo& info, const InitRule& rule,
                   std::mt19937_64& rng) {
  switch (rule.kind) {
    case InitRule::Kind::glorot:
      return glorot_uniform(info.shape, rule.fan_in, rule.fan_out, rng);
    case InitRule::Kind::ones:
      return Tensor::full(info.shape, 1.0);
    case InitRule::Kind::constant:
      return Tensor::full(info.shape, rule.value);
    case InitRule::Kind::zeros:
    default:
      return Tensor(info.shape);
  }
}

}  // namespace

std::size_t ParamInfo::size() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::vector<std::array<int, 3>> BackboneSpec::stage_output_shapes() const {
  int h = ceil_div(input_height, stem_stride);
  int w = ceil_div(input_width, stem_stride);
  h = ceil_div(h, stem_pool);
  w = ceil_div(w, stem_pool);

  std::vector<std::array<int, 3>> out;
  out.push_back({h, w, stem_filters});
  for (const StageSpec& st : stages) {
    h = ceil_div(h, st.stride);
    w = ceil_div(w, st.stride);
    out.push_back({h, w, st.filters});
  }
  return out;
}

void BackboneSpec::validate() const {
  if (input_height < 1 || input_width < 1 || input_channels < 1) {
    throw ConfigError("input dims must be positive, got " +
                      std::to_string(input_height) + "x" +
                      std::to_string(input_width) + "x" +
                      std::to_string(input_channels));
  }
  if (stem_filters < 1) throw ConfigError("stem_filters must be >= 1");
  if (stem_kernel < 1 || stem_kernel % 2 == 0) {
    throw ConfigError("stem_kernel must be odd and >= 1, got " +
                      std::to_string(stem_kernel));
  }
  if (stem_stride < 1 || stem_pool < 1) {
    throw ConfigError("stem stride/pool must be >= 1");
  }
  if (stages.empty()) throw ConfigError("at least one stage is required");
  for (const StageSpec& st : stages) {
    if (st.filters < 1 || st.blocks < 1 || st.stride < 1) {
      throw ConfigError("stage needs positive filters/blocks/stride, got " +
                        std::to_string(st.filters) + "/" +
                        std::to_string(st.blocks) + "/" +
                        std::to_string(st.stride));
    }
  }
  if (hidden_units < 1) throw ConfigError("hidden_units must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");

  const std::vector<std::array<int, 3>> shapes = stage_output_shapes();
  int prev_position = -1;
  for (const Insertion& ins : insertions) {
    if (ins.position < 0 ||
        ins.position >= static_cast<int>(shapes.size())) {
      throw ConfigError("insertion position " + std::to_string(ins.position) +
                        " outside [0, " + std::to_string(shapes.size() - 1) +
                        "]");
    }
    if (ins.position <= prev_position) {
      throw ConfigError(
          "insertion positions must be strictly increasing; position " +
          std::to_string(ins.position) + " repeats or goes backwards");
    }
    prev_position = ins.position;
    ins.cfg.validate();
    const std::array<int, 3>& fm = shapes[static_cast<std::size_t>(
        ins.position)];
    if (ins.cfg.height != fm[0] || ins.cfg.width != fm[1] ||
        ins.cfg.channels != fm[2]) {
      throw ConfigError(
          "insertion at position " + std::to_string(ins.position) +
          " configured for " + std::to_string(ins.cfg.height) + "x" +
          std::to_string(ins.cfg.width) + "x" +
          std::to_string(ins.cfg.channels) + " but the feature map there is " +
          std::to_string(fm[0]) + "x" + std::to_string(fm[1]) + "x" +
          std::to_string(fm[2]));
    }
    if (!std::isfinite(ins.theta_init)) {
      throw ConfigError("gate angle must be finite");
    }
  }
}

bool BackboneSpec::trainable() const {
  if (batch_norm || stem_stride != 1 || stem_pool != 1) return false;
  for (const StageSpec& st : stages)
    if (st.stride != 1) return false;
  return true;
}

BackboneSpec build_full_spec() {
  const auto cfg = [](int heads, int embed, int h, int w, int c) {
    LhcConfig out;
    out.heads = heads;
    out.embed_dim = embed;
    out.pool_size = 3;
    out.value_kernel = 3;
    out.scale_offset = 1.0;
    out.height = h;
    out.width = w;
    out.channels = c;
    return out;
  };

  BackboneSpec s;
  s.input_height = 224;
  s.input_width = 224;
  s.input_channels = 3;
  s.stem_filters = 64;
  s.stem_kernel = 7;
  s.stem_stride = 2;
  s.stem_pool = 2;
  s.stages = {{64, 3, 1}, {128, 4, 2}, {256, 6, 2}, {512, 3, 2}};
  s.batch_norm = true;
  s.conv_bias = false;
  s.hidden_units = 256;
  s.num_classes = 7;
  s.gate_mode = GateMode::plain;
  s.insertions = {
      {0, cfg(8, 196, 56, 56, 64), 0.0},
      {1, cfg(8, 196, 56, 56, 64), 0.0},
      {2, cfg(7, 56, 28, 28, 128), 0.0},
      {3, cfg(7, 14, 14, 14, 256), -1.0},
      {4, cfg(1, 25, 7, 7, 512), -0.5},
  };
  s.seed = 42;
  return s;
}

BackboneSpec build_tiny_spec() {
  LhcConfig cfg;
  cfg.heads = 2;
  cfg.embed_dim = 4;
  cfg.pool_size = 3;
  cfg.value_kernel = 3;
  cfg.scale_offset = 1.0;
  cfg.height = 8;
  cfg.width = 8;
  cfg.channels = 8;

  BackboneSpec s;
  s.input_height = 8;
  s.input_width = 8;
  s.input_channels = 1;
  s.stem_filters = 8;
  s.stem_kernel = 3;
  s.stem_stride = 1;
  s.stem_pool = 1;
  s.stages = {{8, 1, 1}, {16, 1, 1}};
  s.batch_norm = false;
  s.conv_bias = true;
  s.hidden_units = 32;
  s.num_classes = 7;
  s.gate_mode = GateMode::plain;
  s.insertions = {{1, cfg, 0.0}};
  s.seed = 1234;
  return s;
}

std::vector<ParamInfo> param_manifest(const BackboneSpec& spec) {
  spec.validate();
  std::vector<ParamInfo> out;
  walk_params(spec, [&](const ParamInfo& info, const InitRule&) {
    out.push_back(info);
  });
  return out;
}

ParamCensus count_params(const BackboneSpec& spec) {
  spec.validate();
  ParamCensus census;
  walk_params(spec, [&](const ParamInfo& info, const InitRule&) {
    const std::size_t n = info.size();
    census.total += n;
    switch (info.kind) {
      case ParamKind::backbone: census.backbone_only += n; break;
      case ParamKind::attention: census.attention_only += n; break;
      case ParamKind::gate: census.gate_only += n; break;
    }
  });
  census.attention_share = static_cast<double>(census.attention_only) /
                           static_cast<double>(census.total);
  return census;
}

Var gated_residual(Var x, Var branch, Var theta) {
  if (!theta.value().shape().empty()) {
    throw ShapeError("gated_residual: gate must be a scalar, got " +
                     theta.value().shape_str());
  }
  return ops::add(x, ops::scalar_scale(branch, ops::tanh(theta)));
}

Model Model::init(const BackboneSpec& spec) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  std::mt19937_64 rng(spec.seed);
  walk_params(spec, [&](const ParamInfo& info, const InitRule& rule) {
    m.index_[info.name] = m.manifest_.size();
    m.manifest_.push_back(info);
    m.values_.push_back(materialize(info, rule, rng));
  });
  m.enabled_.assign(spec.insertions.size(), true);
  return m;
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

bool Model::has_param(const std::string& name) const {
  return index_.count(name) > 0;
}

const Tensor& Model::p(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("unknown parameter '" + name + "'");
  }
  return values_[it->second];
}

const Tensor& Model::param(const std::string& name) const { return p(name); }

void Model::set_param(const std::string& name, Tensor value) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("unknown parameter '" + name + "'");
  }
  if (!values_[it->second].same_shape(value)) {
    throw ShapeError("parameter '" + name + "' has shape " +
                     values_[it->second].shape_str() + ", refusing " +
                     value.shape_str());
  }
  values_[it->second] = std::move(value);
}

std::vector<Var> Model::register_params(Tape& tape) const {
  std::vector<Var> out;
  out.reserve(values_.size());
  for (const Tensor& t : values_) out.push_back(tape.leaf(t));
  return out;
}

void Model::check_block_index(int block_index) const {
  if (block_index < 0 || block_index >= num_blocks()) {
    throw ValueError("block index " + std::to_string(block_index) +
                     " outside [0, " + std::to_string(num_blocks() - 1) + "]");
  }
}

bool Model::block_enabled(int block_index) const {
  check_block_index(block_index);
  return enabled_[static_cast<std::size_t>(block_index)];
}

Model Model::with_block_enabled(int block_index, bool enabled) const {
  check_block_index(block_index);
  Model copy = *this;
  copy.enabled_[static_cast<std::size_t>(block_index)] = enabled;
  return copy;
}

Model Model::with_block_reinitialized(int block_index,
                                      std::uint64_t seed) const {
  check_block_index(block_index);
  Model copy = *this;
  const std::string prefix = "block" + std::to_string(block_index + 1) + ".";
  std::mt19937_64 rng(seed);
  walk_params(spec_, [&](const ParamInfo& info, const InitRule& rule) {
    Tensor fresh = materialize(info, rule, rng);
    if (info.name.rfind(prefix, 0) == 0) {
      copy.values_[copy.index_.at(info.name)] = std::move(fresh);
    }
  });
  return copy;
}

LhcWeights Model::block_weights(int block_index) const {
  check_block_index(block_index);
  const Insertion& ins =
      spec_.insertions[static_cast<std::size_t>(block_index)];
  const std::string base = "block" + std::to_string(block_index + 1);
  LhcWeights w;
  for (int h = 0; h < ins.cfg.heads; ++h) {
    const std::string head = base + ".head" + std::to_string(h + 1);
    w.embed_weight.push_back(p(head + ".w1"));
    w.embed_bias.push_back(p(head + ".b1"));
  }
  w.scale_weight = p(base + ".w2");
  w.scale_bias = p(base + ".b2");
  w.value_kernel = p(base + ".value.kernel");
  w.value_bias = p(base + ".value.bias");
  return w;
}

namespace {

// Forward pass of one image, shared by training, inference and head capture.
struct ForwardContext {
  const BackboneSpec& spec;
  const std::vector<ParamInfo>& manifest;
  const std::map<std::string, std::size_t>& index;
  const std::vector<Var>& params;
  const std::vector<bool>& enabled;
  Tape& tape;
  int capture_block = -1;
  std::vector<Tensor>* captured = nullptr;

  Var P(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) {
      throw ConfigError("forward pass needs parameter '" + name + "'");
    }
    return params[it->second];
  }

  Var conv(Var x, const std::string& prefix, int filters) const {
    Var kernel = P(prefix + ".kernel");
    Var bias = spec.conv_bias
                   ? P(prefix + ".bias")
                   : tape.leaf(Tensor({static_cast<std::size_t>(filters)}));
    return ops::conv2d_same(x, kernel, bias);
  }

  void apply_insertions(Var& x, int position) const {
    for (std::size_t j = 0; j < spec.insertions.size(); ++j) {
      const Insertion& ins = spec.insertions[j];
      if (ins.position != position) continue;
      const std::string base = "block" + std::to_string(j + 1);
      const bool wanted = static_cast<int>(j) == capture_block;
      if (!enabled[j] && !wanted) continue;

      LhcVars vars;
      for (int h = 0; h < ins.cfg.heads; ++h) {
        const std::string head = base + ".head" + std::to_string(h + 1);
        vars.embed_weight.push_back(P(head + ".w1"));
        vars.embed_bias.push_back(P(head + ".b1"));
      }
      vars.scale_weight = P(base + ".w2");
      vars.scale_bias = P(base + ".b2");
      vars.value_kernel = P(base + ".value.kernel");
      vars.value_bias = P(base + ".value.bias");

      std::vector<Var> heads = lhc_head_outputs(x, ins.cfg, vars);
      if (wanted && captured != nullptr) {
        captured->clear();
        for (const Var& h : heads) captured->push_back(h.value());
      }
      if (!enabled[j]) continue;

      Var merged = ops::merge_heads(heads, ins.cfg.height, ins.cfg.width);
      if (spec.gate_mode == GateMode::gated) {
        x = gated_residual(x, merged, P(base + ".gate.theta"));
      } else {
        x = ops::add(x, merged);
      }
    }
  }

  Var run(const Tensor& image) const {
    if (image.rank() != 3 ||
        static_cast<int>(image.dim(0)) != spec.input_height ||
        static_cast<int>(image.dim(1)) != spec.input_width ||
        static_cast<int>(image.dim(2)) != spec.input_channels) {
      throw ShapeError("forward expects [" +
                       std::to_string(spec.input_height) + "," +
                       std::to_string(spec.input_width) + "," +
                       std::to_string(spec.input_channels) + "] images, got " +
                       image.shape_str());
    }

    Var x = ops::relu(conv(tape.leaf(image), "stem.conv", spec.stem_filters));
    apply_insertions(x, 0);

    int cin = spec.stem_filters;
    for (std::size_t si = 0; si < spec.stages.size(); ++si) {
      const StageSpec& st = spec.stages[si];
      for (int b = 0; b < st.blocks; ++b) {
        const std::string base = "stage" + std::to_string(si + 1) + ".block" +
                                 std::to_string(b + 1);
        const int in_ch = (b == 0) ? cin : st.filters;
        Var h = ops::relu(conv(x, base + ".conv1", st.filters));
        h = conv(h, base + ".conv2", st.filters);
        Var shortcut =
            (b == 0 && in_ch != st.filters) ? conv(x, base + ".proj",
                                                   st.filters)
                                            : x;
        x = ops::relu(ops::add(h, shortcut));
      }
      cin = st.filters;
      apply_insertions(x, static_cast<int>(si) + 1);
    }

    const std::array<int, 3> fm = spec.stage_output_shapes().back();
    const std::size_t flat = static_cast<std::size_t>(fm[0]) *
                             static_cast<std::size_t>(fm[1]) *
                             static_cast<std::size_t>(fm[2]);
    Var row = ops::reshape(x, {1, flat});
    row = ops::relu(ops::add_row_bias(ops::matmul(row, P("head.dense1.weight")),
                                      P("head.dense1.bias")));
    row = ops::add_row_bias(ops::matmul(row, P("head.dense2.weight")),
                            P("head.dense2.bias"));
    return ops::reshape(row, {static_cast<std::size_t>(spec.num_classes)});
  }
};

}  // namespace

Var Model::forward_batch(Tape& tape, std::span<const Tensor> images,
                         const std::vector<Var>& params) const {
  if (!spec_.trainable()) {
    throw ConfigError(
        "this configuration uses strides/batch norm and is census-only; "
        "build a stride-1 spec to run it");
  }
  if (params.size() != manifest_.size()) {
    throw ConfigError("forward_batch got " + std::to_string(params.size()) +
                      " parameters for a manifest of " +
                      std::to_string(manifest_.size()));
  }
  if (images.empty()) throw ValueError("forward_batch needs >= 1 image");

  ForwardContext ctx{spec_, manifest_, index_, params, enabled_, tape};
  std::vector<Var> rows;
  rows.reserve(images.size());
  for (const Tensor& image : images) rows.push_back(ctx.run(image));
  return ops::stack_rows(rows);
}

Tensor Model::logits_batch(std::span<const Tensor> images) const {
  Tape tape;
  std::vector<Var> params = register_params(tape);
  return forward_batch(tape, images, params).value();
}

Tensor Model::logits(const Tensor& image) const {
  Tensor batch = logits_batch(std::span<const Tensor>(&image, 1));
  return batch.reshaped({batch.dim(1)});
}

namespace {

std::string fmt_spec_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> ws_tokens(const std::string& value) {
  std::istringstream in(value);
  std::vector<std::string> tokens;
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

long long spec_int(const std::string& key, const std::string& tok) {
  errno = 0;
  char* end = nullptr;
  long long v = std::strtoll(tok.c_str(), &end, 10);
  if (end == tok.c_str() || *end != '\0' || errno == ERANGE) {
    throw ParseError("spec: bad integer '" + tok + "' in '" + key + "' line");
  }
  return v;
}

double spec_double(const std::string& key, const std::string& tok) {
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw ParseError("spec: bad number '" + tok + "' in '" + key + "' line");
  }
  return v;
}

std::vector<std::string> spec_fields(const std::string& key,
                                     const std::string& value,
                                     std::size_t want) {
  std::vector<std::string> tokens = ws_tokens(value);
  if (tokens.size() != want) {
    throw ParseError("spec: '" + key + "' needs " + std::to_string(want) +
                     " fields, got " + std::to_string(tokens.size()));
  }
  return tokens;
}

}  // namespace

std::string spec_to_text(const BackboneSpec& spec) {
  KvFile kv;
  kv.add("schema", "backbone-spec/1");
  kv.add("input", std::to_string(spec.input_height) + " " +
                      std::to_string(spec.input_width) + " " +
                      std::to_string(spec.input_channels));
  kv.add("stem", std::to_string(spec.stem_filters) + " " +
                     std::to_string(spec.stem_kernel) + " " +
                     std::to_string(spec.stem_stride) + " " +
                     std::to_string(spec.stem_pool));
  for (const StageSpec& stage : spec.stages) {
    kv.add("stage", std::to_string(stage.filters) + " " +
                        std::to_string(stage.blocks) + " " +
                        std::to_string(stage.stride));
  }
  kv.add("batch_norm", spec.batch_norm ? "1" : "0");
  kv.add("conv_bias", spec.conv_bias ? "1" : "0");
  kv.add("hidden", std::to_string(spec.hidden_units));
  kv.add("classes", std::to_string(spec.num_classes));
  kv.add("gate_mode", spec.gate_mode == GateMode::gated ? "gated" : "plain");
  for (const Insertion& ins : spec.insertions) {
    kv.add("insertion",
           std::to_string(ins.position) + " " + std::to_string(ins.cfg.heads) +
               " " + std::to_string(ins.cfg.embed_dim) + " " +
               std::to_string(ins.cfg.pool_size) + " " +
               std::to_string(ins.cfg.value_kernel) + " " +
               fmt_spec_double(ins.cfg.scale_offset) + " " +
               fmt_spec_double(ins.theta_init));
  }
  kv.add("seed", std::to_string(spec.seed));
  return kv.serialize();
}

BackboneSpec spec_from_text(const std::string& text) {
  KvFile kv = KvFile::parse_string(text);
  if (kv.get_or("schema", "") != "backbone-spec/1") {
    throw ConfigError("spec: expected 'schema = backbone-spec/1'");
  }

  BackboneSpec spec;
  {
    std::vector<std::string> f = spec_fields("input", kv.get("input"), 3);
    spec.input_height = static_cast<int>(spec_int("input", f[0]));
    spec.input_width = static_cast<int>(spec_int("input", f[1]));
    spec.input_channels = static_cast<int>(spec_int("input", f[2]));
  }
  {
    std::vector<std::string> f = spec_fields("stem", kv.get("stem"), 4);
    spec.stem_filters = static_cast<int>(spec_int("stem", f[0]));
    spec.stem_kernel = static_cast<int>(spec_int("stem", f[1]));
    spec.stem_stride = static_cast<int>(spec_int("stem", f[2]));
    spec.stem_pool = static_cast<int>(spec_int("stem", f[3]));
  }
  for (const std::string& line : kv.all("stage")) {
    std::vector<std::string> f = spec_fields("stage", line, 3);
    StageSpec stage;
    stage.filters = static_cast<int>(spec_int("stage", f[0]));
    stage.blocks = static_cast<int>(spec_int("stage", f[1]));
    stage.stride = static_cast<int>(spec_int("stage", f[2]));
    spec.stages.push_back(stage);
  }
  if (kv.has("batch_norm")) spec.batch_norm = kv.get_bool("batch_norm");
  if (kv.has("conv_bias")) spec.conv_bias = kv.get_bool("conv_bias");
  spec.hidden_units = static_cast<int>(kv.get_int("hidden"));
  if (kv.has("classes")) {
    spec.num_classes = static_cast<int>(kv.get_int("classes"));
  }
  {
    const std::string mode = kv.get_or("gate_mode", "plain");
    if (mode == "plain") {
      spec.gate_mode = GateMode::plain;
    } else if (mode == "gated") {
      spec.gate_mode = GateMode::gated;
    } else {
      throw ConfigError("spec: gate_mode must be plain or gated, got '" +
                        mode + "'");
    }
  }
  if (kv.has("seed")) {
    const std::string tok = kv.get("seed");
    errno = 0;
    char* end = nullptr;
    unsigned long long v = std::strtoull(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0' || errno == ERANGE ||
        tok.front() == '-') {
      throw ParseError("spec: bad integer '" + tok + "' in 'seed' line");
    }
    spec.seed = v;
  }

  // Validate the trunk before deriving feature-map shapes so a degenerate
  // stride can't poison the shape walk below.
  spec.validate();

  const std::vector<std::array<int, 3>> shapes = spec.stage_output_shapes();
  for (const std::string& line : kv.all("insertion")) {
    std::vector<std::string> f = spec_fields("insertion", line, 7);
    Insertion ins;
    ins.position = static_cast<int>(spec_int("insertion", f[0]));
    if (ins.position < 0 ||
        ins.position >= static_cast<int>(shapes.size())) {
      throw ConfigError("spec: insertion position " +
                        std::to_string(ins.position) + " outside 0.." +
                        std::to_string(shapes.size() - 1));
    }
    ins.cfg.heads = static_cast<int>(spec_int("insertion", f[1]));
    ins.cfg.embed_dim = static_cast<int>(spec_int("insertion", f[2]));
    ins.cfg.pool_size = static_cast<int>(spec_int("insertion", f[3]));
    ins.cfg.value_kernel = static_cast<int>(spec_int("insertion", f[4]));
    ins.cfg.scale_offset = spec_double("insertion", f[5]);
    ins.theta_init = spec_double("insertion", f[6]);
    ins.cfg.height = shapes[static_cast<std::size_t>(ins.position)][0];
    ins.cfg.width = shapes[static_cast<std::size_t>(ins.position)][1];
    ins.cfg.channels = shapes[static_cast<std::size_t>(ins.position)][2];
    spec.insertions.push_back(ins);
  }

  spec.validate();
  return spec;
}

std::vector<Tensor> Model::head_outputs(const Tensor& image,
                                        int block_index) const {
  check_block_index(block_index);
  if (!spec_.trainable()) {
    throw ConfigError("head capture needs a runnable (stride-1) spec");
  }
  Tape tape;
  std::vector<Var> params = register_params(tape);
  std::vector<Tensor> captured;
  ForwardContext ctx{spec_,   manifest_, index_, params,
                     enabled_, tape,      block_index, &captured};
  (void)ctx.run(image);
  return captured;
}

}  // namespace lhc
