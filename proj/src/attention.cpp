#include "lhc/attention.hpp"

#include <cmath>
#include <string>

namespace lhc {

namespace {

void require_map_shape(const char* op, const Tensor& x, const LhcConfig& cfg) {
  if (x.rank() != 3 || static_cast<int>(x.dim(0)) != cfg.height ||
      static_cast<int>(x.dim(1)) != cfg.width ||
      static_cast<int>(x.dim(2)) != cfg.channels) {
    throw ShapeError(std::string(op) + ": input " + x.shape_str() +
                     " does not match configured map [" +
                     std::to_string(cfg.height) + "," +
                     std::to_string(cfg.width) + "," +
                     std::to_string(cfg.channels) + "]");
  }
}

void require_odd(const char* what, int v) {
  if (v < 1 || v % 2 == 0) {
    throw ConfigError(std::string(what) + " must be odd and >= 1, got " +
                      std::to_string(v));
  }
}

}  // namespace

std::size_t LhcConfig::head_size() const {
  return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) /
         static_cast<std::size_t>(heads);
}

void LhcConfig::validate() const {
  if (height < 1 || width < 1 || channels < 1) {
    throw ConfigError("map dimensions must be positive, got " +
                      std::to_string(height) + "x" + std::to_string(width) +
                      "x" + std::to_string(channels));
  }
  if (heads < 1) throw ConfigError("head count must be >= 1");
  const std::size_t hw =
      static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  if (hw % static_cast<std::size_t>(heads) != 0) {
    throw ConfigError("spatial size " + std::to_string(hw) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  require_odd("pool_size", pool_size);
  require_odd("value_kernel", value_kernel);
  if (scale_offset < 0.0) {
    throw ConfigError("scale_offset must be nonnegative, got " +
                      std::to_string(scale_offset));
  }
}

std::size_t lhc_param_count(const LhcConfig& cfg) {
  cfg.validate();
  const std::size_t n = static_cast<std::size_t>(cfg.heads);
  const std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t c = static_cast<std::size_t>(cfg.channels);
  const std::size_t s = static_cast<std::size_t>(cfg.value_kernel);
  return n * (cfg.head_size() * d + d) + (c * c + c) + (s * s * c * c + c);
}

LhcWeights LhcWeights::init(const LhcConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t hs = cfg.head_size();
  const std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t c = static_cast<std::size_t>(cfg.channels);
  const std::size_t s = static_cast<std::size_t>(cfg.value_kernel);

  LhcWeights w;
  for (int h = 0; h < cfg.heads; ++h) {
    w.embed_weight.push_back(glorot_uniform({hs, d}, hs, d, rng));
    w.embed_bias.push_back(Tensor({d}));
  }
  w.scale_weight = glorot_uniform({c, c}, c, c, rng);
  w.scale_bias = Tensor({c});
  w.value_kernel = glorot_uniform({s, s, c, c}, s * s * c, s * s * c, rng);
  w.value_bias = Tensor({c});
  return w;
}

std::size_t LhcWeights::param_count() const {
  std::size_t total = scale_weight.size() + scale_bias.size() +
                      value_kernel.size() + value_bias.size();
  for (const Tensor& t : embed_weight) total += t.size();
  for (const Tensor& t : embed_bias) total += t.size();
  return total;
}

LhcVars register_lhc_weights(Tape& tape, const LhcWeights& w) {
  LhcVars v;
  for (std::size_t h = 0; h < w.embed_weight.size(); ++h) {
    v.embed_weight.push_back(tape.leaf(w.embed_weight[h]));
    v.embed_bias.push_back(tape.leaf(w.embed_bias[h]));
  }
  v.scale_weight = tape.leaf(w.scale_weight);
  v.scale_bias = tape.leaf(w.scale_bias);
  v.value_kernel = tape.leaf(w.value_kernel);
  v.value_bias = tape.leaf(w.value_bias);
  return v;
}

Qkv compute_qkv(Var x, const LhcConfig& cfg, const LhcVars& w) {
  cfg.validate();
  require_map_shape("compute_qkv", x.value(), cfg);
  Qkv out;
  out.q = ops::avg_pool2d_same(x, cfg.pool_size);
  out.k = ops::max_pool2d_same(x, cfg.pool_size);
  // The value path always smooths the convolution with a fixed 3-window.
  out.v = ops::avg_pool2d_same(
      ops::conv2d_same(x, w.value_kernel, w.value_bias), 3);
  return out;
}

std::vector<Var> split_heads(Var t, int heads) {
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h)
    out.push_back(ops::split_head(t, heads, h));
  return out;
}

std::pair<Var, Var> embed_qk(Var q_h, Var k_h, Var weight, Var bias) {
  Var qe = ops::add_row_bias(ops::matmul(q_h, weight), bias);
  Var ke = ops::add_row_bias(ops::matmul(k_h, weight), bias);
  return {qe, ke};
}

Var attention_scores(Var q_emb, Var k_emb) {
  if (!q_emb.value().same_shape(k_emb.value())) {
    throw ShapeError("attention_scores: query embedding " +
                     q_emb.value().shape_str() + " vs key embedding " +
                     k_emb.value().shape_str());
  }
  return ops::matmul(q_emb, ops::transpose(k_emb));
}

DynamicScaling dynamic_scaling(Var scores, Var scale_weight, Var scale_bias,
                               int embed_dim, double scale_offset) {
  if (embed_dim < 2) {
    throw ConfigError(
        "dynamic_scaling needs embed_dim >= 2, got " +
        std::to_string(embed_dim) +
        " (a unit embedding makes the divisor identically 1)");
  }
  const Tensor& s = scores.value();
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) {
    throw ShapeError("dynamic_scaling: scores must be square, got " +
                     s.shape_str());
  }
  const std::size_t c = s.dim(0);

  DynamicScaling out;
  // T = sigmoid(row_means . W + b), one gate per score row.
  Var row_means = ops::reshape(ops::mean_rows(scores), {1, c});
  Var lin = ops::add_row_bias(ops::matmul(row_means, scale_weight), scale_bias);
  out.gate = ops::reshape(ops::sigmoid(lin), {c});

  // N_ij = S_ij / d^(g + T_i), evaluated in log space so a large base cannot
  // overflow: S_ij * exp(-(g + T_i) * ln d).
  const double ln_d = std::log(static_cast<double>(embed_dim));
  Var factor = ops::exp(ops::affine(out.gate, -ln_d, -scale_offset * ln_d));
  out.scaled = ops::row_scale(scores, factor);
  return out;
}

Var head_attention(Var scaled_scores, Var v_h) {
  const Tensor& n = scaled_scores.value();
  const Tensor& v = v_h.value();
  if (n.rank() != 2 || v.rank() != 2 || n.dim(1) != v.dim(0)) {
    throw ShapeError("head_attention: scores " + n.shape_str() +
                     " incompatible with values " + v.shape_str());
  }
  return ops::matmul(ops::softmax_rows(scaled_scores), v_h);
}

std::vector<Var> lhc_head_outputs(Var x, const LhcConfig& cfg,
                                  const LhcVars& w) {
  cfg.validate();
  require_map_shape("lhc_forward", x.value(), cfg);
  if (w.embed_weight.size() != static_cast<std::size_t>(cfg.heads)) {
    throw ConfigError("block has " + std::to_string(w.embed_weight.size()) +
                      " head embeddings for " + std::to_string(cfg.heads) +
                      " configured heads");
  }

  Qkv qkv = compute_qkv(x, cfg, w);
  std::vector<Var> q = split_heads(qkv.q, cfg.heads);
  std::vector<Var> k = split_heads(qkv.k, cfg.heads);
  std::vector<Var> v = split_heads(qkv.v, cfg.heads);

  std::vector<Var> outputs;
  outputs.reserve(q.size());
  for (int h = 0; h < cfg.heads; ++h) {
    auto [qe, ke] = embed_qk(q[h], k[h], w.embed_weight[h], w.embed_bias[h]);
    Var scores = attention_scores(qe, ke);
    DynamicScaling ds = dynamic_scaling(scores, w.scale_weight, w.scale_bias,
                                        cfg.embed_dim, cfg.scale_offset);
    outputs.push_back(head_attention(ds.scaled, v[h]));
  }
  return outputs;
}

Var lhc_forward(Var x, const LhcConfig& cfg, const LhcVars& w) {
  std::vector<Var> heads = lhc_head_outputs(x, cfg, w);
  Var merged = ops::merge_heads(heads, cfg.height, cfg.width);
  return ops::add(x, merged);
}

Tensor lhc_apply(const Tensor& x, const LhcConfig& cfg, const LhcWeights& w) {
  Tape tape;
  LhcVars vars = register_lhc_weights(tape, w);
  return lhc_forward(tape.leaf(x), cfg, vars).value();
}

std::vector<Tensor> lhc_head_outputs(const Tensor& x, const LhcConfig& cfg,
                                     const LhcWeights& w) {
  Tape tape;
  LhcVars vars = register_lhc_weights(tape, w);
  std::vector<Var> heads = lhc_head_outputs(tape.leaf(x), cfg, vars);
  std::vector<Tensor> out;
  out.reserve(heads.size());
  for (const Var& h : heads) out.push_back(h.value());
  return out;
}

}  // namespace lhc
