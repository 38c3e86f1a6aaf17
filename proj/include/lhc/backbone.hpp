#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lhc/attention.hpp"

namespace lhc {

// One residual stage: `blocks` two-conv residual blocks at `filters`
// channels. `stride` applies to the first block (spatial halving on the
// full-scale network); later blocks are always stride 1.
struct StageSpec {
  int filters = 0;
  int blocks = 0;
  int stride = 1;
};

// One attention block spliced into the backbone. `position` 0 means after
// the stem (post stem-pool), position i >= 1 means after stage i. The gate
// angle is only consulted in gated mode.
struct Insertion {
  int position = 0;
  LhcConfig cfg;
  double theta_init = 0.0;
};

enum class GateMode { plain, gated };

enum class ParamKind { backbone, attention, gate };

// Name, shape and bookkeeping class of one learnable tensor. The manifest
// order is the canonical parameter order everywhere: initialization draws,
// tape registration, checkpoints and gradient application all walk it.
struct ParamInfo {
  std::string name;
  std::vector<std::size_t> shape;
  ParamKind kind = ParamKind::backbone;

  std::size_t size() const;
};

struct ParamCensus {
  std::size_t total = 0;
  std::size_t backbone_only = 0;
  std::size_t attention_only = 0;
  std::size_t gate_only = 0;
  double attention_share = 0.0;  // attention_only / total
};

// Convolutional trunk + attention insertions + flatten/dense head.
//
// Two uses share this type. The full-scale spec (stride-2 stages, batch
// norm) exists for exact parameter accounting and checkpoint naming; it is
// not runnable by forward(). The reduced specs (stride 1, no batch norm)
// are runnable and trainable end to end.
struct BackboneSpec {
  int input_height = 0;
  int input_width = 0;
  int input_channels = 0;

  int stem_filters = 0;
  int stem_kernel = 3;
  int stem_stride = 1;
  int stem_pool = 1;  // stride of the post-stem max pool; 1 = no pool

  std::vector<StageSpec> stages;

  bool batch_norm = false;  // census-only convention: gamma+beta per conv
  bool conv_bias = true;

  int hidden_units = 0;  // flatten -> dense(hidden) -> relu -> dense(classes)
  int num_classes = 7;

  GateMode gate_mode = GateMode::plain;
  std::vector<Insertion> insertions;

  std::uint64_t seed = 0;

  // [H,W,C] after the stem pool (index 0) and after each stage (index i).
  std::vector<std::array<int, 3>> stage_output_shapes() const;

  // Throws ConfigError on bad dims, non-increasing insertion positions, or
  // an insertion whose LhcConfig does not match the feature map it sits on.
  void validate() const;

  // True when every layer is runnable by this library's stride-1 ops.
  bool trainable() const;
};

// The full-scale five-block configuration on a 224x224x3 input:
// stages 64x3 / 128x4 / 256x6 / 512x3, insertions after the stem pool and
// after every stage.
BackboneSpec build_full_spec();

// Desk-scale trainable variant: 8x8x1 input, two small stages, one
// attention insertion.
BackboneSpec build_tiny_spec();

// Plain-text round trip for specs: a key/value file with repeatable `stage`
// and `insertion` lines. Insertion feature-map dims are not stored; they are
// re-derived from the stage layout at the stated position.
std::string spec_to_text(const BackboneSpec& spec);
BackboneSpec spec_from_text(const std::string& text);

// Every learnable tensor of the network, in canonical order.
std::vector<ParamInfo> param_manifest(const BackboneSpec& spec);

// Exact integer census over the manifest.
ParamCensus count_params(const BackboneSpec& spec);

// y = x + tanh(theta) * branch; theta is a rank-0 scalar leaf.
Var gated_residual(Var x, Var branch, Var theta);

// A concrete network: a spec plus one tensor per manifest entry, plus a
// per-insertion enable switch (ablation support). Copies are cheap-ish
// (parameter tensors are value types) and the class is immutable during
// inference: analyses that modify return a new Model.
class Model {
 public:
  // Seeded build: every random draw flows through one generator walking the
  // manifest in order, so a given (spec, seed) pair is reproducible bit for
  // bit and any single block can later be re-derived independently.
  static Model init(const BackboneSpec& spec);

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<ParamInfo>& manifest() const { return manifest_; }

  std::size_t param_count() const;
  bool has_param(const std::string& name) const;
  const Tensor& param(const std::string& name) const;
  void set_param(const std::string& name, Tensor value);  // shape-checked

  // Registers every parameter as a tape leaf, in manifest order.
  std::vector<Var> register_params(Tape& tape) const;

  // Differentiable forward over a batch of [H,W,C] images -> [B, classes].
  // `params` must come from register_params on the same tape.
  Var forward_batch(Tape& tape, std::span<const Tensor> images,
                    const std::vector<Var>& params) const;

  // Inference conveniences (throwaway internal tape).
  Tensor logits(const Tensor& image) const;
  Tensor logits_batch(std::span<const Tensor> images) const;

  // Pre-merge per-head outputs A_h at insertion `block_index` (0-based).
  std::vector<Tensor> head_outputs(const Tensor& image, int block_index) const;

  // The attention weights of one insertion, extracted from the flat store.
  LhcWeights block_weights(int block_index) const;

  int num_blocks() const { return static_cast<int>(spec_.insertions.size()); }
  bool block_enabled(int block_index) const;

  // Copy with insertion `block_index` switched on/off. A disabled block is
  // skipped entirely, so the residual passes x through unchanged.
  Model with_block_enabled(int block_index, bool enabled) const;

  // Copy with one block's parameters (and its gate, if any) re-derived from
  // `seed` as Model::init would have drawn them. seed == spec().seed undoes
  // any training of that block exactly.
  Model with_block_reinitialized(int block_index, std::uint64_t seed) const;

 private:
  Model() = default;

  void check_block_index(int block_index) const;
  const Tensor& p(const std::string& name) const;

  BackboneSpec spec_;
  std::vector<ParamInfo> manifest_;
  std::vector<Tensor> values_;                 // parallel to manifest_
  std::map<std::string, std::size_t> index_;   // name -> manifest position
  std::vector<bool> enabled_;                  // per insertion
};

}  // namespace lhc
