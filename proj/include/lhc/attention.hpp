#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lhc/ops.hpp"

namespace lhc {

// Hyperparameters of one local multi-head channel-attention block operating
// on a fixed [height, width, channels] feature map. Heads partition the
// flattened spatial axis into contiguous blocks; attention is computed
// between *channels* (scores are [C, C]).
struct LhcConfig {
  int heads = 1;             // number of spatial slices
  int embed_dim = 1;         // width of the shared query/key embedding
  int pool_size = 3;         // odd pooling window on the query/key paths
  int value_kernel = 3;      // odd conv kernel on the value path
  double scale_offset = 1.0; // constant part of the scaling exponent
  int height = 0;
  int width = 0;
  int channels = 0;

  // Spatial positions per head (H*W / heads).
  std::size_t head_size() const;

  // Throws ConfigError on violations: non-positive dims, even windows,
  // heads not dividing H*W, embed_dim < 1.
  void validate() const;
};

// Learnable state of one block. The query/key embedding is shared: the same
// [head_size, embed_dim] matrix and bias embed both the pooled query and the
// pooled key slices of head h.
struct LhcWeights {
  std::vector<Tensor> embed_weight;  // per head, [head_size, embed_dim]
  std::vector<Tensor> embed_bias;    // per head, [embed_dim]
  Tensor scale_weight;               // [C, C], shared across heads
  Tensor scale_bias;                 // [C]
  Tensor value_kernel;               // [s, s, C, C]
  Tensor value_bias;                 // [C]

  // Glorot-uniform matrices/kernel, zero biases, all draws from `seed`.
  static LhcWeights init(const LhcConfig& cfg, std::uint64_t seed);

  std::size_t param_count() const;
};

// Closed form: n*(head_size*d + d) + (C*C + C) + (s*s*C*C + C).
std::size_t lhc_param_count(const LhcConfig& cfg);

// Tape handles for one block's weights (leaf nodes, registration order is
// head-major: w/b per head, then scale, then value conv).
struct LhcVars {
  std::vector<Var> embed_weight;
  std::vector<Var> embed_bias;
  Var scale_weight;
  Var scale_bias;
  Var value_kernel;
  Var value_bias;
};

LhcVars register_lhc_weights(Tape& tape, const LhcWeights& w);

struct Qkv {
  Var q;  // avg pool, window pool_size
  Var k;  // max pool, window pool_size
  Var v;  // avg pool (window 3) of the value convolution
};

Qkv compute_qkv(Var x, const LhcConfig& cfg, const LhcVars& w);

// All heads of a [H,W,C] map: n matrices [C, head_size].
std::vector<Var> split_heads(Var t, int heads);

// Shared linear embedding of both slices: (q_h . w + b, k_h . w + b).
std::pair<Var, Var> embed_qk(Var q_h, Var k_h, Var weight, Var bias);

// S = q_emb . k_emb^T -> [C, C].
Var attention_scores(Var q_emb, Var k_emb);

struct DynamicScaling {
  Var gate;    // T in (0,1)^C, sigmoid of a linear read of the row means
  Var scaled;  // N with N_ij = S_ij / d^(g + T_i)
};

// Row-adaptive score scaling. The divisor is computed in log space
// (S_ij * exp(-(g + T_i) * ln d)) so large embed_dim cannot overflow.
// Requires embed_dim >= 2 (ln 1 = 0 would make the gate inert).
DynamicScaling dynamic_scaling(Var scores, Var scale_weight, Var scale_bias,
                               int embed_dim, double scale_offset);

// A = softmax_rows(N) . v_h -> [C, head_size].
Var head_attention(Var scaled_scores, Var v_h);

// Pre-merge per-head outputs A_h, in head order.
std::vector<Var> lhc_head_outputs(Var x, const LhcConfig& cfg,
                                  const LhcVars& w);

// Full block with residual: y = x + merge(A_1..A_n). Shape-preserving.
Var lhc_forward(Var x, const LhcConfig& cfg, const LhcVars& w);

// Inference conveniences on plain tensors (throwaway internal tape).
Tensor lhc_apply(const Tensor& x, const LhcConfig& cfg, const LhcWeights& w);
std::vector<Tensor> lhc_head_outputs(const Tensor& x, const LhcConfig& cfg,
                                     const LhcWeights& w);

}  // namespace lhc
