#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lhc/attention.hpp"
#include "lhc/ops.hpp"
#include "reference_ops.hpp"

using lhc::LhcConfig;
using lhc::LhcVars;
using lhc::LhcWeights;
using lhc::Tape;
using lhc::Tensor;
using lhc::Var;
namespace ops = lhc::ops;

namespace {

LhcConfig tiny_cfg() {
  LhcConfig c;
  c.heads = 2;
  c.embed_dim = 2;
  c.pool_size = 3;
  c.value_kernel = 3;
  c.scale_offset = 1.0;
  c.height = 4;
  c.width = 4;
  c.channels = 3;
  return c;
}

bool close(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > tol) return false;
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  LhcConfig c = tiny_cfg();
  CHECK_NOTHROW(c.validate());
  CHECK(c.head_size() == 8);

  LhcConfig bad = c;
  bad.heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), lhc::ConfigError);
  bad = c;
  bad.pool_size = 2;
  CHECK_THROWS_AS(bad.validate(), lhc::ConfigError);
  bad = c;
  bad.value_kernel = 4;
  CHECK_THROWS_AS(bad.validate(), lhc::ConfigError);
  bad = c;
  bad.embed_dim = 0;
  CHECK_THROWS_AS(bad.validate(), lhc::ConfigError);
  bad = c;
  bad.channels = 0;
  CHECK_THROWS_AS(bad.validate(), lhc::ConfigError);
  bad = c;
  bad.scale_offset = -0.5;
  CHECK_THROWS_AS(bad.validate(), lhc::ConfigError);
}

TEST_CASE("parameter count: closed form, census agreement, frozen values") {
  // Tiny config by hand: 2*(8*2 + 2) + (9 + 3) + (9*9 + 3) = 36 + 12 + 84.
  LhcConfig c = tiny_cfg();
  CHECK(lhc::lhc_param_count(c) == 132);
  LhcWeights w = LhcWeights::init(c, 7);
  CHECK(w.param_count() == 132);

  // Full-scale 56x56x64 block with 8 heads, d=196, s=3:
  // 8*(392*196 + 196) + (64*64 + 64) + (9*64*64 + 64) = 657,312.
  LhcConfig big;
  big.heads = 8;
  big.embed_dim = 196;
  big.pool_size = 3;
  big.value_kernel = 3;
  big.scale_offset = 1.0;
  big.height = 56;
  big.width = 56;
  big.channels = 64;
  CHECK(big.head_size() == 392);
  CHECK(lhc::lhc_param_count(big) == 657312);
  LhcWeights bw = LhcWeights::init(big, 3);
  CHECK(bw.param_count() == 657312);
}

TEST_CASE("weight init: seeded, zero biases, fan-bounded matrices") {
  LhcConfig c = tiny_cfg();
  LhcWeights a = LhcWeights::init(c, 123);
  LhcWeights b = LhcWeights::init(c, 123);
  LhcWeights d = LhcWeights::init(c, 124);

  CHECK(a.embed_weight.size() == 2);
  for (int h = 0; h < 2; ++h) {
    CHECK(a.embed_weight[h].shape() == std::vector<std::size_t>{8, 2});
    CHECK(close(a.embed_weight[h], b.embed_weight[h], 0.0));
    for (std::size_t i = 0; i < a.embed_bias[h].size(); ++i)
      CHECK(a.embed_bias[h][i] == 0.0);
  }
  CHECK_FALSE(close(a.embed_weight[0], d.embed_weight[0], 0.0));

  // Glorot limit for [8,2]: sqrt(6/10).
  const double lim = std::sqrt(6.0 / 10.0);
  for (std::size_t i = 0; i < a.embed_weight[0].size(); ++i)
    CHECK(std::abs(a.embed_weight[0][i]) <= lim);
  for (std::size_t i = 0; i < a.scale_bias.size(); ++i)
    CHECK(a.scale_bias[i] == 0.0);
  for (std::size_t i = 0; i < a.value_bias.size(); ++i)
    CHECK(a.value_bias[i] == 0.0);
}

TEST_CASE("compute_qkv: constant map with zero value kernel") {
  LhcConfig c = tiny_cfg();
  LhcWeights w = LhcWeights::init(c, 1);
  // Zero the conv kernel and pin its bias to a known per-channel constant.
  for (double& v : w.value_kernel.data()) v = 0.0;
  w.value_bias = Tensor({3}, {0.25, -1.0, 2.0});

  Tape tape;
  LhcVars vars = lhc::register_lhc_weights(tape, w);
  Var x = tape.leaf(Tensor::full({4, 4, 3}, 1.5));
  lhc::Qkv qkv = lhc::compute_qkv(x, c, vars);

  CHECK(close(qkv.q.value(), Tensor::full({4, 4, 3}, 1.5), 0.0));
  CHECK(close(qkv.k.value(), Tensor::full({4, 4, 3}, 1.5), 0.0));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t ch = 0; ch < 3; ++ch)
        CHECK(qkv.v.value().at(i, j, ch) == w.value_bias[ch]);
}

TEST_CASE("compute_qkv: pool_size 1 with identity value conv") {
  LhcConfig c = tiny_cfg();
  c.pool_size = 1;
  LhcWeights w = LhcWeights::init(c, 1);
  for (double& v : w.value_kernel.data()) v = 0.0;
  for (int ch = 0; ch < 3; ++ch) w.value_kernel.at(1, 1, ch, ch) = 1.0;
  for (double& v : w.value_bias.data()) v = 0.0;

  auto g = refops::rng(33);
  Tensor xin = refops::random_tensor({4, 4, 3}, g);

  Tape tape;
  LhcVars vars = lhc::register_lhc_weights(tape, w);
  Var x = tape.leaf(xin);
  lhc::Qkv qkv = lhc::compute_qkv(x, c, vars);

  CHECK(close(qkv.q.value(), xin, 0.0));
  CHECK(close(qkv.k.value(), xin, 0.0));
  CHECK(close(qkv.v.value(), refops::avg_pool_same(xin, 3), 1e-12));
}

TEST_CASE("split_heads: layout and full-scale shapes") {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 2, 1}, {1, 2, 3, 4}));
  std::vector<Var> heads = lhc::split_heads(x, 2);
  REQUIRE(heads.size() == 2);
  CHECK(close(heads[0].value(), Tensor({1, 2}, {1, 2}), 0.0));
  CHECK(close(heads[1].value(), Tensor({1, 2}, {3, 4}), 0.0));

  auto g = refops::rng(2);
  Var big = tape.leaf(refops::random_tensor({56, 56, 64}, g));
  std::vector<Var> bh = lhc::split_heads(big, 8);
  REQUIRE(bh.size() == 8);
  for (const Var& h : bh)
    CHECK(h.shape() == std::vector<std::size_t>{64, 392});
}

TEST_CASE("embed_qk: shared weights, zero-weight bias rows, shapes") {
  Tape tape;
  auto g = refops::rng(3);
  Tensor qv = refops::random_tensor({3, 8}, g);
  Tensor kv = refops::random_tensor({3, 8}, g);

  // Zero weight: every embedded row is exactly the bias.
  Var zero_w = tape.leaf(Tensor({8, 2}));
  Var bias = tape.leaf(Tensor({2}, {0.5, -2.0}));
  auto [qe, ke] = lhc::embed_qk(tape.leaf(qv), tape.leaf(kv), zero_w, bias);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(qe.value().at(i, 0) == 0.5);
    CHECK(qe.value().at(i, 1) == -2.0);
    CHECK(ke.value().at(i, 0) == 0.5);
  }

  // Identical inputs produce identical embeddings (shared weights).
  Var w = tape.leaf(refops::random_tensor({8, 2}, g));
  auto [qe2, ke2] = lhc::embed_qk(tape.leaf(qv), tape.leaf(qv), w, bias);
  CHECK(close(qe2.value(), ke2.value(), 0.0));

  // Full-scale shape: [64,392] x [392,196] -> [64,196].
  Var qb = tape.leaf(refops::random_tensor({64, 392}, g));
  Var wb = tape.leaf(refops::random_tensor({392, 196}, g));
  auto [qe3, ke3] = lhc::embed_qk(qb, qb, wb,
                                  tape.leaf(Tensor({196})));
  CHECK(qe3.shape() == std::vector<std::size_t>{64, 196});
  CHECK(ke3.shape() == std::vector<std::size_t>{64, 196});
}

TEST_CASE("attention_scores: frozen hand case and identity behaviour") {
  Tape tape;
  // q_emb = I, k_emb = [[2,1],[1,2]] -> S = k_emb^T = [[2,1],[1,2]].
  Var q = tape.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
  Var k = tape.leaf(Tensor({2, 2}, {2, 1, 1, 2}));
  Tensor s = lhc::attention_scores(q, k).value();
  CHECK(close(s, Tensor({2, 2}, {2, 1, 1, 2}), 0.0));

  // Orthogonal rows: S = q.q^T = diag(|q_i|^2) pattern check.
  Var q2 = tape.leaf(Tensor({2, 3}, {1, 0, 0, 0, 2, 0}));
  Tensor s2 = lhc::attention_scores(q2, q2).value();
  CHECK(close(s2, Tensor({2, 2}, {1, 0, 0, 4}), 0.0));
}

TEST_CASE("dynamic_scaling: inert gate halves the exponent range") {
  Tape tape;
  // Zero scale weights: T = sigmoid(0) = 0.5 everywhere; with g=1, d=4 the
  // divisor is 4^{1.5} = 8 exactly.
  auto g = refops::rng(4);
  Tensor sv = refops::random_tensor({3, 3}, g);
  Var s = tape.leaf(sv);
  Var w = tape.leaf(Tensor({3, 3}));
  Var b = tape.leaf(Tensor({3}));
  lhc::DynamicScaling ds = lhc::dynamic_scaling(s, w, b, 4, 1.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(ds.gate.value()[i] == 0.5);
  Tensor expect(sv.shape());
  for (std::size_t i = 0; i < sv.size(); ++i) expect[i] = sv[i] / 8.0;
  CHECK(close(ds.scaled.value(), expect, 1e-15));

  // Zero scores stay zero under any gate.
  Var zs = tape.leaf(Tensor({3, 3}));
  lhc::DynamicScaling dz = lhc::dynamic_scaling(
      zs, tape.leaf(refops::random_tensor({3, 3}, g)),
      tape.leaf(refops::random_tensor({3}, g)), 196, 1.0);
  for (std::size_t i = 0; i < 9; ++i) CHECK(dz.scaled.value()[i] == 0.0);

  // The effective divisor lies inside [d^g, d^{g+1}] and is monotone in the
  // gate bias. The interval is open in exact arithmetic, but a saturated
  // sigmoid (|bias| ~ 40) rounds the exponent onto the endpoint (and the
  // exp/reciprocal round trip can land an ulp past it), so we only demand
  // strict interiority where the gate is comfortably away from 0/1.
  Tensor ones = Tensor::full({2, 2}, 1.0);
  auto divisor_at = [&](double bias) {
    lhc::DynamicScaling d2 = lhc::dynamic_scaling(
        tape.leaf(ones), tape.leaf(Tensor({2, 2})),
        tape.leaf(Tensor::full({2}, bias)), 196, 1.0);
    for (std::size_t i = 0; i < 4; ++i) {
      const double div = 1.0 / d2.scaled.value()[i];
      CHECK(div >= 196.0 * (1.0 - 1e-12));
      CHECK(div <= 196.0 * 196.0 * (1.0 + 1e-12));
    }
    return 1.0 / d2.scaled.value()[0];
  };
  double prev = 0.0;
  bool first = true;
  for (double bias : {-40.0, -3.0, 0.0, 3.0, 40.0}) {
    const double div = divisor_at(bias);
    if (std::abs(bias) <= 3.0) {
      CHECK(div > 196.0);
      CHECK(div < 196.0 * 196.0);
    }
    if (!first) CHECK(div >= prev);
    prev = div;
    first = false;
  }
  CHECK(divisor_at(-3.0) < divisor_at(3.0));

  // d < 2 is rejected.
  CHECK_THROWS_AS(lhc::dynamic_scaling(s, w, b, 1, 1.0), lhc::ConfigError);
}

TEST_CASE("head_attention: uniform and one-hot rows, convexity bounds") {
  Tape tape;
  auto g = refops::rng(5);
  Tensor vv = refops::random_tensor({3, 4}, g);
  Var v = tape.leaf(vv);

  // Zero scores -> uniform weights -> every output row is the mean v row.
  Var zero_n = tape.leaf(Tensor({3, 3}));
  Tensor a = lhc::head_attention(zero_n, v).value();
  for (std::size_t m = 0; m < 4; ++m) {
    const double mean_col = (vv.at(0, m) + vv.at(1, m) + vv.at(2, m)) / 3.0;
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(std::abs(a.at(i, m) - mean_col) < 1e-12);
  }

  // Strongly diagonal scores -> near-identity weights -> A ~ v.
  Tensor diag({3, 3});
  for (std::size_t i = 0; i < 3; ++i) diag.at(i, i) = 60.0;
  Tensor a2 = lhc::head_attention(tape.leaf(diag), v).value();
  CHECK(close(a2, vv, 1e-10));

  // Every output element is a convex combination of its v column.
  Tensor n = refops::random_tensor({3, 3}, g, -2.0, 2.0);
  Tensor a3 = lhc::head_attention(tape.leaf(n), v).value();
  for (std::size_t m = 0; m < 4; ++m) {
    double lo = vv.at(0, m), hi = vv.at(0, m);
    for (std::size_t j = 1; j < 3; ++j) {
      lo = std::min(lo, vv.at(j, m));
      hi = std::max(hi, vv.at(j, m));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a3.at(i, m) >= lo - 1e-12);
      CHECK(a3.at(i, m) <= hi + 1e-12);
    }
  }
}

TEST_CASE("attention weights: rows normalized, argmax matches raw scores") {
  // Feeding the identity as v recovers the weight matrix W itself.
  Tape tape;
  auto g = refops::rng(6);
  const std::size_t C = 5;
  Tensor eye({C, C});
  for (std::size_t i = 0; i < C; ++i) eye.at(i, i) = 1.0;

  Tensor scores = refops::random_tensor({C, C}, g, -3.0, 3.0);
  lhc::DynamicScaling ds = lhc::dynamic_scaling(
      tape.leaf(scores), tape.leaf(refops::random_tensor({C, C}, g)),
      tape.leaf(refops::random_tensor({C}, g)), 7, 1.0);
  Tensor w = lhc::head_attention(ds.scaled, tape.leaf(eye)).value();

  for (std::size_t i = 0; i < C; ++i) {
    double sum = 0.0;
    std::size_t best_w = 0, best_s = 0;
    for (std::size_t j = 0; j < C; ++j) {
      CHECK(w.at(i, j) > 0.0);
      sum += w.at(i, j);
      if (w.at(i, j) > w.at(i, best_w)) best_w = j;
      if (scores.at(i, j) > scores.at(i, best_s)) best_s = j;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-10);
    // Row-wise positive rescaling cannot move the argmax.
    CHECK(best_w == best_s);
  }
}

TEST_CASE("lhc_forward: shape preservation and constant-branch residual") {
  LhcConfig c = tiny_cfg();
  auto g = refops::rng(7);
  Tensor xin = refops::random_tensor({4, 4, 3}, g);

  LhcWeights w = LhcWeights::init(c, 9);
  Tensor y = lhc::lhc_apply(xin, c, w);
  CHECK(y.shape() == xin.shape());

  // All-zero embeddings and scale weights with a constant conv bias make the
  // whole attention branch the constant c: y = x + c elementwise.
  LhcWeights wz = LhcWeights::init(c, 9);
  for (auto& t : wz.embed_weight)
    for (double& v : t.data()) v = 0.0;
  for (auto& t : wz.embed_bias)
    for (double& v : t.data()) v = 0.0;
  for (double& v : wz.scale_weight.data()) v = 0.0;
  for (double& v : wz.scale_bias.data()) v = 0.0;
  for (double& v : wz.value_kernel.data()) v = 0.0;
  wz.value_bias = Tensor::full({3}, 0.75);
  Tensor y2 = lhc::lhc_apply(xin, c, wz);
  for (std::size_t i = 0; i < xin.size(); ++i)
    CHECK(y2[i] == doctest::Approx(xin[i] + 0.75).epsilon(1e-14));

  // Head outputs: one per head, [C, head_size].
  std::vector<Tensor> heads = lhc::lhc_head_outputs(xin, c, w);
  REQUIRE(heads.size() == 2);
  for (const Tensor& h : heads)
    CHECK(h.shape() == std::vector<std::size_t>{3, 8});
}

TEST_CASE("shared embedding gradient equals the sum over untied copies") {
  auto g = refops::rng(8);
  Tensor qv = refops::random_tensor({3, 8}, g);
  Tensor kv = refops::random_tensor({3, 8}, g);
  Tensor wv = refops::random_tensor({8, 2}, g);
  Tensor bv = refops::random_tensor({2}, g);
  Tensor probe = refops::random_tensor({3, 3}, g);

  // Tied: one weight leaf feeds both sides.
  Tape tied;
  Var w = tied.leaf(wv);
  Var b = tied.leaf(bv);
  auto [qe, ke] = lhc::embed_qk(tied.leaf(qv), tied.leaf(kv), w, b);
  Var loss = ops::sum(ops::mul(lhc::attention_scores(qe, ke),
                               tied.leaf(probe)));
  tied.backward(loss);
  Tensor tied_gw = tied.grad(w);
  Tensor tied_gb = tied.grad(b);

  // Untied oracle: two weight leaves with the same values, gradients summed.
  Tape untied;
  Var wq = untied.leaf(wv);
  Var wk = untied.leaf(wv);
  Var bq = untied.leaf(bv);
  Var bk = untied.leaf(bv);
  Var qe2 = ops::add_row_bias(ops::matmul(untied.leaf(qv), wq), bq);
  Var ke2 = ops::add_row_bias(ops::matmul(untied.leaf(kv), wk), bk);
  Var loss2 = ops::sum(ops::mul(lhc::attention_scores(qe2, ke2),
                                untied.leaf(probe)));
  untied.backward(loss2);

  for (std::size_t i = 0; i < wv.size(); ++i)
    CHECK(tied_gw[i] ==
          doctest::Approx(untied.grad(wq)[i] + untied.grad(wk)[i])
              .epsilon(1e-12));
  for (std::size_t i = 0; i < bv.size(); ++i)
    CHECK(tied_gb[i] ==
          doctest::Approx(untied.grad(bq)[i] + untied.grad(bk)[i])
              .epsilon(1e-12));
}

TEST_CASE("full block gradient check on the reduced configuration") {
  LhcConfig c = tiny_cfg();  // H=W=4, C=3, n=2, d=2, p=3, s=3, g=1
  LhcWeights w = LhcWeights::init(c, 11);
  auto g = refops::rng(12);
  Tensor xin = refops::random_tensor({4, 4, 3}, g);
  Tensor probe = refops::random_tensor({4, 4, 3}, g);

  // Leaves: x, per-head embed w/b, scale w/b, value kernel/bias, probe.
  std::vector<Tensor> leaves{xin,
                             w.embed_weight[0], w.embed_bias[0],
                             w.embed_weight[1], w.embed_bias[1],
                             w.scale_weight,   w.scale_bias,
                             w.value_kernel,   w.value_bias,
                             probe};
  gradcheck::Result r = gradcheck::check(
      [&c](Tape& t, const std::vector<Var>& v) {
        LhcVars vars;
        vars.embed_weight = {v[1], v[3]};
        vars.embed_bias = {v[2], v[4]};
        vars.scale_weight = v[5];
        vars.scale_bias = v[6];
        vars.value_kernel = v[7];
        vars.value_bias = v[8];
        (void)t;
        Var y = lhc::lhc_forward(v[0], c, vars);
        return ops::sum(ops::mul(y, v[9]));
      },
      leaves);
  INFO("worst: " << r.worst);
  CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("lhc_apply matches the tape path and is deterministic") {
  LhcConfig c = tiny_cfg();
  LhcWeights w = LhcWeights::init(c, 21);
  auto g = refops::rng(22);
  Tensor xin = refops::random_tensor({4, 4, 3}, g);

  Tensor a = lhc::lhc_apply(xin, c, w);
  Tensor b = lhc::lhc_apply(xin, c, w);
  CHECK(close(a, b, 0.0));

  Tape tape;
  LhcVars vars = lhc::register_lhc_weights(tape, w);
  Tensor y = lhc::lhc_forward(tape.leaf(xin), c, vars).value();
  CHECK(close(a, y, 0.0));
}
