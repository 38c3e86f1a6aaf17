#include "lhc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace lhc::ops {

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("op inputs live on different tapes");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape " + a.shape_str() +
                     " does not match " + b.shape_str());
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + " tensor, got " + t.shape_str());
  }
}

void require_odd_window(const char* op, int p) {
  if (p < 1 || p % 2 == 0) {
    throw ConfigError(std::string(op) + ": window size must be odd and >= 1, got " +
                      std::to_string(p));
  }
}

// Result tensors inherit f32 only when every differentiable input is f32.
Tensor finish(Tensor t, DType dt) {
  if (dt == DType::f64) return t;  // computed tensors default to f64
  return Tensor(t.shape(),
                std::vector<double>(t.data().begin(), t.data().end()),
                DType::f32);
}

// Flat elementwise apply; keeps the op bodies short.
template <typename F>
Tensor map(const Tensor& x, F f, DType dt) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return finish(std::move(out), dt);
}

// Rows-view helpers for the softmax family: [.., C] seen as [outer, C].
std::size_t last_dim(const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("softmax needs rank >= 1, got scalar");
  return t.shape().back();
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  require_same_shape("add", va, vb);
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  auto ai = a.id, bi = b.id;
  return a.tape->make_node(
      {a, b}, finish(std::move(out), promote(va.dtype(), vb.dtype())),
      [ai, bi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        t.accumulate(ai, g);
        t.accumulate(bi, g);
      });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  require_same_shape("sub", va, vb);
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  auto ai = a.id, bi = b.id;
  return a.tape->make_node(
      {a, b}, finish(std::move(out), promote(va.dtype(), vb.dtype())),
      [ai, bi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        t.accumulate(ai, g);
        Tensor neg(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        t.accumulate(bi, neg);
      });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  require_same_shape("mul", va, vb);
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  auto ai = a.id, bi = b.id;
  return a.tape->make_node(
      {a, b}, finish(std::move(out), promote(va.dtype(), vb.dtype())),
      [ai, bi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& xa = t.value_at(ai);
        const Tensor& xb = t.value_at(bi);
        Tensor ga(g.shape()), gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] = g[i] * xb[i];
          gb[i] = g[i] * xa[i];
        }
        t.accumulate(ai, ga);
        t.accumulate(bi, gb);
      });
}

Var affine(Var x, double scale, double shift) {
  const Tensor& vx = x.value();
  auto xi = x.id;
  return x.tape->make_node(
      {x}, map(vx, [=](double v) { return scale * v + shift; }, vx.dtype()),
      [xi, scale](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = scale * g[i];
        t.accumulate(xi, gx);
      });
}

namespace {

// C = A x B with optional transposes, raw loops in a cache-friendly order.
Tensor matmul_raw(const Tensor& a, bool ta, const Tensor& b, bool tb) {
  const std::size_t M = ta ? a.dim(1) : a.dim(0);
  const std::size_t K = ta ? a.dim(0) : a.dim(1);
  const std::size_t N = tb ? b.dim(0) : b.dim(1);
  Tensor out({M, N});
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const double av = ta ? a.at(k, i) : a.at(i, k);
      for (std::size_t j = 0; j < N; ++j) {
        out.at(i, j) += av * (tb ? b.at(j, k) : b.at(k, j));
      }
    }
  }
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  require_rank("matmul", va, 2);
  require_rank("matmul", vb, 2);
  if (va.dim(1) != vb.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree, " + va.shape_str() +
                     " x " + vb.shape_str());
  }
  auto ai = a.id, bi = b.id;
  return a.tape->make_node(
      {a, b},
      finish(matmul_raw(va, false, vb, false), promote(va.dtype(), vb.dtype())),
      [ai, bi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& xa = t.value_at(ai);
        const Tensor& xb = t.value_at(bi);
        t.accumulate(ai, matmul_raw(g, false, xb, true));   // g . B^T
        t.accumulate(bi, matmul_raw(xa, true, g, false));   // A^T . g
      });
}

Var transpose(Var m) {
  const Tensor& vm = m.value();
  require_rank("transpose", vm, 2);
  const std::size_t R = vm.dim(0), C = vm.dim(1);
  Tensor out({C, R});
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out.at(j, i) = vm.at(i, j);
  auto mi = m.id;
  return m.tape->make_node(
      {m}, finish(std::move(out), vm.dtype()),
      [mi, R, C](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gm({R, C});
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) gm.at(i, j) = g.at(j, i);
        t.accumulate(mi, gm);
      });
}

Var add_row_bias(Var m, Var bias) {
  require_same_tape(m, bias);
  const Tensor& vm = m.value();
  const Tensor& vb = bias.value();
  require_rank("add_row_bias", vm, 2);
  require_rank("add_row_bias", vb, 1);
  if (vm.dim(1) != vb.dim(0)) {
    throw ShapeError("add_row_bias: matrix " + vm.shape_str() +
                     " incompatible with bias " + vb.shape_str());
  }
  const std::size_t R = vm.dim(0), C = vm.dim(1);
  Tensor out({R, C});
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out.at(i, j) = vm.at(i, j) + vb[j];
  auto mi = m.id, bi = bias.id;
  return m.tape->make_node(
      {m, bias}, finish(std::move(out), promote(vm.dtype(), vb.dtype())),
      [mi, bi, R, C](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        t.accumulate(mi, g);
        Tensor gb({C});
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) gb[j] += g.at(i, j);
        t.accumulate(bi, gb);
      });
}

Var row_scale(Var m, Var s) {
  require_same_tape(m, s);
  const Tensor& vm = m.value();
  const Tensor& vs = s.value();
  require_rank("row_scale", vm, 2);
  require_rank("row_scale", vs, 1);
  if (vm.dim(0) != vs.dim(0)) {
    throw ShapeError("row_scale: matrix " + vm.shape_str() +
                     " incompatible with scales " + vs.shape_str());
  }
  const std::size_t R = vm.dim(0), C = vm.dim(1);
  Tensor out({R, C});
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out.at(i, j) = vm.at(i, j) * vs[i];
  auto mi = m.id, si = s.id;
  return m.tape->make_node(
      {m, s}, finish(std::move(out), promote(vm.dtype(), vs.dtype())),
      [mi, si, R, C](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& xm = t.value_at(mi);
        const Tensor& xs = t.value_at(si);
        Tensor gm({R, C}), gs({R});
        for (std::size_t i = 0; i < R; ++i) {
          for (std::size_t j = 0; j < C; ++j) {
            gm.at(i, j) = g.at(i, j) * xs[i];
            gs[i] += g.at(i, j) * xm.at(i, j);
          }
        }
        t.accumulate(mi, gm);
        t.accumulate(si, gs);
      });
}

Var scalar_scale(Var t_in, Var s) {
  require_same_tape(t_in, s);
  const Tensor& vt = t_in.value();
  const Tensor& vs = s.value();
  if (vs.size() != 1) {
    throw ShapeError("scalar_scale: scale must be a scalar, got " +
                     vs.shape_str());
  }
  const double sv = vs[0];
  Tensor out(vt.shape());
  for (std::size_t i = 0; i < vt.size(); ++i) out[i] = vt[i] * sv;
  auto ti = t_in.id, si = s.id;
  return t_in.tape->make_node(
      {t_in, s}, finish(std::move(out), promote(vt.dtype(), vs.dtype())),
      [ti, si](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& xt = t.value_at(ti);
        const Tensor& xs = t.value_at(si);
        Tensor gt(g.shape());
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          gt[i] = g[i] * xs[0];
          acc += g[i] * xt[i];
        }
        t.accumulate(ti, gt);
        Tensor gs(xs.shape());
        gs[0] = acc;
        t.accumulate(si, gs);
      });
}

Var exp(Var x) {
  const Tensor& vx = x.value();
  auto xi = x.id;
  return x.tape->make_node(
      {x}, map(vx, [](double v) { return std::exp(v); }, vx.dtype()),
      [xi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& y = t.value_at(out_id);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i];
        t.accumulate(xi, gx);
      });
}

Var sigmoid(Var x) {
  const Tensor& vx = x.value();
  auto xi = x.id;
  return x.tape->make_node(
      {x},
      map(vx, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, vx.dtype()),
      [xi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& y = t.value_at(out_id);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
          gx[i] = g[i] * y[i] * (1.0 - y[i]);
        t.accumulate(xi, gx);
      });
}

Var tanh(Var x) {
  const Tensor& vx = x.value();
  auto xi = x.id;
  return x.tape->make_node(
      {x}, map(vx, [](double v) { return std::tanh(v); }, vx.dtype()),
      [xi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& y = t.value_at(out_id);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
          gx[i] = g[i] * (1.0 - y[i] * y[i]);
        t.accumulate(xi, gx);
      });
}

Var relu(Var x) {
  const Tensor& vx = x.value();
  auto xi = x.id;
  return x.tape->make_node(
      {x}, map(vx, [](double v) { return v > 0.0 ? v : 0.0; }, vx.dtype()),
      [xi](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& xv = t.value_at(xi);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
          gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
        t.accumulate(xi, gx);
      });
}

Var softmax_rows(Var x) {
  const Tensor& vx = x.value();
  const std::size_t C = last_dim(vx);
  const std::size_t rows = vx.size() / C;
  Tensor out(vx.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * C;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) m = std::max(m, vx[base + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      out[base + j] = std::exp(vx[base + j] - m);
      s += out[base + j];
    }
    for (std::size_t j = 0; j < C; ++j) out[base + j] /= s;
  }
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(std::move(out), vx.dtype()),
      [xi, C, rows](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& y = t.value_at(out_id);
        Tensor gx(g.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * C;
          double dot = 0.0;
          for (std::size_t j = 0; j < C; ++j) dot += g[base + j] * y[base + j];
          for (std::size_t j = 0; j < C; ++j)
            gx[base + j] = y[base + j] * (g[base + j] - dot);
        }
        t.accumulate(xi, gx);
      });
}

Var log_softmax_rows(Var x) {
  const Tensor& vx = x.value();
  const std::size_t C = last_dim(vx);
  const std::size_t rows = vx.size() / C;
  Tensor out(vx.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * C;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) m = std::max(m, vx[base + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += std::exp(vx[base + j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < C; ++j) out[base + j] = vx[base + j] - lse;
  }
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(std::move(out), vx.dtype()),
      [xi, C, rows](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& y = t.value_at(out_id);  // log softmax
        Tensor gx(g.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * C;
          double gsum = 0.0;
          for (std::size_t j = 0; j < C; ++j) gsum += g[base + j];
          for (std::size_t j = 0; j < C; ++j)
            gx[base + j] = g[base + j] - std::exp(y[base + j]) * gsum;
        }
        t.accumulate(xi, gx);
      });
}

Var mean_rows(Var m) {
  const Tensor& vm = m.value();
  require_rank("mean_rows", vm, 2);
  const std::size_t R = vm.dim(0), C = vm.dim(1);
  Tensor out({R});
  for (std::size_t i = 0; i < R; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += vm.at(i, j);
    out[i] = s / static_cast<double>(C);
  }
  auto mi = m.id;
  return m.tape->make_node(
      {m}, finish(std::move(out), vm.dtype()),
      [mi, R, C](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gm({R, C});
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j)
            gm.at(i, j) = g[i] / static_cast<double>(C);
        t.accumulate(mi, gm);
      });
}

Var sum(Var x) {
  const Tensor& vx = x.value();
  double s = 0.0;
  for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i];
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(Tensor::scalar(s), vx.dtype()),
      [xi](Tape& t, std::int32_t out_id) {
        const double g = t.grad_at(out_id)[0];
        t.accumulate(xi, Tensor::full(t.value_at(xi).shape(), g));
      });
}

Var mean(Var x) {
  const Tensor& vx = x.value();
  double s = 0.0;
  for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i];
  const double inv = 1.0 / static_cast<double>(vx.size());
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(Tensor::scalar(s * inv), vx.dtype()),
      [xi, inv](Tape& t, std::int32_t out_id) {
        const double g = t.grad_at(out_id)[0];
        t.accumulate(xi, Tensor::full(t.value_at(xi).shape(), g * inv));
      });
}

Var reshape(Var x, std::vector<std::size_t> new_shape) {
  const Tensor& vx = x.value();
  Tensor out = vx.reshaped(std::move(new_shape));
  auto xi = x.id;
  return x.tape->make_node(
      {x}, std::move(out), [xi](Tape& t, std::int32_t out_id) {
        t.accumulate(xi, t.grad_at(out_id).reshaped(t.value_at(xi).shape()));
      });
}

Var avg_pool2d_same(Var x, int p) {
  require_odd_window("avg_pool2d_same", p);
  const Tensor& vx = x.value();
  require_rank("avg_pool2d_same", vx, 3);
  const int H = static_cast<int>(vx.dim(0));
  const int W = static_cast<int>(vx.dim(1));
  const int C = static_cast<int>(vx.dim(2));
  const int r = (p - 1) / 2;
  Tensor out(vx.shape());
  for (int i = 0; i < H; ++i) {
    const int i0 = std::max(0, i - r), i1 = std::min(H - 1, i + r);
    for (int j = 0; j < W; ++j) {
      const int j0 = std::max(0, j - r), j1 = std::min(W - 1, j + r);
      const double inv = 1.0 / ((i1 - i0 + 1) * (j1 - j0 + 1));
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int ii = i0; ii <= i1; ++ii)
          for (int jj = j0; jj <= j1; ++jj) s += vx.at(ii, jj, c);
        out.at(i, j, c) = s * inv;
      }
    }
  }
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(std::move(out), vx.dtype()),
      [xi, H, W, C, r](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gx({static_cast<std::size_t>(H), static_cast<std::size_t>(W),
                   static_cast<std::size_t>(C)});
        for (int i = 0; i < H; ++i) {
          const int i0 = std::max(0, i - r), i1 = std::min(H - 1, i + r);
          for (int j = 0; j < W; ++j) {
            const int j0 = std::max(0, j - r), j1 = std::min(W - 1, j + r);
            const double inv = 1.0 / ((i1 - i0 + 1) * (j1 - j0 + 1));
            for (int c = 0; c < C; ++c) {
              const double share = g.at(i, j, c) * inv;
              for (int ii = i0; ii <= i1; ++ii)
                for (int jj = j0; jj <= j1; ++jj) gx.at(ii, jj, c) += share;
            }
          }
        }
        t.accumulate(xi, gx);
      });
}

Var max_pool2d_same(Var x, int p) {
  require_odd_window("max_pool2d_same", p);
  const Tensor& vx = x.value();
  require_rank("max_pool2d_same", vx, 3);
  const int H = static_cast<int>(vx.dim(0));
  const int W = static_cast<int>(vx.dim(1));
  const int C = static_cast<int>(vx.dim(2));
  const int r = (p - 1) / 2;
  Tensor out(vx.shape());
  // Flat index of the (first) max cell per output element; drives backward.
  std::vector<std::size_t> argmax(vx.size());
  for (int i = 0; i < H; ++i) {
    const int i0 = std::max(0, i - r), i1 = std::min(H - 1, i + r);
    for (int j = 0; j < W; ++j) {
      const int j0 = std::max(0, j - r), j1 = std::min(W - 1, j + r);
      for (int c = 0; c < C; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int ii = i0; ii <= i1; ++ii)
          for (int jj = j0; jj <= j1; ++jj) {
            const double v = vx.at(ii, jj, c);
            if (v > best) {
              best = v;
              best_idx = (static_cast<std::size_t>(ii) * W + jj) * C + c;
            }
          }
        out.at(i, j, c) = best;
        argmax[(static_cast<std::size_t>(i) * W + j) * C + c] = best_idx;
      }
    }
  }
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(std::move(out), vx.dtype()),
      [xi, argmax = std::move(argmax)](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gx(t.value_at(xi).shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
        t.accumulate(xi, gx);
      });
}

Var conv2d_same(Var x, Var kernel, Var bias) {
  require_same_tape(x, kernel);
  require_same_tape(x, bias);
  const Tensor& vx = x.value();
  const Tensor& vk = kernel.value();
  const Tensor& vb = bias.value();
  require_rank("conv2d_same", vx, 3);
  require_rank("conv2d_same", vk, 4);
  require_rank("conv2d_same", vb, 1);
  const int H = static_cast<int>(vx.dim(0));
  const int W = static_cast<int>(vx.dim(1));
  const int C = static_cast<int>(vx.dim(2));
  const int s = static_cast<int>(vk.dim(0));
  const int F = static_cast<int>(vk.dim(3));
  if (vk.dim(1) != vk.dim(0)) {
    throw ShapeError("conv2d_same: kernel must be square, got " +
                     vk.shape_str());
  }
  require_odd_window("conv2d_same", s);
  if (static_cast<int>(vk.dim(2)) != C) {
    throw ShapeError("conv2d_same: input " + vx.shape_str() +
                     " has channel count incompatible with kernel " +
                     vk.shape_str());
  }
  if (static_cast<int>(vb.dim(0)) != F) {
    throw ShapeError("conv2d_same: bias " + vb.shape_str() +
                     " incompatible with kernel " + vk.shape_str());
  }
  const int r = (s - 1) / 2;
  Tensor out({static_cast<std::size_t>(H), static_cast<std::size_t>(W),
              static_cast<std::size_t>(F)});
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      for (int f = 0; f < F; ++f) out.at(i, j, f) = vb[f];
      for (int di = -r; di <= r; ++di) {
        const int ii = i + di;
        if (ii < 0 || ii >= H) continue;
        for (int dj = -r; dj <= r; ++dj) {
          const int jj = j + dj;
          if (jj < 0 || jj >= W) continue;
          for (int c = 0; c < C; ++c) {
            const double xv = vx.at(ii, jj, c);
            for (int f = 0; f < F; ++f)
              out.at(i, j, f) += xv * vk.at(di + r, dj + r, c, f);
          }
        }
      }
    }
  }
  auto xi = x.id, ki = kernel.id, bi = bias.id;
  DType dt = promote(promote(vx.dtype(), vk.dtype()), vb.dtype());
  return x.tape->make_node(
      {x, kernel, bias}, finish(std::move(out), dt),
      [xi, ki, bi, H, W, C, F, r](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        const Tensor& vx = t.value_at(xi);
        const Tensor& vk = t.value_at(ki);
        Tensor gx(vx.shape());
        Tensor gk(vk.shape());
        Tensor gb({static_cast<std::size_t>(F)});
        for (int i = 0; i < H; ++i) {
          for (int j = 0; j < W; ++j) {
            for (int f = 0; f < F; ++f) gb[f] += g.at(i, j, f);
            for (int di = -r; di <= r; ++di) {
              const int ii = i + di;
              if (ii < 0 || ii >= H) continue;
              for (int dj = -r; dj <= r; ++dj) {
                const int jj = j + dj;
                if (jj < 0 || jj >= W) continue;
                for (int c = 0; c < C; ++c) {
                  const double xv = vx.at(ii, jj, c);
                  double acc = 0.0;
                  for (int f = 0; f < F; ++f) {
                    const double gv = g.at(i, j, f);
                    acc += gv * vk.at(di + r, dj + r, c, f);
                    gk.at(di + r, dj + r, c, f) += gv * xv;
                  }
                  gx.at(ii, jj, c) += acc;
                }
              }
            }
          }
        }
        t.accumulate(xi, gx);
        t.accumulate(ki, gk);
        t.accumulate(bi, gb);
      });
}

Var global_avg_pool(Var x) {
  const Tensor& vx = x.value();
  require_rank("global_avg_pool", vx, 3);
  const std::size_t H = vx.dim(0), W = vx.dim(1), C = vx.dim(2);
  const double inv = 1.0 / static_cast<double>(H * W);
  Tensor out({C});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < C; ++c) out[c] += vx.at(i, j, c) * inv;
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(std::move(out), vx.dtype()),
      [xi, H, W, C, inv](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gx({H, W, C});
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < C; ++c)
              gx.at(i, j, c) = g[c] * inv;
        t.accumulate(xi, gx);
      });
}

Var split_head(Var x, int n, int h) {
  const Tensor& vx = x.value();
  require_rank("split_head", vx, 3);
  const std::size_t H = vx.dim(0), W = vx.dim(1), C = vx.dim(2);
  if (n < 1) throw ConfigError("split_head: head count must be >= 1");
  if ((H * W) % static_cast<std::size_t>(n) != 0) {
    throw ConfigError("split_head: spatial size " + std::to_string(H * W) +
                      " not divisible by " + std::to_string(n) + " heads");
  }
  if (h < 0 || h >= n) {
    throw ConfigError("split_head: head index " + std::to_string(h) +
                      " out of range for " + std::to_string(n) + " heads");
  }
  const std::size_t block = H * W / static_cast<std::size_t>(n);
  const std::size_t off = static_cast<std::size_t>(h) * block;
  Tensor out({C, block});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t m = 0; m < block; ++m) {
      const std::size_t flat = off + m;  // row-major spatial position
      out.at(c, m) = vx.at(flat / W, flat % W, c);
    }
  auto xi = x.id;
  return x.tape->make_node(
      {x}, finish(std::move(out), vx.dtype()),
      [xi, W, C, block, off](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gx(t.value_at(xi).shape());
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t m = 0; m < block; ++m) {
            const std::size_t flat = off + m;
            gx.at(flat / W, flat % W, c) += g.at(c, m);
          }
        t.accumulate(xi, gx);
      });
}

Var merge_heads(std::span<const Var> heads, int height, int width) {
  if (heads.empty()) throw ConfigError("merge_heads: no heads given");
  Tape* tape = heads[0].tape;
  const std::size_t n = heads.size();
  const Tensor& first = heads[0].value();
  require_rank("merge_heads", first, 2);
  const std::size_t C = first.dim(0);
  const std::size_t block = first.dim(1);
  const std::size_t H = static_cast<std::size_t>(height);
  const std::size_t W = static_cast<std::size_t>(width);
  if (n * block != H * W) {
    throw ShapeError("merge_heads: " + std::to_string(n) + " heads of " +
                     first.shape_str() + " cannot fill a " +
                     std::to_string(H) + "x" + std::to_string(W) + " grid");
  }
  DType dt = first.dtype();
  for (const Var& hv : heads) {
    if (hv.tape != tape) throw Error("op inputs live on different tapes");
    require_same_shape("merge_heads", hv.value(), first);
    dt = promote(dt, hv.value().dtype());
  }
  Tensor out({H, W, C});
  std::vector<Var> inputs(heads.begin(), heads.end());
  std::vector<std::int32_t> ids;
  for (const Var& hv : heads) ids.push_back(hv.id);
  for (std::size_t h = 0; h < n; ++h) {
    const Tensor& vh = heads[h].value();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t m = 0; m < block; ++m) {
        const std::size_t flat = h * block + m;
        out.at(flat / W, flat % W, c) = vh.at(c, m);
      }
  }
  return tape->make_node(
      std::move(inputs), finish(std::move(out), dt),
      [ids, C, block, W](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        for (std::size_t h = 0; h < ids.size(); ++h) {
          Tensor gh({C, block});
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t m = 0; m < block; ++m) {
              const std::size_t flat = h * block + m;
              gh.at(c, m) = g.at(flat / W, flat % W, c);
            }
          t.accumulate(ids[h], gh);
        }
      });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ConfigError("stack_rows: no rows given");
  Tape* tape = rows[0].tape;
  const Tensor& first = rows[0].value();
  require_rank("stack_rows", first, 1);
  const std::size_t K = first.dim(0);
  DType dt = first.dtype();
  for (const Var& r : rows) {
    if (r.tape != tape) throw Error("op inputs live on different tapes");
    require_same_shape("stack_rows", r.value(), first);
    dt = promote(dt, r.value().dtype());
  }
  const std::size_t n = rows.size();
  Tensor out({n, K});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < K; ++j) out.at(i, j) = rows[i].value()[j];
  std::vector<Var> inputs(rows.begin(), rows.end());
  std::vector<std::int32_t> ids;
  for (const Var& r : rows) ids.push_back(r.id);
  return tape->make_node(
      std::move(inputs), finish(std::move(out), dt),
      [ids, K](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          Tensor gr({K});
          for (std::size_t j = 0; j < K; ++j) gr[j] = g.at(i, j);
          t.accumulate(ids[i], gr);
        }
      });
}

Var pick_per_row(Var m, const std::vector<int>& cols) {
  const Tensor& vm = m.value();
  require_rank("pick_per_row", vm, 2);
  const std::size_t R = vm.dim(0), C = vm.dim(1);
  if (cols.size() != R) {
    throw ShapeError("pick_per_row: " + std::to_string(cols.size()) +
                     " indices for " + std::to_string(R) + " rows");
  }
  for (std::size_t i = 0; i < R; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= C) {
      throw ValueError("pick_per_row: index " + std::to_string(cols[i]) +
                       " out of range [0," + std::to_string(C) + ") at row " +
                       std::to_string(i));
    }
  }
  Tensor out({R});
  for (std::size_t i = 0; i < R; ++i)
    out[i] = vm.at(i, static_cast<std::size_t>(cols[i]));
  auto mi = m.id;
  return m.tape->make_node(
      {m}, finish(std::move(out), vm.dtype()),
      [mi, cols, R, C](Tape& t, std::int32_t out_id) {
        const Tensor& g = t.grad_at(out_id);
        Tensor gm({R, C});
        for (std::size_t i = 0; i < R; ++i)
          gm.at(i, static_cast<std::size_t>(cols[i])) = g[i];
        t.accumulate(mi, gm);
      });
}

}  // namespace lhc::ops
