#pragma once

#include <span>
#include <vector>

#include "lhc/tape.hpp"

// Differentiable primitives. Each records one node on the tape; backward
// callbacks are defined next to the forward code in ops.cpp. Conventions:
//   - feature maps are [H,W,C] row-major (W fastest within a row, then C)
//   - matrices are [rows, cols]
//   - "same" ops keep spatial dims; pooling/conv windows are odd-sized,
//     stride 1, symmetric (k-1)/2 padding
//   - avg_pool2d_same divides by the number of *valid* cells in the window
//     (padding is excluded from the denominator); conv2d_same zero-pads
namespace lhc::ops {

Var add(Var a, Var b);   // same shape
Var sub(Var a, Var b);   // same shape
Var mul(Var a, Var b);   // elementwise, same shape

// scale * x + shift with constant coefficients.
Var affine(Var x, double scale, double shift);

// [M,K] x [K,N] -> [M,N]; inner dimensions must agree.
Var matmul(Var a, Var b);

// [R,C] -> [C,R]
Var transpose(Var m);

// m: [R,C], bias: [C]; bias added to every row.
Var add_row_bias(Var m, Var bias);

// m: [R,C], s: [R]; row i multiplied by s[i].
Var row_scale(Var m, Var s);

// s: scalar; every element of t multiplied by s.
Var scalar_scale(Var t, Var s);

Var exp(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);

// Softmax / log-softmax along the last axis, with per-row max subtraction.
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);

// [R,C] -> [R], mean over each row.
Var mean_rows(Var m);

Var sum(Var x);   // -> scalar
Var mean(Var x);  // -> scalar

Var reshape(Var x, std::vector<std::size_t> new_shape);

// x: [H,W,C], odd window p >= 1.
Var avg_pool2d_same(Var x, int p);
Var max_pool2d_same(Var x, int p);

// x: [H,W,C], kernel: [s,s,C,F] (odd s), bias: [F] -> [H,W,F].
// Cross-correlation with zero padding, stride 1.
Var conv2d_same(Var x, Var kernel, Var bias);

// [H,W,C] -> [C], mean over the spatial grid.
Var global_avg_pool(Var x);

// Head h of n: flatten the spatial grid row-major per channel, take the h-th
// contiguous block of H*W/n positions -> [C, H*W/n]. Requires H*W % n == 0.
Var split_head(Var x, int n, int h);

// Inverse of split_head over all heads: n matrices [C, H*W/n] -> [H,W,C].
Var merge_heads(std::span<const Var> heads, int height, int width);

// n vectors [K] -> [n,K].
Var stack_rows(std::span<const Var> rows);

// m: [R,C]; picks m[i, cols[i]] -> [R]. Labels must be in range.
Var pick_per_row(Var m, const std::vector<int>& cols);

}  // namespace lhc::ops
