#pragma once

#include "watchped/autodiff.hpp"

#include <vector>

// Differentiable primitives. Every op checks shapes and throws ShapeError
// with the offending dimensions.
namespace watchped::ad {

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);

// Linear algebra
Var matvec(const Var& w, const Var& x);   // [m,n]·[n] -> [m]
Var matmul(const Var& a, const Var& b);   // [p,q]·[q,r] -> [p,r]
Var transpose(const Var& a);              // [p,q] -> [q,p]
Var add_row_bias(const Var& a, const Var& bias);  // [T,d] + [d] on every row

// Structure
Var reshape(const Var& a, Shape shape);
Var concat(const std::vector<Var>& parts);           // 1-D pieces -> 1-D
Var concat_cols(const Var& a, const Var& b);         // [T,p],[T,q] -> [T,p+q]
Var stack_rows(const std::vector<Var>& rows);        // k x [d] -> [k,d]
Var row(const Var& a, Index i);                      // [T,d] -> [d]
Var broadcast_rows(const Var& v, Index rows);        // [d] -> [rows,d]
Var pad_to(const Var& v, Index length);              // zero-pads a 1-D vector
/// Multiplies row t of a by the constant weights[t].
Var scale_rows(const Var& a, const Tensor& weights);

// Probability
Var softmax(const Var& logits);                       // 1-D
Var dropout(const Var& a, const ForwardContext& ctx);  // inverted dropout

// Spatial
Var conv2d(const Var& input, const Var& kernels, Index stride, Index padding);
Var conv2d(const Var& input, const Var& kernels, const Var& bias, Index stride, Index padding);
enum class PoolMode { kMax, kAverage };
Var pool2d(const Var& input, PoolMode mode, Index kh, Index kw);
/// [C,L] input, [O,C,k] kernels, [O] bias; stride 1, no padding.
Var conv1d(const Var& input, const Var& kernels, const Var& bias);
Var max_pool1d(const Var& input, Index k);
/// [C,...] -> [C], mean over all trailing axes.
Var global_average(const Var& input);

// Losses (epsilon-clamped)
inline constexpr double kLossEpsilon = 1e-7;
Var bce_loss(const Var& probability, int label);
Var sparse_cce_loss(const Var& logits, Index class_index);

enum class Activation { kNone, kRelu, kSigmoid, kTanh };
Var activate(const Var& a, Activation act);
Var dense(const Var& x, const Var& w, const Var& b, Activation act);

/// Output spatial extent of a strided, padded convolution window.
Index conv_output_extent(Index in, Index kernel, Index stride, Index padding);

}  // namespace watchped::ad
