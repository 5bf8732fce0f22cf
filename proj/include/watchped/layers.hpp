#pragma once

#include "watchped/autodiff.hpp"
#include "watchped/ops.hpp"

#include <random>
#include <string>

namespace watchped::ad {

/// Weights of one GRU layer.
///
/// Gate convention (fixed):
///   z  = sigmoid(Wz x + Uz h + bz)          update gate
///   r  = sigmoid(Wr x + Ur h + br)          reset gate
///   n  = tanh(Wn x + Un (r * h) + bn)       candidate
///   h' = (1 - z) * n + z * h
/// so z close to 1 keeps the previous state.
struct GruParams {
  Index input_size = 0;
  Index hidden_size = 0;
  Var w_z, u_z, b_z;
  Var w_r, u_r, b_r;
  Var w_n, u_n, b_n;

  /// Registers the nine tensors as `<prefix>.w_z`, ... in the set.
  static GruParams create(ParamSet& params, const std::string& prefix, Index input_size, Index hidden_size,
                          std::mt19937_64& rng);
  static GruParams bind(const ParamSet& params, const std::string& prefix);
};

/// Hidden state at every step: [T,input] -> [T,hidden].
Var gru_forward(const Var& sequence, const GruParams& params, const Var& h0);
Var gru_forward(const Var& sequence, const GruParams& params);

/// Additive temporal attention: e_t = v . tanh(W h_t), alpha = softmax(e).
struct AttentionParams {
  Var w;  // [attention_dim, d]
  Var v;  // [attention_dim]

  static AttentionParams create(ParamSet& params, const std::string& prefix, Index d, Index attention_dim,
                                std::mt19937_64& rng);
  static AttentionParams bind(const ParamSet& params, const std::string& prefix);
};

struct AttentionResult {
  Var output;   // [d]
  Var weights;  // [T], sums to 1
};

AttentionResult attention_block(const Var& sequence, const AttentionParams& params);

/// Glorot-uniform initialised tensor.
Tensor glorot_uniform(Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng);

}  // namespace watchped::ad
