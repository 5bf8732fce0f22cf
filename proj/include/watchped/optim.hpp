#pragma once

#include "watchped/autodiff.hpp"

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace watchped::ad {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates aligned one-to-one with a ParamSet's entries.
struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  long step_count = 0;

  explicit AdamState(AdamHyper h = {}) : hyper(h) { validate(); }
  void validate() const;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update of every parameter that requires grad.
/// Throws NonFiniteGradient (naming the parameter) before touching any weight.
void adam_step(ParamSet& params, AdamState& state);

/// Max relative error between reverse-mode and central-difference gradients
/// over every scalar of every parameter requiring grad. The denominator is
/// max(|analytic|, |numeric|, 1e-8).
struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  Index coordinates = 0;
};

GradCheckResult grad_check(const std::function<Var()>& loss_fn, ParamSet& params, double epsilon);
GradCheckResult grad_check(const std::function<Var()>& loss_fn, const std::vector<Var>& inputs, double epsilon);

}  // namespace watchped::ad
