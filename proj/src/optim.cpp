#include "watchped/optim.hpp"

#include <algorithm>
#include <cmath>

namespace watchped::ad {

void AdamState::validate() const {
  if (!(hyper.learning_rate > 0.0)) throw std::invalid_argument("adam: learning_rate must be > 0");
  if (!(hyper.beta1 > 0.0 && hyper.beta1 < 1.0)) throw std::invalid_argument("adam: beta1 must be in (0,1)");
  if (!(hyper.beta2 > 0.0 && hyper.beta2 < 1.0)) throw std::invalid_argument("adam: beta2 must be in (0,1)");
  if (!(hyper.epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be > 0");
}

void adam_step(ParamSet& params, AdamState& state) {
  auto& entries = params.entries();
  if (state.first_moment.empty()) {
    for (const auto& e : entries) {
      state.first_moment.push_back(Tensor::zeros(e.var.shape()));
      state.second_moment.push_back(Tensor::zeros(e.var.shape()));
    }
  }
  if (state.first_moment.size() != entries.size()) {
    throw std::invalid_argument("adam: state was built for a different parameter set");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (state.first_moment[i].shape() != entries[i].var.shape()) {
      throw ShapeError("adam: moment shape mismatch for " + entries[i].name);
    }
    if (entries[i].var.requires_grad() && !entries[i].var.grad().all_finite()) {
      throw NonFiniteGradient("adam: non-finite gradient in parameter " + entries[i].name);
    }
  }

  ++state.step_count;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var& v = entries[i].var;
    if (!v.requires_grad()) continue;
    const auto g = v.grad().data().array();
    auto m = state.first_moment[i].data().array();
    auto s = state.second_moment[i].data().array();
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    s = h.beta2 * s + (1.0 - h.beta2) * g.square();
    v.mutable_value().data().array() -= h.learning_rate * (m / c1) / ((s / c2).sqrt() + h.epsilon);
  }
}

namespace {

GradCheckResult check_vars(const std::function<Var()>& loss_fn, const std::vector<std::pair<std::string, Var>>& vars,
                           double epsilon) {
  for (auto [name, v] : vars) v.zero_grad();
  Var loss = loss_fn();
  loss.backward();
  std::vector<Tensor> analytic;
  analytic.reserve(vars.size());
  for (const auto& [name, v] : vars) analytic.push_back(v.grad());

  GradCheckResult res;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    Var v = vars[k].second;
    auto& data = v.mutable_value().data();
    for (Index i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + epsilon;
      const double fp = loss_fn().item();
      data[i] = orig - epsilon;
      const double fm = loss_fn().item();
      data[i] = orig;
      const double num = (fp - fm) / (2.0 * epsilon);
      const double ana = analytic[k][i];
      const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
      const double rel = std::abs(ana - num) / denom;
      ++res.coordinates;
      if (rel > res.max_relative_error || res.worst_index < 0) {
        res.max_relative_error = rel;
        res.worst_parameter = vars[k].first;
        res.worst_index = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var()>& loss_fn, ParamSet& params, double epsilon) {
  std::vector<std::pair<std::string, Var>> vars;
  for (const auto& e : params.entries()) {
    if (e.var.requires_grad()) vars.emplace_back(e.name, e.var);
  }
  return check_vars(loss_fn, vars, epsilon);
}

GradCheckResult grad_check(const std::function<Var()>& loss_fn, const std::vector<Var>& inputs, double epsilon) {
  std::vector<std::pair<std::string, Var>> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.emplace_back("input" + std::to_string(i), inputs[i]);
  return check_vars(loss_fn, vars, epsilon);
}

}  // namespace watchped::ad
