#pragma once

#include "watchped/model.hpp"
#include "watchped/optim.hpp"

#include <Eigen/Dense>
#include <memory>

namespace watchped {

/// Loop-level re-evaluation of the model in any floating type, with per-branch
/// caching and a fingerprint of every ReLU sign and max-pool choice. Dropout is off.
template <typename T>
class ReferenceModel {
 public:
  ReferenceModel(const ModelParams& model, const ModelInput& input, Mode mode);
  ~ReferenceModel();
  ReferenceModel(const ReferenceModel&) = delete;
  ReferenceModel& operator=(const ReferenceModel&) = delete;

  std::size_t parameter_count() const;
  const std::string& parameter_name(std::size_t k) const;
  Index parameter_size(std::size_t k) const;
  T get(std::size_t k, Index i) const;
  void set(std::size_t k, Index i, T value);

  T probability();
  T loss(int label);
  /// Changes whenever any ReLU flips sign or any max-pool picks another element.
  std::uint64_t pattern();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

extern template class ReferenceModel<double>;
extern template class ReferenceModel<long double>;

struct ModelGradCheckOptions {
  double epsilon = 1e-6;
  Mode mode = Mode::kFull;
  /// Maximum number of times a step is halved when the perturbation crosses a kink.
  int max_halvings = 30;
};

/// Reverse-mode gradient (double) of bce(predict) against central differences of the
/// same model evaluated in extended precision. Every parameter is checked, frozen or not.
ad::GradCheckResult model_grad_check(ModelParams& model, const ModelInput& input, int label,
                                     const ModelGradCheckOptions& options = {});

}  // namespace watchped
