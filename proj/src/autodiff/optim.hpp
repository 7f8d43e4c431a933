#pragma once

#include <cstdint>
#include <string>

#include "autodiff/tensor.hpp"

namespace nlimb::ad {

// Global L2 norm over every gradient tensor.
double global_norm(const ParamSet& grads);

// Rescales `grads` in place so the global norm is at most `max_norm`;
// returns the norm before clipping.
double clip_grad_norm(ParamSet& grads, double max_norm);

// Adam, minimizing. Moments are kept per parameter name.
class Adam {
 public:
  explicit Adam(double lr = 3e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& params, const ParamSet& grads);

  double lr() const noexcept { return lr_; }
  void set_lr(double lr) noexcept { lr_ = lr; }
  std::uint64_t steps() const noexcept { return t_; }

  // Moments and step count as named tensors under `prefix`, for checkpoints.
  ParamSet state(const std::string& prefix) const;
  void load_state(const ParamSet& all, const std::string& prefix);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  ParamSet m_, v_;
};

}  // namespace nlimb::ad
