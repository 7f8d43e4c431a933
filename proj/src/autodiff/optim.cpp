#include "autodiff/optim.hpp"

#include <cmath>

#include "common/error.hpp"

namespace nlimb::ad {

double global_norm(const ParamSet& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.values()) s += v * v;
  }
  return std::sqrt(s);
}

double clip_grad_norm(ParamSet& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g.values()) v *= k;
    }
  }
  return norm;
}

void Adam::step(ParamSet& params, const ParamSet& grads) {
  if (m_.size() == 0) {
    m_ = params.zeros_like();
    v_ = params.zeros_like();
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& g = grads.at(name);
    Tensor& p = params.at(i);
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    if (g.shape() != p.shape()) {
      throw ShapeError("adam: gradient for '" + name + "' has shape " + to_string(g.shape()) + ", parameter " +
                       to_string(p.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

ParamSet Adam::state(const std::string& prefix) const {
  ParamSet out;
  out.add(prefix + "t", Tensor::scalar(static_cast<double>(t_)));
  for (const auto& [name, m] : m_) out.add(prefix + "m/" + name, m);
  for (const auto& [name, v] : v_) out.add(prefix + "v/" + name, v);
  return out;
}

void Adam::load_state(const ParamSet& all, const std::string& prefix) {
  m_ = ParamSet();
  v_ = ParamSet();
  t_ = 0;
  if (!all.contains(prefix + "t")) return;
  t_ = static_cast<std::uint64_t>(all.at(prefix + "t").item());
  const std::string mp = prefix + "m/", vp = prefix + "v/";
  for (const auto& [name, tensor] : all) {
    if (name.compare(0, mp.size(), mp) == 0) m_.add(name.substr(mp.size()), tensor);
    if (name.compare(0, vp.size(), vp) == 0) v_.add(name.substr(vp.size()), tensor);
  }
}

}  // namespace nlimb::ad
