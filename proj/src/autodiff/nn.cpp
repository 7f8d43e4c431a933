#include "autodiff/nn.hpp"

#include <cmath>

#include "common/error.hpp"

namespace nlimb::ad::nn {

Var activate(Var x, Activation act) { return act == Activation::relu ? relu(x) : tanh(x); }

void init_linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, double gain) {
  Tensor w(Shape{in, out});
  const double sd = gain / std::sqrt(static_cast<double>(in));
  for (double& v : w.values()) v = sd * rng.normal();
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor(Shape{out}, 0.0));
}

Var linear(const BoundParams& p, const std::string& name, Var x) {
  return add(matmul(x, p[name + ".w"]), p[name + ".b"]);
}

void init_mlp(ParamSet& ps, const std::string& name, const std::vector<std::size_t>& widths, Rng& rng,
              double out_gain) {
  if (widths.size() < 2) throw InvalidArgument("init_mlp: need at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    init_linear(ps, name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng, last ? out_gain : 1.0);
  }
}

Var mlp(const BoundParams& p, const std::string& name, Var x, Activation act) {
  std::size_t n = 0;
  while (p.params().contains(name + ".l" + std::to_string(n) + ".w")) ++n;
  if (n == 0) throw InvalidArgument("mlp: no layers named '" + name + "'");
  for (std::size_t i = 0; i < n; ++i) {
    x = linear(p, name + ".l" + std::to_string(i), x);
    if (i + 1 < n) x = activate(x, act);
  }
  return x;
}

void init_transformer(ParamSet& ps, const std::string& name, const TransformerShape& s, Rng& rng) {
  if (s.heads == 0 || s.width % s.heads != 0) {
    throw InvalidArgument("transformer: width " + std::to_string(s.width) + " not divisible by " +
                          std::to_string(s.heads) + " heads");
  }
  for (std::size_t l = 0; l < s.layers; ++l) {
    const std::string p = name + ".layer" + std::to_string(l);
    ps.add(p + ".ln1.g", Tensor(Shape{s.width}, 1.0));
    ps.add(p + ".ln1.b", Tensor(Shape{s.width}, 0.0));
    init_linear(ps, p + ".q", s.width, s.width, rng);
    init_linear(ps, p + ".k", s.width, s.width, rng);
    init_linear(ps, p + ".v", s.width, s.width, rng);
    init_linear(ps, p + ".o", s.width, s.width, rng, 1.0 / std::sqrt(2.0 * static_cast<double>(s.layers)));
    ps.add(p + ".ln2.g", Tensor(Shape{s.width}, 1.0));
    ps.add(p + ".ln2.b", Tensor(Shape{s.width}, 0.0));
    init_linear(ps, p + ".ff1", s.width, s.ffn_width, rng, std::sqrt(2.0));
    init_linear(ps, p + ".ff2", s.ffn_width, s.width, rng, 1.0 / std::sqrt(2.0 * static_cast<double>(s.layers)));
  }
  ps.add(name + ".ln.g", Tensor(Shape{s.width}, 1.0));
  ps.add(name + ".ln.b", Tensor(Shape{s.width}, 0.0));
}

Var transformer(const BoundParams& p, const std::string& name, const TransformerShape& s, Var x, std::size_t batch,
                std::size_t seq, const Tensor* key_mask) {
  for (std::size_t l = 0; l < s.layers; ++l) {
    const std::string n = name + ".layer" + std::to_string(l);
    Var h = layer_norm(x, p[n + ".ln1.g"], p[n + ".ln1.b"]);
    Var a = attention(linear(p, n + ".q", h), linear(p, n + ".k", h), linear(p, n + ".v", h), batch, seq, s.heads,
                      key_mask);
    x = add(x, linear(p, n + ".o", a));
    h = layer_norm(x, p[n + ".ln2.g"], p[n + ".ln2.b"]);
    x = add(x, linear(p, n + ".ff2", relu(linear(p, n + ".ff1", h))));
  }
  return layer_norm(x, p[name + ".ln.g"], p[name + ".ln.b"]);
}

}  // namespace nlimb::ad::nn
