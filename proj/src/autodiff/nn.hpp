#pragma once

#include <string>
#include <vector>

#include "autodiff/tape.hpp"
#include "common/rng.hpp"

// Layers built from tape primitives. Parameters live in a ParamSet under
// dotted names; forward functions look them up in a BoundParams.
namespace nlimb::ad::nn {

enum class Activation { relu, tanh };

Var activate(Var x, Activation act);

// `name.w` [in, out] ~ N(0, gain^2 / in), `name.b` [out] = 0.
void init_linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                 double gain = 1.0);
Var linear(const BoundParams& p, const std::string& name, Var x);

// widths = {in, hidden..., out}; layers are `name.l0`, `name.l1`, ...
void init_mlp(ParamSet& ps, const std::string& name, const std::vector<std::size_t>& widths, Rng& rng,
              double out_gain = 1.0);
// Activation between layers, none after the last one.
Var mlp(const BoundParams& p, const std::string& name, Var x, Activation act = Activation::tanh);

struct TransformerShape {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t ffn_width = 128;
};

void init_transformer(ParamSet& ps, const std::string& name, const TransformerShape& shape, Rng& rng);

// Pre-norm encoder stack over x [batch*seq, width], ending in a layer norm.
Var transformer(const BoundParams& p, const std::string& name, const TransformerShape& shape, Var x,
                std::size_t batch, std::size_t seq, const Tensor* key_mask);

}  // namespace nlimb::ad::nn
