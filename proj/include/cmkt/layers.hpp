#pragma once

#include <cstdint>
#include <string>

#include "cmkt/autodiff.hpp"

// Named-parameter building blocks shared by the acoustic and text branches.
// A layer called with prefix "p" reads parameters "p.w", "p.b" and so on.
namespace cmkt::layers {

// Glorot-uniform weight (in x out) and zero bias (1 x out).
void add_linear(ParameterTable& table, const std::string& prefix, int in, int out, std::uint64_t seed);
// Unit gain, zero bias.
void add_layer_norm(ParameterTable& table, const std::string& prefix, int width);
void add_feed_forward(ParameterTable& table, const std::string& prefix, int width, int hidden, std::uint64_t seed);
void add_attention(ParameterTable& table, const std::string& prefix, int width, std::uint64_t seed);
Tensor2D glorot_uniform(int in, int out, std::uint64_t seed);

Var linear(ParamBinder& p, const std::string& prefix, Var x);
Var layer_norm(ParamBinder& p, const std::string& prefix, Var x, double eps);
// swish(x W1 + b1) W2 + b2
Var feed_forward(ParamBinder& p, const std::string& prefix, Var x);
// Multi-head scaled dot-product attention of `query` over `memory`.
Var attention(ParamBinder& p, const std::string& prefix, Var query, Var memory, int heads);

}  // namespace cmkt::layers
