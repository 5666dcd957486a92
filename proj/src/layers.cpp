#include "cmkt/layers.hpp"

#include <cmath>
#include <vector>

#include "cmkt/errors.hpp"
#include "cmkt/rng.hpp"

namespace cmkt::layers {

Tensor2D glorot_uniform(int in, int out, std::uint64_t seed) {
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor2D w(static_cast<std::size_t>(in), static_cast<std::size_t>(out));
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  return w;
}

void add_linear(ParameterTable& table, const std::string& prefix, int in, int out, std::uint64_t seed) {
  table[prefix + ".w"] = glorot_uniform(in, out, derive_seed(seed, prefix + ".w"));
  table[prefix + ".b"] = Tensor2D(1, static_cast<std::size_t>(out));
}

void add_layer_norm(ParameterTable& table, const std::string& prefix, int width) {
  table[prefix + ".gain"] = Tensor2D(1, static_cast<std::size_t>(width), 1.0);
  table[prefix + ".bias"] = Tensor2D(1, static_cast<std::size_t>(width));
}

void add_feed_forward(ParameterTable& table, const std::string& prefix, int width, int hidden, std::uint64_t seed) {
  add_linear(table, prefix + ".fc1", width, hidden, seed);
  add_linear(table, prefix + ".fc2", hidden, width, seed);
}

void add_attention(ParameterTable& table, const std::string& prefix, int width, std::uint64_t seed) {
  for (const char* name : {".q", ".k", ".v", ".o"}) add_linear(table, prefix + name, width, width, seed);
}

Var linear(ParamBinder& p, const std::string& prefix, Var x) {
  return ad::linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

Var layer_norm(ParamBinder& p, const std::string& prefix, Var x, double eps) {
  return ad::layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"), eps);
}

Var feed_forward(ParamBinder& p, const std::string& prefix, Var x) {
  return linear(p, prefix + ".fc2", ad::swish(linear(p, prefix + ".fc1", x)));
}

Var attention(ParamBinder& p, const std::string& prefix, Var query, Var memory, int heads) {
  const std::size_t width = query.cols();
  if (heads <= 0 || width % static_cast<std::size_t>(heads) != 0)
    throw ConfigError("attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  Var q = linear(p, prefix + ".q", query);
  Var k = linear(p, prefix + ".k", memory);
  Var v = linear(p, prefix + ".v", memory);
  const std::size_t dh = width / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    Var qh = ad::slice_cols(q, h * dh, dh);
    Var kh = ad::slice_cols(k, h * dh, dh);
    Var vh = ad::slice_cols(v, h * dh, dh);
    Var weights = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), scale));
    outs.push_back(ad::matmul(weights, vh));
  }
  Var merged = heads == 1 ? outs[0] : ad::concat_cols(outs);
  return linear(p, prefix + ".o", merged);
}

}  // namespace cmkt::layers
