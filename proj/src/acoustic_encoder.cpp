#include "cmkt/acoustic_encoder.hpp"

#include "cmkt/errors.hpp"
#include "cmkt/layers.hpp"
#include "cmkt/rng.hpp"

namespace cmkt::acoustic {

namespace {

constexpr std::size_t kSubsampleKernel = 3;
constexpr std::size_t kSubsampleStride = 2;

std::string block_prefix(int block) { return "enc." + std::to_string(block); }

}  // namespace

std::size_t subsampled_length(std::size_t frames, int layers) {
  std::size_t len = frames;
  for (int j = 0; j < layers; ++j) {
    if (len < kSubsampleKernel)
      throw DataError("input of " + std::to_string(frames) + " frames too short for " + std::to_string(layers) +
                      " subsampling layers");
    len = (len - kSubsampleKernel) / kSubsampleStride + 1;
  }
  if (len == 0) throw DataError("subsampling left no frames");
  return len;
}

void init_parameters(const ModelConfig& cfg, int vocab_size, std::uint64_t seed, ParameterTable& t) {
  const EncoderConfig& e = cfg.encoder;
  int width = e.d_in;
  for (int j = 0; j < e.subsample_layers; ++j) {
    layers::add_linear(t, "sub." + std::to_string(j), width * static_cast<int>(kSubsampleKernel),
                       e.subsample_channels, seed);
    width = e.subsample_channels;
  }
  layers::add_linear(t, "sub.proj", width, e.d_a, seed);

  for (int i = 1; i <= e.M_a; ++i) {
    const std::string b = block_prefix(i);
    layers::add_feed_forward(t, b + ".ffn1", e.d_a, e.ffn_dim, seed);
    layers::add_layer_norm(t, b + ".ln_ffn1", e.d_a);
    layers::add_attention(t, b + ".att", e.d_a, seed);
    layers::add_layer_norm(t, b + ".ln_att", e.d_a);
    t[b + ".conv.dw.w"] = layers::glorot_uniform(e.conv_kernel, e.d_a, derive_seed(seed, b + ".conv.dw.w"));
    t[b + ".conv.dw.b"] = Tensor2D(1, static_cast<std::size_t>(e.d_a));
    layers::add_linear(t, b + ".conv.pw", e.d_a, e.d_a, seed);
    layers::add_layer_norm(t, b + ".ln_conv", e.d_a);
    layers::add_feed_forward(t, b + ".ffn2", e.d_a, e.ffn_dim, seed);
    layers::add_layer_norm(t, b + ".ln_ffn2", e.d_a);
  }

  layers::add_linear(t, "adapter.fc2", e.d_a, e.d_t, seed);
  layers::add_layer_norm(t, "adapter.ln_h", e.d_t);
  layers::add_linear(t, "adapter.fc3", e.d_t, e.d_a, seed);
  layers::add_layer_norm(t, "adapter.ln_out", e.d_a);
  layers::add_linear(t, "head.fc1", e.d_a, vocab_size, seed);
}

Var subsample_pe(ParamBinder& p, const EncoderConfig& enc, Var features) {
  if (features.cols() != static_cast<std::size_t>(enc.d_in))
    throw ShapeError("subsample_pe: features have " + std::to_string(features.cols()) + " columns, expected " +
                     std::to_string(enc.d_in));
  subsampled_length(features.rows(), enc.subsample_layers);
  Var x = features;
  for (int j = 0; j < enc.subsample_layers; ++j) {
    Var windows = ad::strided_windows(x, kSubsampleKernel, kSubsampleStride);
    x = ad::relu(layers::linear(p, "sub." + std::to_string(j), windows));
  }
  x = layers::linear(p, "sub.proj", x);
  Var pe = p.graph().constant(sinusoidal_positions(x.rows(), x.cols()));
  return ad::add(x, pe);
}

Var encoder_block(ParamBinder& p, const ModelConfig& cfg, Var x, int block) {
  if (block < 1 || block > cfg.encoder.M_a) throw ConfigError("encoder_block: index out of range");
  const std::string b = block_prefix(block);
  const double eps = cfg.layer_norm_eps;
  x = layers::layer_norm(p, b + ".ln_ffn1", ad::add(x, ad::scale(layers::feed_forward(p, b + ".ffn1", x), 0.5)), eps);
  x = layers::layer_norm(p, b + ".ln_att", ad::add(x, layers::attention(p, b + ".att", x, x, cfg.encoder.heads)), eps);
  Var conv = ad::depthwise_conv_same(x, p(b + ".conv.dw.w"), p(b + ".conv.dw.b"));
  conv = layers::linear(p, b + ".conv.pw", ad::swish(conv));
  x = layers::layer_norm(p, b + ".ln_conv", ad::add(x, conv), eps);
  x = layers::layer_norm(p, b + ".ln_ffn2", ad::add(x, ad::scale(layers::feed_forward(p, b + ".ffn2", x), 0.5)), eps);
  return x;
}

Var adapter_project(ParamBinder& p, Var G) { return layers::linear(p, "adapter.fc2", G); }

Var adapter_fuse(ParamBinder& p, const ModelConfig& cfg, Var G, Var H) {
  if (G.rows() != H.rows()) throw ShapeError("adapter_fuse: length mismatch between G and H");
  Var h_hat = layers::linear(p, "adapter.fc3", layers::layer_norm(p, "adapter.ln_h", H, cfg.layer_norm_eps));
  return ad::add(G, layers::layer_norm(p, "adapter.ln_out", h_hat, cfg.layer_norm_eps));
}

Var output_logits(ParamBinder& p, Var H_final) { return layers::linear(p, "head.fc1", H_final); }

Var output_log_posteriors(ParamBinder& p, Var H_final) { return ad::log_softmax_rows(output_logits(p, H_final)); }

Var output_posteriors(ParamBinder& p, Var H_final) { return ad::softmax_rows(output_logits(p, H_final)); }

AcousticState encode(ParamBinder& p, const ModelConfig& cfg, Var features, const AttachmentHook& hook) {
  AcousticState st;
  Var x = subsample_pe(p, cfg.encoder, features);
  st.G.push_back(x);
  for (int i = 1; i <= cfg.encoder.M_a; ++i) {
    Var G = encoder_block(p, cfg, x, i);
    st.G.push_back(G);
    x = G;
    if (!cfg.encoder.is_attachment(i)) continue;
    Var H = adapter_project(p, G);
    st.H.emplace(i, H);
    if (hook) hook(i, H);
    Var fused = cfg.feedback_enabled ? adapter_fuse(p, cfg, G, H) : G;
    st.H_fused.emplace(i, fused);
    if (cfg.encoder.feed_forward_fused) x = fused;
  }
  auto last = st.H_fused.find(cfg.encoder.M_a);
  st.final = last != st.H_fused.end() ? last->second : st.G.back();
  return st;
}

}  // namespace cmkt::acoustic
