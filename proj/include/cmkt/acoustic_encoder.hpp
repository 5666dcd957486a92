#pragma once

#include <functional>
#include <map>
#include <vector>

#include "cmkt/autodiff.hpp"
#include "cmkt/config.hpp"

// Acoustic branch: strided convolutional subsampling with sinusoidal positions,
// a stack of conformer-lite blocks, the shared adapter (FC2 projection to the
// text width and FC3 feedback fusion), and the CTC posterior head (FC1).
//
// Parameter names: "sub.<j>", "sub.proj", "enc.<i>.*", "adapter.*", "head.fc1".
namespace cmkt::acoustic {

struct AcousticState {
  std::vector<Var> G;          // G_0 .. G_{M_a}
  std::map<int, Var> H;        // attachment block -> FC2(G_i)
  std::map<int, Var> H_fused;  // attachment block -> G_i + LN(FC3(LN(H_i)))
  Var final;                   // input to FC1
};

// Called at each attachment block with (block index, H_i).
using AttachmentHook = std::function<void(int block, Var H)>;

// Frames left after `layers` kernel-3 stride-2 valid convolutions.
// Throws DataError when the input is too short to survive them.
std::size_t subsampled_length(std::size_t frames, int layers);

void init_parameters(const ModelConfig& cfg, int vocab_size, std::uint64_t seed, ParameterTable& table);

Var subsample_pe(ParamBinder& p, const EncoderConfig& enc, Var features);
Var encoder_block(ParamBinder& p, const ModelConfig& cfg, Var G_prev, int block);
Var adapter_project(ParamBinder& p, Var G);
Var adapter_fuse(ParamBinder& p, const ModelConfig& cfg, Var G, Var H);
Var output_logits(ParamBinder& p, Var H_final);
Var output_log_posteriors(ParamBinder& p, Var H_final);
// Row-softmax of FC1(H_final).
Var output_posteriors(ParamBinder& p, Var H_final);

AcousticState encode(ParamBinder& p, const ModelConfig& cfg, Var features, const AttachmentHook& hook = {});

}  // namespace cmkt::acoustic
