#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "cmkt/acoustic_encoder.hpp"
#include "cmkt/config.hpp"
#include "cmkt/ctc.hpp"
#include "cmkt/io.hpp"
#include "cmkt/text_branch.hpp"

namespace cmkt {

struct Utterance {
  std::string id;
  Tensor2D features;  // frames x d_in
  std::string transcript;
};

// Loss terms of one utterance or a batch mean.
struct LossBundle {
  double ctc = 0.0;
  std::map<int, double> align;  // attachment block -> L_align
  std::map<int, double> eot;    // attachment block -> L_EOT
  double total = 0.0;

  double align_sum() const;
  double eot_sum() const;
};

// total = lambda * ctc + (1 - lambda) * w * sum_i (align_i + eot_i); the sum is
// over attachment blocks, empty when the text branch is disabled.
LossBundle total_loss(double ctc, std::map<int, double> align, std::map<int, double> eot, double lambda, double w);
bool recomposition_holds(const LossBundle& b, double lambda, double w, double tol = 1e-6);

struct Model {
  ModelConfig config;
  text::Vocabulary vocab;
  ParameterTable params;

  // All parameters of both branches, seeded per name from `seed`.
  static Model create(const ModelConfig& config, text::Vocabulary vocab, std::uint64_t seed);
  static Model from_checkpoint(const io::Checkpoint& ckpt);
  io::Checkpoint to_checkpoint() const;
};

bool is_text_parameter(const std::string& name);

struct UtteranceForward {
  LossBundle bundle;
  Var total;
  acoustic::AcousticState acoustic;
};

// Training-time forward pass: acoustic stack, text branch at each attachment
// block (when enabled), CTC on the posteriors and the composite loss.
UtteranceForward forward_utterance(ParamBinder& p, const Model& model, const text::TargetProvider* targets,
                                   const Utterance& utt);

// Inference path: acoustic branch only.
Tensor2D infer_log_posteriors(const Model& model, const Tensor2D& features);
ctc::Hypothesis decode(const Model& model, const Tensor2D& features);

// Frames left after subsampling and whether the CTC target fits in them.
bool ctc_feasible(const Model& model, const Utterance& utt);

}  // namespace cmkt
