#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmkt/model.hpp"

namespace cmkt {

// peak * min(step / warmup, sqrt(warmup / step)): linear warmup, then inverse-sqrt decay.
double lr_schedule(std::int64_t step, std::int64_t warmup, double peak);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

struct TrainState {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  ParameterTable params;
  ParameterTable m;
  ParameterTable v;
  std::uint64_t seed = 0;
  std::int64_t skipped_steps = 0;  // non-finite gradients
};

// One bias-corrected Adam update. Parameters missing from `grads` see a zero
// gradient. Non-finite gradients skip the step (returns false). Shape
// mismatches throw ShapeError.
bool adam_step(TrainState& state, const GradTable& grads, double lr, const AdamOptions& opt = {});

// Scales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(GradTable& grads, double max_norm);

// Parameter-wise arithmetic mean. Throws CheckpointError on name/shape mismatch.
ParameterTable average_parameters(std::span<const ParameterTable> tables);
ParameterTable average_checkpoints(const std::vector<std::filesystem::path>& paths);

struct SynthOptions {
  std::uint64_t seed = 1;
  // Token mean vectors come from their own seed so that datasets drawn with
  // different `seed`s share one acoustic "voice".
  std::uint64_t means_seed = 1234;
  int num_utts = 32;
  int vocab_size = 8;
  int feature_dim = 16;
  int frames_min = 2;
  int frames_max = 4;
  int tokens_min = 2;
  int tokens_max = 10;
  double noise_std = 0.1;
  // Adjacent equal tokens form one unbroken run of identical frames, which no
  // model can split; off by default.
  bool allow_repeats = false;
};

// Token k is the character 'a'+k (then 'A'...), up to 52 tokens.
Tensor2D synth_token_means(const SynthOptions& opt);
std::vector<Utterance> synth_utterances(const SynthOptions& opt);
// Writes <dir>/feats/<utt>.feat and <dir>/manifest.tsv; returns the manifest entries.
std::vector<io::ManifestEntry> synth_dataset(const SynthOptions& opt, const std::filesystem::path& dir);

std::vector<Utterance> load_dataset(const std::filesystem::path& manifest);
text::Vocabulary vocabulary_for(const std::vector<Utterance>& utts);

enum class Execution { kSerial, kParallel };

struct BatchResult {
  LossBundle mean;
  GradTable grads;  // gradient of the batch-mean total loss
  int used = 0;
  int skipped = 0;  // CTC-infeasible utterances
};

// Per-utterance graphs, gradients summed in utterance order, so the parallel
// path is bit-identical to the serial reference.
BatchResult compute_batch(const Model& model, const text::TargetProvider* targets, std::span<const Utterance> batch,
                          Execution exec = Execution::kParallel);

// One metrics-log line. Epoch summaries carry `epoch` and `train_cer`.
struct MetricRecord {
  std::int64_t step = 0;
  std::optional<std::int64_t> epoch;
  double lr = 0.0;
  double ctc = 0.0;
  double align = 0.0;
  double eot = 0.0;
  double total = 0.0;
  std::optional<double> train_cer;
  bool recomposition_ok = true;

  std::string to_json() const;
};

struct FitOptions {
  std::int64_t max_steps = 0;  // 0: run all epochs
  Execution exec = Execution::kParallel;
  // Called after every epoch with the current state.
  std::function<void(const TrainState&, const MetricRecord&)> on_epoch;
  std::function<void(const MetricRecord&)> on_record;
};

struct FitResult {
  TrainState state;
  std::vector<MetricRecord> log;
  ParameterTable averaged;  // mean of the last avg_last epoch snapshots
  std::int64_t skipped_utterances = 0;
  std::int64_t empty_batches = 0;
};

// Trains `model` on `data`. Throws std::logic_error if the loss recomposition
// identity fails on any step.
FitResult fit(const Model& model, const std::vector<Utterance>& data, const FitOptions& options = {});

// Corpus CER: total edit distance over total reference length.
double corpus_cer(const Model& model, const std::vector<Utterance>& data, Execution exec = Execution::kParallel);

}  // namespace cmkt
