#pragma once

#include <span>
#include <vector>

#include "cmkt/autodiff.hpp"

namespace cmkt::ctc {

inline constexpr int kBlankId = 0;

struct Hypothesis {
  std::vector<int> ids;  // no blanks
  double score = 0.0;    // sum of per-frame max log-probabilities
};

// Minimum frames for a target: one per label plus a separating blank per repeat.
std::size_t required_frames(std::span<const int> target);
bool feasible(std::size_t frames, std::span<const int> target);

struct CtcResult {
  double loss = 0.0;  // +inf when infeasible
  bool feasible = true;
  Tensor2D grad;      // d loss / d log_probs (zeros when infeasible)
};

// Negative log-likelihood over all blank-augmented alignments, via log-space
// forward and backward recursions. `log_probs` is frames x vocab.
CtcResult ctc_loss_with_grad(const Tensor2D& log_probs, std::span<const int> target);
double ctc_loss(const Tensor2D& log_probs, std::span<const int> target);
Var ctc_loss(Var log_probs, std::span<const int> target);

// Per-frame argmax (lowest id wins ties), collapse repeats, drop blanks.
Hypothesis greedy_decode(const Tensor2D& log_probs);

std::size_t edit_distance(std::span<const int> a, std::span<const int> b);
// Levenshtein(ref, hyp) / |ref|. Throws DataError for an empty reference.
double cer(std::span<const int> reference, std::span<const int> hypothesis);

}  // namespace cmkt::ctc
