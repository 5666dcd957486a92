#pragma once

#include <vector>

#include "cmkt/autodiff.hpp"

// Entropy-regularized optimal transport between a text sequence (rows) and an
// acoustic sequence (columns), solved by a fixed number of Sinkhorn sweeps in
// log space. With zero sweeps and a trailing row normalization the coupling is
// exactly row-softmax(-C / alpha), i.e. scaled dot-product cross-attention.
namespace cmkt::ot {

struct SinkhornOptions {
  double alpha = 1.0;
  int iterations = 3;
  bool final_row_norm = true;
};

// Row/column sums recorded after every normalization of a Sinkhorn run.
struct SinkhornTrace {
  enum class Kind { kRows, kCols };
  struct Step {
    Kind kind;
    std::vector<double> row_sums;
    std::vector<double> col_sums;
  };
  std::vector<Step> steps;
};

// Cost matrix, l_t x l_a.
struct CostMatrix {
  Tensor2D C;
};

struct TransportPlan {
  Tensor2D gamma;  // l_t x l_a, nonnegative
  CostMatrix cost;
  double alpha = 1.0;
  int iterations = 0;
  bool final_row_normalized = true;
  SinkhornTrace trace;
};

// Graph form of a plan: log-coupling and coupling nodes.
struct PlanVars {
  Var log_gamma;
  Var gamma;
};

struct CostOptions {
  bool scaled = true;       // divide by sqrt(d_k)
  bool normalized = false;  // standardize each projected row first, bounding |C| by sqrt(d_k)
};

// C = -(Z W_Z)(H W_H)^T, optionally scaled and row-normalized.
Var cost_matrix(Var Z, Var H, Var W_Z, Var W_H, const CostOptions& options = {});
CostMatrix cost_matrix(const Tensor2D& Z, const Tensor2D& H, const Tensor2D& W_Z, const Tensor2D& W_H,
                       const CostOptions& options = {});

// gamma0 = exp(-C / alpha); K times gamma <- F_c(F_r(gamma)); optional trailing F_r.
// Throws ConfigError for alpha <= 0 or K < 0, NumericalError on non-finite output.
PlanVars sinkhorn(Var C, const SinkhornOptions& options, SinkhornTrace* trace = nullptr);
TransportPlan sinkhorn(const CostMatrix& C, const SinkhornOptions& options);

// gamma * H.
Var transport_apply(Var gamma, Var H);
Tensor2D transport_apply(const TransportPlan& plan, const Tensor2D& H);

// sum_ij gamma_ij C_ij + alpha * gamma_ij log gamma_ij (log guarded at 1e-30).
Var eot_loss(Var gamma, Var C, double alpha);
double eot_loss(const TransportPlan& plan);
double eot_loss(const Tensor2D& gamma, const Tensor2D& C, double alpha);

}  // namespace cmkt::ot
