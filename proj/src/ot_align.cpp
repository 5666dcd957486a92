#include "cmkt/ot_align.hpp"

#include <cmath>

#include "cmkt/errors.hpp"

namespace cmkt::ot {

namespace {

constexpr double kLogEps = 1e-30;

void record_step(SinkhornTrace* trace, SinkhornTrace::Kind kind, const Tensor2D& log_gamma) {
  if (trace == nullptr) return;
  SinkhornTrace::Step step{kind, std::vector<double>(log_gamma.rows(), 0.0),
                           std::vector<double>(log_gamma.cols(), 0.0)};
  for (std::size_t i = 0; i < log_gamma.rows(); ++i)
    for (std::size_t j = 0; j < log_gamma.cols(); ++j) {
      const double v = std::exp(log_gamma(i, j));
      step.row_sums[i] += v;
      step.col_sums[j] += v;
    }
  trace->steps.push_back(std::move(step));
}

}  // namespace

Var cost_matrix(Var Z, Var H, Var W_Z, Var W_H, const CostOptions& options) {
  if (Z.cols() != W_Z.rows() || H.cols() != W_H.rows() || W_Z.cols() != W_H.cols())
    throw ShapeError("cost_matrix: Z " + Z.value().shape_string() + ", H " + H.value().shape_string() + ", W_Z " +
                     W_Z.value().shape_string() + ", W_H " + W_H.value().shape_string());
  const double d_k = static_cast<double>(W_Z.cols());
  Var q = ad::matmul(Z, W_Z);
  Var k = ad::matmul(H, W_H);
  if (options.normalized) {
    Graph& g = *Z.graph;
    Var gain = g.constant(Tensor2D(1, W_Z.cols(), 1.0));
    Var bias = g.constant(Tensor2D(1, W_Z.cols()));
    q = ad::layer_norm(q, gain, bias);
    k = ad::layer_norm(k, gain, bias);
  }
  return ad::scale(ad::matmul_nt(q, k), options.scaled ? -1.0 / std::sqrt(d_k) : -1.0);
}

CostMatrix cost_matrix(const Tensor2D& Z, const Tensor2D& H, const Tensor2D& W_Z, const Tensor2D& W_H,
                       const CostOptions& options) {
  Graph g;
  return CostMatrix{cost_matrix(g.constant(Z), g.constant(H), g.constant(W_Z), g.constant(W_H), options).value()};
}

PlanVars sinkhorn(Var C, const SinkhornOptions& options, SinkhornTrace* trace) {
  if (!(options.alpha > 0.0)) throw ConfigError("sinkhorn: alpha must be positive");
  if (options.iterations < 0) throw ConfigError("sinkhorn: iteration count must be nonnegative");
  if (C.rows() == 0 || C.cols() == 0) throw ShapeError("sinkhorn: empty cost matrix");
  Var log_gamma = ad::scale(C, -1.0 / options.alpha);
  for (int k = 0; k < options.iterations; ++k) {
    log_gamma = ad::log_softmax_rows(log_gamma);
    record_step(trace, SinkhornTrace::Kind::kRows, log_gamma.value());
    log_gamma = ad::log_softmax_cols(log_gamma);
    record_step(trace, SinkhornTrace::Kind::kCols, log_gamma.value());
  }
  if (options.final_row_norm) {
    log_gamma = ad::log_softmax_rows(log_gamma);
    record_step(trace, SinkhornTrace::Kind::kRows, log_gamma.value());
  }
  Var gamma = ad::exp(log_gamma);
  if (!gamma.value().all_finite()) throw NumericalError("sinkhorn: non-finite coupling");
  return {log_gamma, gamma};
}

TransportPlan sinkhorn(const CostMatrix& C, const SinkhornOptions& options) {
  Graph g;
  TransportPlan plan;
  PlanVars pv = sinkhorn(g.constant(C.C), options, &plan.trace);
  plan.gamma = pv.gamma.value();
  plan.cost = C;
  plan.alpha = options.alpha;
  plan.iterations = options.iterations;
  plan.final_row_normalized = options.final_row_norm;
  return plan;
}

Var transport_apply(Var gamma, Var H) {
  if (gamma.cols() != H.rows())
    throw ShapeError("transport_apply: coupling " + gamma.value().shape_string() + " with H " +
                     H.value().shape_string());
  return ad::matmul(gamma, H);
}

Tensor2D transport_apply(const TransportPlan& plan, const Tensor2D& H) {
  Graph g;
  return transport_apply(g.constant(plan.gamma), g.constant(H)).value();
}

Var eot_loss(Var gamma, Var C, double alpha) {
  Var transport = ad::dot(gamma, C);
  if (alpha == 0.0) return transport;
  return ad::add(transport, ad::scale(ad::entropy_sum(gamma, kLogEps), alpha));
}

double eot_loss(const Tensor2D& gamma, const Tensor2D& C, double alpha) {
  Graph g;
  return eot_loss(g.constant(gamma), g.constant(C), alpha).scalar();
}

double eot_loss(const TransportPlan& plan) { return eot_loss(plan.gamma, plan.cost.C, plan.alpha); }

}  // namespace cmkt::ot
