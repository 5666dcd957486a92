#include "cmkt/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmkt/errors.hpp"

namespace cmkt::ctc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::size_t required_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

bool feasible(std::size_t frames, std::span<const int> target) { return frames >= required_frames(target); }

CtcResult ctc_loss_with_grad(const Tensor2D& log_probs, std::span<const int> target) {
  const std::size_t T = log_probs.rows();
  const std::size_t V = log_probs.cols();
  for (int id : target)
    if (id == kBlankId || id < 0 || static_cast<std::size_t>(id) >= V)
      throw ShapeError("ctc_loss: target id " + std::to_string(id) + " is blank or outside vocabulary");
  CtcResult res;
  res.grad = Tensor2D(T, V);
  if (T == 0 || !feasible(T, target)) {
    res.loss = std::numeric_limits<double>::infinity();
    res.feasible = false;
    return res;
  }

  const std::size_t S = 2 * target.size() + 1;
  std::vector<int> ext(S, kBlankId);
  for (std::size_t u = 0; u < target.size(); ++u) ext[2 * u + 1] = target[u];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != kBlankId && ext[s] != ext[s - 2]; };

  Tensor2D alpha(T, S, kNegInf), beta(T, S, kNegInf);
  alpha(0, 0) = log_probs(0, static_cast<std::size_t>(ext[0]));
  if (S > 1) alpha(0, 1) = log_probs(0, static_cast<std::size_t>(ext[1]));
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kNegInf ? kNegInf : a + log_probs(t, static_cast<std::size_t>(ext[s]));
    }

  beta(T - 1, S - 1) = log_probs(T - 1, static_cast<std::size_t>(ext[S - 1]));
  if (S > 1) beta(T - 1, S - 2) = log_probs(T - 1, static_cast<std::size_t>(ext[S - 2]));
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta(t + 1, s);
      if (s + 1 < S) b = log_add(b, beta(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, beta(t + 1, s + 2));
      beta(t, s) = b == kNegInf ? kNegInf : b + log_probs(t, static_cast<std::size_t>(ext[s]));
    }

  double log_p = alpha(T - 1, S - 1);
  if (S > 1) log_p = log_add(log_p, alpha(T - 1, S - 2));
  res.loss = -log_p;

  // alpha_t(s) + beta_t(s) counts the emission at t twice; divide one out.
  std::vector<double> acc(V);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(acc.begin(), acc.end(), kNegInf);
    for (std::size_t s = 0; s < S; ++s) {
      const auto k = static_cast<std::size_t>(ext[s]);
      acc[k] = log_add(acc[k], alpha(t, s) + beta(t, s));
    }
    for (std::size_t k = 0; k < V; ++k)
      if (acc[k] != kNegInf) res.grad(t, k) = -std::exp(acc[k] - log_probs(t, k) - log_p);
  }
  return res;
}

double ctc_loss(const Tensor2D& log_probs, std::span<const int> target) {
  return ctc_loss_with_grad(log_probs, target).loss;
}

Var ctc_loss(Var log_probs, std::span<const int> target) {
  CtcResult r = ctc_loss_with_grad(log_probs.value(), target);
  Tensor2D value(1, 1, r.loss);
  const auto li = log_probs.id;
  return log_probs.graph->record(std::move(value), {log_probs},
                                 [li, grad = std::move(r.grad)](Graph& g, std::uint32_t self) {
                                   const double up = g.grad(self)[0];
                                   Tensor2D& d = g.grad_buffer(li);
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * grad[i];
                                 });
}

Hypothesis greedy_decode(const Tensor2D& log_probs) {
  Hypothesis h;
  int prev = -1;
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    auto row = log_probs.row(t);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[best]) best = k;
    h.score += row[best];
    const int id = static_cast<int>(best);
    if (id != prev && id != kBlankId) h.ids.push_back(id);
    prev = id;
  }
  return h;
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double cer(std::span<const int> reference, std::span<const int> hypothesis) {
  if (reference.empty()) throw DataError("cer: empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

}  // namespace cmkt::ctc
