#include "cmkt/kernels.hpp"

#include <omp.h>

#include <atomic>

#include "cmkt/errors.hpp"

namespace cmkt::kernels {

namespace {

std::atomic<int> g_threads{0};

void check_nn(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  if (a.cols() != b.rows()) throw ShapeError("gemm: " + a.shape_string() + " * " + b.shape_string());
  if (out.rows() != a.rows() || out.cols() != b.cols()) out = Tensor2D(a.rows(), b.cols());
}

void check_nt(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  if (a.cols() != b.cols()) throw ShapeError("gemm_nt: " + a.shape_string() + " * T(" + b.shape_string() + ")");
  if (out.rows() != a.rows() || out.cols() != b.rows()) out = Tensor2D(a.rows(), b.rows());
}

void check_tn(const Tensor2D& a, const Tensor2D& b, const Tensor2D& out) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols())
    throw ShapeError("gemm_tn: T(" + a.shape_string() + ") * " + b.shape_string() + " into " + out.shape_string());
}

inline void nn_row(const Tensor2D& a, const Tensor2D& b, Tensor2D& out, std::size_t i) {
  const std::size_t n = b.cols();
  double* __restrict o = out.row(i).data();
  for (std::size_t j = 0; j < n; ++j) o[j] = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double aik = a(i, k);
    const double* __restrict br = b.row(k).data();
    for (std::size_t j = 0; j < n; ++j) o[j] += aik * br[j];
  }
}

inline void nt_row(const Tensor2D& a, const Tensor2D& b, Tensor2D& out, std::size_t i) {
  auto ar = a.row(i);
  for (std::size_t j = 0; j < b.rows(); ++j) {
    auto br = b.row(j);
    double s = 0.0;
    for (std::size_t k = 0; k < ar.size(); ++k) s += ar[k] * br[k];
    out(i, j) = s;
  }
}

// Row i of a^T b: sum over r of a(r, i) * b(r, :).
inline void tn_row(const Tensor2D& a, const Tensor2D& b, Tensor2D& out, std::size_t i) {
  const std::size_t n = out.cols();
  double* __restrict o = out.row(i).data();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double ari = a(r, i);
    const double* __restrict br = b.row(r).data();
    for (std::size_t j = 0; j < n; ++j) o[j] += ari * br[j];
  }
}

bool go_parallel(std::size_t work) { return work >= kParallelThreshold && !omp_in_parallel(); }

}  // namespace

namespace serial {

void gemm_nn(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  check_nn(a, b, out);
  for (std::size_t i = 0; i < a.rows(); ++i) nn_row(a, b, out, i);
}

void gemm_nt(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  check_nt(a, b, out);
  for (std::size_t i = 0; i < a.rows(); ++i) nt_row(a, b, out, i);
}

void gemm_tn_acc(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  check_tn(a, b, out);
  for (std::size_t i = 0; i < a.cols(); ++i) tn_row(a, b, out, i);
}

}  // namespace serial

void gemm_nn(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  check_nn(a, b, out);
  const auto m = static_cast<std::ptrdiff_t>(a.rows());
  if (!go_parallel(a.rows() * a.cols() * b.cols())) {
    for (std::ptrdiff_t i = 0; i < m; ++i) nn_row(a, b, out, static_cast<std::size_t>(i));
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) nn_row(a, b, out, static_cast<std::size_t>(i));
}

void gemm_nt(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  check_nt(a, b, out);
  const auto m = static_cast<std::ptrdiff_t>(a.rows());
  if (!go_parallel(a.rows() * a.cols() * b.rows())) {
    for (std::ptrdiff_t i = 0; i < m; ++i) nt_row(a, b, out, static_cast<std::size_t>(i));
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) nt_row(a, b, out, static_cast<std::size_t>(i));
}

void gemm_tn_acc(const Tensor2D& a, const Tensor2D& b, Tensor2D& out) {
  check_tn(a, b, out);
  const auto m = static_cast<std::ptrdiff_t>(a.cols());
  if (!go_parallel(a.rows() * a.cols() * b.cols())) {
    for (std::ptrdiff_t i = 0; i < m; ++i) tn_row(a, b, out, static_cast<std::size_t>(i));
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) tn_row(a, b, out, static_cast<std::size_t>(i));
}

void set_num_threads(int n) { g_threads.store(n < 0 ? 0 : n); }

int num_threads() {
  const int n = g_threads.load();
  return n > 0 ? n : omp_get_max_threads();
}

}  // namespace cmkt::kernels
