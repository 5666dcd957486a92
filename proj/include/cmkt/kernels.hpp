#pragma once

#include "cmkt/tensor.hpp"

// Dense matrix kernels. `serial::` holds the reference loops used by tests;
// the top-level functions split rows across OpenMP threads for large problems
// and produce bit-identical results (each output element keeps the serial
// summation order).
namespace cmkt::kernels {

namespace serial {
// out = a * b
void gemm_nn(const Tensor2D& a, const Tensor2D& b, Tensor2D& out);
// out = a * b^T
void gemm_nt(const Tensor2D& a, const Tensor2D& b, Tensor2D& out);
// out += a^T * b
void gemm_tn_acc(const Tensor2D& a, const Tensor2D& b, Tensor2D& out);
}  // namespace serial

void gemm_nn(const Tensor2D& a, const Tensor2D& b, Tensor2D& out);
void gemm_nt(const Tensor2D& a, const Tensor2D& b, Tensor2D& out);
void gemm_tn_acc(const Tensor2D& a, const Tensor2D& b, Tensor2D& out);

// Work (multiply-adds) below which the threaded kernels run serially.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

// Threads used by batch-level loops. 0 means the OpenMP default.
void set_num_threads(int n);
int num_threads();

}  // namespace cmkt::kernels
