#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cmkt {

// Dense row-major matrix of doubles. This is the value type flowing through
// every module; gradients live on the autodiff graph, not here.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0);
  // Rejects a size mismatch always, and non-finite values when checked mode is on.
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Tensor2D from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor2D row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool all_finite() const;
  std::string shape_string() const;

  void fill(double v);
  Tensor2D transposed() const;

  bool requires_grad = false;

  friend bool operator==(const Tensor2D& a, const Tensor2D& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Checked mode rejects NaN/Inf when constructing from explicit values. On by default.
void set_checked_mode(bool on);
bool checked_mode();

double max_abs_diff(const Tensor2D& a, const Tensor2D& b);

// Sinusoidal position table: even columns sin, odd columns cos.
Tensor2D sinusoidal_positions(std::size_t length, std::size_t dim);

}  // namespace cmkt
