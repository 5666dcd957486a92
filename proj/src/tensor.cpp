#include "cmkt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "cmkt/errors.hpp"

namespace cmkt {

namespace {
std::atomic<bool> g_checked{true};
}

void set_checked_mode(bool on) { g_checked.store(on); }
bool checked_mode() { return g_checked.load(); }

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows_ * cols_) {
    std::ostringstream os;
    os << "tensor of shape " << rows_ << "x" << cols_ << " given " << data_.size() << " values";
    throw ShapeError(os.str());
  }
  if (checked_mode() && !all_finite()) throw NumericalError("non-finite value in tensor construction");
}

Tensor2D Tensor2D::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows in Tensor2D::from_rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor2D(r, c, std::move(values));
}

Tensor2D Tensor2D::row_vector(std::span<const double> values) {
  return Tensor2D(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

bool Tensor2D::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor2D::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Tensor2D::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor2D Tensor2D::transposed() const {
  Tensor2D t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("max_abs_diff: " + a.shape_string() + " vs " + b.shape_string());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor2D sinusoidal_positions(std::size_t length, std::size_t dim) {
  Tensor2D pe(length, dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < dim) pe(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

}  // namespace cmkt
