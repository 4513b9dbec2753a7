#include "steerlab/tensor.hpp"

#include <cmath>
#include <string>

#include "steerlab/error.hpp"

namespace steerlab {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ValidationError("matrix payload has " + std::to_string(data_.size()) +
                          " values, expected " + std::to_string(rows_ * cols_));
  }
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ValidationError("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void matvec(const Matrix& m, std::span<const float> x, std::span<float> out) {
  if (x.size() != m.cols() || out.size() != m.rows()) {
    throw ValidationError("matvec: shape mismatch");
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const float* w = m.row(r).data();
    float acc = 0.0f;
    for (std::size_t c = 0; c < m.cols(); ++c) acc += w[c] * x[c];
    out[r] = acc;
  }
}

}  // namespace steerlab
