#include "efl/nn/tensor.hpp"

#include "efl/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace efl {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::annotation_incomplete: return "annotation-incomplete";
    case Errc::degenerate_annotation: return "degenerate-annotation";
    case Errc::empty_manifest: return "empty-manifest";
    case Errc::duplicate_key: return "duplicate-key";
    case Errc::split_mismatch: return "split-mismatch";
    case Errc::malformed_template: return "malformed-template";
    case Errc::validation: return "validation";
    case Errc::transport: return "transport";
    case Errc::training_diverged: return "training-diverged";
    case Errc::numeric: return "numeric";
    case Errc::config: return "config";
    case Errc::missing_prerequisite: return "missing-prerequisite";
    case Errc::io: return "io";
  }
  return "unknown";
}

}  // namespace efl

namespace efl::nn {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    EFL_CHECK(d >= 0, Errc::shape_mismatch, "negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  update_cols();
}

Tensor Tensor::adopt(std::vector<int> shape, Storage data) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  EFL_CHECK(shape_numel(t.shape_) == t.data_.size(), Errc::shape_mismatch,
            "data size " + std::to_string(t.data_.size()) + " does not match shape " + shape_to_string(t.shape_));
  t.update_cols();
  return t;
}

Tensor::Tensor(std::vector<int> shape, const std::vector<double>& data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  EFL_CHECK(shape_numel(shape_) == data_.size(), Errc::shape_mismatch,
            "data size " + std::to_string(data_.size()) + " does not match shape " + shape_to_string(shape_));
  update_cols();
}

void Tensor::update_cols() {
  if (shape_.empty()) {
    cols_ = 1;
    return;
  }
  std::size_t c = 1;
  for (std::size_t i = 1; i < shape_.size(); ++i) c *= static_cast<std::size_t>(shape_[i]);
  cols_ = static_cast<int>(c);
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  EFL_CHECK(shape_numel(shape) == data_.size(), Errc::shape_mismatch,
            "cannot reshape " + shape_str() + " to " + shape_to_string(shape));
  return adopt(std::move(shape), data_);
}

Tensor Tensor::rows_slice(int r0, int r1) const {
  EFL_CHECK(0 <= r0 && r0 <= r1 && r1 <= rows(), Errc::shape_mismatch, "row slice out of range");
  std::vector<int> shape = shape_;
  shape[0] = r1 - r0;
  const auto c = static_cast<std::size_t>(cols());
  Storage data(data_.begin() + static_cast<std::ptrdiff_t>(r0 * c),
                           data_.begin() + static_cast<std::ptrdiff_t>(r1 * c));
  return adopt(std::move(shape), std::move(data));
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace efl::nn
