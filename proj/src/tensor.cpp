#include "mcqr/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace mcqr {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

static void check_shape(const Shape& shape) {
  require(!shape.empty(), "tensor shape must have at least one axis");
  for (auto s : shape) require(s > 0, "tensor dimensions must be positive, got " + shape_str(shape));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  require(shape_size(shape_) == values_.size(),
          "shape " + shape_str(shape_) + " does not match " + std::to_string(values_.size()) +
              " values");
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  return shape_size(shape_) / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
  require(values_.size() == 1, "item() on a non-scalar tensor of shape " + shape_str(shape_));
  return values_[0];
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_size(shape) == values_.size(), "reshape to " + shape_str(shape) +
                                                   " from " + shape_str(shape_));
  return Tensor(std::move(shape), values_);
}

}  // namespace mcqr
