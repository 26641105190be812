#include "kdse/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace kdse::inline KDSE_PRECISION {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill)
    : shape_(std::move(shape)),
      numel_(shape_numel(shape_)),
      storage_(std::make_shared<std::vector<Real>>(static_cast<std::size_t>(numel_), fill)) {}

Tensor::Tensor(Shape shape, std::vector<Real> values)
    : shape_(std::move(shape)), numel_(shape_numel(shape_)) {
  if (static_cast<Index>(values.size()) != numel_) {
    throw std::invalid_argument("tensor value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape_));
  }
  storage_ = std::make_shared<std::vector<Real>>(std::move(values));
}

Index Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " +
                            shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

Index Tensor::offset(std::initializer_list<Index> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw std::out_of_range("index rank mismatch for shape " + shape_str(shape_));
  }
  Index off = 0;
  std::size_t a = 0;
  for (Index i : idx) {
    const Index d = shape_[a++];
    if (i < 0 || i >= d) throw std::out_of_range("index out of range for shape " + shape_str(shape_));
    off = off * d + i;
  }
  return off;
}

Real& Tensor::at(std::initializer_list<Index> idx) { return (*this)[offset(idx)]; }
Real Tensor::at(std::initializer_list<Index> idx) const { return (*this)[offset(idx)]; }

Tensor Tensor::reshape(Shape shape) const {
  Index known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || numel_ % known != 0) {
      throw std::invalid_argument("reshape: cannot infer dimension for " + shape_str(shape));
    }
    shape[static_cast<std::size_t>(infer)] = numel_ / known;
  }
  if (shape_numel(shape) != numel_) {
    throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.numel_ = numel_;
  out.storage_ = storage_;
  return out;
}

Tensor Tensor::clone() const {
  Tensor out;
  out.shape_ = shape_;
  out.numel_ = numel_;
  if (storage_) out.storage_ = std::make_shared<std::vector<Real>>(*storage_);
  return out;
}

void Tensor::fill(Real v) {
  if (storage_) std::fill(storage_->begin(), storage_->end(), v);
}

}  // namespace kdse::inline KDSE_PRECISION
