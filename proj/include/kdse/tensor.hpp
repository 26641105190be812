#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kdse/precision.hpp"

namespace kdse::inline KDSE_PRECISION {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor with shared storage. Copies are shallow; use
/// clone() for an independent buffer. reshape() returns a view on the same
/// storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> values);

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const;
  Index numel() const noexcept { return numel_; }
  bool empty() const noexcept { return storage_ == nullptr; }

  Real* data() noexcept { return storage_ ? storage_->data() : nullptr; }
  const Real* data() const noexcept { return storage_ ? storage_->data() : nullptr; }
  std::span<Real> values() noexcept { return {data(), static_cast<std::size_t>(numel_)}; }
  std::span<const Real> values() const noexcept {
    return {data(), static_cast<std::size_t>(numel_)};
  }

  Real& operator[](Index i) noexcept { return (*storage_)[static_cast<std::size_t>(i)]; }
  Real operator[](Index i) const noexcept { return (*storage_)[static_cast<std::size_t>(i)]; }
  Real& at(std::initializer_list<Index> idx);
  Real at(std::initializer_list<Index> idx) const;

  /// View with a new shape; one entry may be -1.
  Tensor reshape(Shape shape) const;
  Tensor clone() const;
  void fill(Real v);
  bool shares_storage(const Tensor& other) const noexcept {
    return storage_ && storage_ == other.storage_;
  }

 private:
  Index offset(std::initializer_list<Index> idx) const;

  Shape shape_;
  Index numel_ = 0;
  std::shared_ptr<std::vector<Real>> storage_;
};

}  // namespace kdse::inline KDSE_PRECISION
