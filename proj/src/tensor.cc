// ctxrnnt/tensor.cc

#include "ctxrnnt/tensor.h"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "ctxrnnt/errors.h"

namespace ctxrnnt {

std::size_t NumElements(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string ShapeToString(const Shape &shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(NumElements(shape_), fill) {
  for (auto e : shape_) {
    if (e == 0) throw UsageError("tensor extents must be positive");
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_) {
    if (e == 0) throw UsageError("tensor extents must be positive");
  }
  if (NumElements(shape_) != data_.size()) {
    throw UsageError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + ShapeToString(shape_));
  }
}

Tensor Tensor::Row(std::vector<double> values) {
  std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return 1;
  return NumElements(shape_) / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

bool Tensor::AllFinite() const {
  // v * 0 is NaN exactly when v is NaN or infinite; the sum vectorizes.
  double acc = 0.0;
  for (double v : data_) acc += v * 0.0;
  return acc == 0.0;
}

bool Tensor::BitwiseEquals(const Tensor &other) const {
  if (shape_ != other.shape_) return false;
  return data_.empty() ||
         std::memcmp(data_.data(), other.data_.data(),
                     data_.size() * sizeof(double)) == 0;
}

void ParameterStore::Add(const std::string &name, Tensor value) {
  if (tensors_.count(name)) {
    throw UsageError("duplicate parameter name '" + name + "'");
  }
  names_.push_back(name);
  tensors_.emplace(name, std::move(value));
  ++version_;
}

bool ParameterStore::Contains(const std::string &name) const {
  return tensors_.count(name) != 0;
}

const Tensor &ParameterStore::Get(const std::string &name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw UsageError("unknown parameter '" + name + "'");
  }
  return it->second;
}

void ParameterStore::Assign(const std::string &name,
                            std::span<const double> values) {
  auto dst = MutableData(name);
  if (dst.size() != values.size()) {
    throw UsageError("assignment to '" + name + "' changes its size");
  }
  std::copy(values.begin(), values.end(), dst.begin());
  ++version_;
}

std::span<double> ParameterStore::MutableData(const std::string &name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw UsageError("unknown parameter '" + name + "'");
  }
  return it->second.mutable_data();
}

std::size_t ParameterStore::NumParameters() const {
  std::size_t n = 0;
  for (const auto &[name, t] : tensors_) n += t.size();
  return n;
}

bool ParameterStore::BitwiseEquals(const ParameterStore &other) const {
  if (names_ != other.names_) return false;
  for (const auto &name : names_) {
    if (!Get(name).BitwiseEquals(other.Get(name))) return false;
  }
  return true;
}

}  // namespace ctxrnnt
