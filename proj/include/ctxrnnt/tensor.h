// ctxrnnt/tensor.h
//
// Dense row-major arrays of doubles and the named parameter store that backs
// every model in the project.

#ifndef CTXRNNT_TENSOR_H_
#define CTXRNNT_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ctxrnnt {

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape &shape);
std::string ShapeToString(const Shape &shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor Scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  // A 1 x n row vector.
  static Tensor Row(std::vector<double> values);

  const Shape &shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }

  // 2-D views. A rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double &operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double &at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> mutable_row(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  bool AllFinite() const;

  // Exact equality of shape and of every value.
  bool BitwiseEquals(const Tensor &other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

// Named tensors in insertion order. A single store instance is consulted by
// every forward pass; there is no per-mode copy.
class ParameterStore {
 public:
  ParameterStore() = default;

  // Throws UsageError if `name` already exists.
  void Add(const std::string &name, Tensor value);
  bool Contains(const std::string &name) const;

  const Tensor &Get(const std::string &name) const;
  // Replaces values in place. Shape must match the registered shape.
  void Assign(const std::string &name, std::span<const double> values);
  std::span<double> MutableData(const std::string &name);

  const std::vector<std::string> &names() const { return names_; }
  std::size_t NumParameters() const;

  // Incremented on every mutation; lets callers observe that an update is
  // visible without copying.
  std::uint64_t version() const { return version_; }
  void BumpVersion() { ++version_; }

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  bool BitwiseEquals(const ParameterStore &other) const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor> tensors_;
  std::uint64_t version_ = 0;
  std::int64_t step_ = 0;
};

}  // namespace ctxrnnt

#endif  // CTXRNNT_TENSOR_H_
