// ctxrnnt/autodiff.h
//
// Tape-based reverse-mode differentiation over 2-D double tensors.
//
// A Graph records every op applied to its Vars in creation order. Backward()
// walks the tape in reverse, so accumulation order is fixed and results are
// reproducible bit for bit. Broadcasting is limited to adding a row vector to
// every row of a matrix (AddRow); everything else requires equal shapes.

#ifndef CTXRNNT_AUTODIFF_H_
#define CTXRNNT_AUTODIFF_H_

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctxrnnt/tensor.h"

namespace ctxrnnt {

// Numerically safe log(sum(exp(values))). Throws UsageError on empty input.
double LogSumExp(std::span<const double> values);

// Row-wise log-softmax of a vector. Output exponentiates to a distribution.
std::vector<double> LogSoftmax(std::span<const double> logits);

class Graph;

// Handle to a node on a Graph's tape.
struct Var {
  Graph *graph = nullptr;
  std::size_t id = 0;

  const Tensor &value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Graph {
 public:
  // Backward closure: reads the node's gradient and accumulates into parents.
  using BackwardFn = std::function<void(Graph &, std::size_t self)>;

  // `store` may be null when the graph binds no parameters.
  explicit Graph(const ParameterStore *store = nullptr) : store_(store) {}
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  // Leaf bound to a named parameter. Repeated calls return the same node.
  Var Param(const std::string &name);
  // Leaf that never receives gradient.
  Var Constant(Tensor value);

  // Records a new node. Throws NumericError naming `op` if `value` has a
  // non-finite entry.
  Var AddNode(const char *op, Tensor value, std::vector<std::size_t> parents,
              BackwardFn backward);

  const Tensor &value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  const char *op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, allocated on first use.
  Tensor &grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.shape().empty(); }

  // Seeds d(root)/d(root) = 1 (root must hold one element) and runs the tape
  // backwards. Returns gradients for every bound parameter.
  std::map<std::string, Tensor> Backward(Var root);

  const ParameterStore *store() const { return store_; }

 private:
  struct Node {
    const char *op;
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool needs_grad = false;
    Tensor grad;
  };

  const ParameterStore *store_;
  std::deque<Node> nodes_;  // deque keeps value references stable
  std::map<std::string, std::size_t> param_ids_;
};

// Result of evaluate-with-gradients.
struct ValueAndGrad {
  double value = 0.0;
  std::map<std::string, Tensor> gradients;
};

// Builds the expression with `build` on a fresh graph over `store`, then
// differentiates it. `build` must return a single-element Var.
ValueAndGrad EvaluateWithGradients(
    const std::function<Var(Graph &)> &build, const ParameterStore &store);

namespace ad {

Var Add(Var a, Var b);
Var Sub(Var a, Var b);
Var Mul(Var a, Var b);
Var Scale(Var a, double c);
// a (n x m) + row (1 x m) broadcast over rows.
Var AddRow(Var a, Var row);
Var MatMul(Var a, Var b);
// a (n x k) times transpose of b (m x k) -> n x m.
Var MatMulNT(Var a, Var b);
Var Tanh(Var a);
Var Sigmoid(Var a);
Var Relu(Var a);
Var LogSoftmaxRows(Var a);
// n x m -> n x 1.
Var LogSumExpRows(Var a);
// Normalizes each row to zero mean / unit variance, then applies gain and
// bias (both 1 x m).
Var LayerNormRows(Var x, Var gain, Var bias, double eps = 1e-5);
// Row-wise softmax. With `causal`, entry (i, j) for j > i is forced to an
// exact zero and scores there are never read.
Var MaskedSoftmaxRows(Var scores, bool causal);
Var SliceRows(Var a, std::size_t begin, std::size_t end);
Var SliceCols(Var a, std::size_t begin, std::size_t end);
Var GatherRows(Var a, std::vector<std::size_t> indices);
Var ConcatRows(const std::vector<Var> &parts);
Var ConcatCols(const std::vector<Var> &parts);
// Sum of all entries as a 1 x 1 tensor.
Var Sum(Var a);
// a (T x J), b (U x J) -> (T*U) x J with row t*U + u = a[t] + b[u].
Var PairSum(Var a, Var b);
// Per-channel 1-D convolution over rows of x (T x C) with a centered kernel
// (K x C), K odd, zero padded. Causal mode uses only the taps at or before
// the current row, so both modes share one kernel.
Var DepthwiseConv1d(Var x, Var kernel, bool causal);

}  // namespace ad

}  // namespace ctxrnnt

#endif  // CTXRNNT_AUTODIFF_H_
