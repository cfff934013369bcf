// ctxrnnt/autodiff.cc

#include "ctxrnnt/autodiff.h"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctxrnnt/errors.h"

namespace ctxrnnt {

double LogSumExp(std::span<const double> values) {
  if (values.empty()) throw UsageError("logsumexp of an empty vector");
  double m = *std::max_element(values.begin(), values.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> LogSoftmax(std::span<const double> logits) {
  if (logits.empty()) throw UsageError("log_softmax of an empty vector");
  // Shift first so equal logits map to exactly -log(n).
  double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - m;
  double log_norm = LogSumExp(out);
  for (double &v : out) v -= log_norm;
  return out;
}

const Tensor &Var::value() const { return graph->value(id); }

Var Graph::Param(const std::string &name) {
  auto it = param_ids_.find(name);
  if (it != param_ids_.end()) return Var{this, it->second};
  if (store_ == nullptr) throw UsageError("graph has no parameter store");
  Tensor value = store_->Get(name);
  std::size_t id = nodes_.size();
  nodes_.push_back(Node{"param", std::move(value), {}, nullptr, true, {}});
  param_ids_.emplace(name, id);
  return Var{this, id};
}

Var Graph::Constant(Tensor value) {
  std::size_t id = nodes_.size();
  nodes_.push_back(Node{"constant", std::move(value), {}, nullptr, false, {}});
  return Var{this, id};
}

Var Graph::AddNode(const char *op, Tensor value,
                   std::vector<std::size_t> parents, BackwardFn backward) {
  std::size_t id = nodes_.size();
  if (!value.AllFinite()) {
    throw NumericError(std::string("numeric overflow in op '") + op +
                       "' (node " + std::to_string(id) + ")");
  }
  bool needs = false;
  for (auto p : parents) needs = needs || nodes_[p].needs_grad;
  nodes_.push_back(Node{op, std::move(value), std::move(parents),
                        std::move(backward), needs, {}});
  return Var{this, id};
}

Tensor &Graph::grad(std::size_t id) {
  Node &n = nodes_[id];
  if (n.grad.shape().empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

std::map<std::string, Tensor> Graph::Backward(Var root) {
  if (root.graph != this) throw UsageError("root belongs to another graph");
  if (value(root.id).size() != 1) {
    throw UsageError("backward root must be a scalar, got shape " +
                     ShapeToString(value(root.id).shape()));
  }
  grad(root.id)[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node &n = nodes_[i];
    if (!n.needs_grad || !n.backward || n.grad.shape().empty()) continue;
    n.backward(*this, i);
    if (!n.grad.AllFinite()) {
      throw NumericError(std::string("numeric overflow in gradient of op '") +
                         n.op + "' (node " + std::to_string(i) + ")");
    }
  }
  std::map<std::string, Tensor> out;
  for (const auto &[name, id] : param_ids_) {
    out.emplace(name, has_grad(id) ? nodes_[id].grad
                                   : Tensor(nodes_[id].value.shape(), 0.0));
  }
  return out;
}

ValueAndGrad EvaluateWithGradients(const std::function<Var(Graph &)> &build,
                                   const ParameterStore &store) {
  Graph g(&store);
  Var root = build(g);
  ValueAndGrad result;
  result.value = root.value()[0];
  result.gradients = g.Backward(root);
  return result;
}

namespace ad {
namespace {

void RequireSameGraph(Var a, Var b) {
  if (a.graph != b.graph) throw UsageError("vars belong to different graphs");
}

void RequireSameShape(const char *op, const Tensor &a, const Tensor &b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError(std::string(op) + ": shape mismatch " +
                     ShapeToString(a.shape()) + " vs " +
                     ShapeToString(b.shape()));
  }
}

// C += A (n x k) * B (k x m). Zero entries of A are skipped so rows of B
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

// C += A (n x k) * B (k x m).
void GemmAccumulate(std::span<const double> a, std::span<const double> b,
                    std::span<double> c, std::size_t n, std::size_t k,
                    std::size_t m) {
  MutMap(c.data(), n, m).noalias() +=
      ConstMap(a.data(), n, k) * ConstMap(b.data(), k, m);
}

// C += A (n x k) * B^T where B is (m x k).
void GemmNTAccumulate(std::span<const double> a, std::span<const double> b,
                      std::span<double> c, std::size_t n, std::size_t k,
                      std::size_t m) {
  MutMap(c.data(), n, m).noalias() +=
      ConstMap(a.data(), n, k) * ConstMap(b.data(), m, k).transpose();
}

// C += A^T * B where A is (n x k) and B is (n x m); C is (k x m).
void GemmTNAccumulate(std::span<const double> a, std::span<const double> b,
                      std::span<double> c, std::size_t n, std::size_t k,
                      std::size_t m) {
  MutMap(c.data(), k, m).noalias() +=
      ConstMap(a.data(), n, k).transpose() * ConstMap(b.data(), n, m);
}

template <typename F, typename DF>
Var Elementwise(const char *op, Var a, F f, DF df) {
  const Tensor &av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  std::size_t ai = a.id;
  return a.graph->AddNode(op, std::move(out), {ai}, [ai, df](Graph &g,
                                                             std::size_t self) {
    if (!g.needs_grad(ai)) return;
    const Tensor &x = g.value(ai);
    const Tensor &y = g.value(self);
    const Tensor &gy = g.grad(self);
    Tensor &gx = g.grad(ai);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * df(x[i], y[i]);
  });
}

}  // namespace

Var Add(Var a, Var b) {
  RequireSameGraph(a, b);
  RequireSameShape("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  std::size_t ai = a.id, bi = b.id;
  return a.graph->AddNode("add", std::move(out), {ai, bi},
                          [ai, bi](Graph &g, std::size_t self) {
                            const Tensor &gy = g.grad(self);
                            for (auto p : {ai, bi}) {
                              if (!g.needs_grad(p)) continue;
                              Tensor &gp = g.grad(p);
                              for (std::size_t i = 0; i < gy.size(); ++i)
                                gp[i] += gy[i];
                            }
                          });
}

Var Sub(Var a, Var b) { return Add(a, Scale(b, -1.0)); }

Var Mul(Var a, Var b) {
  RequireSameGraph(a, b);
  RequireSameShape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  std::size_t ai = a.id, bi = b.id;
  return a.graph->AddNode(
      "mul", std::move(out), {ai, bi}, [ai, bi](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        if (g.needs_grad(ai)) {
          Tensor &ga = g.grad(ai);
          const Tensor &bv = g.value(bi);
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (g.needs_grad(bi)) {
          Tensor &gb = g.grad(bi);
          const Tensor &av = g.value(ai);
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
        }
      });
}

Var Scale(Var a, double c) {
  return Elementwise(
      "scale", a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Var AddRow(Var a, Var row) {
  RequireSameGraph(a, row);
  const Tensor &av = a.value();
  const Tensor &rv = row.value();
  if (rv.size() != av.cols()) {
    throw UsageError("add_row: row of " + std::to_string(rv.size()) +
                     " values does not match " + std::to_string(av.cols()) +
                     " columns");
  }
  Tensor out = av;
  std::size_t n = av.rows(), m = av.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += rv[j];
  std::size_t ai = a.id, ri = row.id;
  return a.graph->AddNode("add_row", std::move(out), {ai, ri},
                          [ai, ri, n, m](Graph &g, std::size_t self) {
                            const Tensor &gy = g.grad(self);
                            if (g.needs_grad(ai)) {
                              Tensor &ga = g.grad(ai);
                              for (std::size_t i = 0; i < gy.size(); ++i)
                                ga[i] += gy[i];
                            }
                            if (g.needs_grad(ri)) {
                              Tensor &gr = g.grad(ri);
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < m; ++j)
                                  gr[j] += gy[i * m + j];
                            }
                          });
}

Var MatMul(Var a, Var b) {
  RequireSameGraph(a, b);
  const Tensor &av = a.value();
  const Tensor &bv = b.value();
  std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  if (bv.rows() != k) {
    throw UsageError("matmul: inner dimensions differ " +
                     ShapeToString(av.shape()) + " x " +
                     ShapeToString(bv.shape()));
  }
  Tensor out = Tensor::Matrix(n, m);
  GemmAccumulate(av.data(), bv.data(), out.mutable_data(), n, k, m);
  std::size_t ai = a.id, bi = b.id;
  return a.graph->AddNode(
      "matmul", std::move(out), {ai, bi},
      [ai, bi, n, k, m](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        if (g.needs_grad(ai)) {
          // dA = dC * B^T
          GemmNTAccumulate(gy.data(), g.value(bi).data(),
                           g.grad(ai).mutable_data(), n, m, k);
        }
        if (g.needs_grad(bi)) {
          // dB = A^T * dC
          GemmTNAccumulate(g.value(ai).data(), gy.data(),
                           g.grad(bi).mutable_data(), n, k, m);
        }
      });
}

Var MatMulNT(Var a, Var b) {
  RequireSameGraph(a, b);
  const Tensor &av = a.value();
  const Tensor &bv = b.value();
  std::size_t n = av.rows(), k = av.cols(), m = bv.rows();
  if (bv.cols() != k) {
    throw UsageError("matmul_nt: inner dimensions differ " +
                     ShapeToString(av.shape()) + " x " +
                     ShapeToString(bv.shape()) + "^T");
  }
  Tensor out = Tensor::Matrix(n, m);
  GemmNTAccumulate(av.data(), bv.data(), out.mutable_data(), n, k, m);
  std::size_t ai = a.id, bi = b.id;
  return a.graph->AddNode(
      "matmul_nt", std::move(out), {ai, bi},
      [ai, bi, n, k, m](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        if (g.needs_grad(ai)) {
          // dA = dC * B
          GemmAccumulate(gy.data(), g.value(bi).data(),
                         g.grad(ai).mutable_data(), n, m, k);
        }
        if (g.needs_grad(bi)) {
          // dB = dC^T * A
          GemmTNAccumulate(gy.data(), g.value(ai).data(),
                           g.grad(bi).mutable_data(), n, m, k);
        }
      });
}

Var Tanh(Var a) {
  return Elementwise(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var Sigmoid(Var a) {
  return Elementwise(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var Relu(Var a) {
  return Elementwise(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var LogSoftmaxRows(Var a) {
  const Tensor &av = a.value();
  std::size_t n = av.rows(), m = av.cols();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    auto row = LogSoftmax(av.row(i));
    std::copy(row.begin(), row.end(), out.mutable_row(i).begin());
  }
  std::size_t ai = a.id;
  return a.graph->AddNode("log_softmax", std::move(out), {ai},
                          [ai, n, m](Graph &g, std::size_t self) {
                            if (!g.needs_grad(ai)) return;
                            const Tensor &y = g.value(self);
                            const Tensor &gy = g.grad(self);
                            Tensor &gx = g.grad(ai);
                            for (std::size_t i = 0; i < n; ++i) {
                              double s = 0.0;
                              for (std::size_t j = 0; j < m; ++j)
                                s += gy[i * m + j];
                              for (std::size_t j = 0; j < m; ++j)
                                gx[i * m + j] +=
                                    gy[i * m + j] - std::exp(y[i * m + j]) * s;
                            }
                          });
}

Var LogSumExpRows(Var a) {
  const Tensor &av = a.value();
  std::size_t n = av.rows(), m = av.cols();
  Tensor out = Tensor::Matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = LogSumExp(av.row(i));
  std::size_t ai = a.id;
  return a.graph->AddNode("logsumexp", std::move(out), {ai},
                          [ai, n, m](Graph &g, std::size_t self) {
                            if (!g.needs_grad(ai)) return;
                            const Tensor &x = g.value(ai);
                            const Tensor &y = g.value(self);
                            const Tensor &gy = g.grad(self);
                            Tensor &gx = g.grad(ai);
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < m; ++j)
                                gx[i * m + j] +=
                                    gy[i] * std::exp(x[i * m + j] - y[i]);
                          });
}

Var LayerNormRows(Var x, Var gain, Var bias, double eps) {
  RequireSameGraph(x, gain);
  RequireSameGraph(x, bias);
  const Tensor &xv = x.value();
  std::size_t n = xv.rows(), m = xv.cols();
  if (gain.value().size() != m || bias.value().size() != m) {
    throw UsageError("layer_norm: gain/bias size does not match " +
                     std::to_string(m) + " columns");
  }
  Tensor normalized(xv.shape());
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += xv[i * m + j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double d = xv[i * m + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j)
      normalized[i * m + j] = (xv[i * m + j] - mean) * inv_std[i];
  }
  Tensor out(xv.shape());
  const Tensor &gv = gain.value();
  const Tensor &bv = bias.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out[i * m + j] = normalized[i * m + j] * gv[j] + bv[j];
  std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  return x.graph->AddNode(
      "layer_norm", std::move(out), {xi, gi, bi},
      [xi, gi, bi, n, m, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        if (g.needs_grad(gi)) {
          Tensor &gg = g.grad(gi);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
              gg[j] += gy[i * m + j] * normalized[i * m + j];
        }
        if (g.needs_grad(bi)) {
          Tensor &gb = g.grad(bi);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gb[j] += gy[i * m + j];
        }
        if (g.needs_grad(xi)) {
          const Tensor &gv = g.value(gi);
          Tensor &gx = g.grad(xi);
          double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              double d = gy[i * m + j] * gv[j];
              mean_d += d;
              mean_dx += d * normalized[i * m + j];
            }
            mean_d *= inv_m;
            mean_dx *= inv_m;
            for (std::size_t j = 0; j < m; ++j) {
              double d = gy[i * m + j] * gv[j];
              gx[i * m + j] +=
                  inv_std[i] * (d - mean_d - normalized[i * m + j] * mean_dx);
            }
          }
        }
      });
}

Var MaskedSoftmaxRows(Var scores, bool causal) {
  const Tensor &sv = scores.value();
  std::size_t n = sv.rows(), m = sv.cols();
  if (causal && n != m) {
    throw UsageError("masked_softmax: causal mask needs a square score matrix");
  }
  Tensor out(sv.shape(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t limit = causal ? i + 1 : m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, sv[i * m + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      double e = std::exp(sv[i * m + j] - mx);
      out[i * m + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < limit; ++j) out[i * m + j] /= s;
  }
  std::size_t si = scores.id;
  return scores.graph->AddNode(
      "masked_softmax", std::move(out), {si},
      [si, n, m, causal](Graph &g, std::size_t self) {
        if (!g.needs_grad(si)) return;
        const Tensor &p = g.value(self);
        const Tensor &gy = g.grad(self);
        Tensor &gx = g.grad(si);
        for (std::size_t i = 0; i < n; ++i) {
          std::size_t limit = causal ? i + 1 : m;
          double dot = 0.0;
          for (std::size_t j = 0; j < limit; ++j)
            dot += p[i * m + j] * gy[i * m + j];
          for (std::size_t j = 0; j < limit; ++j)
            gx[i * m + j] += p[i * m + j] * (gy[i * m + j] - dot);
        }
      });
}

Var SliceRows(Var a, std::size_t begin, std::size_t end) {
  const Tensor &av = a.value();
  std::size_t m = av.cols();
  if (begin >= end || end > av.rows()) {
    throw UsageError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") outside " +
                     std::to_string(av.rows()) + " rows");
  }
  std::vector<double> data(av.data().begin() + begin * m,
                           av.data().begin() + end * m);
  Tensor out({end - begin, m}, std::move(data));
  std::size_t ai = a.id;
  return a.graph->AddNode("slice_rows", std::move(out), {ai},
                          [ai, begin, m](Graph &g, std::size_t self) {
                            if (!g.needs_grad(ai)) return;
                            const Tensor &gy = g.grad(self);
                            Tensor &gx = g.grad(ai);
                            for (std::size_t i = 0; i < gy.size(); ++i)
                              gx[begin * m + i] += gy[i];
                          });
}

Var SliceCols(Var a, std::size_t begin, std::size_t end) {
  const Tensor &av = a.value();
  std::size_t n = av.rows(), m = av.cols();
  if (begin >= end || end > m) {
    throw UsageError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") outside " + std::to_string(m) +
                     " columns");
  }
  std::size_t w = end - begin;
  Tensor out = Tensor::Matrix(n, w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * m + begin + j];
  std::size_t ai = a.id;
  return a.graph->AddNode("slice_cols", std::move(out), {ai},
                          [ai, begin, n, m, w](Graph &g, std::size_t self) {
                            if (!g.needs_grad(ai)) return;
                            const Tensor &gy = g.grad(self);
                            Tensor &gx = g.grad(ai);
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < w; ++j)
                                gx[i * m + begin + j] += gy[i * w + j];
                          });
}

Var GatherRows(Var a, std::vector<std::size_t> indices) {
  const Tensor &av = a.value();
  std::size_t m = av.cols();
  if (indices.empty()) throw UsageError("gather_rows: no indices");
  Tensor out = Tensor::Matrix(indices.size(), m);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= av.rows()) {
      throw UsageError("gather_rows: index " + std::to_string(indices[r]) +
                       " outside " + std::to_string(av.rows()) + " rows");
    }
    auto src = av.row(indices[r]);
    std::copy(src.begin(), src.end(), out.mutable_row(r).begin());
  }
  std::size_t ai = a.id;
  return a.graph->AddNode(
      "gather_rows", std::move(out), {ai},
      [ai, m, indices = std::move(indices)](Graph &g, std::size_t self) {
        if (!g.needs_grad(ai)) return;
        const Tensor &gy = g.grad(self);
        Tensor &gx = g.grad(ai);
        for (std::size_t r = 0; r < indices.size(); ++r)
          for (std::size_t j = 0; j < m; ++j)
            gx[indices[r] * m + j] += gy[r * m + j];
      });
}

Var ConcatRows(const std::vector<Var> &parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  std::size_t m = parts[0].cols();
  std::size_t n = 0;
  std::vector<std::size_t> ids;
  for (const Var &p : parts) {
    RequireSameGraph(parts[0], p);
    if (p.cols() != m) throw UsageError("concat_rows: column count differs");
    n += p.rows();
    ids.push_back(p.id);
  }
  std::vector<double> data;
  data.reserve(n * m);
  for (const Var &p : parts) {
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  Tensor out({n, m}, std::move(data));
  std::vector<std::size_t> parents = ids;
  return parts[0].graph->AddNode(
      "concat_rows", std::move(out), std::move(parents),
      [ids](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        std::size_t offset = 0;
        for (auto p : ids) {
          std::size_t len = g.value(p).size();
          if (g.needs_grad(p)) {
            Tensor &gp = g.grad(p);
            for (std::size_t i = 0; i < len; ++i) gp[i] += gy[offset + i];
          }
          offset += len;
        }
      });
}

Var ConcatCols(const std::vector<Var> &parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  std::size_t n = parts[0].rows();
  std::size_t m = 0;
  std::vector<std::size_t> ids;
  for (const Var &p : parts) {
    RequireSameGraph(parts[0], p);
    if (p.rows() != n) throw UsageError("concat_cols: row count differs");
    m += p.cols();
    ids.push_back(p.id);
  }
  Tensor out = Tensor::Matrix(n, m);
  std::size_t c0 = 0;
  for (const Var &p : parts) {
    const Tensor &pv = p.value();
    std::size_t w = pv.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * m + c0 + j] = pv[i * w + j];
    c0 += w;
  }
  std::vector<std::size_t> parents = ids;
  return parts[0].graph->AddNode(
      "concat_cols", std::move(out), std::move(parents),
      [ids, n, m](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        std::size_t c0 = 0;
        for (auto p : ids) {
          std::size_t w = g.value(p).cols();
          if (g.needs_grad(p)) {
            Tensor &gp = g.grad(p);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < w; ++j)
                gp[i * w + j] += gy[i * m + c0 + j];
          }
          c0 += w;
        }
      });
}

Var Sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  std::size_t ai = a.id;
  return a.graph->AddNode("sum", Tensor({1, 1}, std::vector<double>{s}), {ai},
                          [ai](Graph &g, std::size_t self) {
                            if (!g.needs_grad(ai)) return;
                            double gy = g.grad(self)[0];
                            Tensor &gx = g.grad(ai);
                            for (std::size_t i = 0; i < gx.size(); ++i)
                              gx[i] += gy;
                          });
}

Var PairSum(Var a, Var b) {
  RequireSameGraph(a, b);
  const Tensor &av = a.value();
  const Tensor &bv = b.value();
  std::size_t t_len = av.rows(), u_len = bv.rows(), m = av.cols();
  if (bv.cols() != m) throw UsageError("pair_sum: column count differs");
  Tensor out = Tensor::Matrix(t_len * u_len, m);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t u = 0; u < u_len; ++u)
      for (std::size_t j = 0; j < m; ++j)
        out[(t * u_len + u) * m + j] = av[t * m + j] + bv[u * m + j];
  std::size_t ai = a.id, bi = b.id;
  return a.graph->AddNode(
      "pair_sum", std::move(out), {ai, bi},
      [ai, bi, t_len, u_len, m](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        if (g.needs_grad(ai)) {
          Tensor &ga = g.grad(ai);
          for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t u = 0; u < u_len; ++u)
              for (std::size_t j = 0; j < m; ++j)
                ga[t * m + j] += gy[(t * u_len + u) * m + j];
        }
        if (g.needs_grad(bi)) {
          Tensor &gb = g.grad(bi);
          for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t u = 0; u < u_len; ++u)
              for (std::size_t j = 0; j < m; ++j)
                gb[u * m + j] += gy[(t * u_len + u) * m + j];
        }
      });
}

Var DepthwiseConv1d(Var x, Var kernel, bool causal) {
  RequireSameGraph(x, kernel);
  const Tensor &xv = x.value();
  const Tensor &kv = kernel.value();
  std::size_t t_len = xv.rows(), c = xv.cols(), k = kv.rows();
  if (kv.cols() != c) throw UsageError("depthwise_conv: channel count differs");
  if (k % 2 == 0) throw UsageError("depthwise_conv: kernel size must be odd");
  // Output row t reads input rows t - pad + i for i in [0, k); causal mode
  // drops the taps that would read rows after t.
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t taps = causal ? (k + 1) / 2 : k;
  Tensor out = Tensor::Matrix(t_len, c);
  auto src_row = [&](std::size_t t, std::size_t i) -> std::ptrdiff_t {
    return static_cast<std::ptrdiff_t>(t + i) - pad;
  };
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t i = 0; i < taps; ++i) {
      std::ptrdiff_t s = src_row(t, i);
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_len)) continue;
      for (std::size_t j = 0; j < c; ++j)
        out[t * c + j] += kv[i * c + j] * xv[static_cast<std::size_t>(s) * c + j];
    }
  std::size_t xi = x.id, ki = kernel.id;
  return x.graph->AddNode(
      "depthwise_conv", std::move(out), {xi, ki},
      [xi, ki, t_len, c, taps, pad](Graph &g, std::size_t self) {
        const Tensor &gy = g.grad(self);
        const Tensor &xv = g.value(xi);
        const Tensor &kv = g.value(ki);
        bool gx_needed = g.needs_grad(xi), gk_needed = g.needs_grad(ki);
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t i = 0; i < taps; ++i) {
            std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + i) - pad;
            if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_len)) continue;
            std::size_t su = static_cast<std::size_t>(s);
            for (std::size_t j = 0; j < c; ++j) {
              if (gx_needed) g.grad(xi)[su * c + j] += gy[t * c + j] * kv[i * c + j];
              if (gk_needed) g.grad(ki)[i * c + j] += gy[t * c + j] * xv[su * c + j];
            }
          }
      });
}

}  // namespace ad
}  // namespace ctxrnnt
