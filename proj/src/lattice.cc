// ctxrnnt/lattice.cc

#include "ctxrnnt/lattice.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "ctxrnnt/autodiff.h"
#include "ctxrnnt/errors.h"

namespace ctxrnnt {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double LogAdd(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void CheckCompatible(const LatticeTensor &teacher,
                     const LatticeTensor &student) {
  if (teacher.T() != student.T() || teacher.U() != student.U() ||
      teacher.V() != student.V()) {
    std::ostringstream os;
    os << "lattice shapes differ: teacher (" << teacher.T() << ", "
       << teacher.U() + 1 << ", " << teacher.V() << ") vs student ("
       << student.T() << ", " << student.U() + 1 << ", " << student.V() << ")";
    throw UsageError(os.str());
  }
  if (teacher.labels() != student.labels()) {
    throw UsageError("teacher and student lattices have different labels");
  }
}

// Symbols of node (t, u) grouped into collapsed classes. Returns the class of
// symbol k: 0 = next label, 1 = blank, 2 = remainder. On the final row there
// is no next label and every label falls into the remainder.
int CollapsedClass(const LatticeTensor &l, std::size_t u, std::size_t k) {
  if (k == static_cast<std::size_t>(kBlank)) return 1;
  if (u < l.U() && static_cast<int>(k) == l.labels()[u]) return 0;
  return 2;
}

void CollapseNode(const LatticeTensor &l, std::size_t t, std::size_t u,
                  double mass[3]) {
  mass[0] = mass[1] = mass[2] = 0.0;
  for (std::size_t k = 0; k < l.V(); ++k)
    mass[CollapsedClass(l, u, k)] += std::exp(l.lp(t, u, k));
}

}  // namespace

LatticeTensor::LatticeTensor(std::size_t T, std::size_t V,
                             std::vector<double> log_probs,
                             std::vector<int> labels)
    : T_(T), V_(V), log_probs_(std::move(log_probs)),
      labels_(std::move(labels)) {
  if (T_ == 0) throw UsageError("lattice needs at least one frame");
  if (V_ < 2) throw UsageError("lattice vocabulary must include blank and a label");
  if (log_probs_.size() != T_ * (labels_.size() + 1) * V_) {
    throw UsageError("lattice has " + std::to_string(log_probs_.size()) +
                     " entries, expected T*(U+1)*V = " +
                     std::to_string(T_ * (labels_.size() + 1) * V_));
  }
  for (int y : labels_) {
    if (y < 1 || static_cast<std::size_t>(y) >= V_) {
      throw UsageError("label id " + std::to_string(y) +
                       " outside vocabulary [1, " + std::to_string(V_ - 1) +
                       "]");
    }
  }
}

LatticeTensor LatticeTensor::FromLogProbs(std::size_t T, std::size_t V,
                                          std::vector<double> log_probs,
                                          std::vector<int> labels) {
  LatticeTensor l(T, V, std::move(log_probs), std::move(labels));
  for (std::size_t t = 0; t < l.T(); ++t)
    for (std::size_t u = 0; u <= l.U(); ++u) {
      double z = LogSumExp(l.node(t, u));
      if (!(std::abs(z) <= 1e-10)) {
        throw UsageError("lattice node (" + std::to_string(t) + ", " +
                         std::to_string(u) + ") is not a log-distribution");
      }
    }
  return l;
}

LatticeTensor LatticeTensor::FromLogits(std::size_t T, std::size_t V,
                                        std::span<const double> logits,
                                        std::vector<int> labels) {
  std::size_t nodes = T * (labels.size() + 1);
  if (logits.size() != nodes * V) {
    throw UsageError("logit count " + std::to_string(logits.size()) +
                     " does not match lattice shape");
  }
  std::vector<double> lp(logits.size());
  for (std::size_t n = 0; n < nodes; ++n) {
    auto row = LogSoftmax(logits.subspan(n * V, V));
    std::copy(row.begin(), row.end(), lp.begin() + n * V);
  }
  return LatticeTensor(T, V, std::move(lp), std::move(labels));
}

RnntLossResult RnntLoss(const LatticeTensor &l) {
  const std::size_t T = l.T(), U = l.U(), U1 = U + 1;
  const auto &y = l.labels();
  RnntLossResult r;
  AlphaBetaTables &tb = r.tables;
  tb.T = T;
  tb.U1 = U1;
  tb.alpha.assign(T * U1, kNegInf);
  tb.beta.assign(T * U1, kNegInf);

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      if (t == 0 && u == 0) {
        tb.alpha[0] = 0.0;
        continue;
      }
      double from_blank =
          t > 0 ? tb.alpha[(t - 1) * U1 + u] + l.lp(t - 1, u, kBlank) : kNegInf;
      double from_label =
          u > 0 ? tb.alpha[t * U1 + u - 1] + l.lp(t, u - 1, y[u - 1]) : kNegInf;
      tb.alpha[t * U1 + u] = LogAdd(from_blank, from_label);
    }
  }

  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t u = U1; u-- > 0;) {
      if (t == T - 1 && u == U) {
        tb.beta[t * U1 + u] = l.lp(t, u, kBlank);
        continue;
      }
      double via_blank =
          t + 1 < T ? tb.beta[(t + 1) * U1 + u] + l.lp(t, u, kBlank) : kNegInf;
      double via_label =
          u < U ? tb.beta[t * U1 + u + 1] + l.lp(t, u, y[u]) : kNegInf;
      tb.beta[t * U1 + u] = LogAdd(via_blank, via_label);
    }
  }

  r.loss = -(tb.alpha[(T - 1) * U1 + U] + l.lp(T - 1, U, kBlank));
  return r;
}

double LatticePathCount(std::size_t T, std::size_t U) {
  // binomial(T - 1 + U, U), accumulated so intermediates stay exact for the
  // sizes the guard admits.
  double c = 1.0;
  for (std::size_t i = 1; i <= U; ++i) {
    c = c * static_cast<double>(T - 1 + i) / static_cast<double>(i);
  }
  return std::round(c);
}

double RnntLossBruteForce(const LatticeTensor &l,
                          std::uint64_t *paths_visited) {
  const std::size_t T = l.T(), U = l.U();
  double count = LatticePathCount(T, U);
  if (count > kBruteForcePathLimit) {
    std::ostringstream os;
    os << "brute-force enumeration refused: " << count
       << " paths exceeds the bound of " << kBruteForcePathLimit;
    throw UsageError(os.str());
  }
  std::vector<double> path_scores;
  path_scores.reserve(static_cast<std::size_t>(count));
  // Depth-first walk with an explicit stack of (t, u, accumulated log-prob).
  struct Frame {
    std::size_t t, u;
    double score;
  };
  std::vector<Frame> stack{{0, 0, 0.0}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    if (f.t == T - 1 && f.u == U) {
      path_scores.push_back(f.score + l.lp(f.t, f.u, kBlank));
      continue;
    }
    if (f.u < U) {
      stack.push_back({f.t, f.u + 1, f.score + l.lp(f.t, f.u, l.labels()[f.u])});
    }
    if (f.t + 1 < T) {
      stack.push_back({f.t + 1, f.u, f.score + l.lp(f.t, f.u, kBlank)});
    }
  }
  if (paths_visited) *paths_visited = path_scores.size();
  return -LogSumExp(path_scores);
}

std::vector<double> RnntGrad(const LatticeTensor &l) {
  return RnntGrad(l, RnntLoss(l).tables);
}

std::vector<double> RnntGrad(const LatticeTensor &l,
                             const AlphaBetaTables &tb) {
  const std::size_t T = l.T(), U = l.U(), U1 = U + 1, V = l.V();
  const double log_like = tb.beta[0];
  std::vector<double> grad(T * U1 * V, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      double a = tb.alpha[t * U1 + u];
      if (a == kNegInf) continue;
      // Posterior probability that a path visits (t, u).
      double occupancy = std::exp(a + tb.beta[t * U1 + u] - log_like);
      double *g = grad.data() + l.index(t, u, 0);
      for (std::size_t k = 0; k < V; ++k) {
        g[k] = occupancy * std::exp(l.lp(t, u, k));
      }
      // Outgoing transition posteriors.
      double blank_next = kNegInf;
      if (t + 1 < T) {
        blank_next = tb.beta[(t + 1) * U1 + u];
      } else if (u == U) {
        blank_next = 0.0;
      }
      if (blank_next != kNegInf) {
        g[kBlank] -= std::exp(a + l.lp(t, u, kBlank) + blank_next - log_like);
      }
      if (u < U) {
        int y = l.labels()[u];
        g[y] -= std::exp(a + l.lp(t, u, y) + tb.beta[t * U1 + u + 1] - log_like);
      }
    }
  }
  return grad;
}

double LatticeDistillation(const LatticeTensor &teacher,
                           const LatticeTensor &student, DistillMode mode) {
  CheckCompatible(teacher, student);
  double total = 0.0;
  for (std::size_t t = 0; t < teacher.T(); ++t) {
    for (std::size_t u = 0; u <= teacher.U(); ++u) {
      if (mode == DistillMode::kFull) {
        for (std::size_t k = 0; k < teacher.V(); ++k) {
          double lp_t = teacher.lp(t, u, k);
          double p = std::exp(lp_t);
          if (p == 0.0) continue;
          total += p * (lp_t - student.lp(t, u, k));
        }
      } else {
        double pm[3], qm[3];
        CollapseNode(teacher, t, u, pm);
        CollapseNode(student, t, u, qm);
        for (int c = 0; c < 3; ++c) {
          if (pm[c] == 0.0) continue;
          total += pm[c] * (std::log(std::max(pm[c], kDistillLogFloor)) -
                            std::log(std::max(qm[c], kDistillLogFloor)));
        }
      }
    }
  }
  return total;
}

std::vector<double> LatticeDistillationGrad(const LatticeTensor &teacher,
                                            const LatticeTensor &student,
                                            DistillMode mode) {
  CheckCompatible(teacher, student);
  const std::size_t V = teacher.V();
  std::vector<double> grad(student.log_probs().size(), 0.0);
  for (std::size_t t = 0; t < teacher.T(); ++t) {
    for (std::size_t u = 0; u <= teacher.U(); ++u) {
      double *g = grad.data() + student.index(t, u, 0);
      if (mode == DistillMode::kFull) {
        // d/dz_k of -sum_j p_j log q_j is q_k - p_k.
        for (std::size_t k = 0; k < V; ++k) {
          g[k] = std::exp(student.lp(t, u, k)) - std::exp(teacher.lp(t, u, k));
        }
      } else {
        double pm[3], qm[3];
        CollapseNode(teacher, t, u, pm);
        CollapseNode(student, t, u, qm);
        double ptotal = pm[0] + pm[1] + pm[2];
        // d/dz_k = q_k * (sum_c P_c - P_c(k) / Q_c(k)); a class whose mass is
        // under the log floor contributes no gradient through its own log.
        for (std::size_t k = 0; k < V; ++k) {
          int c = CollapsedClass(student, u, k);
          double ratio = qm[c] > kDistillLogFloor ? pm[c] / qm[c] : 0.0;
          double q = std::exp(student.lp(t, u, k));
          double through_floor = 0.0;
          for (int d = 0; d < 3; ++d) {
            if (qm[d] <= kDistillLogFloor) through_floor += pm[d];
          }
          g[k] = q * (ptotal - through_floor - ratio);
        }
      }
    }
  }
  return grad;
}

}  // namespace ctxrnnt
