// ctxrnnt/lattice.h
//
// Transducer output-lattice math. A lattice holds, for every node (t, u) with
// t in [0, T) and u in [0, U], a log-distribution over V symbols. Symbol 0 is
// blank; labels are ids in [1, V-1].
//
// Paths start at (0, 0). Blank at (t, u) moves to (t+1, u); emitting label
// y[u] at (t, u) moves to (t, u+1). Every path ends with blank at (T-1, U).

#ifndef CTXRNNT_LATTICE_H_
#define CTXRNNT_LATTICE_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ctxrnnt {

inline constexpr int kBlank = 0;

class LatticeTensor {
 public:
  // Takes log-probabilities laid out as ((t * (U+1)) + u) * V + k. Throws
  // UsageError if a node does not normalize to within 1e-10, a label id is
  // outside [1, V-1], or an extent is zero.
  static LatticeTensor FromLogProbs(std::size_t T, std::size_t V,
                                    std::vector<double> log_probs,
                                    std::vector<int> labels);
  // Applies a log-softmax over the vocabulary axis of raw joint logits.
  static LatticeTensor FromLogits(std::size_t T, std::size_t V,
                                  std::span<const double> logits,
                                  std::vector<int> labels);

  std::size_t T() const { return T_; }
  std::size_t U() const { return labels_.size(); }
  std::size_t V() const { return V_; }
  const std::vector<int> &labels() const { return labels_; }
  std::span<const double> log_probs() const { return log_probs_; }

  std::size_t index(std::size_t t, std::size_t u, std::size_t k) const {
    return (t * (U() + 1) + u) * V_ + k;
  }
  double lp(std::size_t t, std::size_t u, std::size_t k) const {
    return log_probs_[index(t, u, k)];
  }
  std::span<const double> node(std::size_t t, std::size_t u) const {
    return std::span<const double>(log_probs_).subspan(index(t, u, 0), V_);
  }

 private:
  LatticeTensor(std::size_t T, std::size_t V, std::vector<double> log_probs,
                std::vector<int> labels);

  std::size_t T_ = 0;
  std::size_t V_ = 0;
  std::vector<double> log_probs_;
  std::vector<int> labels_;
};

// Forward and backward variables in log space, T x (U+1), row-major.
struct AlphaBetaTables {
  std::size_t T = 0;
  std::size_t U1 = 0;
  std::vector<double> alpha;
  std::vector<double> beta;

  double a(std::size_t t, std::size_t u) const { return alpha[t * U1 + u]; }
  double b(std::size_t t, std::size_t u) const { return beta[t * U1 + u]; }
};

struct RnntLossResult {
  double loss = 0.0;
  AlphaBetaTables tables;
};

// Negative log-likelihood of the label sequence by forward-backward.
RnntLossResult RnntLoss(const LatticeTensor &lattice);

inline constexpr double kBruteForcePathLimit = 1e6;

// Number of monotonic paths, binomial(T-1+U, U), as a double.
double LatticePathCount(std::size_t T, std::size_t U);

// Same quantity by enumerating every path and summing their probabilities.
// Refuses (UsageError) when the path count exceeds kBruteForcePathLimit.
// `paths_visited`, when given, receives the number of paths enumerated.
double RnntLossBruteForce(const LatticeTensor &lattice,
                          std::uint64_t *paths_visited = nullptr);

// Gradient of RnntLoss with respect to the pre-softmax logits that produced
// the lattice, laid out like log_probs().
std::vector<double> RnntGrad(const LatticeTensor &lattice);
std::vector<double> RnntGrad(const LatticeTensor &lattice,
                             const AlphaBetaTables &tables);

enum class DistillMode {
  kFull,        // KL over all V symbols at every node
  kCollapsed3,  // KL over {next label, blank, everything else}
};

inline constexpr double kDistillLogFloor = 1e-12;

// Sum over lattice nodes of KL(teacher || student). Shapes and labels must
// match (UsageError otherwise).
double LatticeDistillation(const LatticeTensor &teacher,
                           const LatticeTensor &student, DistillMode mode);

// Gradient of LatticeDistillation with respect to the student's pre-softmax
// logits. The teacher is held constant.
std::vector<double> LatticeDistillationGrad(const LatticeTensor &teacher,
                                            const LatticeTensor &student,
                                            DistillMode mode);

}  // namespace ctxrnnt

#endif  // CTXRNNT_LATTICE_H_
