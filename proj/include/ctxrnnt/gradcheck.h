// ctxrnnt/gradcheck.h
//
// Central finite-difference oracle for reverse-mode gradients.

#ifndef CTXRNNT_GRADCHECK_H_
#define CTXRNNT_GRADCHECK_H_

#include <cstddef>
#include <functional>
#include <limits>
#include <string>

#include "ctxrnnt/autodiff.h"

namespace ctxrnnt {

inline constexpr double kFiniteDifferenceStep = 1e-4;
// Denominator floor for relative error; keeps exact-zero gradients from
// dividing by zero.
inline constexpr double kRelativeErrorFloor = 1e-6;

// |a - b| / max(|a|, |b|, kRelativeErrorFloor).
double RelativeError(double analytic, double numeric);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  // Entries whose perturbation moved some ReLU input across zero. The
  // derivative does not exist there, so they are not compared.
  std::size_t kinks_skipped = 0;
};

struct GradCheckOptions {
  double step = kFiniteDifferenceStep;
  std::size_t max_entries_per_param = std::numeric_limits<std::size_t>::max();
  // Expression that is differenced numerically; `build` when empty. Lets a
  // caller compare against an independently composed oracle.
  std::function<Var(Graph &)> numeric_build;
};

// Compares EvaluateWithGradients against (f(p + h) - f(p - h)) / 2h for every
// entry of every parameter (or the first `max_entries_per_param` of each).
// `store` is perturbed in place and restored exactly before returning.
GradCheckReport CheckGradients(const std::function<Var(Graph &)> &build,
                               ParameterStore &store, const GradCheckOptions &options);
GradCheckReport CheckGradients(
    const std::function<Var(Graph &)> &build, ParameterStore &store,
    double step = kFiniteDifferenceStep,
    std::size_t max_entries_per_param = std::numeric_limits<std::size_t>::max());

}  // namespace ctxrnnt

#endif  // CTXRNNT_GRADCHECK_H_
