// ctxrnnt/gradcheck.cc

#include "ctxrnnt/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <string_view>

namespace ctxrnnt {

double RelativeError(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric),
                           kRelativeErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct Probe {
  double value;
  std::vector<bool> relu_active;
};

Probe Evaluate(const std::function<Var(Graph &)> &build, const ParameterStore &store) {
  Graph g(&store);
  Probe p{build(g).value()[0], {}};
  for (std::size_t id = 0; id < g.size(); ++id) {
    if (std::string_view(g.op_name(id)) != "relu") continue;
    for (double v : g.value(id).data()) p.relu_active.push_back(v > 0.0);
  }
  return p;
}

}  // namespace

GradCheckReport CheckGradients(const std::function<Var(Graph &)> &build,
                               ParameterStore &store, const GradCheckOptions &options) {
  const auto &numeric_build = options.numeric_build ? options.numeric_build : build;
  const double step = options.step;
  ValueAndGrad analytic = EvaluateWithGradients(build, store);
  GradCheckReport report;
  for (const auto &name : store.names()) {
    auto it = analytic.gradients.find(name);
    if (it == analytic.gradients.end()) continue;  // not used by the graph
    auto data = store.MutableData(name);
    std::size_t n = std::min(data.size(), options.max_entries_per_param);
    for (std::size_t i = 0; i < n; ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      Probe plus = Evaluate(numeric_build, store);
      data[i] = saved - step;
      Probe minus = Evaluate(numeric_build, store);
      data[i] = saved;
      ++report.entries_checked;
      if (plus.relu_active != minus.relu_active) {
        ++report.kinks_skipped;
        continue;
      }
      double numeric = (plus.value - minus.value) / (2.0 * step);
      double a = it->second[i];
      double err = RelativeError(a, numeric);
      if (report.worst_parameter.empty() || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

GradCheckReport CheckGradients(const std::function<Var(Graph &)> &build,
                               ParameterStore &store, double step,
                               std::size_t max_entries_per_param) {
  GradCheckOptions o;
  o.step = step;
  o.max_entries_per_param = max_entries_per_param;
  return CheckGradients(build, store, o);
}

}  // namespace ctxrnnt
