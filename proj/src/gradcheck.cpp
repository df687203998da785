#include "mcqr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mcqr {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

namespace {
double evaluate(const ScalarFn& f) {
  Tape tape;
  return f(tape).value().item();
}
}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Parameter*>& params, double step) {
  require(step > 0.0 && step <= 1e-2, "grad_check: step must lie in (0, 1e-2]");

  std::size_t slots = 0;
  for (const Parameter* p : params) slots = std::max(slots, p->index + 1);
  std::vector<bool> seen(slots, false);
  for (const Parameter* p : params) {
    require(!seen[p->index], "grad_check: parameters must have distinct indices");
    seen[p->index] = true;
  }
  GradientBuffers analytic(slots);
  {
    Tape tape;
    DTensor loss = f(tape);
    tape.backward(loss, analytic);
  }
  const double base_a = evaluate(f);
  const double base_b = evaluate(f);
  if (base_a != base_b) {
    throw NondeterminismError("grad_check: two forward passes disagree (" +
                              std::to_string(base_a) + " vs " + std::to_string(base_b) + ")");
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter& param = *params[p];
    GradCheckEntry entry{param.name};
    for (std::size_t j = 0; j < param.value.size(); ++j) {
      const double saved = param.value[j];
      param.value[j] = saved + step;
      const double up = evaluate(f);
      param.value[j] = saved - step;
      const double down = evaluate(f);
      param.value[j] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const Tensor& g = analytic[param.index];
      const double a = g.empty() ? 0.0 : g[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
      entry.max_abs_analytic = std::max(entry.max_abs_analytic, std::abs(a));
      entry.max_abs_numeric = std::max(entry.max_abs_numeric, std::abs(numeric));
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace mcqr
