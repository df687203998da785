#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcqr/autodiff.hpp"

namespace mcqr {

/// Raised when the function under check gives different values for the same
/// parameters.
class NondeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst() const;
  bool passed(double tol) const { return worst() < tol; }
};

/// Records a scalar loss on the given tape from the current parameter values.
using ScalarFn = std::function<DTensor(Tape&)>;

/// Compares tape gradients with central differences for every element of
/// every parameter. Relative error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Parameter*>& params,
                           double step = 1e-4);

}  // namespace mcqr
