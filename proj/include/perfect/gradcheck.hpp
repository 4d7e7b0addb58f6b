#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "perfect/tensor.hpp"

namespace perfect {

struct GradCheckEntry {
  std::string name;
  // max |analytic − numeric| / max(|analytic|, |numeric|) over entries whose
  // gradient magnitude is above the absolute floor.
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  // Entries with |analytic − numeric| > max(tol · scale, abs_floor).
  std::size_t flagged = 0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;
  double worst_rel_error = 0.0;
};

// Compares backward() gradients of a deterministic scalar function against
// central differences f(θ+h) − f(θ−h) / 2h, one coordinate at a time. The
// params must be leaves; their values are restored on return.
GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        std::span<const NamedTensor> params, double step,
                                        double tol, double abs_floor = 1e-6);

}  // namespace perfect
