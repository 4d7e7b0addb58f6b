#include "perfect/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace perfect {

GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        std::span<const NamedTensor> params, double step,
                                        double tol, double abs_floor) {
  std::vector<Tensor> leaves;
  std::vector<bool> saved_flags;
  for (const auto& p : params) {
    leaves.push_back(p.tensor);
    saved_flags.push_back(p.tensor.requires_grad());
    leaves.back().set_requires_grad(true);
    leaves.back().zero_grad();
  }

  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.size(), 0.0);
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    GradCheckEntry entry;
    entry.name = params[p].name;
    auto values = leaves[p].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double plus = loss_fn().item();
      values[i] = original - step;
      const double minus = loss_fn().item();
      values[i] = original;

      const double numeric = (plus - minus) / (2.0 * step);
      const double exact = analytic[p][i];
      const double diff = std::abs(exact - numeric);
      const double scale = std::max(std::abs(exact), std::abs(numeric));
      entry.max_abs_error = std::max(entry.max_abs_error, diff);
      if (scale > abs_floor) entry.max_rel_error = std::max(entry.max_rel_error, diff / scale);
      if (diff > std::max(tol * scale, abs_floor)) ++entry.flagged;
      ++entry.checked;
    }
    report.passed = report.passed && entry.flagged == 0;
    report.worst_rel_error = std::max(report.worst_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }

  for (std::size_t p = 0; p < leaves.size(); ++p) {
    leaves[p].zero_grad();
    leaves[p].set_requires_grad(saved_flags[p]);
  }
  return report;
}

}  // namespace perfect
