#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "mmvae/errors.hpp"
#include "mmvae/parameters.hpp"

namespace mmvae {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_entry;  // "name[i]"
  std::size_t checked = 0;
};

// Central-difference check of an analytic gradient. `loss` must be a pure
// deterministic function of `params` (freeze any noise before calling).
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
inline FiniteDiffReport finite_diff_check(const std::function<double(const ParameterSet&)>& loss,
                                          ParameterSet params, const GradMap& analytic,
                                          double eps = 1e-5) {
  require(eps > 0.0, "finite_diff: eps must be positive");
  FiniteDiffReport report;
  for (auto& e : params.entries()) {
    auto it = analytic.find(e.name);
    require(it != analytic.end(), "finite_diff: missing analytic gradient for " + e.name);
    require(it->second.size() == e.value.size(),
            "finite_diff: gradient size mismatch for " + e.name);
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double keep = e.value[i];
      e.value[i] = keep + eps;
      const double up = loss(params);
      e.value[i] = keep - eps;
      const double dn = loss(params);
      e.value[i] = keep;
      const double numeric = (up - dn) / (2.0 * eps);
      const double a = it->second[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_entry = e.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace mmvae
