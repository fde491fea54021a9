#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "vpl/errors.hpp"
#include "vpl/params.hpp"
#include "vpl/tensor.hpp"

namespace vpl {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_coord = 0;
  std::size_t coords_checked = 0;
};

/// Central finite-difference oracle.
///
/// `f` evaluates the scalar objective at a full parameter assignment;
/// `analytic` holds the gradients under test, one tensor per parameter,
/// shape-matched. Per coordinate the error is
///   |analytic - (f(x+e) - f(x-e)) / 2e| / max(1, |analytic|).
/// `coord_filter(name, index)` can exclude coordinates sitting on a
/// non-smooth point (relu kinks); by default every coordinate is checked.
inline GradCheckResult finite_diff_check(
    const std::function<double(const ParamSet&)>& f, const ParamSet& params,
    const ParamSet& analytic, double eps,
    const std::function<bool(const std::string&, std::size_t)>& coord_filter =
        nullptr) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ContractError("finite_diff_check: eps " + std::to_string(eps) +
                        " outside [1e-7, 1e-3]");
  }
  GradCheckResult result;
  ParamSet work = params;
  for (const auto& [name, tensor] : params) {
    const Tensor& grad = analytic.at(name);
    require_same_shape(tensor, grad, "finite_diff_check");
    Tensor& slot = work.at(name);
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      if (coord_filter && !coord_filter(name, i)) continue;
      const double keep = slot[i];
      slot[i] = keep + eps;
      const double hi = f(work);
      slot[i] = keep - eps;
      const double lo = f(work);
      slot[i] = keep;
      if (!std::isfinite(hi) || !std::isfinite(lo)) {
        throw NumericError("finite_diff_check: non-finite evaluation at " +
                           name + "[" + std::to_string(i) + "]");
      }
      const double fd = (hi - lo) / (2.0 * eps);
      const double a = grad[i];
      const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
      ++result.coords_checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = name;
        result.worst_coord = i;
      }
    }
  }
  return result;
}

}  // namespace vpl
