#include "refexp/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "refexp/errors.hpp"

namespace refexp {

double grad_check(ParamStore& params, const std::function<double(bool want_grad)>& loss_fn,
                  double epsilon) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw DomainError("finite-difference epsilon must lie in [1e-6, 1e-3]");
  }

  params.zero_grad();
  double base = loss_fn(true);
  if (!std::isfinite(base)) throw NumericError("loss is not finite at the checked point");

  // Snapshot analytic gradients before the probes overwrite them.
  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params.tensor(p);
    t.ensure_grad();
    analytic[p] = t.grad;
  }

  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params.tensor(p);
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      double saved = t.values[i];
      t.values[i] = saved + epsilon;
      double plus = loss_fn(false);
      t.values[i] = saved - epsilon;
      double minus = loss_fn(false);
      t.values[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("loss is not finite near the checked point");
      }
      double numeric = (plus - minus) / (2.0 * epsilon);
      double a = analytic[p][i];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace refexp
