#pragma once

#include <functional>

#include "refexp/param_store.hpp"

namespace refexp {

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn(want_grad)` must rebuild the computation from the current
/// parameter values and return the scalar loss; when `want_grad` is true it
/// must also run the backward pass so gradients land in `params`. Returns the
/// worst relative error max(|analytic - numeric|) / max(|analytic|, |numeric|,
/// 1e-8) over every parameter value. `epsilon` must lie in [1e-6, 1e-3].
double grad_check(ParamStore& params, const std::function<double(bool want_grad)>& loss_fn,
                  double epsilon);

}  // namespace refexp
