#pragma once

#include <functional>
#include <vector>

#include "mtbirads/tensor.hpp"

namespace mtbr {

// Central finite-difference verification of analytic gradients.
// f evaluates a scalar loss from the parameter tensors; analytic holds
// d(loss)/d(param) in the same order and shapes as params.
// Returns the max over sampled coordinates of
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// An optional exclusion predicate (param index, flat index) skips
// coordinates, e.g. relu inputs at a kink.
struct GradCheckOptions {
    double eps = 1e-4;
    int max_coords = 200;
    uint64_t seed = 0;
    std::function<bool(size_t, size_t)> exclude;
};

double grad_check(const std::function<double(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> params, const std::vector<Tensor>& analytic,
                  const GradCheckOptions& opts = {});

}  // namespace mtbr
