#include "mtbirads/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtbr {

double grad_check(const std::function<double(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> params, const std::vector<Tensor>& analytic,
                  const GradCheckOptions& opts) {
    if (opts.eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
    if (params.size() != analytic.size())
        throw std::invalid_argument("grad_check: params/analytic count mismatch");

    std::vector<std::pair<size_t, size_t>> coords;
    size_t total = 0;
    for (const auto& t : params) total += t.size();
    for (size_t pi = 0; pi < params.size(); ++pi)
        for (size_t i = 0; i < params[pi].size(); ++i)
            if (!opts.exclude || !opts.exclude(pi, i)) coords.emplace_back(pi, i);

    if (static_cast<int>(coords.size()) > opts.max_coords) {
        RandomStream rng(opts.seed + 0x6772616463686bULL);
        // Fisher-Yates prefix: the first max_coords entries become the sample
        for (int i = 0; i < opts.max_coords; ++i) {
            size_t j = static_cast<size_t>(i) +
                       rng.next_u64() % (coords.size() - static_cast<size_t>(i));
            std::swap(coords[static_cast<size_t>(i)], coords[j]);
        }
        coords.resize(static_cast<size_t>(opts.max_coords));
    }

    double worst = 0.0;
    for (auto [pi, i] : coords) {
        const double saved = params[pi][i];
        params[pi][i] = saved + opts.eps;
        const double fp = f(params);
        params[pi][i] = saved - opts.eps;
        const double fm = f(params);
        params[pi][i] = saved;
        const double numeric = (fp - fm) / (2.0 * opts.eps);
        const double a = analytic[pi][i];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace mtbr
