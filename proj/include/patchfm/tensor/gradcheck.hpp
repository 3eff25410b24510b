#pragma once

#include "patchfm/tensor/array.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace patchfm {

struct ValueAndGrad {
    double value = 0;
    Array<double> grad;
};

/// Compares the analytic gradient returned by `f` at `point` against central
/// finite differences and returns max |analytic - numeric| / (|numeric| + 1e-12).
/// `coords` restricts the check to a subset of flat indices.
template <class F>
double finite_diff_check(F&& f, const Array<double>& point, double step,
                         const std::optional<std::vector<std::size_t>>& coords = std::nullopt) {
    ValueAndGrad base = f(point);
    if (!std::isfinite(base.value)) throw std::domain_error("finite_diff_check: non-finite value at point");
    if (base.grad.shape() != point.shape()) throw std::invalid_argument("finite_diff_check: gradient shape mismatch");
    std::vector<std::size_t> idx;
    if (coords) {
        idx = *coords;
    } else {
        idx.resize(point.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    }
    double worst = 0;
    Array<double> probe = point;
    for (std::size_t i : idx) {
        const double x0 = point[i];
        probe[i] = x0 + step;
        const double fp = f(probe).value;
        probe[i] = x0 - step;
        const double fm = f(probe).value;
        probe[i] = x0;
        if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(base.grad[i]))
            throw std::domain_error("finite_diff_check: non-finite value at coordinate " + std::to_string(i));
        const double numeric = (fp - fm) / (2 * step);
        worst = std::max(worst, std::abs(base.grad[i] - numeric) / (std::abs(numeric) + 1e-12));
    }
    return worst;
}

}  // namespace patchfm
