#pragma once
// Central finite-difference oracle for checking reverse-mode gradients.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

#include "linknet/tensor.hpp"

namespace linknet {

/// One parameter under test: its live value (perturbed in place and restored)
/// and the gradient reverse mode produced for it.
struct GradCheckTarget {
    std::string name;
    Tensor* value = nullptr;
    const Tensor* analytic = nullptr;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
};

/// Error per coordinate is |analytic - fd| / max(1, |fd|); the report holds the
/// maximum. `loss` re-evaluates the scalar objective from the current values.
template <class LossFn>
GradCheckReport finite_diff_check(LossFn&& loss, std::span<const GradCheckTarget> targets, double eps)
{
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
    GradCheckReport report;
    for (const auto& target : targets) {
        if (target.value->shape() != target.analytic->shape()) {
            throw DimensionError("finite_diff_check: gradient shape mismatch for " + target.name);
        }
        auto values = target.value->data();
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + eps;
            const double up = loss();
            values[k] = saved - eps;
            const double down = loss();
            values[k] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw std::domain_error("finite_diff_check: non-finite objective while perturbing " + target.name);
            }
            const double fd = (up - down) / (2.0 * eps);
            const double err = std::abs((*target.analytic)[k] - fd) / std::max(1.0, std::abs(fd));
            ++report.coordinates;
            if (err > report.max_rel_error || report.worst_param.empty()) {
                report.max_rel_error = err;
                report.worst_param = target.name;
                report.worst_index = k;
            }
        }
    }
    return report;
}

} // namespace linknet
