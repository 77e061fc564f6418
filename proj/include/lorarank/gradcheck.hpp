#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "lorarank/ops.hpp"
#include "lorarank/tensor.hpp"

namespace lorarank {

// Central finite differences versus reverse-mode gradients. `f` must return a
// scalar tensor built from ops on the active tape. The analytic gradient is
// taken on a private tape; the difference quotients re-evaluate `f` with
// recording suspended, so the check stays independent of the backward rules
// it validates.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                double eps = 1e-5) {
    if (eps <= 0.0) throw ValueError("finite_diff_check: eps must be positive");

    const bool had_requires_grad = x.requires_grad();
    std::vector<double> analytic;
    {
        Tape::Scope scope;
        x.set_requires_grad(true);
        x.zero_grad();
        Tensor loss = f(x);
        if (loss.numel() != 1) {
            throw ShapeError("finite_diff_check: f must return a scalar, got " +
                             shape_str(loss.shape()));
        }
        scope.tape().backward(loss);
        analytic = x.has_grad() ? x.grad() : std::vector<double>(x.numel(), 0.0);
        x.zero_grad();
    }
    if (!had_requires_grad) {
        x.set_requires_grad(false);
        x.impl()->traced = false;
    }

    double max_rel = 0.0;
    {
        Tape::Scope scope;
        Tape::NoGrad guard;
        auto& xs = x.mut_data();
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double saved = xs[i];
            xs[i] = saved + eps;
            const double up = f(x).item();
            xs[i] = saved - eps;
            const double down = f(x).item();
            xs[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double denom = std::max(std::abs(analytic[i]), 1e-8);
            max_rel = std::max(max_rel, std::abs(fd - analytic[i]) / denom);
        }
    }
    return max_rel;
}

}  // namespace lorarank
