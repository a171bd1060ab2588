#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "gbnet/ops.hpp"

namespace gbnet {

template <typename S>
struct GradCheckResult {
    S max_rel_err = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;

    bool ok(S tol) const { return checked > 0 && max_rel_err <= tol; }
};

// Compares reverse-mode gradients of a scalar-valued function against central
// differences, element by element. Sites where the one-sided differences
// disagree (kinks: relu corners, max ties) are excluded rather than compared,
// since no finite-difference value is meaningful there.
//
// No single step fits every element: a step small enough to tame curvature
// (truncation error grows as h^2) drowns small gradients in roundoff, and
// vice versa. An element that disagrees at h is re-measured at h/10 and
// h/100 and keeps its best consistent reading; a genuinely wrong gradient
// disagrees at every step, so the retry cannot hide one.
//
// `f` must be a deterministic function of the inputs' data buffers and must
// produce a scalar tensor. Evaluations outside the taped pass run without an
// active tape, so they do not record.
template <typename S, typename F>
GradCheckResult<S> grad_check(F f, std::vector<Tensor<S>> inputs, S h = S(1e-5)) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    std::vector<std::vector<S>> analytic;
    {
        Tape<S> tape;
        Tensor<S> loss = f();
        tape.backward(loss);
    }
    for (auto& t : inputs) analytic.push_back(t.grad());

    auto eval = [&]() -> S { return f().item(); };
    const S base = eval();

    GradCheckResult<S> result;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& buf = inputs[t].data();
        for (std::size_t i = 0; i < buf.size(); ++i) {
            const S saved = buf[i];
            const S g = analytic[t][i];
            S best = std::numeric_limits<S>::infinity();
            bool measured = false;
            for (const S step : {h, h / 10, h / 100}) {
                buf[i] = saved + step;
                const S up = eval();
                buf[i] = saved - step;
                const S down = eval();
                buf[i] = saved;

                const S d_plus = (up - base) / step;
                const S d_minus = (base - down) / step;
                const S spread = std::abs(d_plus - d_minus);
                if (spread > S(1e-3) * std::max({std::abs(d_plus), std::abs(d_minus), S(1)}))
                    continue;  // kink inside this window; a narrower one may clear it
                measured = true;
                const S fd = (up - down) / (S(2) * step);
                // both below finite-difference resolution: agreement, not
                // error (e.g. a bias feeding train-mode BN has true gradient
                // exactly 0)
                if (std::abs(fd) < S(1e-7) && std::abs(g) < S(1e-7)) {
                    best = 0;
                    break;
                }
                best = std::min(
                    best, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), S(1e-8)}));
                if (best <= S(1e-6)) break;
            }
            if (!measured) {
                ++result.skipped;
                continue;
            }
            result.max_rel_err = std::max(result.max_rel_err, best);
            ++result.checked;
        }
    }
    return result;
}

}  // namespace gbnet
