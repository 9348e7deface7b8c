#pragma once

// Finite-difference gradient checking. Everything here runs in double: the
// caller evaluates its op at a double-precision point and hands us a closure
// that recomputes the scalar loss after we perturb one coordinate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pbkd {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;   // coordinates actually compared
    int skipped = 0;   // coordinates rejected by the skip predicate
};

// Compares the analytic gradient against central differences at the selected
// coordinates of `params`. `loss` is re-evaluated with single coordinates
// perturbed in place; the coordinate is restored afterwards. `skip` lets the
// caller exclude points where the op is not differentiable (ReLU kinks).
//
// Relative error per coordinate: |analytic - numeric| / max(1, |numeric|).
template <typename LossFn>
GradCheckResult gradient_check(LossFn&& loss, std::span<double> params,
                               std::span<const double> analytic,
                               std::span<const size_t> coords, double epsilon,
                               const std::function<bool(size_t)>& skip = nullptr) {
    if (epsilon < 1e-6 || epsilon > 1e-2)
        throw std::invalid_argument("gradient_check: epsilon " + std::to_string(epsilon) +
                                    " outside [1e-6, 1e-2]");
    if (analytic.size() != params.size())
        throw std::invalid_argument("gradient_check: analytic gradient length " +
                                    std::to_string(analytic.size()) + " vs " +
                                    std::to_string(params.size()) + " parameters");
    GradCheckResult r;
    for (size_t i : coords) {
        if (i >= params.size())
            throw std::out_of_range("gradient_check: coordinate " + std::to_string(i) +
                                    " out of range");
        if (skip && skip(i)) {
            ++r.skipped;
            continue;
        }
        const double saved = params[i];
        params[i] = saved + epsilon;
        const double up = loss();
        params[i] = saved - epsilon;
        const double down = loss();
        params[i] = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        r.max_rel_err = std::max(r.max_rel_err, rel);
        ++r.checked;
    }
    return r;
}

// Draws `count` distinct coordinates from [0, size) for spot checking. When
// size <= count every coordinate is returned.
inline std::vector<size_t> sample_coords(size_t size, size_t count, std::mt19937_64& rng) {
    std::vector<size_t> all(size);
    for (size_t i = 0; i < size; ++i) all[i] = i;
    if (size <= count) return all;
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(count);
    return all;
}

}  // namespace pbkd
