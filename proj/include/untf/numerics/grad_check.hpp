#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "untf/numerics/tensor.hpp"

namespace untf {

struct CheckReport {
    std::vector<double> analytic;
    std::vector<double> numeric;
    double max_rel_error = 0;
    std::size_t worst_index = 0;
    bool pass = false;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning roundoff into huge relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central-difference check of a scalar function at x. Only the coordinates
/// in `coords` are probed (all of them when empty).
inline CheckReport grad_check(const std::function<TensorD(const TensorD&)>& f, const TensorD& x,
                              double step, double tol, std::vector<std::size_t> coords = {}) {
    if (coords.empty()) {
        coords.resize(x.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    }
    auto leaf = TensorD::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
    auto loss = f(leaf);
    backward(loss);
    CheckReport rep;
    for (std::size_t c : coords) {
        const double a = leaf.has_grad() ? leaf.grad()[c] : 0.0;
        auto probe = [&](double delta) {
            NoGradGuard guard;
            std::vector<double> v(x.values().begin(), x.values().end());
            v[c] += delta;
            return f(TensorD::from(x.shape(), std::move(v))).item();
        };
        const double n = (probe(step) - probe(-step)) / (2 * step);
        rep.analytic.push_back(a);
        rep.numeric.push_back(n);
        const double e = relative_error(a, n);
        if (e > rep.max_rel_error || rep.analytic.size() == 1) {
            rep.max_rel_error = e;
            rep.worst_index = c;
        }
    }
    rep.pass = rep.max_rel_error < tol;
    return rep;
}

}  // namespace untf
