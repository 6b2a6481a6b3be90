#pragma once

#include <random>
#include <vector>

#include "untf/numerics/layers.hpp"

namespace untf::test {

inline std::vector<double> randn(std::size_t n, Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> g(0.0, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

inline TensorD rand_tensor(Shape shape, Rng& rng, bool grad = false, double sd = 1.0) {
    const auto n = numel(shape);
    return TensorD::from(std::move(shape), randn(n, rng, sd), grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
std::vector<double> as_double(std::span<const T> v) {
    return {v.begin(), v.end()};
}

}  // namespace untf::test
