#pragma once

#include <cmath>
#include <numbers>

#include "holoseg/core.hpp"

namespace holoseg {

/// Digamma psi(x) for x > 0. Recurrence shift to x >= 10, then the asymptotic
/// series in 1/x^2 (Bernoulli coefficients through x^-14).
/// Relative error <= 1e-10 on [1e-3, 1e6].
inline double digamma(double x) {
    if (!(x > 0.0)) throw DomainError("digamma: requires x > 0");
    double shift = 0.0;
    while (x < 10.0) {
        shift -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // ln x - 1/(2x) - sum B_2n / (2n x^{2n})
    double series = inv2 * (1.0 / 12.0 +
                    inv2 * (-1.0 / 120.0 +
                    inv2 * (1.0 / 252.0 +
                    inv2 * (-1.0 / 240.0 +
                    inv2 * (1.0 / 132.0 +
                    inv2 * (-691.0 / 32760.0 +
                    inv2 * (1.0 / 12.0)))))));
    return shift + std::log(x) - 0.5 * inv - series;
}

/// Trigamma psi'(x) for x > 0, same scheme as digamma.
inline double trigamma(double x) {
    if (!(x > 0.0)) throw DomainError("trigamma: requires x > 0");
    double shift = 0.0;
    while (x < 10.0) {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    double series = 1.0 +
                    inv * (0.5 +
                    inv * (1.0 / 6.0 +
                    inv2 * (-1.0 / 30.0 +
                    inv2 * (1.0 / 42.0 +
                    inv2 * (-1.0 / 30.0 +
                    inv2 * (5.0 / 66.0 +
                    inv2 * (-691.0 / 2730.0)))))));
    return shift + inv * series;
}

namespace detail {

// Lanczos g=7, n=9 coefficients.
inline constexpr double kLanczos[9] = {
    0.99999999999980993,      676.5203681218851,     -1259.1392167224028,
    771.32342877765313,       -176.61502916214059,   12.507343278686905,
    -0.13857109526572012,     9.9843695780195716e-6, 1.5056327351493116e-7};

}  // namespace detail

/// ln Gamma(x) for x > 0 via the Lanczos approximation, reflected below 0.5.
inline double lgamma(double x) {
    if (!(x > 0.0)) throw DomainError("lgamma: requires x > 0");
    if (x < 0.5) {
        // ln Gamma(x) = ln(pi / sin(pi x)) - ln Gamma(1 - x)
        return std::log(std::numbers::pi / std::sin(std::numbers::pi * x)) - lgamma(1.0 - x);
    }
    const double z = x - 1.0;
    double acc = detail::kLanczos[0];
    for (int i = 1; i < 9; ++i) acc += detail::kLanczos[i] / (z + i);
    const double t = z + 7.5;
    return 0.5 * std::log(2.0 * std::numbers::pi) + (z + 0.5) * std::log(t) - t + std::log(acc);
}

/// softplus(x) = ln(1 + e^x), overflow- and underflow-safe.
template <typename S>
S softplus(S x) {
    if (x > S(30)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

/// d/dx softplus(x) = logistic(x).
template <typename S>
S softplus_derivative(S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    S e = std::exp(x);
    return e / (S(1) + e);
}

/// Inverse of softplus: y > 0 -> x with softplus(x) = y.
template <typename S>
S softplus_inverse(S y) {
    if (!(y > S(0))) throw DomainError("softplus_inverse: requires y > 0");
    if (y > S(30)) return y;
    return std::log(std::expm1(y));
}

template <typename S>
S sigmoid(S x) {
    return softplus_derivative(x);
}

}  // namespace holoseg
