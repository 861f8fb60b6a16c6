#ifndef PRIUS_SPECIAL_HPP
#define PRIUS_SPECIAL_HPP

#include <cmath>
#include <stdexcept>

namespace prius {

/// psi(x) for x > 0: upward recurrence to x >= 10, then the asymptotic Bernoulli series.
inline double digamma(double x) {
    if (!(x > 0.0)) throw std::domain_error("digamma defined here for x > 0 only");
    double acc = 0.0;
    while (x < 10.0) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // B_{2n} / (2n) coefficients: 1/12, -1/120, 1/252, -1/240, 1/132, -691/32760, 1/12
    const double series =
        inv2 * (1.0 / 12 -
                inv2 * (1.0 / 120 -
                        inv2 * (1.0 / 252 -
                                inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12.0))))));
    return acc + std::log(x) - 0.5 * inv - series;
}

/// psi'(x) for x > 0.
inline double trigamma(double x) {
    if (!(x > 0.0)) throw std::domain_error("trigamma defined here for x > 0 only");
    double acc = 0.0;
    while (x < 10.0) {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    const double series =
        1.0 / 6 -
        inv2 * (1.0 / 30 -
                inv2 * (1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * 7.0 / 6)))));
    return acc + inv + 0.5 * inv2 + inv * inv2 * series;
}

inline double log_gamma(double x) { return std::lgamma(x); }

}  // namespace prius

#endif  // PRIUS_SPECIAL_HPP
