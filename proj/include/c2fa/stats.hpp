#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "c2fa/common.hpp"

namespace c2fa {

namespace detail {

// Regularized lower incomplete gamma P(a, x), series for x < a+1 and
// continued fraction otherwise (Numerical Recipes style).
inline double gamma_p(double a, double x) {
    if (x < 0.0 || a <= 0.0) throw DomainError("gamma_p: invalid arguments");
    if (x == 0.0) return 0.0;
    const double gln = std::lgamma(a);
    if (x < a + 1.0) {
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-15) break;
        }
        return sum * std::exp(-x + a * std::log(x) - gln);
    }
    double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i <= 500; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

}  // namespace detail

// Upper-tail p-value of a chi-square statistic with the given degrees of
// freedom.
inline double chi_square_pvalue(double statistic, size_t dof) {
    if (dof == 0) throw DomainError("chi_square_pvalue: dof must be positive");
    if (statistic < 0.0) return 1.0;
    return 1.0 - detail::gamma_p(static_cast<double>(dof) / 2.0, statistic / 2.0);
}

// Pearson goodness-of-fit of observed counts against expected probabilities.
// Returns the p-value; the caller decides the significance level.
inline double chi_square_gof_pvalue(const std::vector<size_t>& observed,
                                    const std::vector<double>& expected_probs) {
    if (observed.size() != expected_probs.size() || observed.empty())
        throw DimensionError("chi_square_gof_pvalue: bin count mismatch");
    size_t total = 0;
    for (size_t c : observed) total += c;
    if (total == 0) throw ContractError("chi_square_gof_pvalue: no observations");
    double stat = 0.0;
    for (size_t i = 0; i < observed.size(); ++i) {
        const double expect = expected_probs[i] * static_cast<double>(total);
        if (expect <= 0.0)
            throw DomainError("chi_square_gof_pvalue: expected probability must be positive");
        const double diff = static_cast<double>(observed[i]) - expect;
        stat += diff * diff / expect;
    }
    return chi_square_pvalue(stat, observed.size() - 1);
}

}  // namespace c2fa
