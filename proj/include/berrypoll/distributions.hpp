#pragma once

// Reference distributions for mixed-model inference. Student t and F come
// from Boost.Math; the studentized range (Tukey) is integrated numerically.

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace berrypoll::dist {

inline constexpr double kLargeDf = 1e7;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Two-sided p-value of a t statistic.
inline double t_two_sided_p(double t, double df) {
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(t)) return 0.0;
    const double a = std::abs(t);
    if (!(df < kLargeDf)) return std::erfc(a / std::numbers::sqrt2);
    boost::math::students_t d(df);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(d, a)));
}

inline double t_quantile(double p, double df) {
    if (!(df < kLargeDf)) return boost::math::quantile(boost::math::normal(), p);
    return boost::math::quantile(boost::math::students_t(df), p);
}

/// Upper tail P(F > f) for F(df1, df2).
inline double f_upper_p(double f, double df1, double df2) {
    if (std::isnan(f)) return std::numeric_limits<double>::quiet_NaN();
    if (f <= 0.0) return 1.0;
    if (std::isinf(f)) return 0.0;
    if (!(df2 < kLargeDf)) {
        // df1 * F tends to chi-square(df1)
        return boost::math::gamma_q(df1 / 2.0, df1 * f / 2.0);
    }
    boost::math::fisher_f d(df1, df2);
    return boost::math::cdf(boost::math::complement(d, f));
}

namespace detail {

/// Fixed-panel Gauss-Legendre; both integrands below are smooth on their ranges.
template <typename F>
double gauss_panels(F f, double lo, double hi, int n) {
    using G = boost::math::quadrature::gauss<double, 20>;
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += G::integrate(f, lo + (hi - lo) * i / n, lo + (hi - lo) * (i + 1) / n);
    return total;
}

}  // namespace detail

/// P(range of k iid standard normals <= w).
inline double normal_range_cdf(double w, int k) {
    if (w <= 0.0) return 0.0;
    auto integrand = [w, k](double z) {
        const double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
        const double diff = normal_cdf(z + w) - normal_cdf(z);
        return phi * std::pow(std::max(diff, 0.0), k - 1);
    };
    return std::clamp(k * detail::gauss_panels(integrand, -8.5 - w, 8.5, 12), 0.0, 1.0);
}

/// Studentized range CDF P(Q <= q) for k means and df error degrees of
/// freedom, by integrating the normal-range CDF against the density of
/// s = sqrt(chi2_df / df). Integrating over u = sqrt(s) removes the
/// s^(df-1) cusp at zero for small df.
inline double ptukey(double q, int k, double df) {
    if (q <= 0.0) return 0.0;
    if (k < 2) return 1.0;
    if (!(df < 5000.0)) return normal_range_cdf(q, k);
    const double half = df / 2.0;
    const double log_norm = std::log(2.0) + half * std::log(half) - std::lgamma(half);
    auto integrand = [&](double u) {
        const double s = u * u;
        if (s <= 0.0) return 0.0;
        return 2.0 * u * std::exp(log_norm + (df - 1.0) * std::log(s) - half * s * s) * normal_range_cdf(q * s, k);
    };
    const double width = 1.0 / std::sqrt(2.0 * df);
    const double a = std::max(0.0, 1.0 - 9.0 * width);
    const double b = 1.0 + 12.0 * width;
    double total = detail::gauss_panels(integrand, std::sqrt(a), std::sqrt(b), 8);
    if (a > 0.0) total += detail::gauss_panels(integrand, 0.0, std::sqrt(a), 2);
    return std::clamp(total, 0.0, 1.0);
}

}  // namespace berrypoll::dist
