#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>

namespace battn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using VectorL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

/// |a - b| / max(|a|, |b|, floor); the comparison used by every oracle check.
inline double relative_error(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest entrywise relative error between two equally shaped arrays.
template <typename A, typename B>
double max_relative_error(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b, double floor = 1e-12) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            worst = std::max(worst, relative_error(a(i, j), b(i, j), floor));
        }
    }
    return worst;
}

template <typename A>
bool all_finite(const Eigen::DenseBase<A>& a) {
    return a.derived().array().isFinite().all();
}

/// Two-parameter least squares fit y = slope * x + intercept.
struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::size_t points = 0;
    bool degenerate = false;  // zero variance in x or y; r_squared is meaningless
};

inline LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
    LinearFit fit;
    fit.points = x.size();
    if (x.size() != y.size() || x.size() < 2) {
        fit.degenerate = true;
        return fit;
    }
    const auto n = static_cast<double>(x.size());
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        mx += x[k];
        my += y[k];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    double syy = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double dx = x[k] - mx;
        const double dy = y[k] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0) {
        fit.degenerate = true;
        fit.intercept = my;
        return fit;
    }
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    if (syy == 0.0) {
        fit.degenerate = true;
        return fit;
    }
    fit.r_squared = (sxy * sxy) / (sxx * syy);
    return fit;
}

}  // namespace battn
