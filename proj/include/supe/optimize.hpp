#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace supe::optimize {

enum class Status { converged, max_iterations, line_search_failed, non_finite_start };

[[nodiscard]] inline std::string_view to_string(Status s) {
    switch (s) {
        case Status::converged: return "converged";
        case Status::max_iterations: return "max_iterations";
        case Status::line_search_failed: return "line_search_failed";
        case Status::non_finite_start: return "non_finite_start";
    }
    return "unknown";
}

struct Options {
    std::size_t max_iterations = 500;
    /// Relative change in the objective.
    double f_tolerance = 1e-9;
    /// Max-norm change in the parameters.
    double x_tolerance = 1e-7;
    /// Largest step (max-norm) a single line search may take.
    double max_step = 4.0;
};

struct Result {
    Eigen::VectorXd x;
    double value = std::numeric_limits<double>::infinity();
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    Status status = Status::max_iterations;
};

using Objective = std::function<double(const Eigen::VectorXd&)>;
using Gradient = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Central finite-difference gradient.
[[nodiscard]] inline Eigen::VectorXd numeric_gradient(const Objective& f, const Eigen::VectorXd& x, double h = 1e-5) {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd xp = x;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double step = h * std::max(1.0, std::abs(x(k)));
        xp(k) = x(k) + step;
        const double fp = f(xp);
        xp(k) = x(k) - step;
        const double fm = f(xp);
        xp(k) = x(k);
        g(k) = (fp - fm) / (2.0 * step);
    }
    return g;
}

namespace detail {

inline bool small_change(double f_old, double f_new, const Eigen::VectorXd& dx, const Options& opt) {
    const double df = std::abs(f_old - f_new);
    return df <= opt.f_tolerance * (std::abs(f_new) + 1e-12) && dx.lpNorm<Eigen::Infinity>() <= opt.x_tolerance;
}

}  // namespace detail

/// Quasi-Newton minimisation (BFGS inverse-Hessian update, Armijo
/// backtracking). Non-finite objective values are treated as +inf and
/// trigger backtracking.
[[nodiscard]] inline Result minimize_bfgs(const Objective& f, const Gradient& grad, Eigen::VectorXd x,
                                          const Options& opt = {}) {
    Result r;
    const auto n = x.size();
    double fx = f(x);
    ++r.evaluations;
    if (!std::isfinite(fx)) {
        r.x = x;
        r.status = Status::non_finite_start;
        return r;
    }
    Eigen::VectorXd g = grad(x);
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    for (r.iterations = 0; r.iterations < opt.max_iterations; ++r.iterations) {
        if (g.lpNorm<Eigen::Infinity>() <= 1e-10 * (1.0 + std::abs(fx))) {
            r.status = Status::converged;
            break;
        }
        Eigen::VectorXd p = -H * g;
        double slope = g.dot(p);
        if (!(slope < 0.0)) {
            H.setIdentity();
            p = -g;
            slope = g.dot(p);
        }
        const double pmax = p.lpNorm<Eigen::Infinity>();
        if (pmax > opt.max_step) {
            p *= opt.max_step / pmax;
            slope = g.dot(p);
        }
        double t = 1.0;
        double f_new = std::numeric_limits<double>::infinity();
        Eigen::VectorXd x_new;
        bool accepted = false;
        for (int k = 0; k < 60; ++k) {
            x_new = x + t * p;
            f_new = f(x_new);
            ++r.evaluations;
            if (std::isfinite(f_new) && f_new <= fx + 1e-4 * t * slope) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            if (H.isIdentity()) {
                // Steepest descent made no progress: treat as converged when the
                // objective is flat to working precision.
                r.status = std::abs(slope) <= 1e-8 * (1.0 + std::abs(fx)) ? Status::converged
                                                                         : Status::line_search_failed;
                break;
            }
            H.setIdentity();
            continue;
        }
        const Eigen::VectorXd s = x_new - x;
        const Eigen::VectorXd g_new = grad(x_new);
        const Eigen::VectorXd yv = g_new - g;
        const bool done = detail::small_change(fx, f_new, s, opt);
        x = x_new;
        fx = f_new;
        g = g_new;
        if (done) {
            r.status = Status::converged;
            ++r.iterations;
            break;
        }
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
            H = (I - rho * s * yv.transpose()) * H * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
        }
    }
    r.x = x;
    r.value = fx;
    return r;
}

/// Derivative-free Nelder-Mead simplex minimisation with the standard
/// reflection/expansion/contraction/shrink coefficients.
[[nodiscard]] inline Result minimize_nelder_mead(const Objective& f, const Eigen::VectorXd& x0, const Options& opt = {},
                                                 double initial_step = 0.5) {
    const auto n = x0.size();
    Result r;
    auto eval = [&](const Eigen::VectorXd& x) {
        ++r.evaluations;
        const double v = f(x);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    };
    std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
    std::vector<double> vals(static_cast<std::size_t>(n + 1));
    for (Eigen::Index k = 0; k < n; ++k) pts[static_cast<std::size_t>(k + 1)](k) += initial_step;
    for (std::size_t k = 0; k < pts.size(); ++k) vals[k] = eval(pts[k]);
    if (!std::isfinite(vals[0])) {
        r.x = x0;
        r.status = Status::non_finite_start;
        return r;
    }
    std::vector<std::size_t> order(pts.size());
    const std::size_t max_iter = opt.max_iterations * static_cast<std::size_t>(std::max<Eigen::Index>(1, n)) * 4;
    for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return vals[a] < vals[b]; });
        const auto best = order.front(), worst = order.back(), second = order[order.size() - 2];
        double size = 0.0;
        for (const auto& p : pts) size = std::max(size, (p - pts[best]).lpNorm<Eigen::Infinity>());
        if (std::abs(vals[worst] - vals[best]) <= opt.f_tolerance * (std::abs(vals[best]) + 1e-12) &&
            size <= opt.x_tolerance) {
            r.status = Status::converged;
            break;
        }
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (auto k : order) {
            if (k != worst) centroid += pts[k];
        }
        centroid /= static_cast<double>(n);
        const Eigen::VectorXd xr = centroid + (centroid - pts[worst]);
        const double fr = eval(xr);
        if (fr < vals[best]) {
            const Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[worst]);
            const double fe = eval(xe);
            if (fe < fr) {
                pts[worst] = xe;
                vals[worst] = fe;
            } else {
                pts[worst] = xr;
                vals[worst] = fr;
            }
            continue;
        }
        if (fr < vals[second]) {
            pts[worst] = xr;
            vals[worst] = fr;
            continue;
        }
        const bool outside = fr < vals[worst];
        const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                           : Eigen::VectorXd(centroid + 0.5 * (pts[worst] - centroid));
        const double fc = eval(xc);
        if (fc < (outside ? fr : vals[worst])) {
            pts[worst] = xc;
            vals[worst] = fc;
            continue;
        }
        for (auto k : order) {
            if (k == best) continue;
            pts[k] = pts[best] + 0.5 * (pts[k] - pts[best]);
            vals[k] = eval(pts[k]);
        }
    }
    const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
    r.x = pts[best];
    r.value = vals[best];
    return r;
}

}  // namespace supe::optimize
