#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "supe/covariance.hpp"
#include "supe/data.hpp"
#include "supe/error.hpp"
#include "supe/optimize.hpp"
#include "supe/parallel.hpp"

namespace supe {

// ---------------------------------------------------------------------------
// Inverse-gamma penalty
// ---------------------------------------------------------------------------

/// log g_a(x; b) = -(a + 1) log x - b / x, the unnormalised inverse-gamma
/// kernel. b = 0 is admitted here only so the kernel's limit can be checked.
[[nodiscard]] inline double log_inverse_gamma_kernel(double x, double a, double b) {
    if (!(x > 0.0) || !(a > 0.0) || b < 0.0) {
        throw Error(ErrorCode::invalid_argument, "inverse-gamma kernel needs x > 0, a > 0, b >= 0");
    }
    return -(a + 1.0) * std::log(x) - b / x;
}

/// Maximiser over b of sum_j [a log b - b / sigma_j^2]: b = a J / sum_j sigma_j^{-2}.
[[nodiscard]] inline double profiled_penalty_scale(const Eigen::VectorXd& sigma2, double a) {
    return a * static_cast<double>(sigma2.size()) / sigma2.cwiseInverse().sum();
}

/// Log of the penalty prod_f prod_j g_a(sigma^2_{f,j}; b_f) including the
/// b^a factor of the inverse-gamma normaliser (without it the objective is
/// unbounded as b -> 0). A group shared by n factors contributes n times.
[[nodiscard]] inline double penalty_log(const ParameterSet& params) {
    const double a = params.penalty_shape;
    if (!(a > 0.0)) throw Error(ErrorCode::invalid_argument, "penalty shape must be > 0");
    double total = 0.0;
    for (std::size_t g = 0; g < params.groups.size(); ++g) {
        const auto& p = params.groups[g];
        const double b = p.penalty_scale;
        if (!(b > 0.0)) throw Error(ErrorCode::invalid_argument, "penalty scale must be > 0");
        const auto n = static_cast<double>(params.binding.factors_in(g).size());
        double sum = 0.0;
        for (Eigen::Index j = 0; j < p.sigma2.size(); ++j) {
            if (!(p.sigma2(j) > 0.0)) throw Error(ErrorCode::zero_variance, "penalty needs sigma^2 > 0");
            sum += a * std::log(b) + log_inverse_gamma_kernel(p.sigma2(j), a, b);
        }
        total += n * sum;
    }
    return total;
}

/// Shape a of an inverse-gamma prior whose p_hi / p_lo quantile ratio equals
/// `ratio`. The scale cancels in the ratio. Bisection on a in [0.1, 1000].
[[nodiscard]] inline double calibrate_shape(double ratio, double p_lo = 0.025, double p_hi = 0.975) {
    if (!(ratio > 1.0)) throw Error(ErrorCode::invalid_argument, "quantile ratio must be > 1");
    if (!(p_lo > 0.0 && p_lo < p_hi && p_hi < 1.0)) {
        throw Error(ErrorCode::invalid_argument, "percentiles must satisfy 0 < p_lo < p_hi < 1");
    }
    using namespace boost::math::policies;
    using Quiet = policy<overflow_error<ignore_error>, underflow_error<ignore_error>,
                         evaluation_error<ignore_error>, domain_error<ignore_error>>;
    // Inverse-gamma quantile Q(p; a) = 1 / gamma_p_inv(a, 1 - p).
    auto quantile_ratio = [&](double a) {
        const double hi = boost::math::gamma_p_inv(a, 1.0 - p_lo, Quiet());
        const double lo = boost::math::gamma_p_inv(a, 1.0 - p_hi, Quiet());
        if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
        return hi / lo;
    };
    double lo = 0.1, hi = 1000.0;
    const double f_lo = quantile_ratio(lo) - ratio;
    const double f_hi = quantile_ratio(hi) - ratio;
    if (!(f_lo > 0.0) || !(f_hi < 0.0)) {
        throw Error(ErrorCode::no_root, "no shape in [0.1, 1000] attains quantile ratio " + std::to_string(ratio));
    }
    for (int k = 0; k < 200 && hi - lo > 1e-12 * hi; ++k) {
        const double mid = 0.5 * (lo + hi);
        if (quantile_ratio(mid) > ratio) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Restricted likelihood
// ---------------------------------------------------------------------------

namespace detail {

struct CellData {
    std::vector<std::size_t> teams;
    Eigen::VectorXd y;
};

/// Gradient of one factor's restricted log-likelihood with respect to
/// log tau^2 (entry 0) and log sigma^2_j (entries 1..J).
struct RemlGradient {
    Eigen::VectorXd values;
};

/// log L^(r) of one factor: -1/2 sum_c log|B_c| - 1/2 log Q - 1/2 sum_c r_c' B_c^{-1} r_c
/// where Q = sum_c 1' B_c^{-1} 1 (so log|Sigma_mu| = -log Q) and r_c = y_c - mu* 1.
/// Returns nullopt when a cell block is not positive definite.
[[nodiscard]] inline std::optional<double> factor_reml(const GroupParameters& p, std::span<const CellData> cells,
                                                       Eigen::VectorXd* gradient = nullptr) {
    struct Work {
        CellFactor factor;
        Eigen::VectorXd u;
        Eigen::VectorXd solved_y;
    };
    std::vector<Work> work;
    work.reserve(cells.size());
    double Q = 0.0, numer = 0.0, logdet = 0.0;
    for (const auto& c : cells) {
        auto factor = CellFactor::factorize(cell_covariance(p, c.teams));
        if (!factor) return std::nullopt;
        Work w{std::move(*factor), {}, {}};
        w.u = w.factor.solve(Eigen::VectorXd::Ones(c.y.size()));
        w.solved_y = w.factor.solve(c.y);
        Q += w.u.sum();
        numer += w.solved_y.sum();
        logdet += w.factor.log_det();
        work.push_back(std::move(w));
    }
    if (!(Q > 0.0) || !std::isfinite(Q)) return std::nullopt;
    const double mu = numer / Q;
    double quad = 0.0;
    for (std::size_t k = 0; k < cells.size(); ++k) {
        const Eigen::VectorXd r_tilde = work[k].solved_y - mu * work[k].u;
        quad += (cells[k].y.array() - mu).matrix().dot(r_tilde);
        if (gradient) {
            const auto& c = cells[k];
            const auto n = static_cast<Eigen::Index>(c.teams.size());
            const double q = work[k].u.sum();
            const double one_r = r_tilde.sum();
            (*gradient)(0) += 0.5 * p.tau2 * (-q + q * q / Q + one_r * one_r);
            // M = D^{1/2} R D^{1/2} over present teams.
            Eigen::MatrixXd M(n, n);
            for (Eigen::Index a = 0; a < n; ++a) {
                for (Eigen::Index b = 0; b < n; ++b) {
                    const auto ja = static_cast<Eigen::Index>(c.teams[a]);
                    const auto jb = static_cast<Eigen::Index>(c.teams[b]);
                    M(a, b) = p.correlation(ja, jb) * std::sqrt(p.sigma2(ja) * p.sigma2(jb));
                }
            }
            const Eigen::MatrixXd BinvM = work[k].factor.solve(M);
            const Eigen::VectorXd Mu = M * work[k].u;
            const Eigen::VectorXd Mr = M * r_tilde;
            for (Eigen::Index a = 0; a < n; ++a) {
                const auto j = static_cast<Eigen::Index>(c.teams[a]);
                (*gradient)(1 + j) += 0.5 * (-BinvM(a, a) + work[k].u(a) * Mu(a) / Q + r_tilde(a) * Mr(a));
            }
        }
    }
    return -0.5 * logdet - 0.5 * std::log(Q) - 0.5 * quad;
}

[[nodiscard]] inline std::vector<CellData> factor_cells(const EnsembleDataset& data, std::size_t f) {
    std::vector<CellData> cells;
    for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
        CellData c{data.present_teams(f, i), {}};
        c.y.resize(static_cast<Eigen::Index>(c.teams.size()));
        for (std::size_t k = 0; k < c.teams.size(); ++k) c.y(static_cast<Eigen::Index>(k)) = data.at(f, i, c.teams[k]);
        cells.push_back(std::move(c));
    }
    return cells;
}

}  // namespace detail

/// log L^(r)(tau^2, sigma^2, rho | Y) up to the parameter-free constant
/// -(n - F)/2 log(2 pi). Returns -infinity when any cell covariance fails to
/// factor.
[[nodiscard]] inline double restricted_log_likelihood(const EnsembleDataset& data, const ParameterSet& params) {
    params.validate(data.team_count());
    double total = 0.0;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto cells = detail::factor_cells(data, f);
        const auto v = detail::factor_reml(params.for_factor(f), cells);
        if (!v) return -std::numeric_limits<double>::infinity();
        total += *v;
    }
    return total;
}

/// The proportionality constant dropped by restricted_log_likelihood:
/// log of the integral of the Gaussian likelihood over mu equals the
/// returned value plus this.
[[nodiscard]] inline double restricted_log_likelihood_constant(const EnsembleDataset& data) {
    const auto n = static_cast<double>(data.present_count());
    const auto F = static_cast<double>(data.factor_count());
    return -0.5 * (n - F) * std::log(2.0 * M_PI);
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

enum class RhoMode { fixed_zero, fixed_known, estimated };

struct EstimationConfig {
    /// Penalty shape; when unset it is calibrated from ratio_target and the
    /// percentile pair.
    std::optional<double> shape_a;
    double percentile_lo = 0.025;
    double percentile_hi = 0.975;
    double ratio_target = 4.0;
    bool penalize = true;
    optimize::Options optimizer{500, 1e-9, 1e-7, 4.0};
    std::size_t restarts = 5;
    /// Standard deviation of the log-scale perturbation between restarts.
    double restart_spread = 0.5;
    std::uint64_t seed = 20210101;
    RhoMode rho_mode = RhoMode::fixed_zero;
    /// Team correlation used for every group under RhoMode::fixed_known.
    std::optional<Eigen::MatrixXd> known_correlation;
    std::size_t threads = 1;

    [[nodiscard]] double resolved_shape() const {
        if (shape_a) return *shape_a;
        return calibrate_shape(ratio_target, percentile_lo, percentile_hi);
    }

    void validate() const {
        if (shape_a && !(*shape_a > 0.0)) throw Error(ErrorCode::invalid_argument, "shape_a must be > 0");
        if (!(percentile_lo > 0.0 && percentile_lo < percentile_hi && percentile_hi < 1.0)) {
            throw Error(ErrorCode::invalid_argument, "percentile pair must be increasing in (0, 1)");
        }
        if (!(ratio_target > 1.0)) throw Error(ErrorCode::invalid_argument, "ratio_target must be > 1");
        if (!(optimizer.f_tolerance > 0.0) || !(optimizer.x_tolerance > 0.0)) {
            throw Error(ErrorCode::invalid_argument, "optimizer tolerances must be > 0");
        }
        if (restarts < 1) throw Error(ErrorCode::invalid_argument, "restarts must be >= 1");
        if (rho_mode == RhoMode::fixed_known && !known_correlation) {
            throw Error(ErrorCode::invalid_argument, "rho_mode fixed_known needs a known correlation matrix");
        }
    }
};

struct RestartTrace {
    std::size_t group = 0;
    std::size_t restart = 0;
    double objective = 0.0;
    std::size_t iterations = 0;
    optimize::Status status = optimize::Status::max_iterations;
};

struct FitResult {
    ParameterSet params;
    /// Penalised restricted log-likelihood at params (penalty omitted when
    /// penalisation is off).
    double objective = 0.0;
    bool converged = false;
    std::size_t iterations = 0;
    std::vector<RestartTrace> traces;
};

/// Maps a vector of unconstrained values onto a correlation matrix through
/// canonical partial correlations tanh(z) and the Cholesky factor they
/// define. Every real vector yields a valid correlation matrix and back.
[[nodiscard]] inline Eigen::MatrixXd correlation_from_unconstrained(std::span<const double> z, Eigen::Index J) {
    if (static_cast<Eigen::Index>(z.size()) != J * (J - 1) / 2) {
        throw Error(ErrorCode::invalid_argument, "wrong number of correlation coordinates");
    }
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(J, J);
    L(0, 0) = 1.0;
    std::size_t k = 0;
    for (Eigen::Index i = 1; i < J; ++i) {
        double remaining = 1.0;
        for (Eigen::Index j = 0; j < i; ++j) {
            const double partial = std::tanh(z[k++]);
            L(i, j) = partial * std::sqrt(remaining);
            remaining -= L(i, j) * L(i, j);
        }
        L(i, i) = std::sqrt(std::max(remaining, 0.0));
    }
    Eigen::MatrixXd R = L * L.transpose();
    R.diagonal().setOnes();
    return R;
}

[[nodiscard]] inline std::vector<double> correlation_to_unconstrained(const Eigen::MatrixXd& R) {
    const Eigen::Index J = R.rows();
    const Eigen::MatrixXd L = R.llt().matrixL();
    std::vector<double> z;
    for (Eigen::Index i = 1; i < J; ++i) {
        double remaining = 1.0;
        for (Eigen::Index j = 0; j < i; ++j) {
            const double partial = std::clamp(L(i, j) / std::sqrt(remaining), -1.0 + 1e-15, 1.0 - 1e-15);
            z.push_back(std::atanh(partial));
            remaining -= L(i, j) * L(i, j);
        }
    }
    return z;
}

namespace detail {

/// Penalised restricted log-likelihood of one variance-sharing group in
/// transformed coordinates theta = (log tau^2, log sigma^2_1..J, z_rho...).
class GroupObjective {
public:
    GroupObjective(const EnsembleDataset& data, std::vector<std::size_t> factors, const EstimationConfig& config,
                   double shape)
        : factors_(std::move(factors)), J_(static_cast<Eigen::Index>(data.team_count())), config_(config), shape_(shape) {
        for (auto f : factors_) cells_.push_back(factor_cells(data, f));
        fixed_correlation_ = config.rho_mode == RhoMode::fixed_known ? *config.known_correlation
                                                                     : Eigen::MatrixXd::Identity(J_, J_);
    }

    [[nodiscard]] Eigen::Index dimension() const {
        return 1 + J_ + (config_.rho_mode == RhoMode::estimated ? J_ * (J_ - 1) / 2 : 0);
    }

    [[nodiscard]] std::size_t factor_count() const noexcept { return factors_.size(); }

    [[nodiscard]] std::size_t observation_count() const {
        std::size_t n = 0;
        for (const auto& fc : cells_) {
            for (const auto& c : fc) n += c.teams.size();
        }
        return n;
    }

    [[nodiscard]] GroupParameters unpack(const Eigen::VectorXd& theta) const {
        GroupParameters p;
        p.tau2 = std::exp(theta(0));
        p.sigma2 = theta.segment(1, J_).array().exp();
        if (config_.rho_mode == RhoMode::estimated) {
            const auto n = dimension() - 1 - J_;
            p.correlation = correlation_from_unconstrained(
                std::span<const double>(theta.data() + 1 + J_, static_cast<std::size_t>(n)), J_);
        } else {
            p.correlation = fixed_correlation_;
        }
        p.penalty_scale = profiled_penalty_scale(p.sigma2, shape_);
        return p;
    }

    [[nodiscard]] Eigen::VectorXd pack(const GroupParameters& p) const {
        Eigen::VectorXd theta(dimension());
        theta(0) = std::log(p.tau2);
        theta.segment(1, J_) = p.sigma2.array().log();
        if (config_.rho_mode == RhoMode::estimated) {
            const auto z = correlation_to_unconstrained(p.correlation);
            for (std::size_t k = 0; k < z.size(); ++k) theta(1 + J_ + static_cast<Eigen::Index>(k)) = z[k];
        }
        return theta;
    }

    /// Penalty of this group with b profiled out.
    [[nodiscard]] double penalty(const GroupParameters& p) const {
        if (!config_.penalize) return 0.0;
        double sum = 0.0;
        const double b = p.penalty_scale;
        for (Eigen::Index j = 0; j < J_; ++j) {
            sum += shape_ * std::log(b) - (shape_ + 1.0) * std::log(p.sigma2(j)) - b / p.sigma2(j);
        }
        return static_cast<double>(factors_.size()) * sum;
    }

    /// Objective to maximise; -infinity off the feasible set.
    [[nodiscard]] double value(const Eigen::VectorXd& theta, Eigen::VectorXd* grad_variance = nullptr) const {
        if (!theta.allFinite()) return -std::numeric_limits<double>::infinity();
        const auto p = unpack(theta);
        if (!(p.tau2 > 0.0) || !std::isfinite(p.tau2) || !p.sigma2.allFinite() || (p.sigma2.array() <= 0.0).any()) {
            return -std::numeric_limits<double>::infinity();
        }
        double total = 0.0;
        if (grad_variance) grad_variance->setZero(1 + J_);
        for (const auto& fc : cells_) {
            const auto v = factor_reml(p, fc, grad_variance);
            if (!v) return -std::numeric_limits<double>::infinity();
            total += *v;
        }
        if (config_.penalize) {
            total += penalty(p);
            if (grad_variance) {
                const auto n = static_cast<double>(factors_.size());
                for (Eigen::Index j = 0; j < J_; ++j) {
                    (*grad_variance)(1 + j) += n * (-(shape_ + 1.0) + p.penalty_scale / p.sigma2(j));
                }
            }
        }
        return std::isfinite(total) ? total : -std::numeric_limits<double>::infinity();
    }

    /// Analytic in the variance coordinates, central differences in the
    /// correlation coordinates.
    [[nodiscard]] Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(dimension());
        Eigen::VectorXd gv(1 + J_);
        if (!std::isfinite(value(theta, &gv))) {
            g.setConstant(std::numeric_limits<double>::quiet_NaN());
            return g;
        }
        g.head(1 + J_) = gv;
        for (Eigen::Index k = 1 + J_; k < dimension(); ++k) {
            Eigen::VectorXd t = theta;
            const double h = 1e-6;
            t(k) = theta(k) + h;
            const double fp = value(t);
            t(k) = theta(k) - h;
            const double fm = value(t);
            g(k) = (fp - fm) / (2.0 * h);
        }
        return g;
    }

    /// Moment-based start: sigma^2_j from squared deviations about the
    /// per-cell team median, tau^2 from the spread of cell medians about their
    /// factor mean.
    [[nodiscard]] GroupParameters initial() const {
        Eigen::VectorXd dev = Eigen::VectorXd::Zero(J_);
        Eigen::VectorXd count = Eigen::VectorXd::Zero(J_);
        double between = 0.0;
        std::size_t between_n = 0, factors_used = 0;
        for (const auto& fc : cells_) {
            std::vector<double> medians;
            for (const auto& c : fc) {
                std::vector<double> v(c.y.data(), c.y.data() + c.y.size());
                std::sort(v.begin(), v.end());
                const std::size_t n = v.size();
                const double med = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
                medians.push_back(med);
                for (std::size_t k = 0; k < c.teams.size(); ++k) {
                    const auto j = static_cast<Eigen::Index>(c.teams[k]);
                    const double d = c.y(static_cast<Eigen::Index>(k)) - med;
                    dev(j) += d * d;
                    count(j) += 1.0;
                }
            }
            if (medians.size() > 1) {
                double m = 0.0;
                for (double x : medians) m += x;
                m /= static_cast<double>(medians.size());
                for (double x : medians) between += (x - m) * (x - m);
                between_n += medians.size();
                ++factors_used;
            }
        }
        GroupParameters p;
        p.sigma2.resize(J_);
        double pooled = 0.0, pooled_n = 0.0;
        for (Eigen::Index j = 0; j < J_; ++j) {
            if (count(j) > 0 && dev(j) > 0.0) {
                pooled += dev(j);
                pooled_n += count(j);
            }
        }
        const double fallback = pooled_n > 0 ? pooled / pooled_n : 0.0;
        double tau2 = between_n > factors_used ? between / static_cast<double>(between_n - factors_used) : 0.0;
        const double scale = std::max(fallback, tau2);
        if (!(scale > 0.0)) {
            throw Error(ErrorCode::not_identifiable, "group shows no variability; variances are not identifiable");
        }
        for (Eigen::Index j = 0; j < J_; ++j) {
            const double s = count(j) > 0 ? dev(j) / count(j) : fallback;
            p.sigma2(j) = std::max(s, 1e-3 * scale);
        }
        p.tau2 = std::max(tau2, 1e-3 * scale);
        p.correlation = fixed_correlation_;
        p.penalty_scale = profiled_penalty_scale(p.sigma2, shape_);
        return p;
    }

private:
    std::vector<std::size_t> factors_;
    std::vector<std::vector<CellData>> cells_;
    Eigen::Index J_;
    const EstimationConfig& config_;
    double shape_;
    Eigen::MatrixXd fixed_correlation_;
};

struct GroupFit {
    GroupParameters params;
    double objective = -std::numeric_limits<double>::infinity();
    bool converged = false;
    std::size_t iterations = 0;
    std::vector<RestartTrace> traces;
};

[[nodiscard]] inline GroupFit fit_group(const GroupObjective& objective, std::size_t group, const EstimationConfig& config) {
    const auto start = objective.pack(objective.initial());
    auto neg = [&](const Eigen::VectorXd& t) { return -objective.value(t); };
    auto neg_grad = [&](const Eigen::VectorXd& t) -> Eigen::VectorXd { return -objective.gradient(t); };
    GroupFit best;
    for (std::size_t r = 0; r < config.restarts; ++r) {
        Eigen::VectorXd x0 = start;
        if (r > 0) {
            std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                              static_cast<std::uint32_t>(group), static_cast<std::uint32_t>(r)};
            std::mt19937_64 rng(seq);
            std::normal_distribution<double> noise(0.0, config.restart_spread);
            for (Eigen::Index k = 0; k < x0.size(); ++k) x0(k) += noise(rng);
        }
        auto res = optimize::minimize_bfgs(neg, neg_grad, x0, config.optimizer);
        std::size_t iterations = res.iterations;
        if (res.status != optimize::Status::converged) {
            const auto nm = optimize::minimize_nelder_mead(neg, res.status == optimize::Status::non_finite_start ? x0 : res.x,
                                                           config.optimizer);
            iterations += nm.iterations;
            auto polish = optimize::minimize_bfgs(neg, neg_grad, nm.x, config.optimizer);
            iterations += polish.iterations;
            res = polish.value <= nm.value ? polish : nm;
            if (nm.status == optimize::Status::converged && res.status != optimize::Status::converged &&
                res.value <= nm.value) {
                res.status = optimize::Status::converged;
            }
        }
        const double value = -res.value;
        best.traces.push_back({group, r, value, iterations, res.status});
        best.iterations += iterations;
        if (std::isfinite(value) && value > best.objective) {
            best.objective = value;
            best.params = objective.unpack(res.x);
            best.converged = res.status == optimize::Status::converged;
        }
    }
    if (!std::isfinite(best.objective)) {
        throw Error(ErrorCode::not_positive_definite, "no restart reached a finite objective");
    }
    return best;
}

}  // namespace detail

/// Penalised REML estimates of tau^2 and sigma^2 (and rho when estimated)
/// for every group of `binding`. Groups share no parameters, so each is
/// maximised separately; b is profiled out in closed form.
[[nodiscard]] inline FitResult fit(const EnsembleDataset& data, const GroupBinding& binding, const EstimationConfig& config) {
    config.validate();
    binding.validate();
    if (binding.factor_count() != data.factor_count()) {
        throw Error(ErrorCode::invalid_argument, "grouping does not cover the dataset's factors");
    }
    const auto J = static_cast<Eigen::Index>(data.team_count());
    if (J < 2) {
        throw Error(ErrorCode::not_identifiable, "with one team only tau^2 + sigma^2 is identifiable");
    }
    if (config.rho_mode == RhoMode::estimated) {
        // tau^2 11' + D^{1/2} R D^{1/2} has one parameter more than B has
        // distinct entries: shifting c from tau^2 into every covariance leaves B
        // unchanged, so the likelihood has a ridge.
        throw Error(ErrorCode::not_identifiable,
                    "tau^2 and a free team correlation matrix are not jointly identifiable; fix rho instead");
    }
    if (config.rho_mode == RhoMode::fixed_known && config.known_correlation->rows() != J) {
        throw Error(ErrorCode::invalid_argument, "known correlation matrix must be J x J");
    }
    const double shape = config.resolved_shape();
    std::vector<detail::GroupObjective> objectives;
    for (std::size_t g = 0; g < binding.group_count(); ++g) {
        objectives.emplace_back(data, binding.factors_in(g), config, shape);
        const auto& obj = objectives.back();
        const auto dof = obj.observation_count() - obj.factor_count();
        if (dof < static_cast<std::size_t>(obj.dimension())) {
            throw Error(ErrorCode::not_identifiable, "group " + binding.group_labels[g] + " has " + std::to_string(dof) +
                                                         " residual degrees of freedom for " +
                                                         std::to_string(obj.dimension()) + " parameters");
        }
    }
    std::vector<detail::GroupFit> fits(binding.group_count());
    parallel_for(binding.group_count(), config.threads,
                 [&](std::size_t g) { fits[g] = detail::fit_group(objectives[g], g, config); });
    FitResult out;
    out.params.binding = binding;
    out.params.penalty_shape = shape;
    out.converged = true;
    for (auto& gf : fits) {
        out.params.groups.push_back(gf.params);
        out.objective += gf.objective;
        out.converged = out.converged && gf.converged;
        out.iterations += gf.iterations;
        out.traces.insert(out.traces.end(), gf.traces.begin(), gf.traces.end());
    }
    return out;
}

}  // namespace supe
