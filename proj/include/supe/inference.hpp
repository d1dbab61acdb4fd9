#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "supe/covariance.hpp"
#include "supe/data.hpp"
#include "supe/error.hpp"
#include "supe/parallel.hpp"

namespace supe {

// ---------------------------------------------------------------------------
// Scalar fast path: rho = 0 and every cell complete.
// ---------------------------------------------------------------------------

struct ScalarBlue {
    Eigen::VectorXd mu;
    /// S^2_f
    Eigen::VectorXd variance;
    /// w^{(j)}_{f,i} for each factor; identical for every replicate i.
    std::vector<Eigen::VectorXd> weights;
};

struct ScalarBlup {
    /// Y*_{f,i}, one vector per factor.
    std::vector<Eigen::VectorXd> y;
    /// MSPE with mu known; constant in i.
    Eigen::VectorXd mspe;
    /// (lambda^0, lambda^1, ..., lambda^J) per factor; constant in i.
    std::vector<Eigen::VectorXd> lambdas;
};

namespace detail {

inline void require_scalar_path(const EnsembleDataset& data, const ParameterSet& params) {
    if (params.correlated()) {
        throw Error(ErrorCode::invalid_argument, "scalar path requires uncorrelated teams; use the general path");
    }
    if (!data.complete()) {
        throw Error(ErrorCode::unbalanced_data, "scalar path requires every team in every cell");
    }
    params.validate(data.team_count());
}

}  // namespace detail

/// BLUE of mu_f with weights proportional to team precisions, equal across
/// replicates.
[[nodiscard]] inline ScalarBlue blue_mu(const EnsembleDataset& data, const ParameterSet& params) {
    detail::require_scalar_path(data, params);
    const std::size_t F = data.factor_count();
    const auto J = static_cast<Eigen::Index>(data.team_count());
    ScalarBlue out;
    out.mu.resize(static_cast<Eigen::Index>(F));
    out.variance.resize(static_cast<Eigen::Index>(F));
    for (std::size_t f = 0; f < F; ++f) {
        const auto& p = params.for_factor(f);
        const double I = static_cast<double>(data.replicate_count(f));
        const Eigen::VectorXd precision = p.sigma2.cwiseInverse();
        const double total = precision.sum();
        Eigen::VectorXd w = precision / (I * total);
        double mu = 0.0;
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            for (Eigen::Index j = 0; j < J; ++j) mu += w(j) * data.at(f, i, static_cast<std::size_t>(j));
        }
        out.mu(static_cast<Eigen::Index>(f)) = mu;
        out.variance(static_cast<Eigen::Index>(f)) = (1.0 / total + p.tau2) / I;
        out.weights.push_back(std::move(w));
    }
    return out;
}

/// BLUP of Y_{f,i} given mu (true or plug-in). Written as
/// lambda^0 = 1 / (1 + tau^2 s), lambda^j = tau^2 sigma_j^{-2} / (1 + tau^2 s),
/// MSPE = tau^2 / (1 + tau^2 s) with s = sum_j sigma_j^{-2}, which is the
/// precision form multiplied through by tau^2 and stays finite at tau^2 = 0.
[[nodiscard]] inline ScalarBlup blup_y(const EnsembleDataset& data, const ParameterSet& params,
                                       const Eigen::VectorXd& mu) {
    detail::require_scalar_path(data, params);
    if (mu.size() != static_cast<Eigen::Index>(data.factor_count())) {
        throw Error(ErrorCode::invalid_argument, "blup_y: mu must have one entry per factor");
    }
    const std::size_t F = data.factor_count();
    const auto J = static_cast<Eigen::Index>(data.team_count());
    ScalarBlup out;
    out.mspe.resize(static_cast<Eigen::Index>(F));
    for (std::size_t f = 0; f < F; ++f) {
        const auto& p = params.for_factor(f);
        const Eigen::VectorXd precision = p.sigma2.cwiseInverse();
        const double denom = 1.0 + p.tau2 * precision.sum();
        Eigen::VectorXd lambda(J + 1);
        lambda(0) = 1.0 / denom;
        lambda.tail(J) = p.tau2 * precision / denom;
        Eigen::VectorXd y(static_cast<Eigen::Index>(data.replicate_count(f)));
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            double v = lambda(0) * mu(static_cast<Eigen::Index>(f));
            for (Eigen::Index j = 0; j < J; ++j) v += lambda(j + 1) * data.at(f, i, static_cast<std::size_t>(j));
            y(static_cast<Eigen::Index>(i)) = v;
        }
        out.mspe(static_cast<Eigen::Index>(f)) = p.tau2 / denom;
        out.y.push_back(std::move(y));
        out.lambdas.push_back(std::move(lambda));
    }
    return out;
}

// ---------------------------------------------------------------------------
// General GLS path: any correlation, any missingness.
// ---------------------------------------------------------------------------

namespace detail {

/// Per-cell quantities shared by the BLUE, the BLUP and the restricted
/// likelihood: u = B^{-1} 1, q = 1'u, B^{-1} y and 1'B^{-1} y.
struct CellSolve {
    CellFactor factor;
    Eigen::VectorXd u;
    double q = 0.0;
    Eigen::VectorXd solved_y;
    double one_solved_y = 0.0;
};

[[nodiscard]] inline CellSolve solve_cell(const GroupParameters& p, const CellBlock& c, const Eigen::VectorXd& y) {
    auto factor = CellFactor::factorize(cell_covariance(p, c.teams));
    if (!factor) throw Error(ErrorCode::not_positive_definite, "cell covariance is not positive definite");
    CellSolve s{std::move(*factor), {}, 0.0, {}, 0.0};
    s.u = s.factor.solve(Eigen::VectorXd::Ones(y.size()));
    s.q = s.u.sum();
    s.solved_y = s.factor.solve(y);
    s.one_solved_y = s.solved_y.sum();
    return s;
}

}  // namespace detail

struct GeneralBlue {
    Eigen::VectorXd mu;
    /// Sigma_mu = (X' Sigma_Y^{-1} X)^{-1}; diagonal because factors share no
    /// observations.
    Eigen::MatrixXd cov;
    /// Weight of each observation row of Y in its factor's mu*.
    Eigen::VectorXd row_weights;
};

/// mu* = (X' Sigma_Y^{-1} X)^{-1} X' Sigma_Y^{-1} Y evaluated block by block.
[[nodiscard]] inline GeneralBlue blue_mu_general(const ModelStructure& s, const ParameterSet& params) {
    const auto F = static_cast<Eigen::Index>(s.factor_count);
    GeneralBlue out;
    out.mu = Eigen::VectorXd::Zero(F);
    out.cov = Eigen::MatrixXd::Zero(F, F);
    out.row_weights = Eigen::VectorXd::Zero(s.y.size());
    for (std::size_t f = 0; f < s.factor_count; ++f) {
        const auto [first, last] = s.factor_cells[f];
        if (first == last) throw Error(ErrorCode::singular_system, "factor has no observations");
        const auto& p = params.for_factor(f);
        double Q = 0.0, numer = 0.0;
        std::vector<Eigen::VectorXd> us;
        for (std::size_t c = first; c < last; ++c) {
            const auto& cell = s.cells[c];
            const auto solve = detail::solve_cell(p, cell, s.cell_values(cell));
            Q += solve.q;
            numer += solve.one_solved_y;
            us.push_back(solve.u);
        }
        if (!(Q > 0.0) || !std::isfinite(Q)) throw Error(ErrorCode::singular_system, "X' Sigma_Y^{-1} X is singular");
        const auto fi = static_cast<Eigen::Index>(f);
        out.mu(fi) = numer / Q;
        out.cov(fi, fi) = 1.0 / Q;
        for (std::size_t c = first; c < last; ++c) {
            const auto& cell = s.cells[c];
            out.row_weights.segment(static_cast<Eigen::Index>(cell.row_offset), us[c - first].size()) = us[c - first] / Q;
        }
    }
    return out;
}

struct GeneralBlup {
    /// alpha* indexed like the dataset's cells.
    Eigen::VectorXd alpha;
    /// Diagonal of Sigma*_alpha = Sigma_alpha - Sigma_alpha Z' Sigma_Y^{-1} Z Sigma_alpha
    /// (diagonal because each alpha touches one cell block).
    Eigen::VectorXd alpha_cov_diag;
    /// X mu + Z alpha* at the cell level: the BLUP of Y_{f,i}.
    Eigen::VectorXd y;
    /// (lambda^0, lambda^1..J) per cell, zero for absent teams.
    Eigen::MatrixXd lambdas;
};

/// alpha* = Sigma_alpha Z' Sigma_Y^{-1} (Y - X mu) for the supplied mu.
[[nodiscard]] inline GeneralBlup blup_alpha_general(const ModelStructure& s, const ParameterSet& params,
                                                    const Eigen::VectorXd& mu) {
    if (mu.size() != static_cast<Eigen::Index>(s.factor_count)) {
        throw Error(ErrorCode::invalid_argument, "blup_alpha_general: mu must have one entry per factor");
    }
    const auto A = static_cast<Eigen::Index>(s.alpha_count);
    const auto J = static_cast<Eigen::Index>(params.team_count());
    GeneralBlup out;
    out.alpha = Eigen::VectorXd::Zero(A);
    out.alpha_cov_diag = Eigen::VectorXd::Zero(A);
    out.y = Eigen::VectorXd::Zero(A);
    out.lambdas = Eigen::MatrixXd::Zero(A, J + 1);
    for (const auto& cell : s.cells) {
        const auto& p = params.for_factor(cell.factor);
        const auto solve = detail::solve_cell(p, cell, s.cell_values(cell));
        const auto a = static_cast<Eigen::Index>(cell.alpha_index);
        const double m = mu(static_cast<Eigen::Index>(cell.factor));
        out.alpha(a) = p.tau2 * (solve.one_solved_y - m * solve.q);
        out.alpha_cov_diag(a) = p.tau2 - p.tau2 * p.tau2 * solve.q;
        out.y(a) = m + out.alpha(a);
        out.lambdas(a, 0) = 1.0 - p.tau2 * solve.q;
        for (std::size_t k = 0; k < cell.teams.size(); ++k) {
            out.lambdas(a, static_cast<Eigen::Index>(cell.teams[k]) + 1) = p.tau2 * solve.u(static_cast<Eigen::Index>(k));
        }
    }
    return out;
}

/// Z Sigma*_alpha Z', the observation-level prediction covariance with mu
/// known. Dense; small instances only.
[[nodiscard]] inline Eigen::MatrixXd prediction_covariance_dense(const ModelStructure& s, const GeneralBlup& blup) {
    const Eigen::MatrixXd Z = s.dense_z();
    return Z * blup.alpha_cov_diag.asDiagonal() * Z.transpose();
}

// ---------------------------------------------------------------------------
// Consensus result
// ---------------------------------------------------------------------------

enum class InferencePath { automatic, scalar, general };

struct FactorConsensus {
    /// EBLUE and its variance S^2_f.
    double mu_hat = 0.0;
    double mu_var = 0.0;
    /// EBLUP per replicate.
    Eigen::VectorXd y_hat;
    /// MSPE treating mu as known (the closed-form plug-in value).
    Eigen::VectorXd y_mspe;
    /// MSPE including the uncertainty of mu_hat.
    Eigen::VectorXd y_mspe_total;
    /// w^{(j)}_{f,i}: I x J, zero where a team is absent.
    Eigen::MatrixXd weights;
    /// I x (J + 1); column 0 is lambda^0.
    Eigen::MatrixXd lambdas;
    /// w-hat^{(j)}_f = sum_i w^{(j)}_{f,i}.
    Eigen::VectorXd climatological_weights;
    /// Joint covariance of (Y-hat - Y) over the factor's replicates, with mu
    /// estimated. Factors are independent, so this is the whole story for
    /// aggregates.
    Eigen::MatrixXd prediction_cov;
};

struct ConsensusResult {
    std::vector<FactorConsensus> factors;
    InferencePath path = InferencePath::general;
};

struct ConsensusOptions {
    InferencePath path = InferencePath::automatic;
    std::size_t threads = 1;
};

namespace detail {

[[nodiscard]] inline FactorConsensus scalar_factor(const EnsembleDataset& data, const GroupParameters& p, std::size_t f) {
    const std::size_t I = data.replicate_count(f);
    const auto J = static_cast<Eigen::Index>(data.team_count());
    const auto Ii = static_cast<Eigen::Index>(I);
    const Eigen::VectorXd precision = p.sigma2.cwiseInverse();
    const double total = precision.sum();
    const Eigen::VectorXd w = precision / (static_cast<double>(I) * total);
    FactorConsensus out;
    Eigen::MatrixXd Y(Ii, J);
    for (std::size_t i = 0; i < I; ++i) {
        for (Eigen::Index j = 0; j < J; ++j) Y(static_cast<Eigen::Index>(i), j) = data.at(f, i, static_cast<std::size_t>(j));
    }
    out.mu_hat = (Y * w).sum();
    out.mu_var = (1.0 / total + p.tau2) / static_cast<double>(I);
    const double denom = 1.0 + p.tau2 * total;
    Eigen::VectorXd lambda(J + 1);
    lambda(0) = 1.0 / denom;
    lambda.tail(J) = p.tau2 * precision / denom;
    const double mspe = p.tau2 / denom;
    out.y_hat = lambda(0) * out.mu_hat + (Y * lambda.tail(J)).array();
    out.y_mspe = Eigen::VectorXd::Constant(Ii, mspe);
    out.y_mspe_total = Eigen::VectorXd::Constant(Ii, mspe + lambda(0) * lambda(0) * out.mu_var);
    out.weights = w.transpose().replicate(Ii, 1);
    out.lambdas = lambda.transpose().replicate(Ii, 1);
    out.climatological_weights = precision / total;
    out.prediction_cov = Eigen::MatrixXd::Constant(Ii, Ii, lambda(0) * lambda(0) * out.mu_var);
    out.prediction_cov.diagonal().array() += mspe;
    return out;
}

[[nodiscard]] inline FactorConsensus general_factor(const ModelStructure& s, const GroupParameters& p, std::size_t f,
                                                    std::size_t team_count) {
    const auto [first, last] = s.factor_cells[f];
    const auto I = static_cast<Eigen::Index>(last - first);
    const auto J = static_cast<Eigen::Index>(team_count);
    std::vector<CellSolve> solves;
    double Q = 0.0, numer = 0.0;
    for (std::size_t c = first; c < last; ++c) {
        const auto& cell = s.cells[c];
        solves.push_back(solve_cell(p, cell, s.cell_values(cell)));
        Q += solves.back().q;
        numer += solves.back().one_solved_y;
    }
    if (!(Q > 0.0) || !std::isfinite(Q)) throw Error(ErrorCode::singular_system, "X' Sigma_Y^{-1} X is singular");
    FactorConsensus out;
    out.mu_hat = numer / Q;
    out.mu_var = 1.0 / Q;
    out.y_hat.resize(I);
    out.y_mspe.resize(I);
    out.y_mspe_total.resize(I);
    out.weights = Eigen::MatrixXd::Zero(I, J);
    out.lambdas = Eigen::MatrixXd::Zero(I, J + 1);
    Eigen::VectorXd g(I);
    for (Eigen::Index i = 0; i < I; ++i) {
        const auto& cell = s.cells[first + static_cast<std::size_t>(i)];
        const auto& sv = solves[static_cast<std::size_t>(i)];
        const double alpha = p.tau2 * (sv.one_solved_y - out.mu_hat * sv.q);
        out.y_hat(i) = out.mu_hat + alpha;
        out.y_mspe(i) = p.tau2 - p.tau2 * p.tau2 * sv.q;
        g(i) = 1.0 - p.tau2 * sv.q;
        out.lambdas(i, 0) = g(i);
        for (std::size_t k = 0; k < cell.teams.size(); ++k) {
            const auto j = static_cast<Eigen::Index>(cell.teams[k]);
            out.weights(i, j) = sv.u(static_cast<Eigen::Index>(k)) / Q;
            out.lambdas(i, j + 1) = p.tau2 * sv.u(static_cast<Eigen::Index>(k));
        }
    }
    out.prediction_cov = g * g.transpose() * out.mu_var;
    out.prediction_cov.diagonal() += out.y_mspe;
    out.y_mspe_total = out.prediction_cov.diagonal();
    out.climatological_weights = out.weights.colwise().sum().transpose();
    return out;
}

}  // namespace detail

[[nodiscard]] inline bool scalar_path_applies(const EnsembleDataset& data, const ParameterSet& params) {
    return data.complete() && !params.correlated();
}

/// EBLUE/EBLUP for every factor with the supplied (usually estimated)
/// parameters. The scalar path is used whenever it applies unless a path is
/// forced.
[[nodiscard]] inline ConsensusResult consensus(const EnsembleDataset& data, const ParameterSet& params,
                                               const ConsensusOptions& options = {}) {
    params.validate(data.team_count());
    if (params.binding.factor_count() != data.factor_count()) {
        throw Error(ErrorCode::invalid_argument, "parameter binding does not cover the dataset's factors");
    }
    InferencePath path = options.path;
    if (path == InferencePath::automatic) {
        path = scalar_path_applies(data, params) ? InferencePath::scalar : InferencePath::general;
    }
    if (path == InferencePath::scalar) detail::require_scalar_path(data, params);
    ConsensusResult out;
    out.path = path;
    out.factors.resize(data.factor_count());
    if (path == InferencePath::scalar) {
        parallel_for(data.factor_count(), options.threads, [&](std::size_t f) {
            out.factors[f] = detail::scalar_factor(data, params.for_factor(f), f);
        });
    } else {
        const auto s = build_structure(data);
        parallel_for(data.factor_count(), options.threads, [&](std::size_t f) {
            out.factors[f] = detail::general_factor(s, params.for_factor(f), f, data.team_count());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Intervals and the unweighted comparison
// ---------------------------------------------------------------------------

enum class IntervalLevel { one_sigma, two_sigma, ninety_five };

[[nodiscard]] constexpr double interval_multiplier(IntervalLevel level) {
    switch (level) {
        case IntervalLevel::one_sigma: return 1.0;
        case IntervalLevel::two_sigma: return 2.0;
        case IntervalLevel::ninety_five: return 1.96;
    }
    return 0.0;
}

struct Interval {
    double lo;
    double hi;

    [[nodiscard]] bool contains(double x) const noexcept { return lo <= x && x <= hi; }
};

/// point +/- k * spread, spread being a standard deviation (S_f or
/// sqrt(MSPE)).
[[nodiscard]] inline Interval intervals(double point, double spread, IntervalLevel level) {
    if (!(spread >= 0.0)) throw Error(ErrorCode::invalid_argument, "interval spread must be >= 0");
    const double k = interval_multiplier(level);
    return {point - k * spread, point + k * spread};
}

struct UnweightedFactor {
    /// (1/J') sum_j Y^{(j)}_{f,i} over present teams.
    Eigen::VectorXd cell_mean;
    double grand_mean = 0.0;
    /// var(Y-bar_{f,i} - Y_{f,i}) = sum_j (1/J')^2 sigma_j^2; the correct
    /// heteroskedastic variance of an equally weighted mean.
    Eigen::VectorXd cell_error_variance;
    /// var of the grand mean as an estimator of mu_f: adds tau^2 per
    /// replicate before dividing by I(f). Ignores team correlations.
    double mean_variance = 0.0;
};

struct UnweightedResult {
    std::vector<UnweightedFactor> factors;
};

[[nodiscard]] inline UnweightedResult unweighted_mean(const EnsembleDataset& data, const ParameterSet& params) {
    params.validate(data.team_count());
    UnweightedResult out;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto& p = params.for_factor(f);
        const auto I = static_cast<Eigen::Index>(data.replicate_count(f));
        UnweightedFactor u;
        u.cell_mean.resize(I);
        u.cell_error_variance.resize(I);
        double var_sum = 0.0;
        for (Eigen::Index i = 0; i < I; ++i) {
            const auto teams = data.present_teams(f, static_cast<std::size_t>(i));
            if (teams.empty()) throw Error(ErrorCode::missing_cell, "empty cell in unweighted mean");
            const double w = 1.0 / static_cast<double>(teams.size());
            double mean = 0.0, var = 0.0;
            for (auto j : teams) {
                mean += w * data.at(f, static_cast<std::size_t>(i), j);
                var += w * w * p.sigma2(static_cast<Eigen::Index>(j));
            }
            u.cell_mean(i) = mean;
            u.cell_error_variance(i) = var;
            var_sum += var + p.tau2;
        }
        u.grand_mean = u.cell_mean.mean();
        u.mean_variance = var_sum / static_cast<double>(I * I);
        out.factors.push_back(std::move(u));
    }
    return out;
}

}  // namespace supe
