#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "supe/covariance.hpp"
#include "supe/data.hpp"
#include "supe/error.hpp"
#include "supe/estimation.hpp"
#include "supe/inference.hpp"
#include "supe/parallel.hpp"

namespace supe {

/// Generative model Y^{(j)}_{f,i} = mu_f + alpha_{f,i} + eta^{(j)}_{f,i} with
/// Gaussian alpha and eta. Zero variances are allowed.
struct SimulationSpec {
    ParameterSet params;
    Eigen::VectorXd mu;
    std::vector<std::size_t> replicates;
    std::size_t teams = 0;
    std::uint64_t seed = 1;
    std::size_t replications = 1;

    [[nodiscard]] std::size_t factor_count() const noexcept { return replicates.size(); }

    void validate() const {
        if (replicates.empty() || teams == 0) throw Error(ErrorCode::invalid_argument, "simulation needs F, J >= 1");
        if (mu.size() != static_cast<Eigen::Index>(replicates.size())) {
            throw Error(ErrorCode::invalid_argument, "simulation mu must have one entry per factor");
        }
        for (auto I : replicates) {
            if (I == 0) throw Error(ErrorCode::invalid_argument, "simulation needs I(f) >= 1");
        }
        if (params.binding.factor_count() != replicates.size()) {
            throw Error(ErrorCode::invalid_argument, "parameter binding does not match the factor count");
        }
        params.validate(teams, true);
    }

    /// F factors with I replicates each, one group per factor sharing the same
    /// tau^2 and team variances.
    [[nodiscard]] static SimulationSpec balanced(std::size_t F, std::size_t I, double tau2, const Eigen::VectorXd& sigma2,
                                                 std::uint64_t seed, double mu = 0.0) {
        SimulationSpec s;
        s.params = ParameterSet::homogeneous(F, tau2, sigma2);
        s.mu = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(F), mu);
        s.replicates.assign(F, I);
        s.teams = static_cast<std::size_t>(sigma2.size());
        s.seed = seed;
        return s;
    }
};

struct SimulationOutput {
    EnsembleDataset data;
    /// Latent consensus Y_{f,i} per cell.
    Eigen::VectorXd truth_y;
    Eigen::VectorXd truth_alpha;
};

namespace detail {

/// Independent, reproducible stream for (seed, replication, stream id).
[[nodiscard]] inline std::mt19937_64 stream_engine(std::uint64_t seed, std::uint64_t replication, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(replication), static_cast<std::uint32_t>(replication >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

/// D^{1/2} L_R: maps iid standard normals to eta with covariance D^{1/2} R D^{1/2}.
[[nodiscard]] inline Eigen::MatrixXd team_noise_factor(const GroupParameters& p) {
    Eigen::LLT<Eigen::MatrixXd> llt(p.correlation);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::not_positive_definite, "correlation is not positive definite");
    return p.sigma2.cwiseSqrt().asDiagonal() * Eigen::MatrixXd(llt.matrixL());
}

[[nodiscard]] inline std::string zero_pad(std::size_t value, std::size_t count) {
    const auto width = std::to_string(count).size();
    auto s = std::to_string(value);
    return std::string(width - std::min(width, s.size()), '0') + s;
}

}  // namespace detail

[[nodiscard]] inline SimulationOutput simulate(const SimulationSpec& spec, std::size_t replication = 0) {
    spec.validate();
    const std::size_t F = spec.factor_count();
    const std::size_t J = spec.teams;
    std::vector<Eigen::MatrixXd> noise;
    for (const auto& g : spec.params.groups) noise.push_back(detail::team_noise_factor(g));

    std::vector<FactorKey> factors;
    std::vector<std::vector<ReplicateKey>> replicates;
    std::vector<std::string> teams;
    for (std::size_t j = 0; j < J; ++j) teams.push_back("team" + detail::zero_pad(j + 1, J));
    std::size_t cells = 0;
    for (std::size_t f = 0; f < F; ++f) {
        factors.emplace_back(std::vector<KeyPart>{{"factor", std::to_string(f + 1)}});
        std::vector<ReplicateKey> reps;
        for (std::size_t i = 0; i < spec.replicates[f]; ++i) {
            reps.emplace_back(std::vector<KeyPart>{{"replicate", std::to_string(i + 1)}});
        }
        replicates.push_back(std::move(reps));
        cells += spec.replicates[f];
    }
    std::vector<double> values(cells * J);
    std::vector<unsigned char> present(cells * J, 1);
    SimulationOutput out;
    out.truth_y.resize(static_cast<Eigen::Index>(cells));
    out.truth_alpha.resize(static_cast<Eigen::Index>(cells));
    std::size_t cell = 0;
    Eigen::VectorXd z(static_cast<Eigen::Index>(J));
    for (std::size_t f = 0; f < F; ++f) {
        const auto g = spec.params.binding.group_of_factor[f];
        const auto& p = spec.params.groups[g];
        for (std::size_t i = 0; i < spec.replicates[f]; ++i, ++cell) {
            auto rng = detail::stream_engine(spec.seed, replication, cell);
            std::normal_distribution<double> normal;
            const double alpha = std::sqrt(p.tau2) * normal(rng);
            for (auto& v : z) v = normal(rng);
            const Eigen::VectorXd eta = noise[g] * z;
            const double y = spec.mu(static_cast<Eigen::Index>(f)) + alpha;
            out.truth_alpha(static_cast<Eigen::Index>(cell)) = alpha;
            out.truth_y(static_cast<Eigen::Index>(cell)) = y;
            for (std::size_t j = 0; j < J; ++j) values[cell * J + j] = y + eta(static_cast<Eigen::Index>(j));
        }
    }
    DatasetMetadata meta;
    meta.observation_type = "SIM";
    meta.source_columns = {"factor", "replicate", "team", "value"};
    out.data = EnsembleDataset(std::move(factors), std::move(replicates), std::move(teams), std::move(values),
                               std::move(present), std::move(meta));
    return out;
}

enum class CoverageMode { oracle, plugin };

struct CoverageOptions {
    IntervalLevel level = IntervalLevel::ninety_five;
    CoverageMode mode = CoverageMode::oracle;
    /// Predict with the true mu (oracle mode only) instead of the EBLUE.
    bool mean_known = false;
    /// Include the uncertainty of mu-hat in the interval width. Always on in
    /// oracle mode with estimated mu; plug-in mode defaults to the
    /// closed-form MSPE.
    bool total_mspe = false;
    EstimationConfig estimation;
    std::size_t threads = 1;
};

struct CoverageReport {
    std::size_t covered = 0;
    std::size_t total = 0;
    double coverage = 0.0;
    double nominal = 0.0;
    /// Binomial standard error of `coverage`.
    double standard_error = 0.0;
};

[[nodiscard]] inline double nominal_coverage(IntervalLevel level) {
    const double k = interval_multiplier(level);
    return std::erf(k / std::sqrt(2.0));
}

/// Fraction of latent Y_{f,i} inside their prediction intervals over
/// spec.replications simulated ensembles.
[[nodiscard]] inline CoverageReport coverage_study(const SimulationSpec& spec, const CoverageOptions& options = {}) {
    spec.validate();
    std::vector<std::size_t> covered(spec.replications, 0), total(spec.replications, 0);
    const double k = interval_multiplier(options.level);
    parallel_for(spec.replications, options.threads, [&](std::size_t r) {
        const auto sim = simulate(spec, r);
        const auto& data = sim.data;
        std::size_t hit = 0, n = 0;
        if (options.mode == CoverageMode::oracle && options.mean_known) {
            const auto s = build_structure(data);
            const auto blup = blup_alpha_general(s, spec.params, spec.mu);
            for (Eigen::Index c = 0; c < blup.y.size(); ++c) {
                const double half = k * std::sqrt(std::max(blup.alpha_cov_diag(c), 0.0));
                hit += std::abs(blup.y(c) - sim.truth_y(c)) <= half;
                ++n;
            }
        } else {
            ParameterSet params = spec.params;
            bool use_total = true;
            if (options.mode == CoverageMode::plugin) {
                params = fit(data, spec.params.binding, options.estimation).params;
                use_total = options.total_mspe;
            }
            const auto result = consensus(data, params);
            for (std::size_t f = 0; f < data.factor_count(); ++f) {
                const auto& fc = result.factors[f];
                for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
                    const auto ii = static_cast<Eigen::Index>(i);
                    const double mspe = use_total ? fc.y_mspe_total(ii) : fc.y_mspe(ii);
                    const double truth = sim.truth_y(static_cast<Eigen::Index>(data.cell_index(f, i)));
                    hit += std::abs(fc.y_hat(ii) - truth) <= k * std::sqrt(std::max(mspe, 0.0));
                    ++n;
                }
            }
        }
        covered[r] = hit;
        total[r] = n;
    });
    CoverageReport report;
    for (std::size_t r = 0; r < spec.replications; ++r) {
        report.covered += covered[r];
        report.total += total[r];
    }
    report.nominal = nominal_coverage(options.level);
    report.coverage = static_cast<double>(report.covered) / static_cast<double>(report.total);
    report.standard_error = std::sqrt(report.coverage * (1.0 - report.coverage) / static_cast<double>(report.total));
    return report;
}

struct EfficiencyReport {
    /// var(unweighted grand mean) / var(BLUE) per factor, from the variance
    /// formulas.
    Eigen::VectorXd analytic;
    /// The same ratio from mean squared errors over simulated ensembles.
    Eigen::VectorXd empirical;
    /// Delta-method standard error of `empirical`.
    Eigen::VectorXd standard_error;
    std::size_t draws = 0;
};

/// Compares the equally weighted grand mean with the BLUE of mu_f, both
/// analytically and by simulating `draws` complete ensembles per factor.
[[nodiscard]] inline EfficiencyReport efficiency_study(const SimulationSpec& spec, std::size_t draws,
                                                       std::size_t threads = 1) {
    spec.validate();
    if (draws < 2) throw Error(ErrorCode::invalid_argument, "efficiency study needs at least two draws");
    const auto F = static_cast<Eigen::Index>(spec.factor_count());
    const auto J = static_cast<Eigen::Index>(spec.teams);
    EfficiencyReport report;
    report.draws = draws;
    report.analytic.resize(F);
    report.empirical.resize(F);
    report.standard_error.resize(F);
    std::vector<std::size_t> all(static_cast<std::size_t>(J));
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
    constexpr std::size_t chunk = 1 << 16;
    const std::size_t chunks = (draws + chunk - 1) / chunk;
    for (Eigen::Index f = 0; f < F; ++f) {
        const auto& p = spec.params.for_factor(static_cast<std::size_t>(f));
        const auto I = static_cast<double>(spec.replicates[static_cast<std::size_t>(f)]);
        const Eigen::MatrixXd B = cell_covariance(p, all);
        // Per-cell GLS weights B^{-1} 1 / (I 1'B^{-1} 1), equal across replicates.
        const auto solved = solve_block(B, Eigen::VectorXd::Ones(J));
        const Eigen::VectorXd u = solved.solution;
        const double q = u.sum();
        const Eigen::VectorXd w = u / (I * q);
        const double var_blue = 1.0 / (I * q);
        const double var_mean = B.sum() / (static_cast<double>(J * J) * I);
        report.analytic(f) = var_mean / var_blue;

        const Eigen::MatrixXd noise = detail::team_noise_factor(p);
        struct Sums {
            double a = 0, b = 0, aa = 0, bb = 0, ab = 0;
        };
        std::vector<Sums> sums(chunks);
        parallel_for(chunks, threads, [&](std::size_t c) {
            auto rng = detail::stream_engine(spec.seed, static_cast<std::uint64_t>(f), c);
            std::normal_distribution<double> normal;
            Eigen::VectorXd z(J);
            const std::size_t n = std::min(chunk, draws - c * chunk);
            Sums s;
            for (std::size_t d = 0; d < n; ++d) {
                double err_mean = 0.0, err_blue = 0.0;
                for (std::size_t i = 0; i < spec.replicates[static_cast<std::size_t>(f)]; ++i) {
                    const double alpha = std::sqrt(p.tau2) * normal(rng);
                    for (auto& v : z) v = normal(rng);
                    const Eigen::VectorXd eta = noise * z;
                    err_mean += (alpha + eta.mean()) / I;
                    err_blue += alpha / I + w.dot(eta);
                }
                const double a = err_mean * err_mean, b = err_blue * err_blue;
                s.a += a;
                s.b += b;
                s.aa += a * a;
                s.bb += b * b;
                s.ab += a * b;
            }
            sums[c] = s;
        });
        Sums t;
        for (const auto& s : sums) {
            t.a += s.a;
            t.b += s.b;
            t.aa += s.aa;
            t.bb += s.bb;
            t.ab += s.ab;
        }
        const auto N = static_cast<double>(draws);
        const double A = t.a / N, Bm = t.b / N;
        const double va = t.aa / N - A * A, vb = t.bb / N - Bm * Bm, cab = t.ab / N - A * Bm;
        report.empirical(f) = A / Bm;
        const double var_ratio = (va / (Bm * Bm) - 2.0 * A * cab / (Bm * Bm * Bm) + A * A * vb / (Bm * Bm * Bm * Bm)) / N;
        report.standard_error(f) = std::sqrt(std::max(var_ratio, 0.0));
    }
    return report;
}

}  // namespace supe
