#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "test_support.hpp"

using namespace supe;

namespace {

EnsembleDataset from_rows(const std::vector<std::vector<double>>& cells) {
    DatasetBuilder b;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (std::size_t j = 0; j < cells[i].size(); ++j) {
            b.add(FactorKey({{"f", "1"}}), ReplicateKey({{"i", std::to_string(i + 1)}}), "t" + std::to_string(j + 1),
                  cells[i][j]);
        }
    }
    return b.build();
}

double relative_gradient_error(const detail::GroupObjective& obj, const Eigen::VectorXd& theta) {
    const Eigen::VectorXd g = obj.gradient(theta);
    Eigen::VectorXd num(theta.size());
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
        Eigen::VectorXd t = theta;
        const double h = 1e-5;
        t(k) += h;
        const double fp = obj.value(t);
        t(k) -= 2 * h;
        const double fm = obj.value(t);
        num(k) = (fp - fm) / (2 * h);
    }
    return (g - num).norm() / std::max(1.0, num.norm());
}

}  // namespace

TEST(Penalty, KernelValues) {
    EXPECT_DOUBLE_EQ(log_inverse_gamma_kernel(1.0, 2.0, 3.0), -3.0);
    EXPECT_NEAR(log_inverse_gamma_kernel(2.0, 1.0, 0.0), -2.0 * std::log(2.0), 1e-15);
    EXPECT_THROW((void)log_inverse_gamma_kernel(0.0, 1.0, 1.0), Error);
}

TEST(Penalty, ProfiledScaleMaximizes) {
    const Eigen::Vector3d s2(0.5, 1.0, 3.0);
    const double a = 8.48;
    const double b = profiled_penalty_scale(s2, a);
    auto h = [&](double bb) {
        double v = 0.0;
        for (double x : s2) v += a * std::log(bb) - bb / x;
        return v;
    };
    EXPECT_NEAR(b, a * 3.0 / (2.0 + 1.0 + 1.0 / 3.0), 1e-14);
    EXPECT_GT(h(b), h(b * 1.001));
    EXPECT_GT(h(b), h(b * 0.999));
}

TEST(Penalty, SharedGroupCountsEveryFactor) {
    auto p = ParameterSet::homogeneous(1, 1.0, Eigen::Vector2d(1.0, 2.0));
    p.groups[0].penalty_scale = 1.5;
    const double one = penalty_log(p);
    auto shared = p;
    shared.binding = GroupBinding::single(3);
    EXPECT_NEAR(penalty_log(shared), 3.0 * one, 1e-12);
    double expect = 0.0;
    for (double x : {1.0, 2.0}) expect += p.penalty_shape * std::log(1.5) - (p.penalty_shape + 1) * std::log(x) - 1.5 / x;
    EXPECT_NEAR(one, expect, 1e-12);
}

// Frozen from scipy.stats.invgamma: ppf(0.975, a) / ppf(0.025, a) = 4 at
// a = 8.474815965951102 (brentq, xtol 1e-12).
TEST(CalibrateShape, QuantileRatioFour) {
    const double a = calibrate_shape(4.0, 0.025, 0.975);
    EXPECT_NEAR(a, 8.48, 0.01);
    EXPECT_NEAR(a, 8.474815965951102, 1e-8);
}

TEST(CalibrateShape, MonotoneInRatio) {
    EXPECT_GT(calibrate_shape(2.0), calibrate_shape(4.0));
    EXPECT_GT(calibrate_shape(4.0), calibrate_shape(10.0));
}

TEST(CalibrateShape, Errors) {
    try {
        (void)calibrate_shape(1.0001);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::no_root);
    }
    EXPECT_THROW((void)calibrate_shape(0.5), Error);
    EXPECT_THROW((void)calibrate_shape(4.0, 0.9, 0.1), Error);
}

TEST(Reml, MatchesNumericalIntegrationOverMu) {
    std::mt19937_64 rng(61);
    for (int rep = 0; rep < 40; ++rep) {
        const auto d = fixtures::random_dataset(rng, 1 + rep % 2, 4, 3, 0.3);
        if (d.present_count() > 12) continue;
        const auto p = fixtures::random_params(rng, d.factor_count(), d.team_count(), rep % 2 == 0);
        double oracle = 0.0;
        for (std::size_t f = 0; f < d.factor_count(); ++f) oracle += fixtures::log_integrated_likelihood(d, p, f);
        const double value = restricted_log_likelihood(d, p) + restricted_log_likelihood_constant(d);
        EXPECT_NEAR(value, oracle, 1e-5 * std::abs(oracle));
    }
}

TEST(Reml, TwoObservationsSampleVariance) {
    // F = 1, I = 2, J = 1: only v = tau^2 + sigma^2 enters; REML gives the
    // n - 1 divisor. Grid search on the library's likelihood.
    const auto d = from_rows({{0.0}, {2.0}});
    auto at = [&](double v) {
        auto p = ParameterSet::homogeneous(1, 0.0, Eigen::VectorXd::Constant(1, v));
        return restricted_log_likelihood(d, p);
    };
    double best = 0.0, best_v = 0.0;
    for (int k = 1; k <= 4000; ++k) {
        const double v = 0.001 * k;
        if (k == 1 || at(v) > best) {
            best = at(v);
            best_v = v;
        }
    }
    EXPECT_NEAR(best_v, 2.0, 1e-3);
    // and the same split between tau^2 and sigma^2 gives the same value
    auto split = ParameterSet::homogeneous(1, 0.7, Eigen::VectorXd::Constant(1, 1.3));
    EXPECT_NEAR(restricted_log_likelihood(d, split), at(2.0), 1e-14);
}

TEST(Reml, NonPositiveDefiniteGivesMinusInfinity) {
    const auto d = from_rows({{0.0, 1.0}, {2.0, 1.0}});
    auto p = ParameterSet::homogeneous(1, 1.0, Eigen::Vector2d(1.0, 1.0));
    detail::GroupObjective obj(d, {0}, EstimationConfig{}, 8.48);
    Eigen::VectorXd theta = obj.pack(p.groups[0]);
    theta(1) = std::numeric_limits<double>::infinity();
    EXPECT_EQ(obj.value(theta), -std::numeric_limits<double>::infinity());
}

TEST(Objective, DecomposesIntoLikelihoodAndPenalty) {
    std::mt19937_64 rng(67);
    for (int rep = 0; rep < 10; ++rep) {
        const auto d = fixtures::random_dataset(rng, 3, 6, 4, 0.2);
        EstimationConfig cfg;
        cfg.shape_a = 8.48;
        std::vector<std::size_t> all{0, 1, 2};
        detail::GroupObjective obj(d, all, cfg, 8.48);
        const auto start = obj.initial();
        ParameterSet p;
        p.binding = GroupBinding::single(3);
        p.groups = {obj.unpack(obj.pack(start))};
        p.penalty_shape = 8.48;
        EXPECT_NEAR(obj.value(obj.pack(start)), restricted_log_likelihood(d, p) + penalty_log(p), 1e-9);
    }
}

TEST(Objective, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(71);
    for (int rep = 0; rep < 24; ++rep) {
        const auto d = fixtures::random_dataset(rng, 2, 6, 4, rep % 2 ? 0.25 : 0.0);
        EstimationConfig cfg;
        cfg.penalize = rep % 3 != 0;
        cfg.rho_mode = rep % 4 == 0 ? RhoMode::estimated : RhoMode::fixed_zero;
        if (rep % 4 == 1) {
            cfg.rho_mode = RhoMode::fixed_known;
            cfg.known_correlation = fixtures::random_correlation(rng, static_cast<Eigen::Index>(d.team_count()));
        }
        detail::GroupObjective obj(d, {0, 1}, cfg, 8.48);
        Eigen::VectorXd theta = obj.pack(obj.initial());
        std::normal_distribution<double> n(0.0, 0.3);
        for (auto& v : theta) v += n(rng);
        EXPECT_LE(relative_gradient_error(obj, theta), 1e-4) << "rep " << rep;
    }
}

TEST(Correlation, TransformRoundTrip) {
    std::mt19937_64 rng(73);
    std::normal_distribution<double> n(0.0, 1.5);
    for (Eigen::Index J = 2; J <= 6; ++J) {
        std::vector<double> z(static_cast<std::size_t>(J * (J - 1) / 2));
        for (auto& v : z) v = n(rng);
        const auto R = correlation_from_unconstrained(z, J);
        EXPECT_EQ(R.llt().info(), Eigen::Success);
        EXPECT_LE((R.diagonal() - Eigen::VectorXd::Ones(J)).cwiseAbs().maxCoeff(), 0.0);
        EXPECT_LE((R - R.transpose()).cwiseAbs().maxCoeff(), 1e-15);
        const auto back = correlation_to_unconstrained(R);
        for (std::size_t k = 0; k < z.size(); ++k) EXPECT_NEAR(back[k], z[k], 1e-8);
    }
}

TEST(Fit, SingleTeamIsNotIdentifiable) {
    const auto d = from_rows({{0.0}, {2.0}, {1.0}});
    try {
        (void)fit(d, GroupBinding::single(1), EstimationConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::not_identifiable);
    }
}

TEST(Fit, TooFewObservationsIsNotIdentifiable) {
    const auto d = from_rows({{0.0, 1.0, 3.0}});
    try {
        (void)fit(d, GroupBinding::single(1), EstimationConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::not_identifiable);
    }
}

TEST(Fit, RecoversGeneratingValuesWithManyReplicates) {
    auto spec = SimulationSpec::balanced(1, 400, 1.0, Eigen::Vector3d(0.5, 1.0, 2.0), 5);
    const auto sim = simulate(spec);
    EstimationConfig cfg;
    cfg.penalize = false;
    const auto r = fit(sim.data, GroupBinding::single(1), cfg);
    EXPECT_TRUE(r.converged);
    const auto& g = r.params.groups[0];
    EXPECT_NEAR(g.tau2, 1.0, 0.25);
    EXPECT_NEAR(g.sigma2(0), 0.5, 0.15);
    EXPECT_NEAR(g.sigma2(1), 1.0, 0.25);
    EXPECT_NEAR(g.sigma2(2), 2.0, 0.5);
    // the optimum beats every restart and nearby points
    detail::GroupObjective obj(sim.data, {0}, cfg, cfg.resolved_shape());
    const Eigen::VectorXd theta = obj.pack(g);
    EXPECT_NEAR(obj.value(theta), r.objective, 1e-9);
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
        Eigen::VectorXd t = theta;
        t(k) += 1e-3;
        EXPECT_LE(obj.value(t), r.objective + 1e-9);
        t(k) -= 2e-3;
        EXPECT_LE(obj.value(t), r.objective + 1e-9);
    }
}

TEST(Fit, DeterministicAndThreadIndependent) {
    auto spec = SimulationSpec::balanced(6, 8, 0.8, Eigen::Vector4d(0.5, 1.0, 2.0, 1.5), 13);
    const auto sim = simulate(spec);
    EstimationConfig a;
    a.threads = 1;
    EstimationConfig b = a;
    b.threads = 4;
    const auto binding = GroupBinding::per_factor(6);
    const auto r1 = fit(sim.data, binding, a);
    const auto r2 = fit(sim.data, binding, a);
    const auto r4 = fit(sim.data, binding, b);
    for (std::size_t g = 0; g < 6; ++g) {
        EXPECT_EQ(r1.params.groups[g].sigma2, r2.params.groups[g].sigma2);
        EXPECT_EQ(r1.params.groups[g].sigma2, r4.params.groups[g].sigma2);
        EXPECT_EQ(r1.params.groups[g].tau2, r4.params.groups[g].tau2);
        EXPECT_GT(r1.params.groups[g].tau2, 0.0);
        EXPECT_GT(r1.params.groups[g].sigma2.minCoeff(), 0.0);
    }
    EXPECT_EQ(r1.objective, r4.objective);
    EXPECT_EQ(r1.traces.size(), 6u * a.restarts);
}

// Moving c from tau^2 into every team covariance leaves each cell block,
// and so the likelihood, unchanged; a free correlation matrix cannot be
// fitted alongside tau^2.
TEST(Fit, FreeCorrelationIsNotIdentifiable) {
    auto spec = SimulationSpec::balanced(1, 30, 1.0, Eigen::Vector3d(1.0, 1.0, 1.0), 17);
    const auto sim = simulate(spec);
    auto shifted = spec.params;
    shifted.groups[0].tau2 = 0.5;
    shifted.groups[0].sigma2.setConstant(1.5);
    shifted.groups[0].correlation.setConstant(0.5 / 1.5);
    shifted.groups[0].correlation.diagonal().setOnes();
    EXPECT_NEAR(restricted_log_likelihood(sim.data, shifted), restricted_log_likelihood(sim.data, spec.params), 1e-9);
    EstimationConfig cfg;
    cfg.rho_mode = RhoMode::estimated;
    try {
        (void)fit(sim.data, GroupBinding::single(1), cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::not_identifiable);
    }
}

TEST(Fit, KnownCorrelationIsUsed) {
    auto spec = SimulationSpec::balanced(1, 200, 1.0, Eigen::Vector3d(1.0, 1.0, 1.0), 19);
    spec.params.groups[0].correlation << 1, 0.6, 0, 0.6, 1, 0, 0, 0, 1;
    const auto sim = simulate(spec);
    EstimationConfig cfg;
    cfg.penalize = false;
    cfg.rho_mode = RhoMode::fixed_known;
    cfg.known_correlation = spec.params.groups[0].correlation;
    const auto r = fit(sim.data, GroupBinding::single(1), cfg);
    EXPECT_EQ(r.params.groups[0].correlation, spec.params.groups[0].correlation);
    EXPECT_NEAR(r.params.groups[0].tau2, 1.0, 0.35);
}

// With equal generating variances the a = 8.48 penalty keeps the fitted
// max/min team-variance ratio near or below 4, and does so more tightly
// than the unpenalised fit.
TEST(Fit, PenaltyShrinksVarianceRatio) {
    std::vector<double> penalised, plain;
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        auto spec = SimulationSpec::balanced(1, 6, 1.0, Eigen::VectorXd::Constant(5, 1.0), seed);
        const auto sim = simulate(spec);
        EstimationConfig on;
        on.restarts = 2;
        EstimationConfig off = on;
        off.penalize = false;
        const auto a = fit(sim.data, GroupBinding::single(1), on).params.groups[0].sigma2;
        const auto b = fit(sim.data, GroupBinding::single(1), off).params.groups[0].sigma2;
        penalised.push_back(a.maxCoeff() / a.minCoeff());
        plain.push_back(b.maxCoeff() / b.minCoeff());
    }
    std::sort(penalised.begin(), penalised.end());
    std::sort(plain.begin(), plain.end());
    EXPECT_LE(penalised[penalised.size() / 2], 4.0);
    EXPECT_LT(penalised[penalised.size() / 2], plain[plain.size() / 2]);
}
