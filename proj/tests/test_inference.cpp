#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "test_support.hpp"

using namespace supe;

namespace {

EnsembleDataset single_cell(const std::vector<double>& y) {
    DatasetBuilder b;
    for (std::size_t j = 0; j < y.size(); ++j) {
        b.add(FactorKey({{"f", "1"}}), ReplicateKey({{"i", "1"}}), "t" + std::to_string(j + 1), y[j]);
    }
    return b.build();
}

EnsembleDataset balanced(std::mt19937_64& rng, std::size_t F, std::size_t I, std::size_t J) {
    std::normal_distribution<double> n;
    DatasetBuilder b;
    for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t i = 0; i < I; ++i) {
            for (std::size_t j = 0; j < J; ++j) {
                b.add(FactorKey({{"f", std::to_string(f + 1)}}), ReplicateKey({{"i", std::to_string(i + 1)}}),
                      "t" + std::to_string(j + 1), n(rng));
            }
        }
    }
    return b.build();
}

// Golden-section minimum of a unimodal function on [lo, hi].
template <class Fn>
double golden_min(Fn f, double lo, double hi) {
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo, b = hi;
    while (b - a > 1e-12) {
        const double c = b - g * (b - a), d = a + g * (b - a);
        if (f(c) < f(d)) {
            b = d;
        } else {
            a = c;
        }
    }
    return 0.5 * (a + b);
}

}  // namespace

TEST(BlueMu, EqualVariancesGiveGrandMean) {
    std::mt19937_64 rng(1);
    const auto d = balanced(rng, 2, 4, 5);
    const auto p = ParameterSet::homogeneous(2, 0.7, Eigen::VectorXd::Constant(5, 1.3));
    const auto blue = blue_mu(d, p);
    for (std::size_t f = 0; f < 2; ++f) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = 0; j < 5; ++j) mean += d.at(f, i, j) / 20.0;
        }
        EXPECT_NEAR(blue.mu(static_cast<Eigen::Index>(f)), mean, 1e-14);
        for (double w : blue.weights[f]) EXPECT_DOUBLE_EQ(w, 1.0 / 20.0);
    }
}

TEST(BlueMu, TwoTeamWeightsMatchVarianceMinimizer) {
    const double w1 = golden_min([](double w) { return w * w * 1.0 + (1 - w) * (1 - w) * 3.0; }, 0.0, 1.0);
    EXPECT_NEAR(w1, 0.75, 1e-8);
    const auto d = single_cell({1.0, 2.0});
    const auto p = ParameterSet::homogeneous(1, 0.0, Eigen::Vector2d(1.0, 3.0));
    const auto blue = blue_mu(d, p);
    EXPECT_NEAR(blue.weights[0](0), w1, 1e-8);
    EXPECT_NEAR(blue.weights[0](1), 1.0 - w1, 1e-8);
    EXPECT_DOUBLE_EQ(blue.weights[0](0), 0.75);
}

TEST(BlueMu, FifteenFiveSplit) {
    Eigen::VectorXd s2(20);
    s2.head(15).setConstant(1.0);
    s2.tail(5).setConstant(4.0);
    std::vector<double> y(20, 0.0);
    const auto blue = blue_mu(single_cell(y), ParameterSet::homogeneous(1, 0.0, s2));
    EXPECT_NEAR(blue.weights[0](0), 1.0 / 16.25, 1e-15);
    EXPECT_NEAR(blue.weights[0](19), 0.25 / 16.25, 1e-15);
    EXPECT_NEAR(blue.variance(0), 1.0 / 16.25, 1e-15);
}

TEST(BlueMu, UnbalancedDataRejectedOnScalarPath) {
    DatasetBuilder b;
    b.add(FactorKey({{"f", "1"}}), ReplicateKey({{"i", "1"}}), "a", 1.0);
    b.add(FactorKey({{"f", "1"}}), ReplicateKey({{"i", "2"}}), "b", 1.0);
    const auto d = b.build();
    try {
        (void)blue_mu(d, ParameterSet::homogeneous(1, 1.0, Eigen::Vector2d(1, 1)));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unbalanced_data);
    }
}

TEST(BlueMu, ZeroVarianceRejected) {
    const auto d = single_cell({1.0, 2.0});
    try {
        (void)blue_mu(d, ParameterSet::homogeneous(1, 1.0, Eigen::Vector2d(1, 0)));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::zero_variance);
    }
}

TEST(BlupY, SingleTeamMatchesGaussianConditioning) {
    // Y ~ N(mu, tau2), Y1 = Y + eta: E[Y | Y1] = mu + tau2 / (tau2 + s2) (Y1 - mu).
    const double tau2 = 1.0, s2 = 1.0, mu = 0.3, y1 = 2.0;
    const double gain = tau2 / (tau2 + s2);
    const double cond_mean = mu + gain * (y1 - mu);
    const double cond_var = tau2 - tau2 * tau2 / (tau2 + s2);
    const auto d = single_cell({y1});
    const auto blup = blup_y(d, ParameterSet::homogeneous(1, tau2, Eigen::VectorXd::Constant(1, s2)),
                             Eigen::VectorXd::Constant(1, mu));
    EXPECT_NEAR(blup.lambdas[0](0), 1.0 - gain, 1e-15);
    EXPECT_NEAR(blup.lambdas[0](1), gain, 1e-15);
    EXPECT_NEAR(blup.y[0](0), cond_mean, 1e-15);
    EXPECT_NEAR(blup.mspe(0), cond_var, 1e-15);
    EXPECT_DOUBLE_EQ(blup.lambdas[0](0), 0.5);
    EXPECT_DOUBLE_EQ(blup.mspe(0), 0.5);
}

TEST(BlupY, LargeProcessVarianceDropsTheMean) {
    const auto d = single_cell({1.0, 3.0});
    const auto blup = blup_y(d, ParameterSet::homogeneous(1, 1e12, Eigen::Vector2d(1.0, 3.0)),
                             Eigen::VectorXd::Constant(1, 100.0));
    EXPECT_LT(blup.lambdas[0](0), 1e-11);
    EXPECT_NEAR(blup.y[0](0), 0.75 * 1.0 + 0.25 * 3.0, 1e-9);
}

TEST(BlupY, PreciseTeamDominates) {
    const auto d = single_cell({1.0, 5.0, -2.0});
    const auto blup = blup_y(d, ParameterSet::homogeneous(1, 1.0, Eigen::Vector3d(1e-12, 1.0, 2.0)),
                             Eigen::VectorXd::Constant(1, 0.0));
    EXPECT_NEAR(blup.lambdas[0](1), 1.0, 1e-11);
    EXPECT_NEAR(blup.y[0](0), 1.0, 1e-11);
    EXPECT_LT(blup.mspe(0), 1e-11);
}

TEST(BlupY, ZeroProcessVarianceIsFinite) {
    const auto d = single_cell({1.0, 5.0});
    const auto blup =
        blup_y(d, ParameterSet::homogeneous(1, 0.0, Eigen::Vector2d(1.0, 1.0)), Eigen::VectorXd::Constant(1, 2.0));
    EXPECT_EQ(blup.lambdas[0](0), 1.0);
    EXPECT_EQ(blup.y[0](0), 2.0);
    EXPECT_EQ(blup.mspe(0), 0.0);
}

TEST(General, SingleDatum) {
    const auto d = single_cell({4.5});
    const auto s = build_structure(d);
    const auto g = blue_mu_general(s, ParameterSet::homogeneous(1, 0.0, Eigen::VectorXd::Constant(1, 1.0)));
    EXPECT_EQ(g.mu(0), 4.5);
    EXPECT_EQ(g.cov(0, 0), 1.0);
}

TEST(General, NoRandomEffectMeansNoAlpha) {
    std::mt19937_64 rng(2);
    const auto d = fixtures::random_dataset(rng, 3, 4, 4, 0.3);
    auto p = fixtures::random_params(rng, 3, d.team_count(), true);
    for (auto& g : p.groups) g.tau2 = 0.0;
    const auto s = build_structure(d);
    const auto blue = blue_mu_general(s, p);
    const auto blup = blup_alpha_general(s, p, blue.mu);
    EXPECT_EQ(blup.alpha, Eigen::VectorXd::Zero(blup.alpha.size()));
    for (const auto& c : s.cells) {
        EXPECT_EQ(blup.y(static_cast<Eigen::Index>(c.alpha_index)), blue.mu(static_cast<Eigen::Index>(c.factor)));
    }
}

TEST(General, NearlyDuplicatedTeamsShareOneWeight) {
    // Teams 1 and 2 are almost copies of each other; team 3 is independent.
    auto p = ParameterSet::homogeneous(1, 0.0, Eigen::Vector3d(1, 1, 1));
    p.groups[0].correlation(0, 1) = p.groups[0].correlation(1, 0) = 0.99;
    const auto d = single_cell({0.1, 0.2, 0.3});
    const auto s = build_structure(d);
    const auto blue = blue_mu_general(s, p);
    // dense oracle: w = Sigma^{-1} 1 / 1' Sigma^{-1} 1
    const auto m = fixtures::dense_model(d, p);
    const Eigen::VectorXd u = m.sigma_y.inverse() * Eigen::VectorXd::Ones(3);
    const Eigen::VectorXd w = u / u.sum();
    EXPECT_LE((blue.row_weights - w).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(blue.row_weights(0) / blue.row_weights(2), 0.5, 0.01);
    EXPECT_NEAR(blue.row_weights(0) + blue.row_weights(1), blue.row_weights(2), 0.01);
}

// Per-cell block algebra against textbook dense GLS on random instances
// with correlation and missing teams.
TEST(General, MatchesDenseGls) {
    std::mt19937_64 rng(23);
    for (int rep = 0; rep < 60; ++rep) {
        const auto d = fixtures::random_dataset(rng, 1 + rep % 3, 5, 2 + rep % 4, 0.3);
        const auto p = fixtures::random_params(rng, d.factor_count(), d.team_count(), rep % 2 == 0, rep % 3 == 0);
        const auto s = build_structure(d);
        const auto m = fixtures::dense_model(d, p);
        const auto oracle = fixtures::dense_solution(m);
        const auto blue = blue_mu_general(s, p);
        EXPECT_LE((blue.mu - oracle.mu).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LE((blue.cov - oracle.mu_cov).cwiseAbs().maxCoeff(), 1e-10);
        const auto blup = blup_alpha_general(s, p, blue.mu);
        EXPECT_LE((blup.alpha - oracle.alpha).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LE((blup.alpha_cov_diag - oracle.alpha_cov.diagonal()).cwiseAbs().maxCoeff(), 1e-10);
        const Eigen::MatrixXd off = oracle.alpha_cov - Eigen::MatrixXd(oracle.alpha_cov.diagonal().asDiagonal());
        EXPECT_LE(off.cwiseAbs().maxCoeff(), 1e-12);
        const Eigen::MatrixXd Z = m.Z;
        EXPECT_LE((prediction_covariance_dense(s, blup) - Z * oracle.alpha_cov * Z.transpose()).cwiseAbs().maxCoeff(),
                  1e-10);

        const auto result = consensus(d, p, {InferencePath::general, 1});
        for (std::size_t f = 0; f < d.factor_count(); ++f) {
            const auto& fc = result.factors[f];
            const auto first = static_cast<Eigen::Index>(d.cell_index(f, 0));
            const auto I = static_cast<Eigen::Index>(d.replicate_count(f));
            EXPECT_LE((fc.prediction_cov - oracle.prediction_cov.block(first, first, I, I)).cwiseAbs().maxCoeff(),
                      1e-10);
            EXPECT_NEAR(fc.mu_var, oracle.mu_cov(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(f)), 1e-10);
        }
        // factors are independent
        for (std::size_t f = 0; f < d.factor_count(); ++f) {
            for (std::size_t g = f + 1; g < d.factor_count(); ++g) {
                const auto a = static_cast<Eigen::Index>(d.cell_index(f, 0));
                const auto b = static_cast<Eigen::Index>(d.cell_index(g, 0));
                EXPECT_LE(std::abs(oracle.prediction_cov(a, b)), 1e-12);
            }
        }
    }
}

// Henderson's mixed-model equations: the BLUP solves
// Z' Sigma_eta^{-1} (Y - X mu* - Z alpha*) = Sigma_alpha^{-1} alpha*.
TEST(General, MixedModelEquationsResidual) {
    std::mt19937_64 rng(29);
    for (int rep = 0; rep < 30; ++rep) {
        const auto d = fixtures::random_dataset(rng, 2, 4, 4, 0.2);
        const auto p = fixtures::random_params(rng, 2, d.team_count(), rep % 2 == 1);
        const auto s = build_structure(d);
        const auto m = fixtures::dense_model(d, p);
        const auto blue = blue_mu_general(s, p);
        const auto blup = blup_alpha_general(s, p, blue.mu);
        const Eigen::VectorXd resid = m.y - m.X * blue.mu - m.Z * blup.alpha;
        const Eigen::VectorXd lhs = m.Z.transpose() * m.sigma_eta.llt().solve(resid);
        const Eigen::VectorXd rhs = m.sigma_alpha.diagonal().cwiseInverse().cwiseProduct(blup.alpha);
        EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-8);
        // and the mu equation X' Sigma_eta^{-1} resid = 0
        EXPECT_LE((m.X.transpose() * m.sigma_eta.llt().solve(resid)).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(ScalarVsGeneral, AgreeOnBalancedUncorrelated) {
    std::mt19937_64 rng(31);
    for (int rep = 0; rep < 40; ++rep) {
        const std::size_t F = 1 + rep % 4, I = 1 + rep % 8, J = 1 + rep % 6;
        const auto d = balanced(rng, F, I, J);
        const auto p = fixtures::random_params(rng, F, J, false, rep % 2 == 0);
        const auto blue = blue_mu(d, p);
        const auto s = build_structure(d);
        const auto gblue = blue_mu_general(s, p);
        EXPECT_LE((blue.mu - gblue.mu).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LE((blue.variance - gblue.cov.diagonal()).cwiseAbs().maxCoeff(), 1e-10);
        Eigen::VectorXd truth(static_cast<Eigen::Index>(F));
        for (auto& v : truth) v = std::normal_distribution<double>()(rng);
        const auto blup = blup_y(d, p, truth);
        const auto gblup = blup_alpha_general(s, p, truth);
        for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t i = 0; i < I; ++i) {
                const auto c = static_cast<Eigen::Index>(d.cell_index(f, i));
                EXPECT_NEAR(blup.y[f](static_cast<Eigen::Index>(i)), gblup.y(c), 1e-10);
                EXPECT_NEAR(blup.mspe(static_cast<Eigen::Index>(f)), gblup.alpha_cov_diag(c), 1e-10);
                EXPECT_LE((blup.lambdas[f].transpose() - gblup.lambdas.row(c)).cwiseAbs().maxCoeff(), 1e-10);
            }
        }
        const auto a = consensus(d, p, {InferencePath::scalar, 1});
        const auto b = consensus(d, p, {InferencePath::general, 1});
        for (std::size_t f = 0; f < F; ++f) {
            EXPECT_NEAR(a.factors[f].mu_hat, b.factors[f].mu_hat, 1e-10);
            EXPECT_LE((a.factors[f].y_hat - b.factors[f].y_hat).cwiseAbs().maxCoeff(), 1e-10);
            EXPECT_LE((a.factors[f].weights - b.factors[f].weights).cwiseAbs().maxCoeff(), 1e-10);
            EXPECT_LE((a.factors[f].prediction_cov - b.factors[f].prediction_cov).cwiseAbs().maxCoeff(), 1e-10);
            EXPECT_LE((a.factors[f].climatological_weights - b.factors[f].climatological_weights).cwiseAbs().maxCoeff(),
                      1e-10);
        }
    }
}

TEST(Consensus, NormalizationAndBounds) {
    std::mt19937_64 rng(37);
    for (int rep = 0; rep < 40; ++rep) {
        const auto d = fixtures::random_dataset(rng, 3, 6, 5, rep % 2 == 0 ? 0.0 : 0.3);
        const auto p = fixtures::random_params(rng, 3, d.team_count(), rep % 3 == 0);
        const auto r = consensus(d, p);
        for (std::size_t f = 0; f < d.factor_count(); ++f) {
            const auto& fc = r.factors[f];
            EXPECT_NEAR(fc.weights.sum(), 1.0, 1e-12);
            EXPECT_NEAR(fc.climatological_weights.sum(), 1.0, 1e-12);
            for (Eigen::Index i = 0; i < fc.lambdas.rows(); ++i) EXPECT_NEAR(fc.lambdas.row(i).sum(), 1.0, 1e-12);
            EXPECT_GE(fc.mu_var, 0.0);
            EXPECT_GE(fc.y_mspe.minCoeff(), 0.0);
            EXPECT_GE((fc.y_mspe_total - fc.y_mspe).minCoeff(), -1e-15);
            const auto& g = p.for_factor(f);
            if (!g.correlated() && d.factor_complete(f)) {
                const double bound = std::min(g.tau2, g.sigma2.minCoeff());
                EXPECT_LE(fc.y_mspe.maxCoeff(), bound * (1 + 1e-12));
                for (Eigen::Index i = 0; i < fc.weights.rows(); ++i) {
                    EXPECT_LE((fc.climatological_weights.transpose() -
                               static_cast<double>(d.replicate_count(f)) * fc.weights.row(i))
                                  .cwiseAbs()
                                  .maxCoeff(),
                              1e-12);
                }
            }
        }
    }
}

TEST(Consensus, DeterministicAcrossThreadCounts) {
    std::mt19937_64 rng(41);
    const auto d = fixtures::random_dataset(rng, 12, 6, 5, 0.2);
    const auto p = fixtures::random_params(rng, 12, d.team_count(), true);
    const auto a = consensus(d, p, {InferencePath::automatic, 1});
    const auto b = consensus(d, p, {InferencePath::automatic, 4});
    for (std::size_t f = 0; f < d.factor_count(); ++f) {
        EXPECT_EQ(a.factors[f].y_hat, b.factors[f].y_hat);
        EXPECT_EQ(a.factors[f].prediction_cov, b.factors[f].prediction_cov);
    }
}

// Var of sum w Y over the simplex never beats the BLUE.
TEST(Optimality, SimplexWeightingsNeverBeatBlue) {
    std::mt19937_64 rng(43);
    std::exponential_distribution<double> e(1.0);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t J = 2 + rep % 5;
        const auto p = fixtures::random_params(rng, 1, J, false);
        std::vector<double> zeros(J, 0.0);
        const auto blue = blue_mu(single_cell(zeros), p);
        const Eigen::VectorXd s2 = p.groups[0].sigma2;
        const double tau2 = p.groups[0].tau2;
        for (int k = 0; k < 1000; ++k) {
            Eigen::VectorXd w(static_cast<Eigen::Index>(J));
            for (auto& v : w) v = e(rng);
            w /= w.sum();
            const double var = tau2 + w.cwiseProduct(w).dot(s2);
            EXPECT_GE(var, blue.variance(0) - 1e-14);
        }
    }
}

TEST(Optimality, BlupBeatsAlternativePredictor) {
    // Monte Carlo: BLUP error variance matches its MSPE and is below the
    // equally weighted cell mean's.
    const Eigen::Vector3d s2(0.3, 1.0, 4.0);
    auto spec = SimulationSpec::balanced(1, 100000, 1.5, s2, 99, 2.0);
    const auto sim = simulate(spec);
    const auto blup = blup_y(sim.data, spec.params, spec.mu);
    double se_blup = 0.0, se_mean = 0.0;
    for (std::size_t i = 0; i < sim.data.replicate_count(0); ++i) {
        const double truth = sim.truth_y(static_cast<Eigen::Index>(i));
        const double mean = (sim.data.at(0, i, 0) + sim.data.at(0, i, 1) + sim.data.at(0, i, 2)) / 3.0;
        se_blup += std::pow(blup.y[0](static_cast<Eigen::Index>(i)) - truth, 2);
        se_mean += std::pow(mean - truth, 2);
    }
    const double n = 100000.0;
    const double mspe = blup.mspe(0);
    EXPECT_NEAR(se_blup / n, mspe, 4.0 * mspe * std::sqrt(2.0 / n));
    EXPECT_LT(se_blup / n, se_mean / n);
}

TEST(Intervals, Multipliers) {
    const auto a = intervals(0.0, 1.0, IntervalLevel::two_sigma);
    EXPECT_EQ(a.lo, -2.0);
    EXPECT_EQ(a.hi, 2.0);
    const auto b = intervals(5.0, 0.0, IntervalLevel::ninety_five);
    EXPECT_EQ(b.lo, 5.0);
    EXPECT_EQ(b.hi, 5.0);
    const auto c = intervals(10.0, 2.0, IntervalLevel::ninety_five);
    EXPECT_NEAR(c.lo, 6.08, 1e-12);
    EXPECT_NEAR(c.hi, 13.92, 1e-12);
    EXPECT_THROW((void)intervals(0.0, -1.0, IntervalLevel::one_sigma), Error);
}

TEST(Unweighted, EqualVariance) {
    std::vector<double> y(20, 1.0);
    const auto u = unweighted_mean(single_cell(y), ParameterSet::homogeneous(1, 0.0, Eigen::VectorXd::Constant(20, 2.5)));
    EXPECT_NEAR(u.factors[0].cell_error_variance(0), 2.5 / 20.0, 1e-15);
}

TEST(Unweighted, HeteroskedasticVarianceMatchesSimulation) {
    const auto d = single_cell({0.0, 0.0});
    const auto p = ParameterSet::homogeneous(1, 0.0, Eigen::Vector2d(1.0, 3.0));
    EXPECT_DOUBLE_EQ(unweighted_mean(d, p).factors[0].cell_error_variance(0), 1.0);
    std::mt19937_64 rng(47);
    std::normal_distribution<double> n;
    const int N = 400000;
    double ss = 0.0;
    for (int k = 0; k < N; ++k) {
        const double m = 0.5 * (n(rng) + std::sqrt(3.0) * n(rng));
        ss += m * m;
    }
    EXPECT_NEAR(ss / N, 1.0, 4.0 * std::sqrt(2.0 / N));
}

TEST(Unweighted, NeverMorePreciseThanBlue) {
    std::mt19937_64 rng(53);
    for (int rep = 0; rep < 30; ++rep) {
        const auto d = balanced(rng, 2, 1 + rep % 6, 1 + rep % 5);
        const auto p = fixtures::random_params(rng, 2, d.team_count(), false);
        const auto u = unweighted_mean(d, p);
        const auto b = blue_mu(d, p);
        for (std::size_t f = 0; f < 2; ++f) {
            EXPECT_GE(u.factors[f].mean_variance, b.variance(static_cast<Eigen::Index>(f)) * (1 - 1e-12));
        }
    }
}
