#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "test_support.hpp"

using namespace supe;

namespace {

EnsembleDataset grid(const std::vector<std::vector<std::vector<double>>>& v) {
    DatasetBuilder b;
    for (std::size_t f = 0; f < v.size(); ++f) {
        for (std::size_t i = 0; i < v[f].size(); ++i) {
            for (std::size_t j = 0; j < v[f][i].size(); ++j) {
                b.add(FactorKey({{"f", std::to_string(f + 1)}}), ReplicateKey({{"i", std::to_string(i + 1)}}),
                      "t" + std::to_string(j + 1), v[f][i][j]);
            }
        }
    }
    return b.build();
}

}  // namespace

TEST(StandardizedErrors, ZeroWhenOutputsMatchConsensus) {
    const auto d = grid({{{1, 1, 1}, {2, 2, 2}}, {{-1, -1, -1}}});
    const auto p = ParameterSet::homogeneous(2, 1.0, Eigen::Vector3d(1, 2, 3));
    ConsensusResult r;
    r.factors.resize(2);
    r.factors[0].y_hat = Eigen::Vector2d(1, 2);
    r.factors[1].y_hat = Eigen::VectorXd::Constant(1, -1.0);
    const auto t = standardized_errors(d, p, r);
    EXPECT_EQ(t.rows.size(), 9u);
    for (const auto& row : t.rows) EXPECT_EQ(row.eta, 0.0);
}

TEST(StandardizedErrors, DoublingSigmaHalvesEta) {
    std::mt19937_64 rng(29);
    const auto d = fixtures::random_dataset(rng, 3, 4, 4, 0.2);
    const auto p = fixtures::random_params(rng, 3, 4, false);
    const auto r = consensus(d, p);
    auto wide = p;
    for (auto& g : wide.groups) g.sigma2 *= 4.0;
    const auto a = standardized_errors(d, p, r);
    const auto b = standardized_errors(d, wide, r);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (std::size_t k = 0; k < a.rows.size(); ++k) EXPECT_NEAR(b.rows[k].eta, 0.5 * a.rows[k].eta, 1e-15);
}

// With tau^2 = sigma^2 = 1 and J = 9 the residual variance is
// 1 - 2 (1 - l0) / J + l0^2 tau^2 + (1 - l0)^2 / J with l0 = 1/10, i.e. 0.9.
TEST(StandardizedErrors, UnitScaleUnderTheModel) {
    const auto spec = SimulationSpec::balanced(1, 3000, 1.0, Eigen::VectorXd::Ones(9), 31);
    const auto sim = simulate(spec);
    const auto t = standardized_errors(sim.data, spec.params, consensus(sim.data, spec.params));
    ASSERT_EQ(t.summaries.size(), 1u);
    EXPECT_GT(t.summaries[0].variance, 0.8);
    EXPECT_LT(t.summaries[0].variance, 1.2);
    EXPECT_NEAR(t.summaries[0].variance, 0.9, 0.02);
    EXPECT_NEAR(t.summaries[0].mean, 0.0, 0.02);
    EXPECT_NEAR(t.summaries[0].skewness, 0.0, 0.05);
}

TEST(QQ, SingleResidualSitsAtTheMedian) {
    ResidualTable t;
    t.group_labels = {"g"};
    t.rows.push_back({0, 0, 0, 0, 1.7});
    const auto panels = qq_export(t);
    ASSERT_EQ(panels.size(), 1u);
    EXPECT_EQ(panels[0].sample, std::vector<double>{1.7});
    EXPECT_NEAR(panels[0].theoretical[0], 0.0, 1e-15);
}

// scipy.stats.norm.ppf at (k - 0.5) / 4.
TEST(QQ, FourPointPositions) {
    ResidualTable t;
    t.group_labels = {"a", "empty"};
    for (double e : {0.3, -2.0, 1.0, 0.0}) t.rows.push_back({0, 0, 0, 0, e});
    const auto panels = qq_export(t);
    ASSERT_EQ(panels.size(), 1u);
    EXPECT_EQ(panels[0].sample, (std::vector<double>{-2.0, 0.0, 0.3, 1.0}));
    const std::vector<double> expect{-1.1503493803760079, -0.31863936396437514, 0.31863936396437514,
                                     1.1503493803760079};
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(panels[0].theoretical[k], expect[k], 1e-14);
}

TEST(QQ, QuantilesIncrease) {
    std::mt19937_64 rng(37);
    std::normal_distribution<double> n;
    ResidualTable t;
    t.group_labels = {"a"};
    for (int k = 0; k < 200; ++k) t.rows.push_back({0, 0, 0, 0, n(rng)});
    for (double offset : {0.0, 0.375, 0.5}) {
        const auto p = qq_export(t, offset).front();
        for (std::size_t k = 1; k < p.theoretical.size(); ++k) {
            EXPECT_LT(p.theoretical[k - 1], p.theoretical[k]);
            EXPECT_LE(p.sample[k - 1], p.sample[k]);
        }
    }
    EXPECT_THROW((void)qq_export(t, 1.0), Error);
}

TEST(Aggregate, SingleMemberIsTheCell) {
    std::mt19937_64 rng(41);
    const auto d = fixtures::random_dataset(rng, 2, 4, 3, 0.2);
    const auto p = fixtures::random_params(rng, 2, 3, false);
    const auto r = consensus(d, p);
    const auto a = aggregate(r, {{1, 0}}, "one");
    EXPECT_EQ(a.label, "one");
    EXPECT_EQ(a.value, r.factors[1].y_hat(0));
    EXPECT_EQ(a.variance, r.factors[1].prediction_cov(0, 0));
    EXPECT_NEAR(a.variance, r.factors[1].y_mspe_total(0), 1e-12);
}

// Aggregate variance against s' P s with P the dense prediction covariance
// of every cell, and the value against the sum of the dense predictions.
TEST(Aggregate, MatchesDenseLinearCombination) {
    std::mt19937_64 rng(43);
    std::bernoulli_distribution pick(0.5);
    for (int rep = 0; rep < 20; ++rep) {
        const auto d = fixtures::random_dataset(rng, 3, 4, 3, 0.25);
        const auto p = fixtures::random_params(rng, 3, 3, rep % 2 == 1);
        const auto m = fixtures::dense_model(d, p);
        const auto s = fixtures::dense_solution(m);
        const auto r = consensus(d, p);
        std::vector<CellRef> members;
        Eigen::VectorXd sel = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.cell_count()));
        double dense_value = 0.0;
        for (std::size_t f = 0; f < d.factor_count(); ++f) {
            for (std::size_t i = 0; i < d.replicate_count(f); ++i) {
                if (!pick(rng)) continue;
                members.push_back({f, i});
                const auto c = static_cast<Eigen::Index>(d.cell_index(f, i));
                sel(c) = 1.0;
                dense_value += s.mu(static_cast<Eigen::Index>(f)) + s.alpha(c);
            }
        }
        if (members.empty()) continue;
        const auto a = aggregate(r, members);
        EXPECT_NEAR(a.value, dense_value, 1e-9 * std::max(1.0, std::abs(dense_value)));
        const double v = sel.dot(s.prediction_cov * sel);
        EXPECT_NEAR(a.variance, v, 1e-9 * std::max(1.0, v));
    }
}

TEST(Aggregate, ValuesAddOverDisjointSelections) {
    std::mt19937_64 rng(47);
    const auto d = fixtures::random_dataset(rng, 3, 4, 3, 0.0);
    const auto p = fixtures::random_params(rng, 3, 3, false);
    const auto r = consensus(d, p);
    const std::vector<CellRef> left{{0, 0}, {1, 0}}, right{{2, 0}};
    const auto a = aggregate(r, left), b = aggregate(r, right);
    const auto both = aggregate(r, {{0, 0}, {1, 0}, {2, 0}});
    EXPECT_NEAR(both.value, a.value + b.value, 1e-12);
    // different factors are independent
    EXPECT_NEAR(both.variance, a.variance + b.variance, 1e-12);
}

TEST(Aggregate, RejectsBadSelections) {
    std::mt19937_64 rng(53);
    const auto d = fixtures::random_dataset(rng, 1, 2, 2, 0.0);
    const auto r = consensus(d, fixtures::random_params(rng, 1, 2, false));
    EXPECT_THROW((void)aggregate(r, {}), Error);
    EXPECT_THROW((void)aggregate(r, {{0, 0}, {0, 0}}), Error);
    try {
        (void)aggregate(r, {{0, 7}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::missing_cell);
    }
}

TEST(Aggregate, UnweightedVariancesAdd) {
    const auto d = grid({{{1, 3}, {2, 4}}});
    const auto p = ParameterSet::homogeneous(1, 1.0, Eigen::Vector2d(1.0, 3.0));
    const auto u = unweighted_mean(d, p);
    const auto a = aggregate(u, {{0, 0}, {0, 1}});
    EXPECT_DOUBLE_EQ(a.value, 2.0 + 3.0);
    EXPECT_DOUBLE_EQ(a.variance, 2.0 * 0.25 * (1.0 + 3.0));
}

TEST(CompareUnweighted, OneRowPerCell) {
    std::mt19937_64 rng(59);
    const auto d = fixtures::random_dataset(rng, 3, 5, 3, 0.2);
    const auto p = fixtures::random_params(rng, 3, 3, false);
    const auto rows = compare_unweighted(consensus(d, p), unweighted_mean(d, p));
    EXPECT_EQ(rows.size(), d.cell_count());
    for (const auto& r : rows) EXPECT_DOUBLE_EQ(r.delta, r.consensus - r.unweighted);
}

// The precise team reads high, so the consensus sits above the plain mean.
TEST(CompareUnweighted, PreciseTeamPullsConsensus) {
    const auto d = grid({{{1, 0, 0}, {1.2, 0.1, 0}, {0.9, 0, -0.1}}});
    const auto p = ParameterSet::homogeneous(1, 100.0, Eigen::Vector3d(0.1, 10.0, 10.0));
    const auto rows = compare_unweighted(consensus(d, p), unweighted_mean(d, p));
    for (const auto& r : rows) {
        EXPECT_GT(r.delta, 0.0);
        EXPECT_FALSE(r.outside_95 && r.delta < 0.0);
    }
}

// Equal variances and complete cells give equal team weights, so the only
// difference from the plain mean is shrinkage toward mu-hat.
TEST(CompareUnweighted, EqualVariancesLeaveOnlyShrinkage) {
    std::mt19937_64 rng(61);
    const auto d = fixtures::random_dataset(rng, 2, 6, 4, 0.0);
    const auto p = ParameterSet::homogeneous(2, 0.7, Eigen::VectorXd::Constant(4, 1.3));
    for (const auto& r : compare_unweighted(consensus(d, p), unweighted_mean(d, p))) {
        EXPECT_NEAR(r.delta, r.shrinkage, 1e-12);
    }
}
