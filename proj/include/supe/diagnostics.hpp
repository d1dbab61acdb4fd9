#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "supe/covariance.hpp"
#include "supe/data.hpp"
#include "supe/error.hpp"
#include "supe/inference.hpp"

namespace supe {

struct ResidualRow {
    std::size_t factor;
    std::size_t replicate;
    std::size_t team;
    std::size_t group;
    double eta;
};

struct ResidualSummary {
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0;
    double skewness = 0.0;
};

struct ResidualTable {
    std::vector<ResidualRow> rows;
    std::vector<std::string> group_labels;
    /// One summary per group.
    std::vector<ResidualSummary> summaries;
};

namespace detail {

[[nodiscard]] inline ResidualSummary summarize(const std::vector<double>& x) {
    ResidualSummary s;
    s.count = x.size();
    if (x.empty()) return s;
    const auto n = static_cast<double>(x.size());
    for (double v : x) s.mean += v;
    s.mean /= n;
    double m2 = 0.0, m3 = 0.0;
    for (double v : x) {
        const double d = v - s.mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    s.variance = x.size() > 1 ? m2 / (n - 1.0) : 0.0;
    const double pop_var = m2 / n;
    s.skewness = pop_var > 0.0 ? (m3 / n) / std::pow(pop_var, 1.5) : 0.0;
    return s;
}

}  // namespace detail

/// eta-hat^{(j)}_{f,i} = (Y^{(j)}_{f,i} - Y-hat_{f,i}) / sigma-hat^{(j)}_f for every present
/// output, with summaries per variance-sharing group.
[[nodiscard]] inline ResidualTable standardized_errors(const EnsembleDataset& data, const ParameterSet& params,
                                                       const ConsensusResult& result) {
    if (result.factors.size() != data.factor_count()) {
        throw Error(ErrorCode::invalid_argument, "consensus result does not match the dataset");
    }
    ResidualTable table;
    table.group_labels = params.binding.group_labels;
    std::vector<std::vector<double>> per_group(params.binding.group_count());
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto& p = params.for_factor(f);
        const auto g = params.binding.group_of_factor[f];
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            const double y_hat = result.factors[f].y_hat(static_cast<Eigen::Index>(i));
            for (auto j : data.present_teams(f, i)) {
                const double sigma2 = p.sigma2(static_cast<Eigen::Index>(j));
                if (!(sigma2 > 0.0)) throw Error(ErrorCode::zero_variance, "standardized error with sigma-hat = 0");
                const double eta = (data.at(f, i, j) - y_hat) / std::sqrt(sigma2);
                table.rows.push_back({f, i, j, g, eta});
                per_group[g].push_back(eta);
            }
        }
    }
    for (const auto& v : per_group) table.summaries.push_back(detail::summarize(v));
    return table;
}

struct QQPanel {
    std::string label;
    std::vector<double> sample;
    std::vector<double> theoretical;
};

/// Sorted residuals per group against standard-normal quantiles at plotting
/// positions (k - offset) / (n + 1 - 2 offset); offset 0.5 gives (k - 0.5) / n.
[[nodiscard]] inline std::vector<QQPanel> qq_export(const ResidualTable& residuals, double offset = 0.5) {
    if (!(offset >= 0.0 && offset < 1.0)) throw Error(ErrorCode::invalid_argument, "plotting offset must be in [0, 1)");
    const boost::math::normal_distribution<double> standard;
    std::vector<QQPanel> panels(residuals.group_labels.size());
    for (std::size_t g = 0; g < panels.size(); ++g) panels[g].label = residuals.group_labels[g];
    for (const auto& r : residuals.rows) panels.at(r.group).sample.push_back(r.eta);
    std::vector<QQPanel> out;
    for (auto& panel : panels) {
        if (panel.sample.empty()) continue;
        std::sort(panel.sample.begin(), panel.sample.end());
        const auto n = static_cast<double>(panel.sample.size());
        for (std::size_t k = 0; k < panel.sample.size(); ++k) {
            const double pos = (static_cast<double>(k + 1) - offset) / (n + 1.0 - 2.0 * offset);
            panel.theoretical.push_back(boost::math::quantile(standard, pos));
        }
        out.push_back(std::move(panel));
    }
    return out;
}

struct CellRef {
    std::size_t factor;
    std::size_t replicate;

    auto operator<=>(const CellRef&) const = default;
};

/// Cells of `data` whose factor and replicate keys satisfy `keep`.
[[nodiscard]] inline std::vector<CellRef> select_cells(
    const EnsembleDataset& data, const std::function<bool(const FactorKey&, const ReplicateKey&)>& keep) {
    std::vector<CellRef> out;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            if (keep(data.factor(f), data.replicate(f, i))) out.push_back({f, i});
        }
    }
    return out;
}

struct AggregateResult {
    std::string label;
    double value = 0.0;
    double variance = 0.0;
    std::vector<CellRef> members;

    [[nodiscard]] double sd() const { return std::sqrt(std::max(variance, 0.0)); }
};

namespace detail {

inline void check_members(const std::vector<CellRef>& members, std::size_t factor_count,
                          const std::function<std::size_t(std::size_t)>& replicates) {
    if (members.empty()) throw Error(ErrorCode::invalid_argument, "aggregate selection is empty");
    std::set<CellRef> seen;
    for (const auto& m : members) {
        if (m.factor >= factor_count || m.replicate >= replicates(m.factor)) {
            throw Error(ErrorCode::missing_cell, "aggregate selection references a missing cell");
        }
        if (!seen.insert(m).second) throw Error(ErrorCode::invalid_argument, "aggregate selection repeats a cell");
    }
}

}  // namespace detail

/// Sum of member EBLUPs. The variance sums the joint prediction covariance
/// of the selected replicates within each factor; factors are independent.
[[nodiscard]] inline AggregateResult aggregate(const ConsensusResult& result, std::vector<CellRef> members,
                                               std::string label = {}) {
    detail::check_members(members, result.factors.size(), [&](std::size_t f) {
        return static_cast<std::size_t>(result.factors[f].y_hat.size());
    });
    AggregateResult out;
    out.label = std::move(label);
    std::map<std::size_t, std::vector<Eigen::Index>> by_factor;
    for (const auto& m : members) {
        out.value += result.factors[m.factor].y_hat(static_cast<Eigen::Index>(m.replicate));
        by_factor[m.factor].push_back(static_cast<Eigen::Index>(m.replicate));
    }
    for (const auto& [f, reps] : by_factor) {
        const auto& P = result.factors[f].prediction_cov;
        for (auto a : reps) {
            for (auto b : reps) out.variance += P(a, b);
        }
    }
    out.members = std::move(members);
    return out;
}

/// Same selection applied to the unweighted means; cell errors are
/// independent so their variances add.
[[nodiscard]] inline AggregateResult aggregate(const UnweightedResult& result, std::vector<CellRef> members,
                                               std::string label = {}) {
    detail::check_members(members, result.factors.size(), [&](std::size_t f) {
        return static_cast<std::size_t>(result.factors[f].cell_mean.size());
    });
    AggregateResult out;
    out.label = std::move(label);
    for (const auto& m : members) {
        const auto i = static_cast<Eigen::Index>(m.replicate);
        out.value += result.factors[m.factor].cell_mean(i);
        out.variance += result.factors[m.factor].cell_error_variance(i);
    }
    out.members = std::move(members);
    return out;
}

struct ComparisonRow {
    std::size_t factor;
    std::size_t replicate;
    double consensus;
    double unweighted;
    /// consensus - unweighted
    double delta;
    /// lambda^0 (mu-hat - unweighted): the part of delta due to shrinkage
    /// toward the climatological mean rather than to unequal team weights.
    double shrinkage;
    /// Unweighted mean outside consensus +/- 1.96 sqrt(MSPE).
    bool outside_95;
};

[[nodiscard]] inline std::vector<ComparisonRow> compare_unweighted(const ConsensusResult& consensus,
                                                                   const UnweightedResult& unweighted) {
    if (consensus.factors.size() != unweighted.factors.size()) {
        throw Error(ErrorCode::invalid_argument, "consensus and unweighted results differ in shape");
    }
    std::vector<ComparisonRow> rows;
    for (std::size_t f = 0; f < consensus.factors.size(); ++f) {
        const auto& c = consensus.factors[f];
        const auto& u = unweighted.factors[f];
        for (Eigen::Index i = 0; i < c.y_hat.size(); ++i) {
            const double delta = c.y_hat(i) - u.cell_mean(i);
            const double shrink = c.lambdas(i, 0) * (c.mu_hat - u.cell_mean(i));
            const auto band = intervals(c.y_hat(i), std::sqrt(std::max(c.y_mspe(i), 0.0)), IntervalLevel::ninety_five);
            rows.push_back({f, static_cast<std::size_t>(i), c.y_hat(i), u.cell_mean(i), delta, shrink,
                            !band.contains(u.cell_mean(i))});
        }
    }
    return rows;
}

}  // namespace supe
