#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "supe/covariance.hpp"
#include "supe/csv.hpp"
#include "supe/data.hpp"
#include "supe/error.hpp"

namespace supe {

namespace detail {

/// Median; an even count takes the midpoint of the central pair.
[[nodiscard]] inline double median(std::vector<double> v) {
    if (v.empty()) throw Error(ErrorCode::invalid_argument, "median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Median over (i, j) of |Y^{(j)}_{f,i} - median_j Y^{(j)}_{f,i}|.
[[nodiscard]] inline double robust_variability(const EnsembleDataset& data, std::size_t f) {
    std::vector<double> deviations;
    for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
        std::vector<double> values;
        for (auto j : data.present_teams(f, i)) values.push_back(data.at(f, i, j));
        if (values.empty()) continue;
        const double med = detail::median(values);
        for (double v : values) deviations.push_back(std::abs(v - med));
    }
    if (deviations.empty()) throw Error(ErrorCode::missing_cell, "robust variability of an empty factor");
    return detail::median(std::move(deviations));
}

struct KMeansResult {
    /// Cluster of each input value; clusters are numbered by increasing mean.
    std::vector<std::size_t> assignment;
    std::vector<double> means;
    std::vector<double> within_ss;
    double total_within_ss = 0.0;
    double total_ss = 0.0;
};

/// Globally optimal one-dimensional k-means by dynamic programming over the
/// sorted values (optimal clusters are contiguous in sorted order).
/// O(k n^2).
[[nodiscard]] inline KMeansResult kmeans_1d(const std::vector<double>& values, std::size_t k) {
    const std::size_t n = values.size();
    if (n == 0) throw Error(ErrorCode::invalid_argument, "k-means of an empty set");
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const auto distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
    if (k < 1 || k > distinct) {
        throw Error(ErrorCode::invalid_argument,
                    "k = " + std::to_string(k) + " exceeds the " + std::to_string(distinct) + " distinct values");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
    std::vector<double> x(n);
    for (std::size_t t = 0; t < n; ++t) x[t] = values[order[t]];

    std::vector<double> s1(n + 1, 0.0), s2(n + 1, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        s1[t + 1] = s1[t] + x[t];
        s2[t + 1] = s2[t] + x[t] * x[t];
    }
    // Sum of squares of x[a..b) about its mean.
    auto ss = [&](std::size_t a, std::size_t b) {
        const double m = static_cast<double>(b - a);
        const double sum = s1[b] - s1[a];
        return std::max(0.0, (s2[b] - s2[a]) - sum * sum / m);
    };
    constexpr double inf = std::numeric_limits<double>::infinity();
    // cost[c][t]: best SS of x[0..t) split into c + 1 clusters.
    std::vector<std::vector<double>> cost(k, std::vector<double>(n + 1, inf));
    std::vector<std::vector<std::size_t>> split(k, std::vector<std::size_t>(n + 1, 0));
    for (std::size_t t = 1; t <= n; ++t) cost[0][t] = ss(0, t);
    for (std::size_t c = 1; c < k; ++c) {
        for (std::size_t t = c + 1; t <= n; ++t) {
            for (std::size_t s = c; s < t; ++s) {
                const double v = cost[c - 1][s] + ss(s, t);
                if (v < cost[c][t]) {
                    cost[c][t] = v;
                    split[c][t] = s;
                }
            }
        }
    }
    std::vector<std::size_t> bounds(k + 1, 0);
    bounds[k] = n;
    for (std::size_t c = k - 1; c > 0; --c) bounds[c] = split[c][bounds[c + 1]];

    KMeansResult out;
    out.assignment.assign(n, 0);
    for (std::size_t c = 0; c < k; ++c) {
        const auto a = bounds[c], b = bounds[c + 1];
        out.means.push_back((s1[b] - s1[a]) / static_cast<double>(b - a));
        out.within_ss.push_back(ss(a, b));
        out.total_within_ss += out.within_ss.back();
        for (std::size_t t = a; t < b; ++t) out.assignment[order[t]] = c;
    }
    out.total_ss = ss(0, n);
    return out;
}

/// Smallest k whose between-cluster SS is at least `threshold` of the total
/// SS (within-cluster SS at most 1 - threshold of it). Constant inputs give 1.
[[nodiscard]] inline std::size_t choose_k(const std::vector<double>& values, double threshold = 0.90) {
    if (values.empty()) throw Error(ErrorCode::invalid_argument, "choose_k of an empty set");
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const auto distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
    for (std::size_t k = 1; k <= distinct; ++k) {
        const auto r = kmeans_1d(values, k);
        if (r.total_ss <= 0.0) return 1;
        if (r.total_ss - r.total_within_ss >= threshold * r.total_ss) return k;
    }
    return distinct;
}

struct RegionGroup {
    /// 1 = most variable.
    std::size_t rank = 1;
    std::vector<std::string> regions;
    double mean_log10_variability = 0.0;
};

/// Partition of regions into variance-sharing groups, per season.
struct GroupingScheme {
    std::string season_component = "season";
    std::string region_component = "region";
    std::map<std::string, std::vector<RegionGroup>, std::less<>> seasons;
    /// Observation type whose data defined the scheme.
    std::string provenance;
    std::vector<std::string> warnings;

    [[nodiscard]] static std::string group_id(std::string_view season, std::size_t rank) {
        return "s" + std::string(season) + "g" + std::to_string(rank);
    }

    /// Binds each factor of `data` to its (season, group). Every factor's
    /// region must appear in the scheme.
    [[nodiscard]] GroupBinding bind(const EnsembleDataset& data) const {
        GroupBinding b;
        std::map<std::string, std::size_t> index;
        for (std::size_t f = 0; f < data.factor_count(); ++f) {
            const auto& key = data.factor(f);
            const auto season = key.get(season_component);
            const auto region = key.get(region_component);
            if (!season || !region) {
                throw Error(ErrorCode::schema_mismatch, "factor " + key.label() + " lacks '" + season_component +
                                                            "' or '" + region_component + "' components");
            }
            const auto it = seasons.find(*season);
            if (it == seasons.end()) {
                throw Error(ErrorCode::schema_mismatch, "season " + std::string(*season) + " missing from grouping");
            }
            std::optional<std::size_t> rank;
            for (const auto& g : it->second) {
                if (std::find(g.regions.begin(), g.regions.end(), *region) != g.regions.end()) rank = g.rank;
            }
            if (!rank) {
                throw Error(ErrorCode::schema_mismatch, "region " + std::string(*region) + " not grouped in season " +
                                                            std::string(*season));
            }
            const auto id = group_id(*season, *rank);
            auto [pos, inserted] = index.emplace(id, b.group_labels.size());
            if (inserted) b.group_labels.push_back(id);
            b.group_of_factor.push_back(pos->second);
        }
        return b;
    }
};

/// Clusters log10 robust variability of the regions within each season and
/// ranks groups by decreasing mean. Regions with zero variability join the
/// least-variable group and are reported in `warnings`.
[[nodiscard]] inline GroupingScheme build_grouping(const EnsembleDataset& data, double threshold = 0.90,
                                                   std::string season_component = "season",
                                                   std::string region_component = "region") {
    GroupingScheme scheme;
    scheme.season_component = std::move(season_component);
    scheme.region_component = std::move(region_component);
    scheme.provenance = data.metadata().observation_type;
    struct Entry {
        std::string region;
        double variability;
    };
    std::map<std::string, std::vector<Entry>, std::less<>> by_season;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto& key = data.factor(f);
        const auto season = key.get(scheme.season_component);
        const auto region = key.get(scheme.region_component);
        if (!season || !region) {
            throw Error(ErrorCode::schema_mismatch, "factor " + key.label() + " lacks season/region components");
        }
        by_season[std::string(*season)].push_back({std::string(*region), robust_variability(data, f)});
    }
    for (auto& [season, entries] : by_season) {
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            return compare_levels(a.region, b.region) < 0;
        });
        std::vector<double> logs;
        std::vector<std::string> zero_regions;
        std::vector<const Entry*> positive;
        for (const auto& e : entries) {
            if (e.variability > 0.0) {
                logs.push_back(std::log10(e.variability));
                positive.push_back(&e);
            } else {
                zero_regions.push_back(e.region);
                scheme.warnings.push_back("season " + season + " region " + e.region +
                                          ": zero variability, assigned to the least-variable group");
            }
        }
        std::vector<RegionGroup> groups;
        if (logs.empty()) {
            groups.push_back({1, zero_regions, -std::numeric_limits<double>::infinity()});
        } else {
            const auto k = choose_k(logs, threshold);
            const auto km = kmeans_1d(logs, k);
            // Cluster c (ascending mean) gets rank k - c.
            groups.resize(k);
            for (std::size_t c = 0; c < k; ++c) {
                groups[k - 1 - c].rank = k - c;
                groups[k - 1 - c].mean_log10_variability = km.means[c];
            }
            for (std::size_t t = 0; t < positive.size(); ++t) {
                groups[k - 1 - km.assignment[t]].regions.push_back(positive[t]->region);
            }
            auto& least = groups.back();
            least.regions.insert(least.regions.end(), zero_regions.begin(), zero_regions.end());
            std::sort(least.regions.begin(), least.regions.end(),
                      [](const auto& a, const auto& b) { return compare_levels(a, b) < 0; });
        }
        scheme.seasons.emplace(season, std::move(groups));
    }
    return scheme;
}

/// Table (season, region, group, rank).
inline void write_grouping(std::ostream& out, const GroupingScheme& scheme) {
    csv::write_row(out, {"season", "region", "group", "rank"});
    for (const auto& [season, groups] : scheme.seasons) {
        for (const auto& g : groups) {
            for (const auto& r : g.regions) {
                csv::write_row(out, {season, r, GroupingScheme::group_id(season, g.rank), std::to_string(g.rank)});
            }
        }
    }
}

[[nodiscard]] inline GroupingScheme read_grouping(std::istream& in) {
    const auto table = csv::read(in);
    const auto sc = table.require_column("season");
    const auto rc = table.require_column("region");
    const auto kc = table.require_column("rank");
    GroupingScheme scheme;
    std::map<std::string, std::map<std::size_t, RegionGroup>> tmp;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const auto rank = csv::parse_int(row[kc]);
        if (!rank || *rank < 1) {
            throw Error(ErrorCode::malformed_row, "line " + std::to_string(table.line_numbers[r]) + ": bad rank");
        }
        auto& g = tmp[row[sc]][static_cast<std::size_t>(*rank)];
        g.rank = static_cast<std::size_t>(*rank);
        g.regions.push_back(row[rc]);
    }
    for (auto& [season, groups] : tmp) {
        std::vector<RegionGroup> list;
        std::size_t expect = 1;
        std::vector<std::string> seen;
        for (auto& [rank, g] : groups) {
            if (rank != expect++) {
                throw Error(ErrorCode::schema_mismatch, "ranks in season " + season + " are not 1..k");
            }
            for (const auto& r : g.regions) {
                if (std::find(seen.begin(), seen.end(), r) != seen.end()) {
                    throw Error(ErrorCode::schema_mismatch, "region " + r + " grouped twice in season " + season);
                }
                seen.push_back(r);
            }
            list.push_back(std::move(g));
        }
        scheme.seasons.emplace(season, std::move(list));
    }
    return scheme;
}

}  // namespace supe
