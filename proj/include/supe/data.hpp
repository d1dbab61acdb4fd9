#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <initializer_list>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "supe/csv.hpp"
#include "supe/error.hpp"

namespace supe {

/// Orders level strings numerically when both parse as integers, otherwise
/// lexicographically. Keeps "2" < "10" for month and season levels.
[[nodiscard]] inline std::strong_ordering compare_levels(std::string_view a, std::string_view b) {
    const auto ia = csv::parse_int(a);
    const auto ib = csv::parse_int(b);
    if (ia && ib) return *ia <=> *ib;
    if (ia != ib) return ia ? std::strong_ordering::less : std::strong_ordering::greater;
    const int c = a.compare(b);
    return c < 0 ? std::strong_ordering::less
                 : (c > 0 ? std::strong_ordering::greater : std::strong_ordering::equal);
}

struct KeyPart {
    std::string name;
    std::string level;

    bool operator==(const KeyPart&) const = default;
};

/// Ordered list of (name, level) components. Used both for factor
/// combinations (season, region) and for replicate labels (year, month).
class Key {
public:
    Key() = default;

    Key(std::initializer_list<KeyPart> parts) : Key(std::vector<KeyPart>(parts)) {}

    explicit Key(std::vector<KeyPart> parts) : parts_(std::move(parts)) {
        for (std::size_t a = 0; a < parts_.size(); ++a) {
            for (std::size_t b = a + 1; b < parts_.size(); ++b) {
                if (parts_[a].name == parts_[b].name) {
                    throw Error(ErrorCode::inconsistent_factor,
                                "duplicate key component '" + parts_[a].name + "'");
                }
            }
        }
    }

    [[nodiscard]] const std::vector<KeyPart>& parts() const noexcept { return parts_; }
    [[nodiscard]] std::size_t size() const noexcept { return parts_.size(); }

    [[nodiscard]] std::optional<std::string_view> get(std::string_view name) const {
        for (const auto& p : parts_) {
            if (p.name == name) return std::string_view(p.level);
        }
        return std::nullopt;
    }

    /// "season=1;region=T01"
    [[nodiscard]] std::string label() const {
        std::string out;
        for (const auto& p : parts_) {
            if (!out.empty()) out += ';';
            out += p.name + '=' + p.level;
        }
        return out;
    }

    bool operator==(const Key&) const = default;

    std::strong_ordering operator<=>(const Key& other) const {
        const std::size_t n = std::min(parts_.size(), other.parts_.size());
        for (std::size_t k = 0; k < n; ++k) {
            if (auto c = parts_[k].name <=> other.parts_[k].name; c != 0) return c;
            if (auto c = compare_levels(parts_[k].level, other.parts_[k].level); c != 0) return c;
        }
        return parts_.size() <=> other.parts_.size();
    }

private:
    std::vector<KeyPart> parts_;
};

using FactorKey = Key;
using ReplicateKey = Key;

struct DatasetMetadata {
    std::string observation_type;
    std::string unit;
    /// Column layout of the source table, used by write_csv.
    std::vector<std::string> source_columns;
    std::string team_column = "team";
    std::string value_column = "value";
    std::string observation_type_column;
};

/// MIP outputs Y^{(j)}_{f,i}: F factors, I(f) replicates each, J teams.
/// Absent (f, i, j) entries are tracked by an explicit mask. Immutable once
/// built; share freely across threads.
class EnsembleDataset {
public:
    EnsembleDataset() = default;

    EnsembleDataset(std::vector<FactorKey> factors,
                    std::vector<std::vector<ReplicateKey>> replicates,
                    std::vector<std::string> teams,
                    std::vector<double> values,
                    std::vector<unsigned char> present,
                    DatasetMetadata metadata = {})
        : factors_(std::move(factors)),
          replicates_(std::move(replicates)),
          teams_(std::move(teams)),
          values_(std::move(values)),
          present_(std::move(present)),
          metadata_(std::move(metadata)) {
        if (factors_.empty()) throw Error(ErrorCode::invalid_argument, "dataset needs F >= 1 factors");
        if (teams_.empty()) throw Error(ErrorCode::invalid_argument, "dataset needs J >= 1 teams");
        if (replicates_.size() != factors_.size()) {
            throw Error(ErrorCode::invalid_argument, "replicate list count must equal factor count");
        }
        cell_offset_.resize(factors_.size() + 1, 0);
        for (std::size_t f = 0; f < factors_.size(); ++f) {
            if (replicates_[f].empty()) {
                throw Error(ErrorCode::invalid_argument,
                            "factor " + factors_[f].label() + " has no replicates");
            }
            cell_offset_[f + 1] = cell_offset_[f] + replicates_[f].size();
        }
        const std::size_t n = cell_offset_.back() * teams_.size();
        if (values_.size() != n || present_.size() != n) {
            throw Error(ErrorCode::invalid_argument, "value/mask size does not match dimensions");
        }
        for (std::size_t f = 0; f < factor_count(); ++f) {
            for (std::size_t i = 0; i < replicate_count(f); ++i) {
                std::size_t count = 0;
                for (std::size_t j = 0; j < team_count(); ++j) {
                    const auto k = index(f, i, j);
                    if (!present_[k]) continue;
                    ++count;
                    if (!std::isfinite(values_[k])) {
                        throw Error(ErrorCode::non_finite_value,
                                    "non-finite value at " + factors_[f].label());
                    }
                }
                if (count == 0) {
                    throw Error(ErrorCode::missing_cell, "cell (" + factors_[f].label() + ", " +
                                                             replicates_[f][i].label() +
                                                             ") has no team values");
                }
            }
        }
    }

    [[nodiscard]] std::size_t factor_count() const noexcept { return factors_.size(); }
    [[nodiscard]] std::size_t team_count() const noexcept { return teams_.size(); }
    [[nodiscard]] std::size_t replicate_count(std::size_t f) const { return replicates_.at(f).size(); }
    /// Number of (f, i) cells, i.e. sum of I(f).
    [[nodiscard]] std::size_t cell_count() const noexcept { return cell_offset_.back(); }
    /// Position of cell (f, i) in the canonical (f-major, i-minor) order.
    [[nodiscard]] std::size_t cell_index(std::size_t f, std::size_t i) const { return cell_offset_[f] + i; }

    [[nodiscard]] const FactorKey& factor(std::size_t f) const { return factors_.at(f); }
    [[nodiscard]] const std::vector<FactorKey>& factors() const noexcept { return factors_; }
    [[nodiscard]] const ReplicateKey& replicate(std::size_t f, std::size_t i) const { return replicates_.at(f).at(i); }
    [[nodiscard]] const std::string& team(std::size_t j) const { return teams_.at(j); }
    [[nodiscard]] const std::vector<std::string>& teams() const noexcept { return teams_; }
    [[nodiscard]] const DatasetMetadata& metadata() const noexcept { return metadata_; }

    [[nodiscard]] bool present(std::size_t f, std::size_t i, std::size_t j) const {
        return present_[index(f, i, j)] != 0;
    }

    [[nodiscard]] std::optional<double> value(std::size_t f, std::size_t i, std::size_t j) const {
        const auto k = index(f, i, j);
        if (!present_[k]) return std::nullopt;
        return values_[k];
    }

    /// Value of a cell known to be present.
    [[nodiscard]] double at(std::size_t f, std::size_t i, std::size_t j) const {
        const auto k = index(f, i, j);
        if (!present_[k]) {
            throw Error(ErrorCode::missing_cell, "team " + teams_[j] + " absent at " + factors_[f].label());
        }
        return values_[k];
    }

    /// Teams present in cell (f, i), ascending.
    [[nodiscard]] std::vector<std::size_t> present_teams(std::size_t f, std::size_t i) const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < team_count(); ++j) {
            if (present(f, i, j)) out.push_back(j);
        }
        return out;
    }

    [[nodiscard]] std::size_t present_count() const {
        std::size_t n = 0;
        for (auto p : present_) n += p;
        return n;
    }

    [[nodiscard]] bool factor_complete(std::size_t f) const {
        for (std::size_t i = 0; i < replicate_count(f); ++i) {
            for (std::size_t j = 0; j < team_count(); ++j) {
                if (!present(f, i, j)) return false;
            }
        }
        return true;
    }

    [[nodiscard]] bool complete() const {
        return std::all_of(present_.begin(), present_.end(), [](unsigned char p) { return p != 0; });
    }

    [[nodiscard]] std::optional<std::size_t> find_factor(const FactorKey& key) const {
        auto it = std::lower_bound(factors_.begin(), factors_.end(), key);
        if (it == factors_.end() || !(*it == key)) return std::nullopt;
        return static_cast<std::size_t>(it - factors_.begin());
    }

    [[nodiscard]] std::optional<std::size_t> find_replicate(std::size_t f, const ReplicateKey& key) const {
        const auto& reps = replicates_.at(f);
        auto it = std::lower_bound(reps.begin(), reps.end(), key);
        if (it == reps.end() || !(*it == key)) return std::nullopt;
        return static_cast<std::size_t>(it - reps.begin());
    }

    [[nodiscard]] std::optional<std::size_t> find_team(std::string_view name) const {
        auto it = std::lower_bound(teams_.begin(), teams_.end(), name);
        if (it == teams_.end() || *it != name) return std::nullopt;
        return static_cast<std::size_t>(it - teams_.begin());
    }

    /// "F=108 J=9 I(f)=6 for all f" style summary.
    [[nodiscard]] std::string summary() const {
        std::ostringstream out;
        out << "F=" << factor_count() << " J=" << team_count();
        std::size_t lo = replicate_count(0), hi = lo;
        for (std::size_t f = 1; f < factor_count(); ++f) {
            lo = std::min(lo, replicate_count(f));
            hi = std::max(hi, replicate_count(f));
        }
        if (lo == hi) {
            out << " I(f)=" << lo << " for all f";
        } else {
            out << " I(f) in [" << lo << ", " << hi << "]";
        }
        out << " observations=" << present_count();
        return out.str();
    }

private:
    [[nodiscard]] std::size_t index(std::size_t f, std::size_t i, std::size_t j) const {
        if (f >= factors_.size() || i >= replicates_[f].size() || j >= teams_.size()) {
            throw Error(ErrorCode::invalid_argument, "cell index out of range");
        }
        return (cell_offset_[f] + i) * teams_.size() + j;
    }

    std::vector<FactorKey> factors_;
    std::vector<std::vector<ReplicateKey>> replicates_;
    std::vector<std::string> teams_;
    std::vector<double> values_;
    std::vector<unsigned char> present_;
    std::vector<std::size_t> cell_offset_{0};
    DatasetMetadata metadata_;
};

/// Accumulates (factor, replicate, team, value) records and canonicalises
/// them: factors and replicates sorted by key, teams sorted by name.
class DatasetBuilder {
public:
    explicit DatasetBuilder(DatasetMetadata metadata = {}) : metadata_(std::move(metadata)) {}

    void add(FactorKey factor, ReplicateKey replicate, std::string team, double value) {
        if (!std::isfinite(value)) {
            throw Error(ErrorCode::non_finite_value, "non-finite value for team " + team + " at " +
                                                         factor.label() + " " + replicate.label());
        }
        if (!records_.empty()) {
            const auto& ref = records_.front();
            if (!same_names(ref.factor, factor) || !same_names(ref.replicate, replicate)) {
                throw Error(ErrorCode::inconsistent_factor,
                            "record components (" + factor.label() + " / " + replicate.label() +
                                ") differ from earlier records");
            }
        }
        auto key = std::make_tuple(factor, replicate, team);
        if (!seen_.emplace(key, records_.size()).second) {
            throw Error(ErrorCode::duplicate_cell, "duplicate cell (" + factor.label() + ", " +
                                                       replicate.label() + ", team " + team + ")");
        }
        records_.push_back({std::move(factor), std::move(replicate), std::move(team), value});
    }

    [[nodiscard]] std::size_t size() const noexcept { return records_.size(); }

    [[nodiscard]] EnsembleDataset build() const {
        if (records_.empty()) throw Error(ErrorCode::invalid_argument, "no records to build a dataset from");
        std::map<FactorKey, std::vector<ReplicateKey>> reps;
        std::vector<std::string> teams;
        for (const auto& r : records_) {
            reps[r.factor].push_back(r.replicate);
            teams.push_back(r.team);
        }
        std::sort(teams.begin(), teams.end());
        teams.erase(std::unique(teams.begin(), teams.end()), teams.end());
        std::vector<FactorKey> factors;
        std::vector<std::vector<ReplicateKey>> replicates;
        for (auto& [key, list] : reps) {
            std::sort(list.begin(), list.end());
            list.erase(std::unique(list.begin(), list.end()), list.end());
            factors.push_back(key);
            replicates.push_back(std::move(list));
        }
        std::vector<std::size_t> offset(factors.size() + 1, 0);
        for (std::size_t f = 0; f < factors.size(); ++f) offset[f + 1] = offset[f] + replicates[f].size();
        const std::size_t J = teams.size();
        std::vector<double> values(offset.back() * J, 0.0);
        std::vector<unsigned char> present(offset.back() * J, 0);
        for (const auto& r : records_) {
            const auto f = static_cast<std::size_t>(
                std::lower_bound(factors.begin(), factors.end(), r.factor) - factors.begin());
            const auto& rl = replicates[f];
            const auto i = static_cast<std::size_t>(std::lower_bound(rl.begin(), rl.end(), r.replicate) - rl.begin());
            const auto j = static_cast<std::size_t>(std::lower_bound(teams.begin(), teams.end(), r.team) - teams.begin());
            const auto k = (offset[f] + i) * J + j;
            values[k] = r.value;
            present[k] = 1;
        }
        return EnsembleDataset(std::move(factors), std::move(replicates), std::move(teams),
                               std::move(values), std::move(present), metadata_);
    }

private:
    struct Record {
        FactorKey factor;
        ReplicateKey replicate;
        std::string team;
        double value;
    };

    static bool same_names(const Key& a, const Key& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t k = 0; k < a.size(); ++k) {
            if (a.parts()[k].name != b.parts()[k].name) return false;
        }
        return true;
    }

    DatasetMetadata metadata_;
    std::vector<Record> records_;
    std::map<std::tuple<FactorKey, ReplicateKey, std::string>, std::size_t> seen_;
};

/// Meteorological season of a calendar month: DJF=1, MAM=2, JJA=3, SON=4.
/// December joins the DJF season of its own calendar year (no
/// year-spanning join), so a two-year window yields six DJF months.
[[nodiscard]] inline int derive_season(int month) {
    if (month < 1 || month > 12) {
        throw Error(ErrorCode::invalid_argument, "month out of range: " + std::to_string(month));
    }
    return (month % 12) / 3 + 1;
}

[[nodiscard]] inline std::string_view season_name(int season) {
    static constexpr std::string_view names[] = {"DJF", "MAM", "JJA", "SON"};
    if (season < 1 || season > 4) throw Error(ErrorCode::invalid_argument, "season out of range");
    return names[season - 1];
}

/// Column mapping from a delimited table onto the canonical dataset.
struct IngestSchema {
    std::string team_column = "team";
    std::string value_column = "flux";
    /// Factor components taken verbatim from columns, in key order.
    std::vector<std::string> factor_columns = {"region"};
    /// When set, a "season" factor component is derived from this month
    /// column and placed first in the factor key.
    std::optional<std::string> season_from_month = std::string("month");
    std::string season_component = "season";
    /// Columns labelling replicates within a factor; their sorted order
    /// defines the replicate index i.
    std::vector<std::string> replicate_columns = {"year", "month"};
    std::optional<std::string> observation_type_column = std::string("observation_type");
    std::optional<std::string> observation_type_filter;
    std::string unit = "PgC/year";
    char delimiter = ',';

    /// Schema for plain (factor, replicate, team, value) tables.
    [[nodiscard]] static IngestSchema generic(std::string factor = "factor", std::string replicate = "replicate",
                                              std::string team = "team", std::string value = "value") {
        IngestSchema s;
        s.team_column = std::move(team);
        s.value_column = std::move(value);
        s.factor_columns = {std::move(factor)};
        s.season_from_month.reset();
        s.replicate_columns = {std::move(replicate)};
        s.observation_type_column.reset();
        s.unit = "";
        return s;
    }
};

[[nodiscard]] inline EnsembleDataset ingest(const csv::Table& table, const IngestSchema& schema) {
    const auto team_col = table.require_column(schema.team_column);
    const auto value_col = table.require_column(schema.value_column);
    std::vector<std::size_t> factor_cols;
    for (const auto& name : schema.factor_columns) factor_cols.push_back(table.require_column(name));
    std::vector<std::size_t> rep_cols;
    for (const auto& name : schema.replicate_columns) rep_cols.push_back(table.require_column(name));
    std::optional<std::size_t> month_col;
    if (schema.season_from_month) month_col = table.require_column(*schema.season_from_month);
    std::optional<std::size_t> obs_col;
    if (schema.observation_type_column) obs_col = table.column(*schema.observation_type_column);
    if (schema.observation_type_filter && !obs_col) {
        throw Error(ErrorCode::schema_mismatch, "observation type filter given but column is missing");
    }

    DatasetMetadata meta;
    meta.unit = schema.unit;
    meta.team_column = schema.team_column;
    meta.value_column = schema.value_column;
    if (obs_col) meta.observation_type_column = *schema.observation_type_column;
    for (const auto& h : table.header) {
        const bool used = h == schema.team_column || h == schema.value_column ||
                          (obs_col && h == *schema.observation_type_column) ||
                          std::find(schema.factor_columns.begin(), schema.factor_columns.end(), h) !=
                              schema.factor_columns.end() ||
                          std::find(schema.replicate_columns.begin(), schema.replicate_columns.end(), h) !=
                              schema.replicate_columns.end();
        if (used) meta.source_columns.push_back(h);
    }

    std::optional<std::string> obs_type;
    std::vector<std::tuple<FactorKey, ReplicateKey, std::string, double>> rows;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::string where = "line " + std::to_string(table.line_numbers[r]) + ": ";
        if (obs_col) {
            const auto& t = row[*obs_col];
            if (schema.observation_type_filter && t != *schema.observation_type_filter) continue;
            if (obs_type && *obs_type != t) {
                throw Error(ErrorCode::inconsistent_factor,
                            where + "mixed observation types '" + *obs_type + "' and '" + t +
                                "'; select one with an observation type filter");
            }
            obs_type = t;
        }
        std::vector<KeyPart> fparts;
        if (month_col) {
            const auto m = csv::parse_int(row[*month_col]);
            if (!m) throw Error(ErrorCode::malformed_row, where + "month is not an integer");
            int season = 0;
            try {
                season = derive_season(static_cast<int>(*m));
            } catch (const Error& e) {
                throw Error(ErrorCode::malformed_row, where + e.what());
            }
            fparts.push_back({schema.season_component, std::to_string(season)});
        }
        for (std::size_t k = 0; k < factor_cols.size(); ++k) {
            const auto& level = row[factor_cols[k]];
            if (level.empty()) {
                throw Error(ErrorCode::inconsistent_factor, where + "empty factor component '" +
                                                                schema.factor_columns[k] + "'");
            }
            fparts.push_back({schema.factor_columns[k], level});
        }
        std::vector<KeyPart> rparts;
        for (std::size_t k = 0; k < rep_cols.size(); ++k) {
            const auto& level = row[rep_cols[k]];
            if (level.empty()) {
                throw Error(ErrorCode::malformed_row, where + "empty replicate component '" +
                                                          schema.replicate_columns[k] + "'");
            }
            rparts.push_back({schema.replicate_columns[k], level});
        }
        const auto& team = row[team_col];
        if (team.empty()) throw Error(ErrorCode::malformed_row, where + "empty team");
        const auto value = csv::parse_double(row[value_col]);
        if (!value) throw Error(ErrorCode::malformed_row, where + "value '" + row[value_col] + "' is not a number");
        if (!std::isfinite(*value)) throw Error(ErrorCode::non_finite_value, where + "non-finite value");
        rows.emplace_back(FactorKey(std::move(fparts)), ReplicateKey(std::move(rparts)), team, *value);
    }
    meta.observation_type = obs_type.value_or(schema.observation_type_filter.value_or(""));
    DatasetBuilder builder(std::move(meta));
    for (auto& [f, i, j, y] : rows) builder.add(std::move(f), std::move(i), std::move(j), y);
    return builder.build();
}

[[nodiscard]] inline EnsembleDataset ingest(std::istream& in, const IngestSchema& schema) {
    return ingest(csv::read(in, schema.delimiter), schema);
}

/// Writes one row per present cell in the source column layout.
inline void write_csv(std::ostream& out, const EnsembleDataset& data) {
    const auto& meta = data.metadata();
    auto header = meta.source_columns;
    if (header.empty()) {
        for (const auto& p : data.factor(0).parts()) header.push_back(p.name);
        for (const auto& p : data.replicate(0, 0).parts()) header.push_back(p.name);
        header.push_back(meta.team_column);
        header.push_back(meta.value_column);
    }
    csv::write_row(out, header);
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            for (std::size_t j = 0; j < data.team_count(); ++j) {
                const auto v = data.value(f, i, j);
                if (!v) continue;
                std::vector<std::string> fields;
                for (const auto& col : header) {
                    if (col == meta.team_column) {
                        fields.push_back(data.team(j));
                    } else if (col == meta.value_column) {
                        fields.push_back(csv::format_double(*v));
                    } else if (!meta.observation_type_column.empty() && col == meta.observation_type_column) {
                        fields.push_back(meta.observation_type);
                    } else if (auto lv = data.replicate(f, i).get(col)) {
                        fields.emplace_back(*lv);
                    } else if (auto fv = data.factor(f).get(col)) {
                        fields.emplace_back(*fv);
                    } else {
                        throw Error(ErrorCode::schema_mismatch, "cannot export column '" + col + "'");
                    }
                }
                csv::write_row(out, fields);
            }
        }
    }
}

struct VerificationDatum {
    std::size_t factor;
    std::size_t replicate;
    double value;
    double variance;
};

/// External verification data Z_k aligned to dataset cells.
class VerificationSet {
public:
    VerificationSet() = default;

    VerificationSet(const EnsembleDataset& data, std::vector<VerificationDatum> obs) : obs_(std::move(obs)) {
        for (const auto& o : obs_) {
            if (o.factor >= data.factor_count() || o.replicate >= data.replicate_count(o.factor)) {
                throw Error(ErrorCode::missing_cell, "verification datum refers to a cell not in the dataset");
            }
            if (!(o.variance > 0.0) || !std::isfinite(o.variance)) {
                throw Error(ErrorCode::invalid_argument, "verification variance must be finite and > 0");
            }
            if (!std::isfinite(o.value)) throw Error(ErrorCode::non_finite_value, "non-finite verification value");
        }
    }

    [[nodiscard]] const std::vector<VerificationDatum>& observations() const noexcept { return obs_; }
    [[nodiscard]] std::size_t size() const noexcept { return obs_.size(); }

private:
    std::vector<VerificationDatum> obs_;
};

/// Reads verification rows keyed by the dataset's factor and replicate
/// component columns plus `z` and `var` columns.
[[nodiscard]] inline VerificationSet read_verification(std::istream& in, const EnsembleDataset& data,
                                                       std::string value_column = "z",
                                                       std::string variance_column = "var") {
    const auto table = csv::read(in);
    const auto zc = table.require_column(value_column);
    const auto vc = table.require_column(variance_column);
    std::vector<std::pair<std::string, std::size_t>> fcols, rcols;
    for (const auto& p : data.factor(0).parts()) fcols.emplace_back(p.name, table.require_column(p.name));
    for (const auto& p : data.replicate(0, 0).parts()) rcols.emplace_back(p.name, table.require_column(p.name));
    std::vector<VerificationDatum> obs;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        std::vector<KeyPart> fp, rp;
        for (const auto& [name, c] : fcols) fp.push_back({name, row[c]});
        for (const auto& [name, c] : rcols) rp.push_back({name, row[c]});
        const FactorKey fk(std::move(fp));
        const auto f = data.find_factor(fk);
        if (!f) throw Error(ErrorCode::missing_cell, "verification factor " + fk.label() + " not in dataset");
        const ReplicateKey rk(std::move(rp));
        const auto i = data.find_replicate(*f, rk);
        if (!i) throw Error(ErrorCode::missing_cell, "verification replicate " + rk.label() + " not in dataset");
        const auto z = csv::parse_double(row[zc]);
        const auto v = csv::parse_double(row[vc]);
        if (!z || !v) {
            throw Error(ErrorCode::malformed_row, "line " + std::to_string(table.line_numbers[r]) + ": bad number");
        }
        obs.push_back({*f, *i, *z, *v});
    }
    return VerificationSet(data, std::move(obs));
}

}  // namespace supe
