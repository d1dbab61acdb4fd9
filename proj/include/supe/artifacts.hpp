#pragma once

#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "supe/covariance.hpp"
#include "supe/data.hpp"
#include "supe/error.hpp"
#include "supe/estimation.hpp"
#include "supe/simulate.hpp"

namespace supe {

inline constexpr std::string_view tool_version = "0.1.0";
/// Bumped whenever a serialized layout changes incompatibly.
inline constexpr int artifact_schema = 1;

using json = nlohmann::json;

[[nodiscard]] inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

[[nodiscard]] inline std::string fnv1a_hex(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
    return buf;
}

/// Hash of the canonical (sorted-key, compact) serialization.
[[nodiscard]] inline std::string config_hash(const json& config) { return fnv1a_hex(config.dump()); }

/// First line of every CSV artifact; csv::read skips it as a comment.
[[nodiscard]] inline std::string artifact_stamp(std::string_view kind, std::string_view hash) {
    return "# supe " + std::string(tool_version) + " schema=" + std::to_string(artifact_schema) + " artifact=" +
           std::string(kind) + " config=" + std::string(hash);
}

namespace detail {

[[noreturn]] inline void schema_error(const std::string& what) { throw Error(ErrorCode::schema_mismatch, what); }

template <class T>
T get_or(const json& j, std::string_view key, T fallback) {
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return fallback;
    try {
        return it->template get<T>();
    } catch (const json::exception&) {
        schema_error("field '" + std::string(key) + "' has the wrong type");
    }
}

template <class T>
T require(const json& j, std::string_view key) {
    const auto it = j.find(key);
    if (it == j.end()) schema_error("missing field '" + std::string(key) + "'");
    try {
        return it->template get<T>();
    } catch (const json::exception&) {
        schema_error("field '" + std::string(key) + "' has the wrong type");
    }
}

inline void reject_unknown(const json& j, std::initializer_list<std::string_view> known, std::string_view where) {
    if (!j.is_object()) schema_error(std::string(where) + " must be an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (auto k : known) ok = ok || key == k;
        if (!ok) schema_error("unknown field '" + key + "' in " + std::string(where));
    }
}

}  // namespace detail

[[nodiscard]] inline json to_json(const Eigen::VectorXd& v) {
    json out = json::array();
    for (double x : v) out.push_back(x);
    return out;
}

[[nodiscard]] inline json to_json(const Eigen::MatrixXd& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(std::move(row));
    }
    return out;
}

[[nodiscard]] inline Eigen::VectorXd vector_from_json(const json& j) {
    if (!j.is_array()) detail::schema_error("expected a numeric array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k) {
        if (!j[k].is_number()) detail::schema_error("expected a numeric array");
        v(static_cast<Eigen::Index>(k)) = j[k].get<double>();
    }
    return v;
}

[[nodiscard]] inline Eigen::MatrixXd matrix_from_json(const json& j) {
    if (!j.is_array()) detail::schema_error("expected an array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto row = vector_from_json(j[static_cast<std::size_t>(r)]);
        if (row.size() != cols) detail::schema_error("ragged matrix");
        m.row(r) = row.transpose();
    }
    return m;
}

[[nodiscard]] inline std::string_view to_string(RhoMode m) {
    switch (m) {
        case RhoMode::fixed_zero: return "fixed_zero";
        case RhoMode::fixed_known: return "fixed_known";
        case RhoMode::estimated: return "estimated";
    }
    return "fixed_zero";
}

[[nodiscard]] inline RhoMode rho_mode_from_string(std::string_view s) {
    if (s == "fixed_zero" || s == "zero") return RhoMode::fixed_zero;
    if (s == "fixed_known" || s == "file") return RhoMode::fixed_known;
    if (s == "estimated") return RhoMode::estimated;
    detail::schema_error("unknown rho_mode '" + std::string(s) + "'");
}

/// Thread count is left out on purpose: it never changes results, so it must
/// not change the config hash either.
[[nodiscard]] inline json to_json(const EstimationConfig& c) {
    json j;
    j["shape_a"] = c.shape_a ? json(*c.shape_a) : json(nullptr);
    j["percentile_lo"] = c.percentile_lo;
    j["percentile_hi"] = c.percentile_hi;
    j["ratio_target"] = c.ratio_target;
    j["penalize"] = c.penalize;
    j["max_iterations"] = c.optimizer.max_iterations;
    j["f_tolerance"] = c.optimizer.f_tolerance;
    j["x_tolerance"] = c.optimizer.x_tolerance;
    j["max_step"] = c.optimizer.max_step;
    j["restarts"] = c.restarts;
    j["restart_spread"] = c.restart_spread;
    j["seed"] = c.seed;
    j["rho_mode"] = to_string(c.rho_mode);
    j["known_correlation"] = c.known_correlation ? to_json(*c.known_correlation) : json(nullptr);
    return j;
}

[[nodiscard]] inline EstimationConfig estimation_config_from_json(const json& j) {
    detail::reject_unknown(j,
                           {"shape_a", "percentile_lo", "percentile_hi", "ratio_target", "penalize", "max_iterations",
                            "f_tolerance", "x_tolerance", "max_step", "restarts", "restart_spread", "seed", "rho_mode",
                            "known_correlation"},
                           "estimation config");
    EstimationConfig c;
    if (j.contains("shape_a") && !j["shape_a"].is_null()) c.shape_a = detail::require<double>(j, "shape_a");
    c.percentile_lo = detail::get_or(j, "percentile_lo", c.percentile_lo);
    c.percentile_hi = detail::get_or(j, "percentile_hi", c.percentile_hi);
    c.ratio_target = detail::get_or(j, "ratio_target", c.ratio_target);
    c.penalize = detail::get_or(j, "penalize", c.penalize);
    c.optimizer.max_iterations = detail::get_or(j, "max_iterations", c.optimizer.max_iterations);
    c.optimizer.f_tolerance = detail::get_or(j, "f_tolerance", c.optimizer.f_tolerance);
    c.optimizer.x_tolerance = detail::get_or(j, "x_tolerance", c.optimizer.x_tolerance);
    c.optimizer.max_step = detail::get_or(j, "max_step", c.optimizer.max_step);
    c.restarts = detail::get_or(j, "restarts", c.restarts);
    c.restart_spread = detail::get_or(j, "restart_spread", c.restart_spread);
    c.seed = detail::get_or(j, "seed", c.seed);
    c.rho_mode = rho_mode_from_string(detail::get_or<std::string>(j, "rho_mode", "fixed_zero"));
    if (j.contains("known_correlation") && !j["known_correlation"].is_null()) {
        c.known_correlation = matrix_from_json(j["known_correlation"]);
    }
    c.validate();
    return c;
}

[[nodiscard]] inline json to_json(const GroupBinding& b) {
    return json{{"group_of_factor", b.group_of_factor}, {"group_labels", b.group_labels}};
}

[[nodiscard]] inline GroupBinding binding_from_json(const json& j) {
    GroupBinding b;
    b.group_of_factor = detail::require<std::vector<std::size_t>>(j, "group_of_factor");
    b.group_labels = detail::require<std::vector<std::string>>(j, "group_labels");
    b.validate();
    return b;
}

[[nodiscard]] inline json to_json(const ParameterSet& p) {
    json groups = json::array();
    for (const auto& g : p.groups) {
        groups.push_back(json{{"tau2", g.tau2},
                              {"sigma2", to_json(g.sigma2)},
                              {"correlation", to_json(g.correlation)},
                              {"penalty_scale", g.penalty_scale}});
    }
    return json{{"groups", std::move(groups)}, {"binding", to_json(p.binding)}, {"penalty_shape", p.penalty_shape}};
}

[[nodiscard]] inline ParameterSet parameters_from_json(const json& j, bool allow_zero_variance = false) {
    ParameterSet p;
    p.binding = binding_from_json(detail::require<json>(j, "binding"));
    p.penalty_shape = detail::get_or(j, "penalty_shape", p.penalty_shape);
    for (const auto& g : detail::require<json>(j, "groups")) {
        GroupParameters gp;
        gp.tau2 = detail::require<double>(g, "tau2");
        gp.sigma2 = vector_from_json(detail::require<json>(g, "sigma2"));
        if (g.contains("correlation") && !g["correlation"].is_null()) {
            gp.correlation = matrix_from_json(g["correlation"]);
        } else {
            gp.correlation = Eigen::MatrixXd::Identity(gp.sigma2.size(), gp.sigma2.size());
        }
        gp.penalty_scale = detail::get_or(g, "penalty_scale", 1.0);
        p.groups.push_back(std::move(gp));
    }
    if (p.groups.empty()) detail::schema_error("parameter set has no groups");
    p.validate(p.team_count(), allow_zero_variance);
    return p;
}

[[nodiscard]] inline json to_json(const IngestSchema& s) {
    json j;
    j["team_column"] = s.team_column;
    j["value_column"] = s.value_column;
    j["factor_columns"] = s.factor_columns;
    j["season_from_month"] = s.season_from_month ? json(*s.season_from_month) : json(nullptr);
    j["season_component"] = s.season_component;
    j["replicate_columns"] = s.replicate_columns;
    j["observation_type_column"] = s.observation_type_column ? json(*s.observation_type_column) : json(nullptr);
    j["observation_type_filter"] = s.observation_type_filter ? json(*s.observation_type_filter) : json(nullptr);
    j["unit"] = s.unit;
    j["delimiter"] = std::string(1, s.delimiter);
    return j;
}

[[nodiscard]] inline IngestSchema ingest_schema_from_json(const json& j) {
    detail::reject_unknown(j,
                           {"team_column", "value_column", "factor_columns", "season_from_month", "season_component",
                            "replicate_columns", "observation_type_column", "observation_type_filter", "unit",
                            "delimiter"},
                           "ingest schema");
    IngestSchema s;
    s.team_column = detail::get_or(j, "team_column", s.team_column);
    s.value_column = detail::get_or(j, "value_column", s.value_column);
    s.factor_columns = detail::get_or(j, "factor_columns", s.factor_columns);
    if (j.contains("season_from_month")) {
        s.season_from_month = j["season_from_month"].is_null()
                                  ? std::nullopt
                                  : std::optional<std::string>(detail::require<std::string>(j, "season_from_month"));
    }
    s.season_component = detail::get_or(j, "season_component", s.season_component);
    s.replicate_columns = detail::get_or(j, "replicate_columns", s.replicate_columns);
    if (j.contains("observation_type_column")) {
        s.observation_type_column =
            j["observation_type_column"].is_null()
                ? std::nullopt
                : std::optional<std::string>(detail::require<std::string>(j, "observation_type_column"));
    }
    if (j.contains("observation_type_filter") && !j["observation_type_filter"].is_null()) {
        s.observation_type_filter = detail::require<std::string>(j, "observation_type_filter");
    }
    s.unit = detail::get_or(j, "unit", s.unit);
    const auto delim = detail::get_or<std::string>(j, "delimiter", ",");
    if (delim.size() != 1) detail::schema_error("delimiter must be a single character");
    s.delimiter = delim[0];
    return s;
}

/// Simulation specs in config files take either a full "params" block or
/// the shorthand {tau2, sigma2, correlation} applied to every factor.
[[nodiscard]] inline json to_json(const SimulationSpec& s) {
    json j;
    j["params"] = to_json(s.params);
    j["mu"] = to_json(s.mu);
    j["replicates"] = s.replicates;
    j["teams"] = s.teams;
    j["seed"] = s.seed;
    j["replications"] = s.replications;
    return j;
}

[[nodiscard]] inline SimulationSpec simulation_spec_from_json(const json& j) {
    detail::reject_unknown(j,
                           {"params", "tau2", "sigma2", "correlation", "mu", "factors", "replicates", "teams", "seed",
                            "replications", "coverage", "efficiency"},
                           "simulation spec");
    SimulationSpec s;
    s.seed = detail::get_or<std::uint64_t>(j, "seed", 1);
    s.replications = detail::get_or<std::size_t>(j, "replications", 1);
    if (j.contains("params")) {
        s.params = parameters_from_json(j["params"], true);
        s.teams = s.params.team_count();
    } else {
        const auto sigma2 = vector_from_json(detail::require<json>(j, "sigma2"));
        const auto F = detail::require<std::size_t>(j, "factors");
        s.params = ParameterSet::homogeneous(F, detail::require<double>(j, "tau2"), sigma2);
        if (j.contains("correlation") && !j["correlation"].is_null()) {
            const auto R = matrix_from_json(j["correlation"]);
            for (auto& g : s.params.groups) g.correlation = R;
        }
        s.teams = static_cast<std::size_t>(sigma2.size());
    }
    const std::size_t F = s.params.binding.factor_count();
    const auto& reps = detail::require<json>(j, "replicates");
    if (reps.is_number()) {
        s.replicates.assign(F, reps.get<std::size_t>());
    } else {
        s.replicates = reps.get<std::vector<std::size_t>>();
    }
    const auto& mu = j.contains("mu") ? j["mu"] : json(0.0);
    if (mu.is_number()) {
        s.mu = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(F), mu.get<double>());
    } else {
        s.mu = vector_from_json(mu);
    }
    s.validate();
    return s;
}

/// Everything `predict` and later commands need from a fit.
struct FitArtifact {
    FitResult fit;
    EstimationConfig config;
    std::vector<std::string> teams;
    std::vector<std::string> factors;
    std::string observation_type;
    std::string config_hash;
    std::string data_hash;
};

/// Identifies a dataset by its canonical CSV export.
[[nodiscard]] inline std::string dataset_hash(const EnsembleDataset& data) {
    std::ostringstream out;
    write_csv(out, data);
    return fnv1a_hex(out.str());
}

[[nodiscard]] inline FitArtifact make_fit_artifact(FitResult fit, const EstimationConfig& config,
                                                   const EnsembleDataset& data, std::string hash) {
    FitArtifact a;
    a.fit = std::move(fit);
    a.config = config;
    a.teams = data.teams();
    for (std::size_t f = 0; f < data.factor_count(); ++f) a.factors.push_back(data.factor(f).label());
    a.observation_type = data.metadata().observation_type;
    a.config_hash = std::move(hash);
    a.data_hash = dataset_hash(data);
    return a;
}

[[nodiscard]] inline json to_json(const FitArtifact& a) {
    json traces = json::array();
    for (const auto& t : a.fit.traces) {
        traces.push_back(json{{"group", t.group},
                              {"restart", t.restart},
                              {"objective", t.objective},
                              {"iterations", t.iterations},
                              {"status", optimize::to_string(t.status)}});
    }
    return json{{"artifact", "fit"},
                {"schema", artifact_schema},
                {"tool_version", std::string(tool_version)},
                {"config_hash", a.config_hash},
                {"data_hash", a.data_hash},
                {"observation_type", a.observation_type},
                {"teams", a.teams},
                {"factors", a.factors},
                {"estimation", to_json(a.config)},
                {"parameters", to_json(a.fit.params)},
                {"objective", a.fit.objective},
                {"converged", a.fit.converged},
                {"iterations", a.fit.iterations},
                {"traces", std::move(traces)}};
}

inline void write_json(std::ostream& out, const json& j) { out << j.dump(2) << '\n'; }

[[nodiscard]] inline json read_json(std::istream& in, std::string_view what) {
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::schema_mismatch, std::string(what) + " is not valid JSON: " + e.what());
    }
}

[[nodiscard]] inline FitArtifact fit_artifact_from_json(const json& j) {
    if (detail::get_or<std::string>(j, "artifact", "") != "fit") detail::schema_error("not a fit artifact");
    const int schema = detail::require<int>(j, "schema");
    if (schema != artifact_schema) {
        detail::schema_error("fit artifact schema " + std::to_string(schema) + " is not supported (expected " +
                             std::to_string(artifact_schema) + ")");
    }
    FitArtifact a;
    a.config_hash = detail::require<std::string>(j, "config_hash");
    a.data_hash = detail::require<std::string>(j, "data_hash");
    a.observation_type = detail::get_or<std::string>(j, "observation_type", "");
    a.teams = detail::require<std::vector<std::string>>(j, "teams");
    a.factors = detail::require<std::vector<std::string>>(j, "factors");
    a.config = estimation_config_from_json(detail::require<json>(j, "estimation"));
    a.fit.params = parameters_from_json(detail::require<json>(j, "parameters"));
    a.fit.objective = detail::require<double>(j, "objective");
    a.fit.converged = detail::require<bool>(j, "converged");
    a.fit.iterations = detail::require<std::size_t>(j, "iterations");
    if (a.fit.params.team_count() != a.teams.size() || a.fit.params.binding.factor_count() != a.factors.size()) {
        detail::schema_error("fit artifact parameters do not match its team and factor lists");
    }
    return a;
}

/// The fit must describe the same teams and factors, in the same order.
inline void check_compatible(const FitArtifact& a, const EnsembleDataset& data) {
    if (a.teams != data.teams()) detail::schema_error("fit artifact teams differ from the input dataset");
    if (a.factors.size() != data.factor_count()) detail::schema_error("fit artifact factor count differs");
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        if (a.factors[f] != data.factor(f).label()) {
            detail::schema_error("fit artifact factor " + a.factors[f] + " differs from " + data.factor(f).label());
        }
    }
}

/// One per run: what was read, what was written, and under which config.
struct Manifest {
    std::string command;
    std::string config_hash;
    json config;
    std::vector<std::pair<std::string, std::string>> inputs;
    std::vector<std::pair<std::string, std::string>> outputs;
    std::vector<std::string> warnings;

    [[nodiscard]] json to_json() const {
        json in = json::array(), out = json::array();
        for (const auto& [name, hash] : inputs) in.push_back(json{{"name", name}, {"hash", hash}});
        for (const auto& [name, hash] : outputs) out.push_back(json{{"name", name}, {"hash", hash}});
        return json{{"artifact", "manifest"},
                    {"schema", artifact_schema},
                    {"tool_version", std::string(tool_version)},
                    {"command", command},
                    {"config_hash", config_hash},
                    {"config", config},
                    {"inputs", std::move(in)},
                    {"outputs", std::move(out)},
                    {"warnings", warnings}};
    }
};

}  // namespace supe
