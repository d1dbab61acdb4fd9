// supe: command-line pipeline over the SUPE-ANOVA library.
//
//   supe cluster   --input mip.csv --obs-type LN
//   supe fit       --input mip.csv --obs-type LN --grouping auto
//   supe predict   --input mip.csv --obs-type LN --fit out/fit/fit.json
//   supe simulate  --input spec.json
//
// Every run writes stamped CSV artifacts plus manifest.json into its output
// directory; failures write error.json there and exit nonzero.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "supe/supe.hpp"

namespace fs = std::filesystem;
using namespace supe;

namespace {

struct Options {
    std::string input;
    std::string output;
    std::string obs_type;
    std::string grouping;
    std::string config;
    std::string fit;
    std::string verification;
    std::string rho;
    std::optional<std::uint64_t> seed;
    std::size_t threads = default_thread_count();
};

using Row = std::vector<std::string>;

std::string num(double v) { return csv::format_double(v); }

std::string read_file(const std::string& path, ErrorCode missing = ErrorCode::io_failure) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(missing, "cannot open " + path);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

class Run {
public:
    Run(std::string command, Options options) : command_(std::move(command)), o_(std::move(options)) {
        if (!o_.output.empty()) {
            dir_ = o_.output;
        } else if (const char* root = std::getenv("SUPE_OUTPUT_ROOT"); root && *root) {
            dir_ = fs::path(root) / command_;
        } else {
            dir_ = fs::path("supe-output") / command_;
        }
    }

    const Options& options() const { return o_; }
    const std::string& command() const { return command_; }
    const fs::path& dir() const { return dir_; }

    /// Loads --config and checks its top-level sections.
    void load_config() {
        if (o_.config.empty()) return;
        const auto text = read_file(o_.config);
        std::istringstream in(text);
        file_config_ = read_json(in, "config " + o_.config);
        if (!file_config_.is_object()) throw Error(ErrorCode::schema_mismatch, "config must be a JSON object");
        for (const auto& [key, value] : file_config_.items()) {
            static const std::set<std::string> known{"ingest",    "estimation", "grouping",   "aggregate",
                                                     "simulation", "diagnostics"};
            if (!known.contains(key)) throw Error(ErrorCode::schema_mismatch, "unknown config section '" + key + "'");
        }
        add_input("config", text);
    }

    json section(const std::string& name) const {
        return file_config_.contains(name) ? file_config_[name] : json::object();
    }

    /// The effective configuration; frozen at the first artifact.
    json& effective() { return effective_; }

    void add_input(const std::string& name, const std::string& bytes) {
        manifest_.inputs.emplace_back(name, fnv1a_hex(bytes));
    }

    void warn(std::string w) { manifest_.warnings.push_back(std::move(w)); }

    void write_table(const std::string& file, const std::string& kind, const Row& header,
                     const std::vector<Row>& rows) {
        std::ostringstream out;
        out << artifact_stamp(kind, hash()) << '\n';
        csv::write_row(out, header);
        for (const auto& r : rows) csv::write_row(out, r);
        write_bytes(file, out.str());
    }

    void write_text(const std::string& file, const std::string& kind, const std::string& body) {
        write_bytes(file, artifact_stamp(kind, hash()) + "\n" + body);
    }

    void write_json_file(const std::string& file, const json& j) {
        std::ostringstream out;
        supe::write_json(out, j);
        write_bytes(file, out.str());
    }

    std::string hash() {
        if (!hash_) {
            effective_["command"] = command_;
            hash_ = config_hash(effective_);
        }
        return *hash_;
    }

    void finish() {
        manifest_.command = command_;
        manifest_.config_hash = hash();
        manifest_.config = effective_;
        std::ostringstream out;
        supe::write_json(out, manifest_.to_json());
        write_raw("manifest.json", out.str());
    }

    void fail(const std::string& code, const std::string& message) {
        const json record{{"artifact", "error"},       {"schema", artifact_schema},
                          {"tool_version", std::string(tool_version)},
                          {"command", command_},        {"code", code},
                          {"message", message}};
        std::cerr << "supe " << command_ << ": " << code << ": " << message << '\n';
        try {
            std::ostringstream out;
            supe::write_json(out, record);
            write_raw("error.json", out.str());
        } catch (const std::exception& e) {
            std::cerr << "supe: could not write error record: " << e.what() << '\n';
        }
    }

private:
    void write_bytes(const std::string& file, const std::string& bytes) {
        write_raw(file, bytes);
        manifest_.outputs.emplace_back(file, fnv1a_hex(bytes));
    }

    void write_raw(const std::string& file, const std::string& bytes) const {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw Error(ErrorCode::io_failure, "cannot create " + dir_.string() + ": " + ec.message());
        std::ofstream out(dir_ / file, std::ios::binary | std::ios::trunc);
        out << bytes;
        if (!out) throw Error(ErrorCode::io_failure, "cannot write " + (dir_ / file).string());
    }

    std::string command_;
    Options o_;
    fs::path dir_;
    json file_config_ = json::object();
    json effective_ = json::object();
    std::optional<std::string> hash_;
    Manifest manifest_;
};

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Plain (factor, replicate, team, value) tables are recognised by their
/// header; anything else is read with the MIP layout.
IngestSchema resolve_schema(Run& run, const std::string& text) {
    const auto cfg = run.section("ingest");
    IngestSchema schema;
    if (!cfg.empty()) {
        schema = ingest_schema_from_json(cfg);
    } else {
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line) && (line.empty() || line[0] == '#')) {
        }
        const auto header = csv::split_record(line);
        std::set<std::string> cols;
        for (const auto& h : header) cols.insert(csv::trim(h));
        if (cols.contains("factor") && cols.contains("replicate") && cols.contains("value")) {
            schema = IngestSchema::generic();
        }
    }
    if (!run.options().obs_type.empty()) {
        if (!schema.observation_type_column) {
            throw Error(ErrorCode::invalid_argument, "--obs-type given but the input has no observation type column");
        }
        schema.observation_type_filter = run.options().obs_type;
    }
    return schema;
}

EnsembleDataset load_data(Run& run) {
    const auto& path = run.options().input;
    if (path.empty()) throw Error(ErrorCode::invalid_argument, "--input is required");
    const auto text = read_file(path);
    run.add_input("input", text);
    const auto schema = resolve_schema(run, text);
    run.effective()["ingest"] = to_json(schema);
    std::istringstream in(text);
    return ingest(in, schema);
}

FitArtifact load_fit(Run& run, const EnsembleDataset& data) {
    const auto& path = run.options().fit;
    if (path.empty()) throw Error(ErrorCode::missing_artifact, "--fit is required (run `supe fit` first)");
    const auto text = read_file(path, ErrorCode::missing_artifact);
    run.add_input("fit", text);
    std::istringstream in(text);
    auto art = fit_artifact_from_json(read_json(in, "fit artifact " + path));
    check_compatible(art, data);
    run.effective()["fit_config_hash"] = art.config_hash;
    return art;
}

/// J x J correlation from a CSV whose header names the teams.
Eigen::MatrixXd load_correlation(Run& run, const EnsembleDataset& data) {
    const auto text = read_file(run.options().rho);
    run.add_input("rho", text);
    std::istringstream in(text);
    const auto table = csv::read(in);
    const auto J = data.team_count();
    if (table.header.size() != J || table.rows.size() != J) {
        throw Error(ErrorCode::schema_mismatch, "correlation file must be " + std::to_string(J) + " x " +
                                                    std::to_string(J) + " with a header of team names");
    }
    std::vector<std::size_t> pos(J);
    for (std::size_t c = 0; c < J; ++c) {
        const auto j = data.find_team(table.header[c]);
        if (!j) throw Error(ErrorCode::schema_mismatch, "correlation file names unknown team " + table.header[c]);
        pos[c] = *j;
    }
    Eigen::MatrixXd R(static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(J));
    for (std::size_t r = 0; r < J; ++r) {
        for (std::size_t c = 0; c < J; ++c) {
            const auto v = csv::parse_double(table.rows[r][c]);
            if (!v) throw Error(ErrorCode::malformed_row, "correlation file: bad number");
            R(static_cast<Eigen::Index>(pos[r]), static_cast<Eigen::Index>(pos[c])) = *v;
        }
    }
    return R;
}

struct GroupingConfig {
    double threshold = 0.90;
    std::string season = "season";
    std::string region = "region";
};

GroupingConfig grouping_config(Run& run) {
    const auto j = run.section("grouping");
    detail::reject_unknown(j, {"threshold", "season_component", "region_component"}, "grouping config");
    GroupingConfig g;
    g.threshold = detail::get_or(j, "threshold", g.threshold);
    g.season = detail::get_or(j, "season_component", g.season);
    g.region = detail::get_or(j, "region_component", g.region);
    run.effective()["grouping"] =
        json{{"threshold", g.threshold}, {"season_component", g.season}, {"region_component", g.region}};
    return g;
}

bool has_component(const EnsembleDataset& data, const std::string& name) {
    return data.factor(0).get(name).has_value();
}

// ---------------------------------------------------------------------------
// Table helpers
// ---------------------------------------------------------------------------

Row key_names(const Key& k) {
    Row r;
    for (const auto& p : k.parts()) r.push_back(p.name);
    return r;
}

Row key_levels(const Key& k) {
    Row r;
    for (const auto& p : k.parts()) r.push_back(p.level);
    return r;
}

Row cat(Row a, const Row& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

Row cell_header(const EnsembleDataset& d) { return cat(key_names(d.factor(0)), key_names(d.replicate(0, 0))); }

Row cell_levels(const EnsembleDataset& d, std::size_t f, std::size_t i) {
    return cat(key_levels(d.factor(f)), key_levels(d.replicate(f, i)));
}

std::string season_of_group(const EnsembleDataset& data, const GroupBinding& b, std::size_t g) {
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        if (b.group_of_factor[f] != g) continue;
        if (const auto s = data.factor(f).get("season")) return std::string(*s);
        return "";
    }
    return "";
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void write_grouping_artifacts(Run& run, const EnsembleDataset& data, const GroupingScheme& scheme,
                              const GroupingConfig& g) {
    std::ostringstream body;
    write_grouping(body, scheme);
    run.write_text("grouping.csv", "grouping", body.str());
    std::vector<Row> rows;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto season = std::string(*data.factor(f).get(g.season));
        const auto region = std::string(*data.factor(f).get(g.region));
        std::size_t rank = 0;
        for (const auto& grp : scheme.seasons.at(season)) {
            if (std::find(grp.regions.begin(), grp.regions.end(), region) != grp.regions.end()) rank = grp.rank;
        }
        const double v = robust_variability(data, f);
        rows.push_back({season, region, num(v), v > 0.0 ? num(std::log10(v)) : "-inf", std::to_string(rank)});
    }
    run.write_table("variability.csv", "variability", {"season", "region", "variability", "log10_variability", "rank"},
                    rows);
    for (const auto& w : scheme.warnings) run.warn(w);
}

void cmd_cluster(Run& run) {
    const auto data = load_data(run);
    const auto g = grouping_config(run);
    const auto scheme = build_grouping(data, g.threshold, g.season, g.region);
    write_grouping_artifacts(run, data, scheme, g);
}

void cmd_fit(Run& run) {
    const auto data = load_data(run);
    const auto& o = run.options();
    EstimationConfig cfg = estimation_config_from_json(run.section("estimation"));
    if (o.seed) cfg.seed = *o.seed;
    if (!o.rho.empty()) {
        cfg.rho_mode = RhoMode::fixed_known;
        cfg.known_correlation = load_correlation(run, data);
    } else if (cfg.rho_mode == RhoMode::fixed_known && !cfg.known_correlation) {
        throw Error(ErrorCode::invalid_argument, "rho_mode 'file' needs --rho");
    }
    cfg.threads = o.threads;
    cfg.validate();
    run.effective()["estimation"] = to_json(cfg);

    std::string mode = o.grouping;
    const auto g = grouping_config(run);
    if (mode.empty()) mode = has_component(data, g.season) && has_component(data, g.region) ? "auto" : "none";
    run.effective()["grouping_source"] = mode == "auto" || mode == "none" ? mode : "file";
    GroupBinding binding;
    if (mode == "none") {
        binding = GroupBinding::per_factor(data.factor_count());
        for (std::size_t f = 0; f < data.factor_count(); ++f) binding.group_labels[f] = data.factor(f).label();
    } else {
        GroupingScheme scheme;
        if (mode == "auto") {
            scheme = build_grouping(data, g.threshold, g.season, g.region);
            write_grouping_artifacts(run, data, scheme, g);
        } else {
            const auto text = read_file(mode, ErrorCode::missing_artifact);
            run.add_input("grouping", text);
            std::istringstream in(text);
            scheme = read_grouping(in);
            scheme.season_component = g.season;
            scheme.region_component = g.region;
        }
        binding = scheme.bind(data);
    }

    const auto result = fit(data, binding, cfg);
    if (!result.converged) run.warn("optimizer did not converge for every group; see traces in fit.json");
    const auto art = make_fit_artifact(result, cfg, data, run.hash());
    run.write_json_file("fit.json", to_json(art));

    std::vector<Row> rows;
    const auto& p = result.params;
    for (std::size_t gi = 0; gi < p.groups.size(); ++gi) {
        for (std::size_t j = 0; j < data.team_count(); ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            rows.push_back({p.binding.group_labels[gi], data.team(j), num(p.groups[gi].tau2),
                            num(p.groups[gi].sigma2(jj)), num(p.groups[gi].penalty_scale)});
        }
    }
    run.write_table("parameters.csv", "parameters", {"group", "team", "tau2", "sigma2", "penalty_scale"}, rows);
}

ConsensusResult run_consensus(Run& run, const EnsembleDataset& data, const FitArtifact& art) {
    ConsensusOptions c;
    c.threads = run.options().threads;
    return consensus(data, art.fit.params, c);
}

void cmd_predict(Run& run) {
    const auto data = load_data(run);
    const auto art = load_fit(run, data);
    const auto result = run_consensus(run, data, art);
    std::vector<Row> rows;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto& fc = result.factors[f];
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const double sd = std::sqrt(std::max(fc.y_mspe_total(ii), 0.0));
            const auto one = intervals(fc.y_hat(ii), sd, IntervalLevel::one_sigma);
            const auto ci = intervals(fc.y_hat(ii), sd, IntervalLevel::ninety_five);
            rows.push_back(cat(cell_levels(data, f, i), {num(fc.y_hat(ii)), num(fc.y_mspe(ii)), num(fc.y_mspe_total(ii)),
                                                         num(one.lo), num(one.hi), num(ci.lo), num(ci.hi)}));
        }
    }
    run.write_table("predictions.csv", "predictions",
                    cat(cell_header(data), {"y_hat", "mspe", "mspe_total", "lo68", "hi68", "lo95", "hi95"}), rows);

    std::vector<Row> means;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto& fc = result.factors[f];
        const auto ci = intervals(fc.mu_hat, std::sqrt(fc.mu_var), IntervalLevel::ninety_five);
        means.push_back(cat(key_levels(data.factor(f)), {num(fc.mu_hat), num(fc.mu_var), num(ci.lo), num(ci.hi)}));
    }
    run.write_table("means.csv", "means", cat(key_names(data.factor(0)), {"mu_hat", "mu_var", "lo95", "hi95"}), means);

    std::vector<Row> lambdas;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto& fc = result.factors[f];
        for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            lambdas.push_back(cat(cell_levels(data, f, i), {"mean", num(fc.lambdas(ii, 0))}));
            for (std::size_t j = 0; j < data.team_count(); ++j) {
                lambdas.push_back(cat(cell_levels(data, f, i),
                                      {data.team(j), num(fc.lambdas(ii, static_cast<Eigen::Index>(j) + 1))}));
            }
        }
    }
    run.write_table("lambdas.csv", "lambdas", cat(cell_header(data), {"source", "lambda"}), lambdas);
}

void cmd_weights(Run& run) {
    const auto data = load_data(run);
    const auto art = load_fit(run, data);
    const auto result = run_consensus(run, data, art);
    const auto& b = art.fit.params.binding;
    const auto J = static_cast<Eigen::Index>(data.team_count());
    std::vector<Eigen::VectorXd> sum(b.group_count(), Eigen::VectorXd::Zero(J));
    std::vector<std::size_t> count(b.group_count(), 0);
    std::vector<Row> by_factor;
    for (std::size_t f = 0; f < data.factor_count(); ++f) {
        const auto g = b.group_of_factor[f];
        sum[g] += result.factors[f].climatological_weights;
        ++count[g];
        for (Eigen::Index j = 0; j < J; ++j) {
            by_factor.push_back(cat(key_levels(data.factor(f)),
                                    {b.group_labels[g], data.team(static_cast<std::size_t>(j)),
                                     num(result.factors[f].climatological_weights(j))}));
        }
    }
    // With complete data every factor of a group has the same weights; with
    // gaps this is their average over the group's factors.
    std::vector<std::size_t> order(b.group_count());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) {
        const auto sx = season_of_group(data, b, x), sy = season_of_group(data, b, y);
        if (const auto c = compare_levels(sx, sy); c != 0) return c < 0;
        return compare_levels(b.group_labels[x], b.group_labels[y]) < 0;
    });
    std::vector<Row> rows;
    for (auto g : order) {
        const Eigen::VectorXd w = sum[g] / static_cast<double>(count[g]);
        for (Eigen::Index j = 0; j < J; ++j) {
            rows.push_back({season_of_group(data, b, g), b.group_labels[g], data.team(static_cast<std::size_t>(j)),
                            num(w(j))});
        }
    }
    run.write_table("weights.csv", "weights", {"season", "group", "team", "weight"}, rows);
    run.write_table("weights_by_factor.csv", "weights_by_factor",
                    cat(key_names(data.factor(0)), {"group", "team", "weight"}), by_factor);
}

void cmd_diagnose(Run& run) {
    const auto data = load_data(run);
    const auto art = load_fit(run, data);
    const auto& params = art.fit.params;
    const auto result = run_consensus(run, data, art);
    const auto cfg = run.section("diagnostics");
    detail::reject_unknown(cfg, {"qq_offset"}, "diagnostics config");
    const double offset = detail::get_or(cfg, "qq_offset", 0.5);
    run.effective()["diagnostics"] = json{{"qq_offset", offset}};

    const auto table = standardized_errors(data, params, result);
    std::vector<Row> rows;
    for (const auto& r : table.rows) {
        rows.push_back(cat(cell_levels(data, r.factor, r.replicate),
                           {data.team(r.team), table.group_labels[r.group], num(r.eta)}));
    }
    run.write_table("residuals.csv", "residuals", cat(cell_header(data), {"team", "group", "eta"}), rows);

    std::vector<Row> summary;
    for (std::size_t g = 0; g < table.summaries.size(); ++g) {
        const auto& s = table.summaries[g];
        if (s.count == 0) continue;
        summary.push_back(
            {table.group_labels[g], std::to_string(s.count), num(s.mean), num(s.variance), num(s.skewness)});
    }
    run.write_table("residual_summary.csv", "residual_summary", {"group", "count", "mean", "variance", "skewness"},
                    summary);

    std::vector<Row> qq;
    for (const auto& panel : qq_export(table, offset)) {
        for (std::size_t k = 0; k < panel.sample.size(); ++k) {
            qq.push_back({panel.label, std::to_string(k + 1), num(panel.theoretical[k]), num(panel.sample[k])});
        }
    }
    run.write_table("qq.csv", "qq", {"group", "k", "theoretical", "sample"}, qq);

    std::vector<Row> cmp;
    for (const auto& r : compare_unweighted(result, unweighted_mean(data, params))) {
        cmp.push_back(cat(cell_levels(data, r.factor, r.replicate),
                          {num(r.consensus), num(r.unweighted), num(r.delta), num(r.shrinkage),
                           r.outside_95 ? "1" : "0"}));
    }
    run.write_table("comparison.csv", "comparison",
                    cat(cell_header(data), {"consensus", "unweighted", "delta", "shrinkage", "outside_95"}), cmp);
}

struct AggregateDefinition {
    std::string label;
    std::map<std::string, std::set<std::string>> factor;
};

/// TransCom codes T01..T11 (with a/b subregions) are land, T12..T22 ocean.
std::optional<int> transcom_number(std::string_view region) {
    if (region.size() < 3 || region[0] != 'T') return std::nullopt;
    int n = 0;
    std::size_t k = 1;
    for (; k < region.size() && std::isdigit(static_cast<unsigned char>(region[k])); ++k) n = n * 10 + (region[k] - '0');
    if (k == 1) return std::nullopt;
    if (k < region.size() && !(k + 1 == region.size() && (region[k] == 'a' || region[k] == 'b'))) return std::nullopt;
    return n;
}

std::vector<AggregateDefinition> default_aggregates(const EnsembleDataset& data) {
    std::set<std::string> land, ocean;
    if (has_component(data, "region")) {
        for (const auto& f : data.factors()) {
            const auto r = std::string(*f.get("region"));
            if (const auto n = transcom_number(r)) {
                if (*n >= 1 && *n <= 11) land.insert(r);
                if (*n >= 12 && *n <= 22) ocean.insert(r);
            }
        }
    }
    if (land.empty() && ocean.empty()) return {{"all", {}}};
    std::vector<AggregateDefinition> out;
    if (!land.empty()) out.push_back({"land", {{"region", land}}});
    if (!ocean.empty()) out.push_back({"ocean", {{"region", ocean}}});
    return out;
}

void cmd_aggregate(Run& run) {
    const auto data = load_data(run);
    const auto art = load_fit(run, data);
    const auto result = run_consensus(run, data, art);
    const auto unweighted = unweighted_mean(data, art.fit.params);

    const auto cfg = run.section("aggregate");
    detail::reject_unknown(cfg, {"by", "definitions"}, "aggregate config");
    const bool has_year = data.replicate(0, 0).get("year").has_value();
    const std::string by = detail::get_or<std::string>(cfg, "by", has_year ? "year" : "");
    std::vector<AggregateDefinition> defs;
    if (cfg.contains("definitions")) {
        for (const auto& d : cfg["definitions"]) {
            detail::reject_unknown(d, {"label", "factor"}, "aggregate definition");
            AggregateDefinition def{detail::require<std::string>(d, "label"), {}};
            if (d.contains("factor")) {
                for (const auto& [component, levels] : d["factor"].items()) {
                    const auto list = levels.get<std::vector<std::string>>();
                    def.factor[component] = {list.begin(), list.end()};
                }
            }
            defs.push_back(std::move(def));
        }
    } else {
        defs = default_aggregates(data);
    }
    json jdefs = json::array();
    for (const auto& d : defs) jdefs.push_back(json{{"label", d.label}, {"factor", d.factor}});
    run.effective()["aggregate"] = json{{"by", by}, {"definitions", jdefs}};

    std::set<std::string, decltype([](const std::string& a, const std::string& b) {
                 return compare_levels(a, b) < 0;
             })>
        periods;
    if (!by.empty()) {
        for (std::size_t f = 0; f < data.factor_count(); ++f) {
            for (std::size_t i = 0; i < data.replicate_count(f); ++i) {
                const auto v = data.replicate(f, i).get(by);
                if (!v) throw Error(ErrorCode::schema_mismatch, "replicates lack the '" + by + "' component");
                periods.insert(std::string(*v));
            }
        }
    } else {
        periods.insert("all");
    }

    const auto& obs = data.metadata().observation_type;
    std::vector<Row> rows;
    for (const auto& def : defs) {
        for (const auto& period : periods) {
            const auto cells = select_cells(data, [&](const FactorKey& fk, const ReplicateKey& rk) {
                for (const auto& [component, levels] : def.factor) {
                    const auto v = fk.get(component);
                    if (!v || !levels.contains(std::string(*v))) return false;
                }
                return by.empty() || rk.get(by) == std::optional<std::string_view>(period);
            });
            if (cells.empty()) {
                run.warn("aggregate " + def.label + " " + period + " selects no cells");
                continue;
            }
            const auto a = aggregate(result, cells, def.label);
            const auto u = aggregate(unweighted, cells, def.label);
            rows.push_back({def.label, period, obs, "consensus", num(a.value), num(a.sd())});
            rows.push_back({def.label, period, obs, "unweighted", num(u.value), num(u.sd())});
        }
    }
    run.write_table("aggregates.csv", "aggregates", {"label", by.empty() ? "year" : by, "obs_type", "method", "value", "sd"},
                    rows);
}

void cmd_bma(Run& run) {
    const auto data = load_data(run);
    const auto art = load_fit(run, data);
    const auto result = run_consensus(run, data, art);
    VerificationSet z;
    if (!run.options().verification.empty()) {
        const auto text = read_file(run.options().verification);
        run.add_input("verification", text);
        std::istringstream in(text);
        z = read_verification(in, data);
    } else {
        run.warn("no --verification given; posterior weights equal the normalised prior");
    }
    const auto out = bma_weights(result, data, z);
    for (const auto& w : out.warnings) run.warn(w);
    std::vector<Row> rows;
    for (std::size_t j = 0; j < data.team_count(); ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        rows.push_back({data.team(j), num(out.log_prior(jj)), num(out.log_likelihood(jj)),
                        std::to_string(out.data_used[j]), num(out.weights(jj))});
    }
    run.write_table("bma.csv", "bma", {"team", "log_prior", "log_likelihood", "data_used", "weight"}, rows);
}

IntervalLevel level_from_string(const std::string& s) {
    if (s == "one_sigma") return IntervalLevel::one_sigma;
    if (s == "two_sigma") return IntervalLevel::two_sigma;
    if (s == "ninety_five") return IntervalLevel::ninety_five;
    throw Error(ErrorCode::schema_mismatch, "unknown interval level '" + s + "'");
}

void cmd_simulate(Run& run) {
    json spec_json = run.section("simulation");
    if (!run.options().input.empty()) {
        const auto text = read_file(run.options().input);
        run.add_input("spec", text);
        std::istringstream in(text);
        spec_json = read_json(in, "simulation spec " + run.options().input);
    }
    if (spec_json.empty()) throw Error(ErrorCode::invalid_argument, "simulate needs --input spec.json or a 'simulation' config section");
    if (run.options().seed) spec_json["seed"] = *run.options().seed;
    auto spec = simulation_spec_from_json(spec_json);
    run.effective()["simulation"] = spec_json;

    const auto sim = simulate(spec);
    std::ostringstream data_csv;
    write_csv(data_csv, sim.data);
    run.write_text("data.csv", "data", data_csv.str());

    std::vector<Row> truth;
    for (std::size_t f = 0; f < sim.data.factor_count(); ++f) {
        for (std::size_t i = 0; i < sim.data.replicate_count(f); ++i) {
            const auto c = static_cast<Eigen::Index>(sim.data.cell_index(f, i));
            truth.push_back(cat(cell_levels(sim.data, f, i), {num(sim.truth_y(c)), num(sim.truth_alpha(c))}));
        }
    }
    run.write_table("truth.csv", "truth", cat(cell_header(sim.data), {"y", "alpha"}), truth);

    if (spec_json.contains("coverage")) {
        const auto& c = spec_json["coverage"];
        detail::reject_unknown(c, {"level", "mode", "mean_known", "total_mspe", "replications", "estimation"},
                               "coverage study");
        CoverageOptions o;
        o.level = level_from_string(detail::get_or<std::string>(c, "level", "ninety_five"));
        const auto mode = detail::get_or<std::string>(c, "mode", "oracle");
        if (mode != "oracle" && mode != "plugin") throw Error(ErrorCode::schema_mismatch, "coverage mode must be oracle or plugin");
        o.mode = mode == "oracle" ? CoverageMode::oracle : CoverageMode::plugin;
        o.mean_known = detail::get_or(c, "mean_known", false);
        o.total_mspe = detail::get_or(c, "total_mspe", false);
        if (c.contains("estimation")) o.estimation = estimation_config_from_json(c["estimation"]);
        o.threads = run.options().threads;
        auto study = spec;
        study.replications = detail::get_or(c, "replications", spec.replications);
        const auto r = coverage_study(study, o);
        run.write_table("coverage.csv", "coverage",
                        {"level", "mode", "covered", "total", "coverage", "nominal", "standard_error"},
                        {{detail::get_or<std::string>(c, "level", "ninety_five"), mode, std::to_string(r.covered),
                          std::to_string(r.total), num(r.coverage), num(r.nominal), num(r.standard_error)}});
    }
    if (spec_json.contains("efficiency")) {
        const auto& e = spec_json["efficiency"];
        detail::reject_unknown(e, {"draws"}, "efficiency study");
        const auto r = efficiency_study(spec, detail::get_or<std::size_t>(e, "draws", 100000), run.options().threads);
        std::vector<Row> rows;
        for (std::size_t f = 0; f < spec.factor_count(); ++f) {
            const auto ff = static_cast<Eigen::Index>(f);
            rows.push_back({sim.data.factor(f).label(), num(r.analytic(ff)), num(r.empirical(ff)),
                            num(r.standard_error(ff)), std::to_string(r.draws)});
        }
        run.write_table("efficiency.csv", "efficiency", {"factor", "analytic", "empirical", "standard_error", "draws"},
                        rows);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SUPE-ANOVA consensus of multi-model ensembles"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(tool_version));
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--input", o.input, "input table (or spec JSON for simulate)");
        sub->add_option("--output", o.output, "output directory [$SUPE_OUTPUT_ROOT/<command>]");
        sub->add_option("--config", o.config, "JSON config with ingest/estimation/grouping/aggregate/... sections");
        sub->add_option("--obs-type", o.obs_type, "observation type filter")->check(CLI::IsMember({"IS", "LN", "LG"}));
        sub->add_option("--seed", o.seed, "random seed override");
        sub->add_option("--threads", o.threads, "worker threads [cores]")->check(CLI::PositiveNumber);
    };
    auto needs_fit = [&](CLI::App* sub) { sub->add_option("--fit", o.fit, "fit.json from `supe fit`"); };

    struct Command {
        const char* name;
        const char* help;
        void (*run)(Run&);
    };
    const std::vector<Command> commands{
        {"cluster", "group regions by robust variability per season", cmd_cluster},
        {"fit", "penalised REML estimates of the variance parameters", cmd_fit},
        {"predict", "consensus predictions, MSPEs and intervals", cmd_predict},
        {"weights", "climatological team weights per group", cmd_weights},
        {"diagnose", "standardized errors, Q-Q pairs, unweighted comparison", cmd_diagnose},
        {"aggregate", "regional/temporal aggregates of consensus and unweighted means", cmd_aggregate},
        {"bma", "posterior team weights from verification data", cmd_bma},
        {"simulate", "synthetic ensembles and Monte Carlo studies", cmd_simulate},
    };
    std::map<CLI::App*, const Command*> by_app;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        common(sub);
        const std::string name = c.name;
        if (name != "cluster" && name != "fit" && name != "simulate") needs_fit(sub);
        if (name == "fit") {
            sub->add_option("--grouping", o.grouping, "auto | none | path to grouping.csv [auto for season/region data]");
            sub->add_option("--rho", o.rho, "team correlation CSV (header of team names)");
        }
        if (name == "bma") sub->add_option("--verification", o.verification, "CSV of factor/replicate keys, z, var");
        by_app[sub] = &c;
    }

    if (argc > 1 && argv[1][0] != '-') {
        bool known = false;
        for (const auto& c : commands) known = known || std::string_view(argv[1]) == c.name;
        if (!known) {
            std::cerr << "supe: unknown command '" << argv[1] << "'\n\n" << app.help();
            return 2;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const auto* cmd = by_app.at(app.get_subcommands().front());
    Run run(cmd->name, o);
    try {
        run.load_config();
        if (o.seed) run.effective()["seed"] = *o.seed;
        if (!o.obs_type.empty()) run.effective()["obs_type"] = o.obs_type;
        cmd->run(run);
        run.finish();
    } catch (const Error& e) {
        run.fail(std::string(to_string(e.code())), e.what());
        return 1;
    } catch (const std::exception& e) {
        run.fail("internal", e.what());
        return 3;
    }
    return 0;
}
