#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "supe/error.hpp"

namespace supe::csv {

/// Splits one record on `delim`, honouring double-quoted fields.
[[nodiscard]] inline std::vector<std::string> split_record(std::string_view line, char delim = ',') {
    std::vector<std::string> fields;
    std::string current;
    bool quoted = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
        const char ch = line[k];
        if (quoted) {
            if (ch == '"') {
                if (k + 1 < line.size() && line[k + 1] == '"') {
                    current.push_back('"');
                    ++k;
                } else {
                    quoted = false;
                }
            } else {
                current.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == delim) {
            fields.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(ch);
        }
    }
    if (quoted) throw Error(ErrorCode::malformed_row, "unterminated quote in record");
    fields.push_back(std::move(current));
    return fields;
}

[[nodiscard]] inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;

    [[nodiscard]] std::optional<std::size_t> column(std::string_view name) const {
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (header[c] == name) return c;
        }
        return std::nullopt;
    }

    [[nodiscard]] std::size_t require_column(std::string_view name) const {
        if (auto c = column(name)) return *c;
        throw Error(ErrorCode::schema_mismatch, "missing column '" + std::string(name) + "'");
    }
};

/// Reads a header line followed by records. Blank lines and lines starting
/// with '#' are skipped. Every record must have the header's field count.
[[nodiscard]] inline Table read(std::istream& in, char delim = ',') {
    Table table;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        auto fields = split_record(t, delim);
        for (auto& f : fields) f = trim(f);
        if (!have_header) {
            table.header = std::move(fields);
            have_header = true;
            continue;
        }
        if (fields.size() != table.header.size()) {
            throw Error(ErrorCode::malformed_row,
                        "line " + std::to_string(line_no) + ": expected " +
                            std::to_string(table.header.size()) + " fields, got " +
                            std::to_string(fields.size()));
        }
        table.rows.push_back(std::move(fields));
        table.line_numbers.push_back(line_no);
    }
    if (!have_header) throw Error(ErrorCode::malformed_row, "empty table: no header line");
    return table;
}

[[nodiscard]] inline std::optional<double> parse_double(std::string_view s) {
    double value = 0.0;
    const auto* first = s.data();
    const auto* last = s.data() + s.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) {
        // from_chars rejects "nan"/"inf" spellings on some inputs; fall back.
        if (s == "nan" || s == "NaN" || s == "NA") return std::nan("");
        if (s == "inf" || s == "Inf") return HUGE_VAL;
        if (s == "-inf" || s == "-Inf") return -HUGE_VAL;
        return std::nullopt;
    }
    return value;
}

[[nodiscard]] inline std::optional<long long> parse_int(std::string_view s) {
    long long value = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return value;
}

/// Shortest representation that round-trips a double exactly.
[[nodiscard]] inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

[[nodiscard]] inline std::string quote(std::string_view field) {
    if (field.find_first_of(",\"\n") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char ch : field) {
        if (ch == '"') out.push_back('"');
        out.push_back(ch);
    }
    out.push_back('"');
    return out;
}

inline void write_row(std::ostream& out, const std::vector<std::string>& fields) {
    for (std::size_t k = 0; k < fields.size(); ++k) {
        if (k) out << ',';
        out << quote(fields[k]);
    }
    out << '\n';
}

}  // namespace supe::csv
