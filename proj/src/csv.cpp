#include "paleorec/csv.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace paleorec::csv {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    return in;
}

int parse_year(const std::string& s, const std::string& path) {
    try {
        return std::stoi(s);
    } catch (const std::exception&) {
        throw std::runtime_error(path + ": bad year field '" + s + "'");
    }
}

double parse_value(const std::string& s, const std::string& path) {
    if (s.empty()) return TimeSeries::kMissing;
    try {
        return std::stod(s);
    } catch (const std::exception&) {
        throw std::runtime_error(path + ": bad numeric field '" + s + "'");
    }
}

}  // namespace

std::string cell(double value) {
    if (TimeSeries::is_missing(value)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", value);
    return buf;
}

std::string cell(int value) { return std::to_string(value); }

void write_table(const std::string& path, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i) out << ',';
        out << header[i];
    }
    out << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out << ',';
            out << row[i];
        }
        out << '\n';
    }
}

std::vector<TimeSeries> read_proxies(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    std::string line;
    std::getline(in, line);  // header
    std::map<std::string, std::map<int, double>> by_id;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != 3) throw std::runtime_error(path + ": expected 3 columns");
        by_id[cells[1]][parse_year(cells[0], path)] = parse_value(cells[2], path);
    }
    std::vector<TimeSeries> out;
    out.reserve(by_id.size());
    for (const auto& [id, years] : by_id) {
        const int first = years.begin()->first;
        const int last = years.rbegin()->first;
        std::vector<double> values(static_cast<std::size_t>(last - first + 1),
                                   TimeSeries::kMissing);
        for (const auto& [year, value] : years) {
            values[static_cast<std::size_t>(year - first)] = value;
        }
        out.emplace_back(first, std::move(values), id);
    }
    return out;
}

void write_proxies(const std::string& path, const std::vector<TimeSeries>& proxies) {
    std::vector<std::vector<std::string>> rows;
    for (const TimeSeries& p : proxies) {
        for (int y = p.start_year(); y <= p.end_year(); ++y) {
            rows.push_back({cell(y), p.name(), cell(p.at_year(y))});
        }
    }
    write_table(path, {"year", "proxy_id", "value"}, rows);
}

RawForcings read_forcings(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    std::string line;
    std::getline(in, line);
    std::map<int, std::array<double, 3>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != 4) throw std::runtime_error(path + ": expected 4 columns");
        const int year = parse_year(cells[0], path);
        rows[year] = {parse_value(cells[1], path), parse_value(cells[2], path),
                      parse_value(cells[3], path)};
    }
    if (rows.empty()) throw std::runtime_error(path + ": no data rows");
    const int first = rows.begin()->first;
    const int last = rows.rbegin()->first;
    const auto n = static_cast<std::size_t>(last - first + 1);
    std::vector<double> solar(n, TimeSeries::kMissing), volcanic(n, TimeSeries::kMissing),
        co2(n, TimeSeries::kMissing);
    for (const auto& [year, vals] : rows) {
        const auto i = static_cast<std::size_t>(year - first);
        solar[i] = vals[0];
        volcanic[i] = vals[1];
        co2[i] = vals[2];
    }
    return RawForcings{TimeSeries(first, std::move(solar), "solar"),
                       TimeSeries(first, std::move(volcanic), "volcanic"),
                       TimeSeries(first, std::move(co2), "co2")};
}

void write_forcings(const std::string& path, const TimeSeries& solar, const TimeSeries& volcanic,
                    const TimeSeries& co2) {
    const int first = std::min({solar.start_year(), volcanic.start_year(), co2.start_year()});
    const int last = std::max({solar.end_year(), volcanic.end_year(), co2.end_year()});
    std::vector<std::vector<std::string>> rows;
    for (int y = first; y <= last; ++y) {
        rows.push_back(
            {cell(y), cell(solar.at_year(y)), cell(volcanic.at_year(y)), cell(co2.at_year(y))});
    }
    write_table(path, {"year", "solar", "volcanic", "co2"}, rows);
}

TimeSeries read_temperature(const std::string& path, const std::string& name) {
    std::ifstream in = open_or_throw(path);
    std::string line;
    std::getline(in, line);
    std::map<int, double> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != 2) throw std::runtime_error(path + ": expected 2 columns");
        rows[parse_year(cells[0], path)] = parse_value(cells[1], path);
    }
    if (rows.empty()) throw std::runtime_error(path + ": no data rows");
    const int first = rows.begin()->first;
    const int last = rows.rbegin()->first;
    std::vector<double> values(static_cast<std::size_t>(last - first + 1), TimeSeries::kMissing);
    for (const auto& [year, value] : rows) {
        values[static_cast<std::size_t>(year - first)] = value;
    }
    return TimeSeries(first, std::move(values), name);
}

void write_temperature(const std::string& path, const TimeSeries& series) {
    std::vector<std::vector<std::string>> rows;
    for (int y = series.start_year(); y <= series.end_year(); ++y) {
        rows.push_back({cell(y), cell(series.at_year(y))});
    }
    write_table(path, {"year", "anomaly"}, rows);
}

}  // namespace paleorec::csv
