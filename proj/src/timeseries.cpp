#include "paleorec/timeseries.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "paleorec/stats.hpp"

namespace paleorec {

TimeSeries::TimeSeries(int start_year, std::vector<double> values, std::string name)
    : start_year_(start_year), values_(std::move(values)), name_(std::move(name)) {
    if (values_.empty()) throw std::invalid_argument("TimeSeries: needs at least one value");
    if (start_year_ < 1 || start_year_ > 2000) {
        throw std::invalid_argument("TimeSeries '" + name_ + "': start year " +
                                    std::to_string(start_year_) + " outside 1..2000");
    }
    for (double v : values_) {
        if (!std::isnan(v) && !std::isfinite(v)) {
            throw std::invalid_argument("TimeSeries '" + name_ + "': non-finite value");
        }
    }
}

int TimeSeries::first_valid_year() const {
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (!is_missing(values_[i])) return start_year_ + static_cast<int>(i);
    }
    throw std::runtime_error("TimeSeries '" + name_ + "': all values missing");
}

int TimeSeries::last_valid_year() const {
    for (std::size_t i = values_.size(); i-- > 0;) {
        if (!is_missing(values_[i])) return start_year_ + static_cast<int>(i);
    }
    throw std::runtime_error("TimeSeries '" + name_ + "': all values missing");
}

std::size_t TimeSeries::count_valid() const {
    std::size_t n = 0;
    for (double v : values_) n += !is_missing(v);
    return n;
}

std::size_t TimeSeries::count_valid(const YearInterval& window) const {
    std::size_t n = 0;
    for (int y = window.first; y <= window.last; ++y) n += has_value(y);
    return n;
}

std::vector<double> TimeSeries::valid_values(const YearInterval& window) const {
    std::vector<double> out;
    for (int y = window.first; y <= window.last; ++y) {
        if (has_value(y)) out.push_back(at_year(y));
    }
    return out;
}

int nest_index_for_year(int year) {
    if (year < 1 || year > kNestCount * kNestSpanYears) {
        throw std::out_of_range("nest_index_for_year: year " + std::to_string(year) +
                                " outside 1.." + std::to_string(kNestCount * kNestSpanYears));
    }
    return (year + kNestSpanYears - 1) / kNestSpanYears;  // ceil(year / 250)
}

YearInterval nest_interval(int index) {
    if (index < 1 || index > kNestCount) {
        throw std::out_of_range("nest_interval: index outside 1..8");
    }
    return {(index - 1) * kNestSpanYears + 1, index * kNestSpanYears};
}

TimeSeries normal_score_transform(const TimeSeries& series) {
    std::vector<double> valid;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double v = series.values()[i];
        if (!TimeSeries::is_missing(v)) {
            valid.push_back(v);
            where.push_back(i);
        }
    }
    if (valid.size() < 2) {
        throw std::invalid_argument("normal_score_transform: series '" + series.name() +
                                    "' has fewer than 2 non-missing values");
    }
    const std::vector<double> ranks = stats::average_ranks(valid);
    const double n = static_cast<double>(valid.size());

    std::vector<double> out(series.size(), TimeSeries::kMissing);
    for (std::size_t k = 0; k < where.size(); ++k) {
        out[where[k]] = stats::normal_quantile((ranks[k] - 0.5) / n);
    }
    return TimeSeries(series.start_year(), std::move(out), series.name());
}

bool screen_missing(const TimeSeries& series, const YearInterval& window, double max_ratio) {
    if (window.length() <= 0) throw std::invalid_argument("screen_missing: empty window");
    const std::size_t valid = series.count_valid(window);
    const double missing = static_cast<double>(window.length()) - static_cast<double>(valid);
    return missing / static_cast<double>(window.length()) <= max_ratio;
}

CorrelationScreenResult screen_correlation(const std::vector<TimeSeries>& proxies,
                                           const TimeSeries& target, const YearInterval& window,
                                           double fdr_level) {
    CorrelationScreenResult result;
    std::vector<double> pvalues;
    std::vector<std::size_t> candidates;

    for (std::size_t i = 0; i < proxies.size(); ++i) {
        std::vector<double> x, y;
        for (int yr = window.first; yr <= window.last; ++yr) {
            if (proxies[i].has_value(yr) && target.has_value(yr)) {
                x.push_back(proxies[i].at_year(yr));
                y.push_back(target.at_year(yr));
            }
        }
        if (x.size() < 10) {
            result.warnings.push_back("proxy '" + proxies[i].name() + "' skipped: only " +
                                      std::to_string(x.size()) + " overlapping years");
            continue;
        }
        const double r = stats::pearson(x, y);
        pvalues.push_back(stats::pearson_pvalue(r, x.size()));
        candidates.push_back(i);
    }

    for (std::size_t k : stats::benjamini_hochberg(pvalues, fdr_level)) {
        result.kept.push_back(candidates[k]);
    }
    return result;
}

std::vector<double> infill_window(const TimeSeries& series, const YearInterval& window) {
    std::vector<double> out(static_cast<std::size_t>(window.length()));
    std::vector<int> valid_years;
    for (int y = window.first; y <= window.last; ++y) {
        if (series.has_value(y)) valid_years.push_back(y);
    }
    if (valid_years.empty()) {
        throw std::runtime_error("infill_window: series '" + series.name() +
                                 "' has no values inside the window");
    }
    std::size_t seg = 0;
    for (int y = window.first; y <= window.last; ++y) {
        double v;
        if (y <= valid_years.front()) {
            v = series.at_year(valid_years.front());
        } else if (y >= valid_years.back()) {
            v = series.at_year(valid_years.back());
        } else {
            while (valid_years[seg + 1] < y) ++seg;
            const int y0 = valid_years[seg], y1 = valid_years[seg + 1];
            if (y == y0) {
                v = series.at_year(y0);
            } else {
                const double w = static_cast<double>(y - y0) / static_cast<double>(y1 - y0);
                v = (1.0 - w) * series.at_year(y0) + w * series.at_year(y1);
            }
        }
        out[static_cast<std::size_t>(y - window.first)] = v;
    }
    return out;
}

std::array<ProxyNest, kNestCount> assign_nests(const std::vector<TimeSeries>& proxies,
                                               const YearInterval& calibration) {
    std::array<ProxyNest, kNestCount> nests;
    for (int k = 1; k <= kNestCount; ++k) {
        ProxyNest& nest = nests[static_cast<std::size_t>(k - 1)];
        nest.index = k;
        nest.interval = nest_interval(k);
        nest.observation = {nest.interval.first, calibration.last};
    }

    for (const TimeSeries& proxy : proxies) {
        const int first = proxy.first_valid_year();
        const int k = nest_index_for_year(first);  // throws when out of range
        if (proxy.last_valid_year() < calibration.last) {
            throw std::invalid_argument("assign_nests: proxy '" + proxy.name() +
                                        "' ends before the calibration window end");
        }
        nests[static_cast<std::size_t>(k - 1)].members.push_back(proxy);
    }

    for (ProxyNest& nest : nests) {
        const std::size_t p = nest.members.size();
        if (p == 0) continue;
        const auto rows = static_cast<Eigen::Index>(calibration.length());
        nest.calibration_matrix.resize(rows, static_cast<Eigen::Index>(p));
        nest.column_means.resize(p);
        nest.column_sds.resize(p);
        for (std::size_t j = 0; j < p; ++j) {
            const std::vector<double> filled = infill_window(nest.members[j], calibration);
            double m = 0.0;
            for (double v : filled) m += v;
            m /= static_cast<double>(filled.size());
            double s2 = 0.0;
            for (double v : filled) s2 += (v - m) * (v - m);
            double s = std::sqrt(s2 / static_cast<double>(filled.size()));
            if (s == 0.0) s = 1.0;  // constant column maps to zeros
            nest.column_means[j] = m;
            nest.column_sds[j] = s;
            for (Eigen::Index i = 0; i < rows; ++i) {
                nest.calibration_matrix(i, static_cast<Eigen::Index>(j)) =
                    (filled[static_cast<std::size_t>(i)] - m) / s;
            }
        }
    }
    return nests;
}

ForcingSet transform_forcings(const TimeSeries& solar, const TimeSeries& volcanic_raw,
                              const TimeSeries& co2_raw, const YearInterval& centering_window) {
    auto check_cover = [](const TimeSeries& s, const char* what) {
        if (s.count_valid() != s.size()) {
            throw std::invalid_argument(std::string("transform_forcings: ") + what +
                                        " contains missing values");
        }
    };
    check_cover(solar, "solar");
    check_cover(volcanic_raw, "volcanic");
    check_cover(co2_raw, "co2");

    std::vector<double> vt(volcanic_raw.size());
    for (std::size_t i = 0; i < volcanic_raw.size(); ++i) {
        const double v = volcanic_raw.values()[i];
        if (v > 0.0) {
            std::ostringstream msg;
            msg << "transform_forcings: volcanic forcing positive (" << v << ") in year "
                << volcanic_raw.start_year() + static_cast<int>(i);
            throw std::domain_error(msg.str());
        }
        vt[i] = std::log(-v + 1.0);
    }
    std::vector<double> ct(co2_raw.size());
    for (std::size_t i = 0; i < co2_raw.size(); ++i) {
        const double c = co2_raw.values()[i];
        if (c <= 0.0) {
            std::ostringstream msg;
            msg << "transform_forcings: CO2 concentration non-positive (" << c << ") in year "
                << co2_raw.start_year() + static_cast<int>(i);
            throw std::domain_error(msg.str());
        }
        ct[i] = std::log(c);
    }

    auto centered = [&](const TimeSeries& src) {
        const std::vector<double> window_vals = src.valid_values(centering_window);
        if (window_vals.empty()) {
            throw std::invalid_argument("transform_forcings: centering window outside '" +
                                        src.name() + "'");
        }
        const double m = stats::mean(window_vals);
        std::vector<double> out(src.values());
        for (double& v : out) v -= m;
        return TimeSeries(src.start_year(), std::move(out), src.name());
    };

    TimeSeries vt_series(volcanic_raw.start_year(), std::move(vt), "volcanic_transformed");
    TimeSeries ct_series(co2_raw.start_year(), std::move(ct), "co2_transformed");
    return ForcingSet{centered(solar), volcanic_raw, co2_raw, centered(vt_series),
                      centered(ct_series)};
}

}  // namespace paleorec
