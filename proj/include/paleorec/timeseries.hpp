#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

// Core time-series types and the preprocessing that turns raw proxy/forcing
// tables into model-ready structures: normal-score mapping, missing-data and
// correlation screening, nest assembly and forcing transforms.
namespace paleorec {

// Inclusive interval of calendar years.
struct YearInterval {
    int first = 0;
    int last = 0;

    int length() const { return last - first + 1; }
    bool contains(int year) const { return year >= first && year <= last; }
    bool overlaps(const YearInterval& other) const {
        return first <= other.last && other.first <= last;
    }
};

// Annual-resolution series with an explicit start year. Gaps are stored as
// NaN; the year index itself is contiguous. Immutable after construction.
class TimeSeries {
public:
    static constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
    static bool is_missing(double v) { return std::isnan(v); }

    TimeSeries(int start_year, std::vector<double> values, std::string name = "");

    int start_year() const { return start_year_; }
    int end_year() const { return start_year_ + static_cast<int>(values_.size()) - 1; }
    YearInterval span() const { return {start_year(), end_year()}; }
    std::size_t size() const { return values_.size(); }
    const std::string& name() const { return name_; }
    const std::vector<double>& values() const { return values_; }

    bool covers(int year) const { return year >= start_year() && year <= end_year(); }
    // Value at a calendar year; NaN when the year falls outside the series.
    double at_year(int year) const {
        return covers(year) ? values_[static_cast<std::size_t>(year - start_year_)] : kMissing;
    }
    bool has_value(int year) const { return !is_missing(at_year(year)); }

    int first_valid_year() const;  // throws if the series is all-missing
    int last_valid_year() const;
    std::size_t count_valid() const;
    std::size_t count_valid(const YearInterval& window) const;

    // Non-missing values within a window, in year order.
    std::vector<double> valid_values(const YearInterval& window) const;

private:
    int start_year_;
    std::vector<double> values_;
    std::string name_;
};

// Solar, volcanic and CO2 forcing series along with their model-space
// transforms, all covering the full reconstruction interval gap-free.
struct ForcingSet {
    TimeSeries solar;
    TimeSeries volcanic_raw;
    TimeSeries co2_raw;
    TimeSeries volcanic_transformed;
    TimeSeries co2_transformed;
};

// Proxies grouped by their 250-year availability interval. The calibration
// matrix holds the members restricted to the calibration window, infilled
// and column-standardized; the recorded means/sds reproduce that scaling on
// the full observation window.
struct ProxyNest {
    int index = 0;                 // 1..8
    YearInterval interval;         // availability interval per the nest rule
    YearInterval observation;      // [interval.first, calibration.last]
    std::vector<TimeSeries> members;
    Eigen::MatrixXd calibration_matrix;  // calibration years x members
    std::vector<double> column_means;    // calibration-window statistics
    std::vector<double> column_sds;
};

inline constexpr int kNestCount = 8;
inline constexpr int kNestSpanYears = 250;

// Nest index (1-based) for a proxy whose first valid year is `year`.
// Throws std::out_of_range for years outside 1..kNestCount*kNestSpanYears.
int nest_index_for_year(int year);
YearInterval nest_interval(int index);

// Rank-based map onto a standard normal: the value of rank r among n
// non-missing points becomes Phi^-1((r - 0.5)/n), with average ranks for
// ties. Missing entries stay missing.
TimeSeries normal_score_transform(const TimeSeries& series);

// Keep/drop by the fraction of missing years inside `window`; years the
// series does not cover count as missing. Returns true to keep.
bool screen_missing(const TimeSeries& series, const YearInterval& window, double max_ratio);

struct CorrelationScreenResult {
    std::vector<std::size_t> kept;       // indices into the input list
    std::vector<std::string> warnings;   // proxies skipped for short overlap
};

// Pearson correlation of each proxy against `target` over the window,
// two-sided p-values, Benjamini-Hochberg at fdr_level. Proxies with fewer
// than 10 overlapping years are excluded with a warning rather than an error.
CorrelationScreenResult screen_correlation(const std::vector<TimeSeries>& proxies,
                                           const TimeSeries& target, const YearInterval& window,
                                           double fdr_level);

// Group screened proxies into the 8 nests by first valid year and build each
// nest's standardized calibration matrix. Nests with no members are returned
// empty (members.size() == 0) so indices stay aligned with the nest rule.
std::array<ProxyNest, kNestCount> assign_nests(const std::vector<TimeSeries>& proxies,
                                               const YearInterval& calibration);

// log(C), log(-V + 1) and pass-through solar, each centered over the
// calibration window. Throws std::domain_error naming the first year whose
// raw value violates C > 0 or V <= 0.
ForcingSet transform_forcings(const TimeSeries& solar, const TimeSeries& volcanic_raw,
                              const TimeSeries& co2_raw, const YearInterval& centering_window);

// Gap infill used before matrix assembly: interior gaps by linear
// interpolation in time, leading/trailing gaps held at the nearest value.
// A series with no valid points throws.
std::vector<double> infill_window(const TimeSeries& series, const YearInterval& window);

}  // namespace paleorec
