#pragma once

#include <string>
#include <vector>

#include "paleorec/timeseries.hpp"

// Readers and writers for the plain-CSV schemas the CLI speaks:
//   proxies:     year,proxy_id,value        (long format, empty value = missing)
//   forcings:    year,solar,volcanic,co2
//   temperature: year,anomaly
// Years are integers; values use '.' as the decimal separator.
namespace paleorec::csv {

std::vector<TimeSeries> read_proxies(const std::string& path);
void write_proxies(const std::string& path, const std::vector<TimeSeries>& proxies);

struct RawForcings {
    TimeSeries solar;
    TimeSeries volcanic;
    TimeSeries co2;
};
RawForcings read_forcings(const std::string& path);
void write_forcings(const std::string& path, const TimeSeries& solar, const TimeSeries& volcanic,
                    const TimeSeries& co2);

TimeSeries read_temperature(const std::string& path, const std::string& name = "temperature");
void write_temperature(const std::string& path, const TimeSeries& series);

// Generic table writer: header row then rows of preformatted cells.
void write_table(const std::string& path, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows);

// Fixed-format numeric cell ("%.12g") so repeated runs byte-match.
std::string cell(double value);
std::string cell(int value);

}  // namespace paleorec::csv
