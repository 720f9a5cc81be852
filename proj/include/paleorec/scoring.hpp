#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "paleorec/timeseries.hpp"

// Forecast-verification metrics (interval score, CRPS, MSE) and the
// low-pass comparison pipeline for centennial-scale validation.
namespace paleorec::scoring {

// Per-year posterior summary of the reconstructed temperature. Engines fill
// the central-interval quantiles needed by the interval scores.
struct Reconstruction {
    int start_year = 0;
    std::vector<double> mean;
    std::vector<double> sd;
    std::vector<double> q025;
    std::vector<double> q975;
    std::vector<double> q10;
    std::vector<double> q90;

    int end_year() const { return start_year + static_cast<int>(mean.size()) - 1; }
    YearInterval span() const { return {start_year, end_year()}; }
    std::size_t index_of(int year) const { return static_cast<std::size_t>(year - start_year); }
};

struct ScoreReport {
    std::string model;
    int nest_count = 0;
    std::string method;
    std::string window;
    double is80 = 0.0;
    double is95 = 0.0;
    double crps = 0.0;
    double mse = 0.0;
    std::optional<double> mse_smoothed;
};

// Interval score for the central (1 - alpha) interval [lower, upper]:
// width plus (2/alpha)-scaled exceedance. Boundary values count as covered.
double interval_score(double lower, double upper, double y, double alpha);

// Closed-form CRPS of a N(mu, sigma^2) forecast against outcome y;
// sigma = 0 degenerates to |y - mu|.
double crps_gaussian(double mu, double sigma, double y);

// Sample-based CRPS: mean |x_i - y| - mean pairwise |x_i - x_j| / 2.
// Computed via sorting, so large draw sets stay O(n log n).
double crps_samples(std::vector<double> draws, double y);

// Zero-phase digital Butterworth low-pass: bilinear-transform biquad
// cascade run forward and backward over an odd-reflection padding of
// 3 * order samples, with steady-state initial conditions. The order must
// be even; the series must be gap-free and longer than 6 * order.
TimeSeries butterworth_lowpass(const TimeSeries& series, double cutoff_period_years = 100.0,
                               int order = 4);

// Scores a reconstruction on an out-of-sample window. `draws` holds
// posterior samples of the temperature at each window year (rows = draws,
// columns = years in window order). Refuses to score when the window
// overlaps the training window. If a smoothed reference is given, also
// reports the MSE of the low-passed reconstruction mean against it over
// the reference's own span.
ScoreReport validation_suite(const Reconstruction& recon, const Eigen::MatrixXd& draws,
                             const TimeSeries& observed, const YearInterval& window,
                             const YearInterval& training_window,
                             const TimeSeries* smoothed_reference = nullptr);

}  // namespace paleorec::scoring
