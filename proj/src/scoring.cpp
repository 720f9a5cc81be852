#include "paleorec/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "paleorec/stats.hpp"

namespace paleorec::scoring {

double interval_score(double lower, double upper, double y, double alpha) {
    if (lower > upper) throw std::invalid_argument("interval_score: lower > upper");
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw std::invalid_argument("interval_score: alpha must lie in (0, 1)");
    }
    double score = upper - lower;
    if (y < lower) score += 2.0 / alpha * (lower - y);
    if (y > upper) score += 2.0 / alpha * (y - upper);
    return score;
}

double crps_gaussian(double mu, double sigma, double y) {
    if (sigma < 0.0) throw std::invalid_argument("crps_gaussian: negative sigma");
    if (sigma == 0.0) return std::abs(y - mu);
    const double z = (y - mu) / sigma;
    return sigma * (z * (2.0 * stats::normal_cdf(z) - 1.0) + 2.0 * stats::normal_pdf(z) -
                    1.0 / std::sqrt(std::numbers::pi));
}

double crps_samples(std::vector<double> draws, double y) {
    const std::size_t n = draws.size();
    if (n < 2) throw std::invalid_argument("crps_samples: need at least 2 draws");
    double abs_err = 0.0;
    for (double x : draws) abs_err += std::abs(x - y);
    abs_err /= static_cast<double>(n);

    // sum_{i<j} (x_(j) - x_(i)) accumulated as sum_k (2k - n + 1) x_(k).
    std::sort(draws.begin(), draws.end());
    double spread = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        spread += (2.0 * static_cast<double>(k) - static_cast<double>(n) + 1.0) * draws[k];
    }
    const double nn = static_cast<double>(n);
    return abs_err - spread / (nn * nn);
}

namespace {

struct Biquad {
    double b0, b1, b2, a1, a2;
};

// One second-order section of the bilinear-transformed Butterworth
// prototype; zeta is the section's damping ratio.
Biquad design_section(double warped, double zeta) {
    const double w2 = warped * warped;
    const double d = 1.0 + 2.0 * zeta * warped + w2;
    return Biquad{w2 / d, 2.0 * w2 / d, w2 / d, 2.0 * (w2 - 1.0) / d,
                  (1.0 - 2.0 * zeta * warped + w2) / d};
}

// Direct-form II transposed with steady-state initial conditions, so a
// constant input passes through without transient.
void filter_in_place(const Biquad& s, std::vector<double>& x) {
    double z1 = (1.0 - s.b0) * x.front();
    double z2 = (s.b2 - s.a2) * x.front();
    for (double& v : x) {
        const double y = s.b0 * v + z1;
        z1 = s.b1 * v + z2 - s.a1 * y;
        z2 = s.b2 * v - s.a2 * y;
        v = y;
    }
}

}  // namespace

TimeSeries butterworth_lowpass(const TimeSeries& series, double cutoff_period_years, int order) {
    if (order < 2 || order % 2 != 0) {
        throw std::invalid_argument("butterworth_lowpass: order must be even and >= 2");
    }
    if (cutoff_period_years <= 2.0) {
        throw std::invalid_argument("butterworth_lowpass: cutoff period must exceed 2 years");
    }
    const std::size_t n = series.size();
    if (series.count_valid() != n) {
        throw std::invalid_argument("butterworth_lowpass: series has missing values");
    }
    const auto pad = static_cast<std::size_t>(3 * order);
    if (n <= pad) {
        throw std::invalid_argument("butterworth_lowpass: series shorter than the filter padding");
    }

    const double warped = std::tan(std::numbers::pi / cutoff_period_years);
    std::vector<Biquad> sections;
    for (int m = 1; m <= order / 2; ++m) {
        const double zeta =
            std::sin(std::numbers::pi * (2.0 * m - 1.0) / (2.0 * static_cast<double>(order)));
        sections.push_back(design_section(warped, zeta));
    }

    // Odd reflection about the end samples keeps level and slope continuous
    // across the padded edges.
    std::vector<double> x;
    x.reserve(n + 2 * pad);
    for (std::size_t i = pad; i >= 1; --i) {
        x.push_back(2.0 * series.values().front() - series.values()[i]);
    }
    x.insert(x.end(), series.values().begin(), series.values().end());
    for (std::size_t i = 0; i < pad; ++i) {
        x.push_back(2.0 * series.values().back() - series.values()[n - 2 - i]);
    }

    for (const Biquad& s : sections) filter_in_place(s, x);
    std::reverse(x.begin(), x.end());
    for (const Biquad& s : sections) filter_in_place(s, x);
    std::reverse(x.begin(), x.end());

    std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(pad),
                            x.begin() + static_cast<std::ptrdiff_t>(pad + n));
    return TimeSeries(series.start_year(), std::move(out), series.name());
}

ScoreReport validation_suite(const Reconstruction& recon, const Eigen::MatrixXd& draws,
                             const TimeSeries& observed, const YearInterval& window,
                             const YearInterval& training_window,
                             const TimeSeries* smoothed_reference) {
    if (window.overlaps(training_window)) {
        throw std::invalid_argument("validation_suite: validation window overlaps training data");
    }
    if (!recon.span().contains(window.first) || !recon.span().contains(window.last)) {
        throw std::invalid_argument("validation_suite: reconstruction does not cover the window");
    }
    if (draws.cols() != static_cast<Eigen::Index>(window.length()) || draws.rows() < 2) {
        throw std::invalid_argument("validation_suite: draws matrix does not match the window");
    }

    ScoreReport report;
    report.window =
        std::to_string(window.first) + "-" + std::to_string(window.last);

    double is80 = 0.0, is95 = 0.0, crps = 0.0, mse = 0.0;
    int counted = 0;
    for (int y = window.first; y <= window.last; ++y) {
        if (!observed.has_value(y)) continue;
        const double obs = observed.at_year(y);
        const std::size_t i = recon.index_of(y);
        is80 += interval_score(recon.q10[i], recon.q90[i], obs, 0.2);
        is95 += interval_score(recon.q025[i], recon.q975[i], obs, 0.05);
        const Eigen::Index col = static_cast<Eigen::Index>(y - window.first);
        std::vector<double> year_draws(draws.col(col).data(),
                                       draws.col(col).data() + draws.rows());
        crps += crps_samples(std::move(year_draws), obs);
        const double err = recon.mean[i] - obs;
        mse += err * err;
        ++counted;
    }
    if (counted == 0) {
        throw std::invalid_argument("validation_suite: no observed years inside the window");
    }
    report.is80 = is80 / counted;
    report.is95 = is95 / counted;
    report.crps = crps / counted;
    report.mse = mse / counted;

    if (smoothed_reference != nullptr) {
        TimeSeries mean_series(recon.start_year, recon.mean, "reconstruction_mean");
        const TimeSeries smoothed = butterworth_lowpass(mean_series);
        double acc = 0.0;
        int m = 0;
        for (int y = smoothed_reference->start_year(); y <= smoothed_reference->end_year(); ++y) {
            if (!smoothed_reference->has_value(y) || !smoothed.covers(y)) continue;
            const double err = smoothed.at_year(y) - smoothed_reference->at_year(y);
            acc += err * err;
            ++m;
        }
        if (m > 0) report.mse_smoothed = acc / m;
    }
    return report;
}

}  // namespace paleorec::scoring
