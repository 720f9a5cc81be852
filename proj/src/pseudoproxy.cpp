#include "paleorec/pseudoproxy.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <utility>

#include "paleorec/csv.hpp"
#include "paleorec/rng.hpp"
#include "paleorec/splines.hpp"
#include "paleorec/stats.hpp"

namespace paleorec::pseudoproxy {

namespace {

constexpr double kTwoPi = 6.283185307179586477;

// Synthetic forcing shapes: a slow two-tone solar cycle, sparse negative
// volcanic spikes with a one-year tail, and CO2 flat until 1750 then on an
// exponential ramp.
constexpr double kVolcanicRate = 0.02;
constexpr double kVolcanicMeanMagnitude = 1.0;
constexpr double kCo2Base = 280.0;
constexpr double kCo2GrowthRate = 0.0011;
constexpr int kCo2RampStart = 1750;

TimeSeries synthetic_solar(const YearInterval& years) {
    std::vector<double> v(static_cast<std::size_t>(years.length()));
    for (int t = years.first; t <= years.last; ++t)
        v[static_cast<std::size_t>(t - years.first)] =
            std::sin(kTwoPi * t / 500.0) + 0.3 * std::sin(kTwoPi * t / 90.0);
    return TimeSeries(years.first, std::move(v), "solar");
}

TimeSeries synthetic_volcanic(const YearInterval& years, std::mt19937_64& gen) {
    std::vector<double> v(static_cast<std::size_t>(years.length()), 0.0);
    std::bernoulli_distribution erupts(kVolcanicRate);
    std::exponential_distribution<double> magnitude(1.0 / kVolcanicMeanMagnitude);
    for (int t = years.first; t <= years.last; ++t) {
        if (!erupts(gen)) continue;
        double m = magnitude(gen);
        v[static_cast<std::size_t>(t - years.first)] -= m;
        if (t < years.last) v[static_cast<std::size_t>(t + 1 - years.first)] -= 0.5 * m;
    }
    return TimeSeries(years.first, std::move(v), "volcanic");
}

TimeSeries synthetic_co2(const YearInterval& years) {
    std::vector<double> v(static_cast<std::size_t>(years.length()));
    for (int t = years.first; t <= years.last; ++t)
        v[static_cast<std::size_t>(t - years.first)] =
            kCo2Base * std::exp(kCo2GrowthRate * std::max(0, t - kCo2RampStart));
    return TimeSeries(years.first, std::move(v), "co2");
}

void validate(const WorldConfig& c) {
    if (c.years.first != 1 || c.years.last != kNestCount * kNestSpanYears)
        throw std::invalid_argument(
            "the synthetic world must span years 1..2000 so every proxy nest exists");
    if (c.calibration.first <= c.years.first || c.calibration.last > c.years.last ||
        c.calibration.length() < 10)
        throw std::invalid_argument(
            "the calibration window must sit inside the world's years and hold at least 10 of "
            "them");
    if (c.proxies_per_nest < 1)
        throw std::invalid_argument("proxies_per_nest must be at least 1");
    if (!(c.snr_low > 0.0) || !(c.snr_high >= c.snr_low))
        throw std::invalid_argument(
            "signal-to-noise bounds must be positive with snr_high >= snr_low");
    if (!(c.missing_fraction >= 0.0) || c.missing_fraction >= 1.0)
        throw std::invalid_argument("missing_fraction must lie in [0, 1)");
    if (!std::isfinite(c.process_sd) || c.process_sd < 0.0)
        throw std::invalid_argument("process_sd must be finite and non-negative");
    for (double b : c.beta)
        if (!std::isfinite(b)) throw std::invalid_argument("beta must be finite");
    if (c.kind == model::ModelKind::kWithForcing) {
        if (c.spline_count != 0)
            throw std::invalid_argument(
                "a with-forcing world has no spline trend; leave spline_count at 0");
        return;
    }
    if (c.spline_count < 4)
        throw std::invalid_argument("no-forcing and mixed worlds need spline_count >= 4");
    if (!c.spline_coefficients.empty() &&
        static_cast<int>(c.spline_coefficients.size()) != c.spline_count)
        throw std::invalid_argument("spline_coefficients must match spline_count when given");
    if (!std::isfinite(c.spline_coefficient_sd) || c.spline_coefficient_sd < 0.0)
        throw std::invalid_argument("spline_coefficient_sd must be finite and non-negative");
}

}  // namespace

PseudoWorld generate(const WorldConfig& config, std::uint64_t seed) {
    validate(config);

    const YearInterval years = config.years;
    const int n_years = years.length();

    std::mt19937_64 volcanic_gen(rng::substream_seed(seed, 2));
    TimeSeries solar = synthetic_solar(years);
    TimeSeries volcanic = synthetic_volcanic(years, volcanic_gen);
    TimeSeries co2 = synthetic_co2(years);
    ForcingSet forcings = transform_forcings(solar, volcanic, co2, config.calibration);

    std::array<double, 4> beta = config.beta;
    const bool with_forcing = config.kind != model::ModelKind::kNoForcing;
    if (!with_forcing) beta[1] = beta[2] = beta[3] = 0.0;

    const bool with_spline = config.kind != model::ModelKind::kWithForcing;
    std::vector<double> gammas;
    Eigen::MatrixXd basis;
    if (with_spline) {
        basis = splines::bspline_basis(years, config.spline_count).matrix;
        if (!config.spline_coefficients.empty()) {
            gammas = config.spline_coefficients;
        } else {
            std::mt19937_64 gamma_gen(rng::substream_seed(seed, 1));
            std::normal_distribution<double> normal(0.0, 1.0);
            gammas.resize(static_cast<std::size_t>(config.spline_count));
            for (double& g : gammas) g = config.spline_coefficient_sd * normal(gamma_gen);
        }
    }

    std::mt19937_64 process_gen(rng::substream_seed(seed, 0));
    std::normal_distribution<double> process_normal(0.0, 1.0);
    std::vector<double> truth(static_cast<std::size_t>(n_years));
    for (int i = 0; i < n_years; ++i) {
        const int year = years.first + i;
        double value = beta[0];
        if (with_forcing)
            value += beta[1] * forcings.solar.at_year(year) +
                     beta[2] * forcings.volcanic_transformed.at_year(year) +
                     beta[3] * forcings.co2_transformed.at_year(year);
        if (with_spline)
            for (int k = 0; k < config.spline_count; ++k)
                value += gammas[static_cast<std::size_t>(k)] * basis(i, k);
        truth[static_cast<std::size_t>(i)] = value + config.process_sd * process_normal(process_gen);
    }
    const double truth_sd = stats::sd(truth);
    TimeSeries temperature(years.first, std::move(truth), "temperature");

    // Proxy layout: the first member of each nest starts exactly at the
    // nest's first year and is gap-free, so the nest is populated however the
    // missingness draws fall; the rest start uniformly inside the interval
    // and may drop pre-calibration years. Every series runs to the end of
    // the calibration window. Each proxy owns one seed substream, so the
    // world regenerates bit-exactly and is insensitive to nest order.
    const int missing_last = config.calibration.first - 1;
    const int proxy_end = config.calibration.last;
    std::vector<PseudoProxy> proxies;
    proxies.reserve(static_cast<std::size_t>(kNestCount * config.proxies_per_nest));
    int global = 0;
    for (int nest = 1; nest <= kNestCount; ++nest) {
        const YearInterval interval = nest_interval(nest);
        for (int member = 0; member < config.proxies_per_nest; ++member, ++global) {
            std::mt19937_64 gen(rng::substream_seed(seed, 100 + static_cast<std::uint64_t>(global)));
            std::normal_distribution<double> normal(0.0, 1.0);

            const double intercept = normal(gen);
            const double sign = std::bernoulli_distribution(0.5)(gen) ? 1.0 : -1.0;
            const double slope = sign * std::uniform_real_distribution<double>(0.5, 1.5)(gen);
            double snr = config.snr_low;
            if (config.snr_high > config.snr_low)
                snr = std::uniform_real_distribution<double>(config.snr_low, config.snr_high)(gen);
            const double noise_sd = std::isfinite(snr) ? std::abs(slope) * truth_sd / snr : 0.0;

            int start = interval.first;
            if (member > 0)
                start = std::uniform_int_distribution<int>(interval.first, interval.last)(gen);

            std::vector<double> values(static_cast<std::size_t>(proxy_end - start + 1),
                                       TimeSeries::kMissing);
            std::bernoulli_distribution drop(config.missing_fraction);
            for (int year = start; year <= proxy_end; ++year) {
                if (member > 0 && year > start && year <= missing_last &&
                    config.missing_fraction > 0.0 && drop(gen))
                    continue;
                values[static_cast<std::size_t>(year - start)] =
                    intercept + slope * temperature.at_year(year) + noise_sd * normal(gen);
            }

            std::string name = "n" + std::to_string(nest) + "_p" + std::to_string(member + 1);
            proxies.push_back(PseudoProxy{TimeSeries(start, std::move(values), std::move(name)),
                                          nest, intercept, slope, noise_sd, snr});
        }
    }

    return PseudoWorld{config,
                       seed,
                       std::move(temperature),
                       std::move(forcings),
                       beta,
                       std::move(gammas),
                       std::move(proxies)};
}

WorldPaths write_world(const PseudoWorld& world, const std::string& directory) {
    std::filesystem::create_directories(directory);
    const std::filesystem::path dir(directory);
    WorldPaths paths;
    paths.proxies = (dir / "proxies.csv").string();
    paths.forcings = (dir / "forcings.csv").string();
    paths.temperature = (dir / "temperature.csv").string();

    std::vector<TimeSeries> series;
    series.reserve(world.proxies.size());
    for (const PseudoProxy& p : world.proxies) series.push_back(p.series);
    csv::write_proxies(paths.proxies, series);
    csv::write_forcings(paths.forcings, world.forcings.solar, world.forcings.volcanic_raw,
                        world.forcings.co2_raw);
    csv::write_temperature(paths.temperature, world.temperature);
    return paths;
}

}  // namespace paleorec::pseudoproxy
