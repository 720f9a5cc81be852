#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "paleorec/model.hpp"
#include "paleorec/timeseries.hpp"

// Synthetic benchmark worlds: a known latent temperature driven by synthetic
// forcings (and optionally a smooth spline trend), observed through noisy
// linear proxies laid out on the eight availability nests. Every draw comes
// from a substream of one master seed, so a world regenerates bit-exactly.
namespace paleorec::pseudoproxy {

struct WorldConfig {
    model::ModelKind kind = model::ModelKind::kWithForcing;

    // Generating coefficients on the transformed, calibration-centered
    // forcing scale: intercept, solar, volcanic, CO2. The forcing terms are
    // ignored (treated as zero) in a no-forcing world.
    std::array<double, 4> beta = {0.0, 0.05, 0.25, 0.6};

    // Smooth trend for no-forcing / mixed worlds: basis size over the full
    // interval and either explicit coefficients or the sd they are drawn
    // with. A with-forcing world must leave spline_count at 0.
    int spline_count = 0;
    std::vector<double> spline_coefficients;
    double spline_coefficient_sd = 0.3;

    int proxies_per_nest = 10;
    // Per-proxy signal-to-noise ratio, uniform on [snr_low, snr_high]. Both
    // infinite requests noiseless proxies.
    double snr_low = 1.0;
    double snr_high = 4.0;
    double process_sd = 0.1;
    // Chance that a pre-calibration year after a proxy's first year is
    // dropped. The first proxy of each nest is kept gap-free so the nest is
    // populated from the very start of its interval.
    double missing_fraction = 0.05;

    YearInterval years = {1, 2000};
    YearInterval calibration = {1900, 2000};
};

// One synthetic proxy along with the parameters that generated it.
struct PseudoProxy {
    TimeSeries series;
    int nest_index = 0;  // 1..kNestCount
    double intercept = 0.0;
    double slope = 1.0;
    double noise_sd = 0.0;
    double snr = 0.0;
};

struct PseudoWorld {
    WorldConfig config;
    std::uint64_t seed = 0;
    TimeSeries temperature;  // latent truth over the full interval
    ForcingSet forcings;     // synthetic raw series plus model-space transforms
    std::array<double, 4> beta = {};
    std::vector<double> spline_coefficients;
    std::vector<PseudoProxy> proxies;
};

PseudoWorld generate(const WorldConfig& config, std::uint64_t seed);

// File layout produced by write_world: the three CSV files the pipeline
// reads back (long-format proxies, forcing table, truth as the temperature
// record covering calibration and validation years alike).
struct WorldPaths {
    std::string proxies;
    std::string forcings;
    std::string temperature;
};

WorldPaths write_world(const PseudoWorld& world, const std::string& directory);

}  // namespace paleorec::pseudoproxy
