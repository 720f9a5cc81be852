#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "paleorec/reduce.hpp"
#include "paleorec/timeseries.hpp"

// Gibbs-sampler reference for the forcing-only model with a single reduced
// proxy. The full conditionals are all Gaussian or gamma, so the sampler is
// exact; it exists to cross-check the approximate engine and to benchmark
// against it.
namespace paleorec::gibbs {

// Post-burn-in draws. Rows are kept iterations; columns follow the name
// vectors. Variance draws are strictly positive.
struct Chain {
    int iterations = 0;
    int burn_in = 0;
    std::uint64_t seed = 0;
    int start_year = 0;  // first year of the temperature block

    std::vector<std::string> coefficient_names;
    std::vector<std::string> variance_names;
    Eigen::MatrixXd coefficients;
    Eigen::MatrixXd variances;
    Eigen::MatrixXd temperature;

    int kept() const { return static_cast<int>(coefficients.rows()); }
    int temperature_years() const { return static_cast<int>(temperature.cols()); }
};

// Systematic-scan Gibbs: proxy link coefficients, forcing coefficients, the
// temperature block (whose full conditional factorises over years), then the
// two variances. Priors match the main model: N(0, 3) coefficients,
// gamma(1, 1e-20) precisions, and the instrumental clamp at the default
// calibration precision.
Chain gibbs_wf(const reduce::ReducedProxy& rp, const ForcingSet& forcings,
               const TimeSeries& calibration, int iterations = 5000, int burn_in = 1000,
               std::uint64_t seed = 0);

struct ParameterSummary {
    std::string name;
    double mean = 0.0;
    double sd = 0.0;
    double q025 = 0.0;
    double q975 = 0.0;
    double ess = 0.0;
    bool degenerate = false;  // constant series: sd == 0 and ess reported as 0
};

// Effective sample size with the autocorrelation sum truncated at the first
// non-positive initial pair (Geyer's rule). Constant series return 0.
double effective_sample_size(const std::vector<double>& draws);

ParameterSummary series_summary(const std::string& name, const std::vector<double>& draws);

// Summaries of the stored scalar parameters: coefficients, then variances.
std::vector<ParameterSummary> chain_summary(const Chain& chain);

// Gelman-Rubin potential scale reduction over two or more equally long
// chains of one parameter.
double potential_scale_reduction(const std::vector<std::vector<double>>& chains);

}  // namespace paleorec::gibbs
