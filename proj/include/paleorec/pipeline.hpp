#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "paleorec/gibbs.hpp"
#include "paleorec/inla.hpp"
#include "paleorec/model.hpp"
#include "paleorec/reduce.hpp"
#include "paleorec/scoring.hpp"
#include "paleorec/timeseries.hpp"

// End-to-end orchestration: load the CSV inputs, screen and reduce the
// proxies, fit the chosen engine, reconstruct the temperature path, score it
// out of sample, and write every artifact (tables, plots, run manifest) into
// one output directory. A run is a pure function of its configuration and
// seed: repeating it reproduces the CSV outputs byte for byte.
namespace paleorec::pipeline {

inline constexpr const char* kVersion = "0.1.0";

enum class Engine { kNestedLaplace, kGibbs };
std::string engine_name(Engine engine);
Engine parse_engine(const std::string& name);

// Stages in execution order; a run executes every stage up to and including
// the requested one and writes that prefix's artifacts.
enum class Stage { kLoad, kReduce, kFit, kReconstruct, kValidate };
std::string stage_name(Stage stage);

struct RunConfig {
    std::string proxies_path;
    std::string forcings_path;  // may stay empty for a no-forcing model
    std::string temperature_path;
    std::string output_dir = "paleorec_out";
    bool plots = true;

    model::ModelKind kind = model::ModelKind::kWithForcing;
    int nests = 8;  // 8, or 1 to keep only the oldest (full-span) nest
    std::vector<reduce::Method> methods{reduce::Method::kSpcr};
    int spline_count = 0;  // 0 -> chosen on the calibration window

    YearInterval calibration{1900, 2000};
    YearInterval validation{1850, 1899};

    Engine engine = Engine::kNestedLaplace;
    std::uint64_t seed = 1;
    int threads = 0;  // 0 -> all hardware threads
    int gibbs_iterations = 5000;
    int gibbs_burn_in = 1000;

    // Proxy screening over the calibration window.
    double max_missing_ratio = 0.5;
    double fdr_level = 0.05;

    int score_draws = 10000;
    bool smoothed_mse = true;
};

// Key-value configuration file with [paths], [model], [windows],
// [inference], [screening] and [scoring] sections. Unknown sections or keys
// are errors, not warnings.
RunConfig load_config(const std::string& path);

// PALEOREC_PROXIES, PALEOREC_FORCINGS, PALEOREC_TEMPERATURE,
// PALEOREC_OUTPUT_DIR and PALEOREC_THREADS override the matching fields;
// nothing else is read from the environment.
void apply_env_overrides(RunConfig& config);

// The exact configuration recorded in an earlier run's manifest, for
// replaying that run.
RunConfig manifest_config(const std::string& manifest_path);

struct StageTiming {
    std::string name;
    double seconds = 0.0;
};

struct MethodResult {
    reduce::Method method = reduce::Method::kLasso;
    std::vector<reduce::ReducedProxy> rps;
    int spline_count = 0;  // basis size actually used (no-forcing / mixed)
    std::optional<model::LatentGaussianModel> model;
    std::vector<inla::HyperPoint> points;  // nested-Laplace fit
    std::optional<gibbs::Chain> chain;     // Gibbs fit
    std::optional<scoring::Reconstruction> reconstruction;
    std::optional<scoring::ScoreReport> scores;
};

struct RunResult {
    RunConfig config;
    Stage through = Stage::kValidate;
    std::vector<std::string> warnings;
    std::vector<MethodResult> methods;
    std::vector<StageTiming> timings;
    std::vector<std::string> outputs;  // files written, in write order
    std::string manifest_path;
};

RunResult run_pipeline(const RunConfig& config, Stage through = Stage::kValidate);

// Side-by-side fit of the two engines on the same single-nest with-forcing
// model: posterior agreement per coefficient, variance summaries, and the
// wall-clock of each fit. Both engines report the same parameters in the
// same order.
struct EngineComparison {
    struct Row {
        std::string parameter;
        double laplace_mean = 0.0, laplace_sd = 0.0;
        double laplace_q025 = 0.0, laplace_q975 = 0.0;
        double gibbs_mean = 0.0, gibbs_sd = 0.0;
        double gibbs_q025 = 0.0, gibbs_q975 = 0.0;
        double mean_gap_sds = 0.0;  // |mean difference| in units of the sampler's sd
        double width_ratio = 0.0;   // Laplace 95% width over sampler 95% width
    };
    std::vector<Row> coefficients;
    std::vector<Row> variances;
    double laplace_seconds = 0.0;
    double gibbs_seconds = 0.0;
    double speedup = 0.0;  // gibbs_seconds / laplace_seconds
    std::vector<std::string> outputs;
};

EngineComparison compare_engines(const RunConfig& config);

}  // namespace paleorec::pipeline
