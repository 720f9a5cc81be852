#include "paleorec/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <type_traits>
#include <utility>

#include "json.hpp"
#include "paleorec/csv.hpp"
#include "paleorec/parallel.hpp"
#include "paleorec/rng.hpp"
#include "paleorec/splines.hpp"
#include "paleorec/stats.hpp"
#include "paleorec/svgplot.hpp"

namespace paleorec::pipeline {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Seed substreams, all derived from the run seed: 1000 + nest/method slot
// for the reduction cross-validation, 3000 + method slot for the Gibbs
// chain, 4000 + method slot for the scoring draws.
std::uint64_t reduction_seed(std::uint64_t seed, int nest_index, std::size_t method_pos) {
    const std::uint64_t slot = static_cast<std::uint64_t>(nest_index - 1) *
                                   reduce::kAllMethods.size() +
                               method_pos;
    return rng::substream_seed(seed, 1000 + slot);
}

std::size_t method_position(reduce::Method m) {
    for (std::size_t i = 0; i < reduce::kAllMethods.size(); ++i)
        if (reduce::kAllMethods[i] == m) return i;
    throw std::invalid_argument("method_position: unknown method");
}

class StageClock {
public:
    StageClock() : t0_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_;
};

// Runs one stage, records its wall clock, and tags any failure with the
// stage name so the CLI can report where a run died.
template <typename F>
auto run_stage(std::vector<StageTiming>& timings, const std::string& name, F&& body) {
    StageClock clock;
    try {
        if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
            body();
            timings.push_back({name, clock.seconds()});
        } else {
            auto value = body();
            timings.push_back({name, clock.seconds()});
            return value;
        }
    } catch (const std::exception& e) {
        throw std::runtime_error("[" + name + "] " + e.what());
    }
}

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> items;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) items.push_back(item);
    }
    return items;
}

TimeSeries window_series(const TimeSeries& s, const YearInterval& w) {
    std::vector<double> v(static_cast<std::size_t>(w.length()));
    for (int y = w.first; y <= w.last; ++y)
        v[static_cast<std::size_t>(y - w.first)] = s.at_year(y);
    return TimeSeries(w.first, std::move(v), s.name());
}

double sorted_quantile(const std::vector<double>& sorted, double p) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double h = p * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= n) return sorted[n - 1];
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inla::DensityCurve marginal_curve(const inla::PosteriorMarginal& pm, int resolution = 201) {
    const double lo = pm.mean() - 4.0 * pm.sd();
    const double hi = pm.mean() + 4.0 * pm.sd();
    inla::DensityCurve curve;
    curve.value.resize(static_cast<std::size_t>(resolution));
    curve.density.resize(static_cast<std::size_t>(resolution));
    for (int i = 0; i < resolution; ++i) {
        const double x = lo + (hi - lo) * i / (resolution - 1);
        curve.value[static_cast<std::size_t>(i)] = x;
        curve.density[static_cast<std::size_t>(i)] = pm.pdf(x);
    }
    return curve;
}

// Gaussian kernel density with Silverman's bandwidth, for plotting sampler
// draws next to the mixture marginals.
inla::DensityCurve kde_curve(std::vector<double> draws, int resolution = 201) {
    std::sort(draws.begin(), draws.end());
    const std::size_t n = draws.size();
    const double sd = stats::sd(draws);
    const double iqr = sorted_quantile(draws, 0.75) - sorted_quantile(draws, 0.25);
    double h = 0.9 * std::min(sd, iqr / 1.34) * std::pow(static_cast<double>(n), -0.2);
    if (!(h > 0.0)) h = sd > 0.0 ? sd : 1e-3;
    const double lo = draws.front() - 3.0 * h;
    const double hi = draws.back() + 3.0 * h;
    inla::DensityCurve curve;
    curve.value.resize(static_cast<std::size_t>(resolution));
    curve.density.resize(static_cast<std::size_t>(resolution));
    for (int i = 0; i < resolution; ++i) {
        const double x = lo + (hi - lo) * i / (resolution - 1);
        double acc = 0.0;
        for (double d : draws) acc += stats::normal_pdf((x - d) / h);
        curve.value[static_cast<std::size_t>(i)] = x;
        curve.density[static_cast<std::size_t>(i)] = acc / (static_cast<double>(n) * h);
    }
    return curve;
}

// Quantile of a tabulated density by trapezoid integration and linear
// interpolation inside the crossing cell.
double curve_quantile(const inla::DensityCurve& curve, double p) {
    const std::size_t n = curve.value.size();
    std::vector<double> cum(n, 0.0);
    for (std::size_t i = 1; i < n; ++i)
        cum[i] = cum[i - 1] + 0.5 * (curve.density[i] + curve.density[i - 1]) *
                                  (curve.value[i] - curve.value[i - 1]);
    const double target = p * cum.back();
    for (std::size_t i = 1; i < n; ++i) {
        if (cum[i] < target) continue;
        const double span = cum[i] - cum[i - 1];
        const double frac = span > 0.0 ? (target - cum[i - 1]) / span : 0.0;
        return curve.value[i - 1] + frac * (curve.value[i] - curve.value[i - 1]);
    }
    return curve.value.back();
}

struct HyperMoments {
    double mean = 0.0;
    double sd = 0.0;
};

// Design-weighted moments of a noise variance exp(-psi_h).
HyperMoments sigma2_moments(const std::vector<inla::HyperPoint>& points, int h) {
    double m = 0.0, second = 0.0, wsum = 0.0;
    for (const inla::HyperPoint& p : points) {
        const double e = std::exp(-p.psi[h]);
        m += p.weight * e;
        second += p.weight * e * e;
        wsum += p.weight;
    }
    m /= wsum;
    second /= wsum;
    return {m, std::sqrt(std::max(0.0, second - m * m))};
}

// Design-weighted moments of a hyperparameter on its own scale.
HyperMoments hyper_moments(const std::vector<inla::HyperPoint>& points, int h) {
    double m = 0.0, second = 0.0, wsum = 0.0;
    for (const inla::HyperPoint& p : points) {
        m += p.weight * p.psi[h];
        second += p.weight * p.psi[h] * p.psi[h];
        wsum += p.weight;
    }
    m /= wsum;
    second /= wsum;
    return {m, std::sqrt(std::max(0.0, second - m * m))};
}

std::string hyper_string(const reduce::ReductionModel& m) {
    char buf[96];
    switch (m.method) {
        case reduce::Method::kLasso:
            std::snprintf(buf, sizeof buf, "lambda=%.6g", m.lambda);
            break;
        case reduce::Method::kSpls:
            std::snprintf(buf, sizeof buf, "eta=%.6g;components=%d", m.eta, m.components);
            break;
        case reduce::Method::kSir:
            std::snprintf(buf, sizeof buf, "slices=%d;components=%d", m.slices, m.components);
            break;
        case reduce::Method::kPcr:
            std::snprintf(buf, sizeof buf, "components=%d%s", m.components,
                          m.threshold_reached ? "" : ";threshold_missed");
            break;
        case reduce::Method::kSpcr:
            std::snprintf(buf, sizeof buf, "threshold=%.6g;components=%d%s", m.screen_threshold,
                          m.components, m.threshold_reached ? "" : ";threshold_missed");
            break;
    }
    return buf;
}

scoring::Reconstruction chain_reconstruction(const gibbs::Chain& chain, int threads) {
    const int n_years = chain.temperature_years();
    const int kept = chain.kept();
    scoring::Reconstruction recon;
    recon.start_year = chain.start_year;
    recon.mean.resize(static_cast<std::size_t>(n_years));
    recon.sd.resize(static_cast<std::size_t>(n_years));
    recon.q025.resize(static_cast<std::size_t>(n_years));
    recon.q975.resize(static_cast<std::size_t>(n_years));
    recon.q10.resize(static_cast<std::size_t>(n_years));
    recon.q90.resize(static_cast<std::size_t>(n_years));
    parallel_for(static_cast<std::size_t>(n_years), threads, [&](std::size_t i, int) {
        std::vector<double> column(chain.temperature.col(static_cast<Eigen::Index>(i)).data(),
                                   chain.temperature.col(static_cast<Eigen::Index>(i)).data() +
                                       kept);
        std::sort(column.begin(), column.end());
        recon.mean[i] = stats::mean(column);
        recon.sd[i] = stats::sd(column);
        recon.q025[i] = sorted_quantile(column, 0.025);
        recon.q10[i] = sorted_quantile(column, 0.10);
        recon.q90[i] = sorted_quantile(column, 0.90);
        recon.q975[i] = sorted_quantile(column, 0.975);
    });
    return recon;
}

// --- configuration parsing -------------------------------------------------

[[noreturn]] void config_error(int line, const std::string& message) {
    throw std::runtime_error("config line " + std::to_string(line) + ": " + message);
}

int parse_int(const std::string& value, const std::string& key, int line) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        config_error(line, "value '" + value + "' for '" + key + "' is not an integer");
    }
}

double parse_double(const std::string& value, const std::string& key, int line) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        config_error(line, "value '" + value + "' for '" + key + "' is not a number");
    }
}

std::uint64_t parse_seed(const std::string& value, int line) {
    try {
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        config_error(line, "value '" + value + "' for 'seed' is not an unsigned integer");
    }
}

bool parse_bool(const std::string& value, const std::string& key, int line) {
    const std::string v = lower(value);
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    config_error(line, "value '" + value + "' for '" + key + "' is not a boolean");
}

YearInterval parse_window(const std::string& value, const std::string& key, int line) {
    const std::size_t dots = value.find("..");
    if (dots == std::string::npos)
        config_error(line, "window '" + value + "' for '" + key + "' must look like 1900..2000");
    YearInterval w;
    w.first = parse_int(trim(value.substr(0, dots)), key, line);
    w.last = parse_int(trim(value.substr(dots + 2)), key, line);
    return w;
}

void apply_key(RunConfig& c, const std::string& section, const std::string& key,
               const std::string& value, int line) {
    if (section == "paths") {
        if (key == "proxies") return void(c.proxies_path = value);
        if (key == "forcings") return void(c.forcings_path = value);
        if (key == "temperature") return void(c.temperature_path = value);
        if (key == "output") return void(c.output_dir = value);
        if (key == "plots") return void(c.plots = parse_bool(value, key, line));
    } else if (section == "model") {
        if (key == "kind") return void(c.kind = model::parse_kind(lower(value)));
        if (key == "nests") return void(c.nests = parse_int(value, key, line));
        if (key == "spline_count") return void(c.spline_count = parse_int(value, key, line));
        if (key == "methods") {
            c.methods.clear();
            for (const std::string& name : split_list(lower(value)))
                c.methods.push_back(reduce::parse_method(name));
            if (c.methods.empty()) config_error(line, "'methods' names no reduction method");
            return;
        }
    } else if (section == "windows") {
        if (key == "calibration") return void(c.calibration = parse_window(value, key, line));
        if (key == "validation") return void(c.validation = parse_window(value, key, line));
    } else if (section == "inference") {
        if (key == "engine") return void(c.engine = parse_engine(lower(value)));
        if (key == "seed") return void(c.seed = parse_seed(value, line));
        if (key == "threads") return void(c.threads = parse_int(value, key, line));
        if (key == "iterations") return void(c.gibbs_iterations = parse_int(value, key, line));
        if (key == "burn_in") return void(c.gibbs_burn_in = parse_int(value, key, line));
    } else if (section == "screening") {
        if (key == "max_missing_ratio")
            return void(c.max_missing_ratio = parse_double(value, key, line));
        if (key == "fdr_level") return void(c.fdr_level = parse_double(value, key, line));
    } else if (section == "scoring") {
        if (key == "draws") return void(c.score_draws = parse_int(value, key, line));
        if (key == "smoothed_mse") return void(c.smoothed_mse = parse_bool(value, key, line));
    } else {
        config_error(line, "unknown section [" + section + "]");
    }
    config_error(line, "unknown key '" + key + "' in section [" + section + "]");
}

void validate_config(const RunConfig& c) {
    if (c.proxies_path.empty())
        throw std::invalid_argument("the configuration names no proxies file");
    if (c.temperature_path.empty())
        throw std::invalid_argument("the configuration names no temperature file");
    if (c.output_dir.empty()) throw std::invalid_argument("the output directory is empty");
    if (c.calibration.first > c.calibration.last || c.validation.first > c.validation.last)
        throw std::invalid_argument("year windows must run first..last");
    if (c.calibration.overlaps(c.validation))
        throw std::invalid_argument(
            "the validation window overlaps the calibration window, so the scores would not be "
            "out of sample; separate the windows");
    if (c.calibration.length() < 10)
        throw std::invalid_argument("the calibration window must hold at least 10 years");
    if (c.nests != 1 && c.nests != 8)
        throw std::invalid_argument("nests must be 8, or 1 for the oldest nest only");
    if (c.methods.empty()) throw std::invalid_argument("at least one reduction method is needed");
    for (std::size_t i = 0; i < c.methods.size(); ++i)
        for (std::size_t j = i + 1; j < c.methods.size(); ++j)
            if (c.methods[i] == c.methods[j])
                throw std::invalid_argument("reduction method '" +
                                            reduce::method_name(c.methods[i]) + "' repeats");
    if (c.kind == model::ModelKind::kWithForcing && c.spline_count != 0)
        throw std::invalid_argument(
            "a with-forcing model has no spline block; leave spline_count at 0");
    if (c.spline_count != 0 && c.spline_count < 4)
        throw std::invalid_argument("spline_count must be 0 (automatic) or at least 4");
    if (c.engine == Engine::kGibbs &&
        (c.kind != model::ModelKind::kWithForcing || c.nests != 1))
        throw std::invalid_argument(
            "the gibbs engine fits the single-nest with-forcing model; use nested_laplace for "
            "other configurations");
    if (c.gibbs_iterations <= 0 || c.gibbs_burn_in < 0 || c.gibbs_burn_in >= c.gibbs_iterations)
        throw std::invalid_argument("gibbs iterations must exceed the burn-in");
    if (c.threads < 0) throw std::invalid_argument("threads must be 0 (all cores) or positive");
    if (!(c.max_missing_ratio >= 0.0 && c.max_missing_ratio <= 1.0))
        throw std::invalid_argument("max_missing_ratio must lie in [0, 1]");
    if (!(c.fdr_level > 0.0 && c.fdr_level < 1.0))
        throw std::invalid_argument("fdr_level must lie in (0, 1)");
    if (c.score_draws < 2) throw std::invalid_argument("score_draws must be at least 2");
}

json config_json(const RunConfig& c) {
    json j;
    j["paths"] = {{"proxies", c.proxies_path},
                  {"forcings", c.forcings_path},
                  {"temperature", c.temperature_path},
                  {"output", c.output_dir},
                  {"plots", c.plots}};
    json methods = json::array();
    for (reduce::Method m : c.methods) methods.push_back(reduce::method_name(m));
    j["model"] = {{"kind", model::kind_name(c.kind)},
                  {"nests", c.nests},
                  {"methods", methods},
                  {"spline_count", c.spline_count}};
    j["windows"] = {{"calibration", {c.calibration.first, c.calibration.last}},
                    {"validation", {c.validation.first, c.validation.last}}};
    j["inference"] = {{"engine", engine_name(c.engine)},
                      {"seed", c.seed},
                      {"threads", c.threads},
                      {"iterations", c.gibbs_iterations},
                      {"burn_in", c.gibbs_burn_in}};
    j["screening"] = {{"max_missing_ratio", c.max_missing_ratio}, {"fdr_level", c.fdr_level}};
    j["scoring"] = {{"draws", c.score_draws}, {"smoothed_mse", c.smoothed_mse}};
    return j;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    const json& paths = j.at("paths");
    c.proxies_path = paths.at("proxies").get<std::string>();
    c.forcings_path = paths.at("forcings").get<std::string>();
    c.temperature_path = paths.at("temperature").get<std::string>();
    c.output_dir = paths.at("output").get<std::string>();
    c.plots = paths.at("plots").get<bool>();
    const json& mj = j.at("model");
    c.kind = model::parse_kind(mj.at("kind").get<std::string>());
    c.nests = mj.at("nests").get<int>();
    c.spline_count = mj.at("spline_count").get<int>();
    c.methods.clear();
    for (const json& name : mj.at("methods"))
        c.methods.push_back(reduce::parse_method(name.get<std::string>()));
    const json& wj = j.at("windows");
    c.calibration = {wj.at("calibration").at(0).get<int>(), wj.at("calibration").at(1).get<int>()};
    c.validation = {wj.at("validation").at(0).get<int>(), wj.at("validation").at(1).get<int>()};
    const json& ij = j.at("inference");
    c.engine = parse_engine(ij.at("engine").get<std::string>());
    c.seed = ij.at("seed").get<std::uint64_t>();
    c.threads = ij.at("threads").get<int>();
    c.gibbs_iterations = ij.at("iterations").get<int>();
    c.gibbs_burn_in = ij.at("burn_in").get<int>();
    const json& sj = j.at("screening");
    c.max_missing_ratio = sj.at("max_missing_ratio").get<double>();
    c.fdr_level = sj.at("fdr_level").get<double>();
    const json& cj = j.at("scoring");
    c.score_draws = cj.at("draws").get<int>();
    c.smoothed_mse = cj.at("smoothed_mse").get<bool>();
    return c;
}

std::string write_manifest(const RunConfig& config, const std::string& command,
                           const std::vector<StageTiming>& timings,
                           const std::vector<std::string>& outputs,
                           const std::vector<std::string>& warnings) {
    json j;
    j["tool"] = "paleorec";
    j["version"] = kVersion;
    j["command"] = command;
    j["config"] = config_json(config);
    j["environment"] = {{"compiler", __VERSION__},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                      std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                      std::to_string(EIGEN_MINOR_VERSION)}};
    json stages = json::array();
    for (const StageTiming& t : timings)
        stages.push_back({{"name", t.name}, {"seconds", t.seconds}});
    j["stages"] = stages;
    json outs = json::array();
    for (const std::string& path : outputs) outs.push_back(fs::path(path).filename().string());
    j["outputs"] = outs;
    j["warnings"] = warnings;

    const std::string path = (fs::path(config.output_dir) / "manifest.json").string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << '\n';
    return path;
}

// --- stage bodies -----------------------------------------------------------

struct Shared {
    std::vector<TimeSeries> proxies;
    std::optional<ForcingSet> forcings;
    std::optional<TimeSeries> temperature;         // full record
    std::optional<TimeSeries> calibration_series;  // restricted to the window
};

Shared load_stage(const RunConfig& config) {
    Shared data;
    data.proxies = csv::read_proxies(config.proxies_path);
    if (data.proxies.empty())
        throw std::runtime_error("no proxies found in " + config.proxies_path);
    if (!config.forcings_path.empty()) {
        const csv::RawForcings raw = csv::read_forcings(config.forcings_path);
        data.forcings = transform_forcings(raw.solar, raw.volcanic, raw.co2, config.calibration);
    } else if (config.kind != model::ModelKind::kNoForcing) {
        throw std::runtime_error("a with-forcing or mixed model needs a forcings file");
    }
    data.temperature = csv::read_temperature(config.temperature_path);
    data.calibration_series = window_series(*data.temperature, config.calibration);
    if (data.calibration_series->count_valid() < 10)
        throw std::runtime_error("the temperature record covers fewer than 10 calibration years");
    return data;
}

std::vector<ProxyNest> screen_and_nest(const RunConfig& config, const Shared& data,
                                       std::vector<std::string>& warnings) {
    std::vector<TimeSeries> kept;
    int dropped = 0;
    for (const TimeSeries& p : data.proxies) {
        if (screen_missing(p, config.calibration, config.max_missing_ratio))
            kept.push_back(p);
        else
            ++dropped;
    }
    if (dropped > 0)
        warnings.push_back(std::to_string(dropped) +
                           (dropped == 1 ? " proxy dropped by the missing-data screen"
                                         : " proxies dropped by the missing-data screen"));
    if (kept.empty()) throw std::runtime_error("no proxies survive the missing-data screen");

    const CorrelationScreenResult screen =
        screen_correlation(kept, *data.calibration_series, config.calibration, config.fdr_level);
    warnings.insert(warnings.end(), screen.warnings.begin(), screen.warnings.end());
    if (screen.kept.empty()) throw std::runtime_error("no proxies survive the correlation screen");
    std::vector<TimeSeries> survivors;
    survivors.reserve(screen.kept.size());
    for (std::size_t i : screen.kept) survivors.push_back(kept[i]);

    std::vector<ProxyNest> nests;
    for (ProxyNest& nest : assign_nests(survivors, config.calibration)) {
        if (config.nests == 1 && nest.index != 1) continue;
        if (nest.members.empty()) {
            if (config.nests == 1)
                throw std::runtime_error(
                    "nest 1 is empty after screening; a single-nest run needs proxies that span "
                    "the whole interval");
            warnings.push_back("nest " + std::to_string(nest.index) + " is empty after screening");
            continue;
        }
        nests.push_back(std::move(nest));
    }
    if (nests.empty()) throw std::runtime_error("every nest is empty after screening");
    return nests;
}

std::vector<reduce::ReducedProxy> reduce_one_method(const RunConfig& config,
                                                    const std::vector<ProxyNest>& nests,
                                                    const TimeSeries& target,
                                                    reduce::Method method, int threads) {
    const std::size_t pos = method_position(method);
    std::vector<std::optional<reduce::ReducedProxy>> slots(nests.size());
    parallel_for(nests.size(), threads, [&](std::size_t i, int) {
        const ProxyNest& nest = nests[i];
        const std::uint64_t seed = reduction_seed(config.seed, nest.index, pos);
        const reduce::ReductionModel fitted =
            reduce::fit_nest_reduction(nest, target, config.calibration, method, seed);
        slots[i] = reduce::build_reduced_proxy(nest, fitted, target, config.calibration);
    });
    std::vector<reduce::ReducedProxy> rps;
    rps.reserve(slots.size());
    for (std::optional<reduce::ReducedProxy>& slot : slots) rps.push_back(std::move(*slot));
    return rps;
}

// Data-driven starting point for the hyper mode search: the process noise
// from an ordinary regression of the calibration record on the process
// design, each nest's noise from its reduction's calibration fit.
Eigen::VectorXd warm_psi(const model::LatentGaussianModel& lgm,
                         const std::vector<reduce::ReducedProxy>& rps,
                         const ForcingSet* forcings, const splines::SplineBasis* basis,
                         const TimeSeries& calibration_series) {
    Eigen::VectorXd psi = Eigen::VectorXd::Zero(lgm.hyper_count());
    const std::vector<std::string>& hypers = lgm.hyper_names();
    const auto hyper_index = [&](const std::string& name) {
        for (std::size_t h = 0; h < hypers.size(); ++h)
            if (hypers[h] == name) return static_cast<int>(h);
        return -1;
    };

    std::vector<int> years;
    for (int y = calibration_series.start_year(); y <= calibration_series.end_year(); ++y)
        if (calibration_series.has_value(y)) years.push_back(y);
    const int n = static_cast<int>(years.size());

    std::vector<std::vector<double>> columns;
    columns.emplace_back(static_cast<std::size_t>(n), 1.0);
    if (forcings != nullptr) {
        for (const TimeSeries* f :
             {&forcings->solar, &forcings->volcanic_transformed, &forcings->co2_transformed}) {
            std::vector<double> col(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = f->at_year(years[i]);
            columns.push_back(std::move(col));
        }
    }
    if (basis != nullptr) {
        const int grid_first = static_cast<int>(basis->grid.front());
        for (Eigen::Index k = 0; k < basis->matrix.cols(); ++k) {
            std::vector<double> col(static_cast<std::size_t>(n));
            double norm2 = 0.0;
            for (int i = 0; i < n; ++i) {
                col[static_cast<std::size_t>(i)] = basis->matrix(years[i] - grid_first, k);
                norm2 += col[static_cast<std::size_t>(i)] * col[static_cast<std::size_t>(i)];
            }
            // Only basis functions with support on the window inform the fit.
            if (norm2 > 1e-8) columns.push_back(std::move(col));
        }
    }

    double v = 1.0;
    Eigen::VectorXd beta;
    if (n > static_cast<int>(columns.size())) {
        Eigen::MatrixXd X(n, static_cast<Eigen::Index>(columns.size()));
        Eigen::VectorXd y(n);
        for (int i = 0; i < n; ++i) {
            y[i] = calibration_series.at_year(years[static_cast<std::size_t>(i)]);
            for (std::size_t c = 0; c < columns.size(); ++c)
                X(i, static_cast<Eigen::Index>(c)) = columns[c][static_cast<std::size_t>(i)];
        }
        beta = X.colPivHouseholderQr().solve(y);
        const Eigen::VectorXd resid = y - X * beta;
        v = resid.squaredNorm() / n;
    }
    v = std::clamp(v, 1e-6, 1e2);
    if (const int h = hyper_index("rho_process"); h >= 0) psi[h] = -std::log(v);

    // The calibration overlap alone gives a noisy slope estimate, so when the
    // design is pure forcings the regression extends across the whole proxy
    // window against the design-predicted record, falling back to the observed
    // record where it exists.
    const bool extend = forcings != nullptr && basis == nullptr && beta.size() == 4;
    const auto record_at = [&](int y) -> std::optional<double> {
        if (calibration_series.has_value(y)) return calibration_series.at_year(y);
        if (!extend || !forcings->solar.has_value(y) ||
            !forcings->volcanic_transformed.has_value(y) ||
            !forcings->co2_transformed.has_value(y))
            return std::nullopt;
        return beta[0] + beta[1] * forcings->solar.at_year(y) +
               beta[2] * forcings->volcanic_transformed.at_year(y) +
               beta[3] * forcings->co2_transformed.at_year(y);
    };

    for (const reduce::ReducedProxy& rp : rps) {
        const int h = hyper_index("rho_nest" + std::to_string(rp.nest_index));
        if (h >= 0) {
            const double noise = std::clamp(1.0 - rp.calibration_fit.r2, 0.05, 1.0);
            psi[h] = -std::log(noise);
        }
        const int hs = hyper_index("alpha1_nest" + std::to_string(rp.nest_index));
        if (hs < 0) continue;
        double st = 0.0, srp = 0.0, stt = 0.0, strp = 0.0;
        int k = 0;
        for (int y = rp.series.start_year(); y <= rp.series.end_year(); ++y) {
            if (!rp.series.has_value(y)) continue;
            const std::optional<double> rec = record_at(y);
            if (!rec) continue;
            const double t = *rec;
            const double r = rp.series.at_year(y);
            st += t;
            srp += r;
            stt += t * t;
            strp += t * r;
            ++k;
        }
        const double var_t = stt - st * st / k;
        if (k >= 3 && var_t > 0.0) psi[hs] = (strp - st * srp / k) / var_t;
    }
    return psi;
}

void fit_method(const RunConfig& config, const Shared& data, MethodResult& mr, int threads) {
    const ForcingSet* forcings = data.forcings ? &*data.forcings : nullptr;
    std::optional<splines::SplineBasis> basis;
    if (config.kind != model::ModelKind::kWithForcing) {
        YearInterval full{mr.rps.front().series.start_year(), config.calibration.last};
        for (const reduce::ReducedProxy& rp : mr.rps)
            full.first = std::min(full.first, rp.series.start_year());
        int k = config.spline_count;
        if (k == 0) k = std::max(4, splines::select_k(*data.calibration_series, full).k_full);
        basis = splines::bspline_basis(full, k);
        mr.spline_count = k;
    }
    mr.model = model::assemble(config.kind, mr.rps, forcings, basis ? &*basis : nullptr,
                               *data.calibration_series, config.calibration);

    if (config.engine == Engine::kGibbs) {
        mr.chain = gibbs::gibbs_wf(
            mr.rps.front(), *data.forcings, *data.calibration_series, config.gibbs_iterations,
            config.gibbs_burn_in,
            rng::substream_seed(config.seed, 3000 + method_position(mr.method)));
    } else {
        inla::ExploreConfig ec;
        ec.threads = threads;
        ec.initial_psi =
            warm_psi(*mr.model, mr.rps, forcings, basis ? &*basis : nullptr,
                     *data.calibration_series);
        mr.points = inla::explore_hyper(*mr.model, ec);
    }
}

std::optional<TimeSeries> smoothed_reference_series(const TimeSeries& observed,
                                                    const YearInterval& calibration,
                                                    std::vector<std::string>& warnings) {
    try {
        const int first = observed.first_valid_year();
        const int last_obs = observed.last_valid_year();
        const int last = std::min(last_obs, calibration.first - 1);
        if (last - first + 1 < 30) {
            warnings.push_back(
                "smoothed comparison skipped: fewer than 30 pre-calibration years observed");
            return std::nullopt;
        }
        std::vector<double> filled = infill_window(observed, {first, last_obs});
        const TimeSeries smooth =
            scoring::butterworth_lowpass(TimeSeries(first, std::move(filled), observed.name()));
        return window_series(smooth, {first, last});
    } catch (const std::exception& e) {
        warnings.push_back(std::string("smoothed comparison skipped: ") + e.what());
        return std::nullopt;
    }
}

scoring::ScoreReport score_method(const RunConfig& config, const Shared& data, MethodResult& mr,
                                  std::vector<std::string>& warnings) {
    const YearInterval w = config.validation;
    const TimeSeries& observed = *data.temperature;
    for (int y = w.first; y <= w.last; ++y)
        if (!observed.has_value(y))
            throw std::runtime_error("the temperature record has no value for validation year " +
                                     std::to_string(y));
    const scoring::Reconstruction& recon = *mr.reconstruction;
    if (!recon.span().contains(w.first) || !recon.span().contains(w.last))
        throw std::runtime_error("the reconstruction does not cover the validation window");

    Eigen::MatrixXd draws;
    if (mr.chain) {
        const gibbs::Chain& chain = *mr.chain;
        const int c0 = w.first - chain.start_year;
        if (c0 < 0 || c0 + w.length() > chain.temperature_years())
            throw std::runtime_error(
                "the sampler's temperature block does not cover the validation window");
        draws = chain.temperature.middleCols(c0, w.length());
    } else {
        std::vector<int> params;
        params.reserve(static_cast<std::size_t>(w.length()));
        for (int y = w.first; y <= w.last; ++y) params.push_back(mr.model->latent_index(y));
        draws = inla::sample_posterior(
            *mr.model, mr.points, params, config.score_draws,
            rng::substream_seed(config.seed, 4000 + method_position(mr.method)));
    }

    std::optional<TimeSeries> reference;
    if (config.smoothed_mse)
        reference = smoothed_reference_series(observed, config.calibration, warnings);

    scoring::ScoreReport report = scoring::validation_suite(
        recon, draws, observed, w, config.calibration, reference ? &*reference : nullptr);
    report.model = model::kind_name(config.kind);
    report.nest_count = config.nests;
    report.method = reduce::method_name(mr.method);
    return report;
}

// --- artifact writers -------------------------------------------------------

std::string out_file(const RunConfig& config, const std::string& name) {
    return (fs::path(config.output_dir) / name).string();
}

void note_output(RunResult& result, std::string path) {
    result.outputs.push_back(std::move(path));
}

void write_rp_csv(const std::string& path, const std::vector<reduce::ReducedProxy>& rps) {
    std::vector<std::vector<std::string>> rows;
    for (const reduce::ReducedProxy& rp : rps) {
        for (int y = rp.series.start_year(); y <= rp.series.end_year(); ++y) {
            rows.push_back({csv::cell(rp.nest_index), reduce::method_name(rp.method), csv::cell(y),
                            rp.series.has_value(y) ? csv::cell(rp.series.at_year(y)) : ""});
        }
    }
    csv::write_table(path, {"nest", "method", "year", "value"}, rows);
}

void write_rp_summary(const std::string& path, const std::vector<MethodResult>& methods) {
    std::vector<std::vector<std::string>> rows;
    for (const MethodResult& mr : methods) {
        for (const reduce::ReducedProxy& rp : mr.rps) {
            rows.push_back({csv::cell(rp.nest_index), reduce::method_name(rp.method),
                            hyper_string(rp.model), csv::cell(rp.calibration_fit.r2),
                            csv::cell(rp.calibration_fit.adjusted_r2)});
        }
    }
    csv::write_table(path, {"nest", "method", "hyperparameters", "r2", "adjusted_r2"}, rows);
}

void write_laplace_tables(const RunConfig& config, RunResult& result, const MethodResult& mr) {
    const model::LatentGaussianModel& lgm = *mr.model;
    const std::string token = reduce::method_name(mr.method);

    std::vector<std::vector<std::string>> coef_rows;
    std::vector<std::vector<std::string>> marginal_rows;
    for (int j = lgm.latent_count(); j < lgm.parameter_count(); ++j) {
        const inla::PosteriorMarginal pm = inla::marginal(mr.points, j);
        const std::string& name = lgm.parameter_names()[static_cast<std::size_t>(j)];
        coef_rows.push_back({name, csv::cell(pm.mean()), csv::cell(pm.sd()),
                             csv::cell(pm.quantile(0.025)), csv::cell(pm.quantile(0.975))});
        const inla::DensityCurve curve = marginal_curve(pm);
        for (std::size_t i = 0; i < curve.value.size(); ++i)
            marginal_rows.push_back({name, csv::cell(curve.value[i]), csv::cell(curve.density[i])});
    }
    const bool smooth_hypers = lgm.hyper_count() <= 2;
    for (int h = 0; h < lgm.hyper_count(); ++h) {
        const std::string hyper_name = lgm.hyper_names()[static_cast<std::size_t>(h)];
        const bool is_precision = lgm.hyper_kind(h) == model::HyperKind::kLogPrecision;
        const std::string row_name =
            is_precision ? "sigma2_" + hyper_name.substr(4) : hyper_name;
        const HyperMoments mom =
            is_precision ? sigma2_moments(mr.points, h) : hyper_moments(mr.points, h);
        std::string q025cell, q975cell;
        if (smooth_hypers) {
            const inla::DensityCurve curve = inla::hyper_marginal(mr.points, h);
            if (is_precision) {
                q025cell = csv::cell(std::exp(-curve_quantile(curve, 0.975)));
                q975cell = csv::cell(std::exp(-curve_quantile(curve, 0.025)));
            } else {
                q025cell = csv::cell(curve_quantile(curve, 0.025));
                q975cell = csv::cell(curve_quantile(curve, 0.975));
            }
            for (std::size_t i = 0; i < curve.value.size(); ++i)
                marginal_rows.push_back(
                    {hyper_name, csv::cell(curve.value[i]), csv::cell(curve.density[i])});
        }
        coef_rows.push_back(
            {row_name, csv::cell(mom.mean), csv::cell(mom.sd), q025cell, q975cell});
    }

    const std::string coef_path = out_file(config, "coefficients_" + token + ".csv");
    csv::write_table(coef_path, {"parameter", "mean", "sd", "q025", "q975"}, coef_rows);
    note_output(result, coef_path);
    const std::string marginal_path = out_file(config, "marginals_" + token + ".csv");
    csv::write_table(marginal_path, {"parameter", "grid_value", "density"}, marginal_rows);
    note_output(result, marginal_path);
}

void write_gibbs_tables(const RunConfig& config, RunResult& result, const MethodResult& mr) {
    const gibbs::Chain& chain = *mr.chain;
    const std::string token = reduce::method_name(mr.method);

    std::vector<std::vector<std::string>> coef_rows;
    for (const gibbs::ParameterSummary& s : gibbs::chain_summary(chain))
        coef_rows.push_back({s.name, csv::cell(s.mean), csv::cell(s.sd), csv::cell(s.q025),
                             csv::cell(s.q975)});
    const std::string coef_path = out_file(config, "coefficients_" + token + ".csv");
    csv::write_table(coef_path, {"parameter", "mean", "sd", "q025", "q975"}, coef_rows);
    note_output(result, coef_path);

    std::vector<std::vector<std::string>> chain_rows;
    for (int i = 0; i < chain.kept(); ++i) {
        const int iteration = chain.burn_in + i + 1;
        for (std::size_t c = 0; c < chain.coefficient_names.size(); ++c)
            chain_rows.push_back({csv::cell(iteration), chain.coefficient_names[c],
                                  csv::cell(chain.coefficients(i, static_cast<Eigen::Index>(c)))});
        for (std::size_t v = 0; v < chain.variance_names.size(); ++v)
            chain_rows.push_back({csv::cell(iteration), chain.variance_names[v],
                                  csv::cell(chain.variances(i, static_cast<Eigen::Index>(v)))});
    }
    const std::string chain_path = out_file(config, "chain_" + token + ".csv");
    csv::write_table(chain_path, {"iteration", "parameter", "value"}, chain_rows);
    note_output(result, chain_path);
}

constexpr std::array<const char*, 6> kPalette = {"#1f6feb", "#cf222e", "#8250df",
                                                 "#116329", "#9a6700", "#bc4c00"};

struct CurveSpec {
    std::string label;
    inla::DensityCurve curve;
    std::string color;
    std::string dash;
};

void plot_density_curves(const std::string& path, const std::string& title,
                         const std::vector<CurveSpec>& curves) {
    svgplot::Figure fig;
    fig.title = title;
    fig.x_label = "value";
    fig.y_label = "density";
    for (const CurveSpec& spec : curves) {
        svgplot::Series s;
        s.x = spec.curve.value;
        s.y = spec.curve.density;
        s.color = spec.color;
        s.width = 1.6;
        s.label = spec.label;
        s.dash = spec.dash;
        fig.series.push_back(std::move(s));
    }
    fig.save(path);
}

// Density plot of the headline coefficients: the forcing block when there is
// one, otherwise the first few spline coefficients.
void plot_fit_densities(const RunConfig& config, RunResult& result, const MethodResult& mr) {
    const std::string token = reduce::method_name(mr.method);
    const std::string prefix = config.kind == model::ModelKind::kNoForcing ? "gamma_" : "beta";
    std::vector<CurveSpec> curves;

    if (mr.chain) {
        const gibbs::Chain& chain = *mr.chain;
        for (std::size_t c = 0; c < chain.coefficient_names.size() && curves.size() < 6; ++c) {
            const std::string& name = chain.coefficient_names[c];
            if (name.rfind(prefix, 0) != 0) continue;
            std::vector<double> draws(chain.coefficients.col(static_cast<Eigen::Index>(c)).data(),
                                      chain.coefficients.col(static_cast<Eigen::Index>(c)).data() +
                                          chain.kept());
            curves.push_back(
                {name, kde_curve(std::move(draws)), kPalette[curves.size() % kPalette.size()], ""});
        }
    } else {
        const model::LatentGaussianModel& lgm = *mr.model;
        for (int j = lgm.latent_count(); j < lgm.parameter_count() && curves.size() < 6; ++j) {
            const std::string& name = lgm.parameter_names()[static_cast<std::size_t>(j)];
            if (name.rfind(prefix, 0) != 0) continue;
            curves.push_back({name, marginal_curve(inla::marginal(mr.points, j)),
                              kPalette[curves.size() % kPalette.size()], ""});
        }
    }
    if (curves.empty()) return;
    const std::string path = out_file(config, "posterior_" + token + ".svg");
    plot_density_curves(path, "Coefficient posteriors (" + token + ")", curves);
    note_output(result, path);
}

void write_reconstruction_csv(const std::string& path, const scoring::Reconstruction& r) {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < r.mean.size(); ++i) {
        rows.push_back({csv::cell(r.start_year + static_cast<int>(i)), csv::cell(r.mean[i]),
                        csv::cell(r.sd[i]), csv::cell(r.q025[i]), csv::cell(r.q10[i]),
                        csv::cell(r.q90[i]), csv::cell(r.q975[i])});
    }
    csv::write_table(path, {"year", "mean", "sd", "q025", "q10", "q90", "q975"}, rows);
}

void plot_reconstruction(const std::string& path, const std::string& title,
                         const scoring::Reconstruction& recon, const TimeSeries& observed) {
    const std::size_t n = recon.mean.size();
    std::vector<double> years(n);
    for (std::size_t i = 0; i < n; ++i) years[i] = recon.start_year + static_cast<int>(i);

    svgplot::Figure fig;
    fig.title = title;
    fig.x_label = "year";
    fig.y_label = "temperature anomaly";
    fig.bands.push_back({years, recon.q025, recon.q975, "#1f6feb", 0.16, "95% interval"});
    fig.bands.push_back({years, recon.q10, recon.q90, "#1f6feb", 0.30, "80% interval"});
    fig.series.push_back({years, recon.mean, "#0b3d91", 1.6, "posterior mean", ""});

    std::vector<double> obs(n);
    for (std::size_t i = 0; i < n; ++i)
        obs[i] = observed.at_year(recon.start_year + static_cast<int>(i));
    fig.series.push_back({years, std::move(obs), "#cf222e", 1.0, "instrumental record", "4,3"});
    fig.save(path);
}

void write_scores_csv(const std::string& path, const std::vector<MethodResult>& methods) {
    std::vector<std::vector<std::string>> rows;
    for (const MethodResult& mr : methods) {
        const scoring::ScoreReport& s = *mr.scores;
        rows.push_back({s.model, csv::cell(s.nest_count), s.method, s.window, csv::cell(s.is80),
                        csv::cell(s.is95), csv::cell(s.crps), csv::cell(s.mse),
                        s.mse_smoothed ? csv::cell(*s.mse_smoothed) : ""});
    }
    csv::write_table(
        path, {"model", "nests", "method", "window", "is80", "is95", "crps", "mse", "mse_smoothed"},
        rows);
}

}  // namespace

std::string engine_name(Engine engine) {
    switch (engine) {
        case Engine::kNestedLaplace: return "nested_laplace";
        case Engine::kGibbs: return "gibbs";
    }
    throw std::invalid_argument("engine_name: unknown engine");
}

Engine parse_engine(const std::string& name) {
    if (name == "nested_laplace") return Engine::kNestedLaplace;
    if (name == "gibbs") return Engine::kGibbs;
    throw std::invalid_argument("unknown engine '" + name +
                                "' (expected nested_laplace or gibbs)");
}

std::string stage_name(Stage stage) {
    switch (stage) {
        case Stage::kLoad: return "load";
        case Stage::kReduce: return "reduce";
        case Stage::kFit: return "fit";
        case Stage::kReconstruct: return "reconstruct";
        case Stage::kValidate: return "validate";
    }
    throw std::invalid_argument("stage_name: unknown stage");
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file " + path);
    RunConfig config;
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t comment = line.find_first_of("#;");
        if (comment != std::string::npos) line.erase(comment);
        const std::string s = trim(line);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') config_error(line_no, "unterminated section header");
            section = lower(trim(s.substr(1, s.size() - 2)));
            continue;
        }
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos) config_error(line_no, "expected key = value");
        if (section.empty()) config_error(line_no, "key before any [section]");
        const std::string key = lower(trim(s.substr(0, eq)));
        const std::string value = trim(s.substr(eq + 1));
        try {
            apply_key(config, section, key, value, line_no);
        } catch (const std::invalid_argument& e) {
            config_error(line_no, e.what());
        }
    }
    return config;
}

void apply_env_overrides(RunConfig& config) {
    const auto over = [](const char* name, std::string& field) {
        if (const char* v = std::getenv(name); v != nullptr && *v != '\0') field = v;
    };
    over("PALEOREC_PROXIES", config.proxies_path);
    over("PALEOREC_FORCINGS", config.forcings_path);
    over("PALEOREC_TEMPERATURE", config.temperature_path);
    over("PALEOREC_OUTPUT_DIR", config.output_dir);
    if (const char* v = std::getenv("PALEOREC_THREADS"); v != nullptr && *v != '\0') {
        try {
            std::size_t used = 0;
            const int threads = std::stoi(v, &used);
            if (used != std::string(v).size() || threads < 1) throw std::invalid_argument(v);
            config.threads = threads;
        } catch (const std::exception&) {
            throw std::runtime_error("PALEOREC_THREADS must be a positive integer");
        }
    }
}

RunConfig manifest_config(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot read manifest " + manifest_path);
    json j;
    try {
        in >> j;
        return config_from_json(j.at("config"));
    } catch (const json::exception& e) {
        throw std::runtime_error("manifest " + manifest_path + " is malformed: " + e.what());
    }
}

RunResult run_pipeline(const RunConfig& raw, Stage through) {
    RunConfig config = raw;
    validate_config(config);
    const int threads = resolve_threads(config.threads);
    fs::create_directories(config.output_dir);

    RunResult result;
    result.config = config;
    result.through = through;

    const Shared data =
        run_stage(result.timings, "load", [&] { return load_stage(config); });

    if (through >= Stage::kReduce) {
        const std::vector<ProxyNest> nests = run_stage(result.timings, "screen", [&] {
            return screen_and_nest(config, data, result.warnings);
        });
        run_stage(result.timings, "reduce", [&] {
            for (reduce::Method method : config.methods) {
                MethodResult mr;
                mr.method = method;
                mr.rps = reduce_one_method(config, nests, *data.calibration_series, method,
                                           threads);
                const std::string rp_path =
                    out_file(config, "rp_" + reduce::method_name(method) + ".csv");
                write_rp_csv(rp_path, mr.rps);
                note_output(result, rp_path);
                result.methods.push_back(std::move(mr));
            }
            const std::string summary_path = out_file(config, "rp_summary.csv");
            write_rp_summary(summary_path, result.methods);
            note_output(result, summary_path);
        });
    }

    if (through >= Stage::kFit) {
        for (MethodResult& mr : result.methods) {
            const std::string token = reduce::method_name(mr.method);
            run_stage(result.timings, "fit:" + token, [&] {
                fit_method(config, data, mr, threads);
                if (mr.chain)
                    write_gibbs_tables(config, result, mr);
                else
                    write_laplace_tables(config, result, mr);
                if (config.plots) plot_fit_densities(config, result, mr);
            });
        }
    }

    if (through >= Stage::kReconstruct) {
        for (MethodResult& mr : result.methods) {
            const std::string token = reduce::method_name(mr.method);
            run_stage(result.timings, "reconstruct:" + token, [&] {
                mr.reconstruction = mr.chain ? chain_reconstruction(*mr.chain, threads)
                                             : inla::reconstruct(*mr.model, mr.points, threads);
                const std::string csv_path =
                    out_file(config, "reconstruction_" + token + ".csv");
                write_reconstruction_csv(csv_path, *mr.reconstruction);
                note_output(result, csv_path);
                if (config.plots) {
                    const std::string svg_path =
                        out_file(config, "reconstruction_" + token + ".svg");
                    plot_reconstruction(svg_path,
                                        "Reconstruction (" + token + ", " +
                                            model::kind_name(config.kind) + ", " +
                                            std::to_string(config.nests) + " nests)",
                                        *mr.reconstruction, *data.temperature);
                    note_output(result, svg_path);
                }
            });
        }
    }

    if (through >= Stage::kValidate) {
        for (MethodResult& mr : result.methods) {
            run_stage(result.timings, "validate:" + reduce::method_name(mr.method), [&] {
                mr.scores = score_method(config, data, mr, result.warnings);
            });
        }
        const std::string scores_path = out_file(config, "scores.csv");
        write_scores_csv(scores_path, result.methods);
        note_output(result, scores_path);
    }

    result.manifest_path =
        write_manifest(config, stage_name(through), result.timings, result.outputs,
                       result.warnings);
    return result;
}

EngineComparison compare_engines(const RunConfig& raw) {
    RunConfig config = raw;
    validate_config(config);
    if (config.kind != model::ModelKind::kWithForcing || config.nests != 1)
        throw std::invalid_argument(
            "engine comparison needs the single-nest with-forcing model (kind = wf, nests = 1)");
    if (config.methods.size() != 1)
        throw std::invalid_argument("engine comparison runs one reduction method at a time");
    const int threads = resolve_threads(config.threads);
    fs::create_directories(config.output_dir);

    std::vector<StageTiming> timings;
    std::vector<std::string> warnings;
    EngineComparison cmp;

    const Shared data = run_stage(timings, "load", [&] { return load_stage(config); });
    const std::vector<ProxyNest> nests =
        run_stage(timings, "screen", [&] { return screen_and_nest(config, data, warnings); });
    const reduce::Method method = config.methods.front();
    const std::vector<reduce::ReducedProxy> rps = run_stage(timings, "reduce", [&] {
        return reduce_one_method(config, nests, *data.calibration_series, method, threads);
    });

    // Nested-Laplace fit, timed end to end: model assembly, hyper
    // exploration, and the point/interval summaries of every coefficient.
    std::optional<model::LatentGaussianModel> lgm;
    std::vector<inla::HyperPoint> points;
    std::vector<EngineComparison::Row> laplace_rows;
    run_stage(timings, "fit:nested_laplace", [&] {
        const StageClock clock;
        lgm = model::assemble(config.kind, rps, &*data.forcings, nullptr,
                              *data.calibration_series, config.calibration);
        inla::ExploreConfig ec;
        ec.threads = threads;
        ec.initial_psi = warm_psi(*lgm, rps, &*data.forcings, nullptr, *data.calibration_series);
        points = inla::explore_hyper(*lgm, ec);
        for (int j = lgm->latent_count(); j < lgm->parameter_count(); ++j) {
            const inla::PosteriorMarginal pm = inla::marginal(points, j);
            EngineComparison::Row row;
            row.parameter = lgm->parameter_names()[static_cast<std::size_t>(j)];
            row.laplace_mean = pm.mean();
            row.laplace_sd = pm.sd();
            row.laplace_q025 = pm.quantile(0.025);
            row.laplace_q975 = pm.quantile(0.975);
            laplace_rows.push_back(std::move(row));
        }
        // The proxy slopes live in the hyper vector, while the sampler
        // reports them alongside the coefficients; summarise them from the
        // design weights so the name-matched join below finds every row.
        for (int h = 0; h < lgm->hyper_count(); ++h) {
            if (lgm->hyper_kind(h) != model::HyperKind::kSlope) continue;
            const HyperMoments mom = hyper_moments(points, h);
            EngineComparison::Row row;
            row.parameter = lgm->hyper_names()[static_cast<std::size_t>(h)];
            row.laplace_mean = mom.mean;
            row.laplace_sd = mom.sd;
            row.laplace_q025 = mom.mean + stats::normal_quantile(0.025) * mom.sd;
            row.laplace_q975 = mom.mean + stats::normal_quantile(0.975) * mom.sd;
            laplace_rows.push_back(std::move(row));
        }
        cmp.laplace_seconds = clock.seconds();
    });

    std::optional<gibbs::Chain> chain;
    std::vector<gibbs::ParameterSummary> summaries;
    run_stage(timings, "fit:gibbs", [&] {
        const StageClock clock;
        chain = gibbs::gibbs_wf(rps.front(), *data.forcings, *data.calibration_series,
                                config.gibbs_iterations, config.gibbs_burn_in,
                                rng::substream_seed(config.seed, 3000));
        summaries = gibbs::chain_summary(*chain);
        cmp.gibbs_seconds = clock.seconds();
    });
    cmp.speedup = cmp.gibbs_seconds / cmp.laplace_seconds;

    run_stage(timings, "report", [&] {
        // Coefficients, in the sampler's order; both engines must name the
        // same Gaussian block.
        for (const std::string& name : chain->coefficient_names) {
            const auto it = std::find_if(laplace_rows.begin(), laplace_rows.end(),
                                         [&](const EngineComparison::Row& r) {
                                             return r.parameter == name;
                                         });
            if (it == laplace_rows.end())
                throw std::runtime_error("the engines disagree on the parameter set: missing " +
                                         name);
            cmp.coefficients.push_back(*it);
        }
        // Fill the sampler columns by name.
        for (EngineComparison::Row& row : cmp.coefficients) {
            const auto sit = std::find_if(summaries.begin(), summaries.end(),
                                          [&](const gibbs::ParameterSummary& s) {
                                              return s.name == row.parameter;
                                          });
            if (sit == summaries.end())
                throw std::runtime_error("the sampler reports no parameter named " +
                                         row.parameter);
            row.gibbs_mean = sit->mean;
            row.gibbs_sd = sit->sd;
            row.gibbs_q025 = sit->q025;
            row.gibbs_q975 = sit->q975;
            row.mean_gap_sds =
                sit->sd > 0.0 ? std::abs(row.laplace_mean - row.gibbs_mean) / sit->sd
                              : std::numeric_limits<double>::infinity();
            const double gibbs_width = row.gibbs_q975 - row.gibbs_q025;
            row.width_ratio = gibbs_width > 0.0
                                  ? (row.laplace_q975 - row.laplace_q025) / gibbs_width
                                  : std::numeric_limits<double>::infinity();
        }

        // Noise variances: design-weighted moments against the sampler's.
        for (int h = 0; h < lgm->hyper_count(); ++h) {
            if (lgm->hyper_kind(h) != model::HyperKind::kLogPrecision) continue;
            const std::string rho_name = lgm->hyper_names()[static_cast<std::size_t>(h)];
            EngineComparison::Row row;
            row.parameter = "sigma2_" + rho_name.substr(4);
            const HyperMoments mom = sigma2_moments(points, h);
            row.laplace_mean = mom.mean;
            row.laplace_sd = mom.sd;
            if (lgm->hyper_count() <= 2) {
                const inla::DensityCurve curve = inla::hyper_marginal(points, h);
                row.laplace_q025 = std::exp(-curve_quantile(curve, 0.975));
                row.laplace_q975 = std::exp(-curve_quantile(curve, 0.025));
            } else {
                // Composite designs carry no per-axis density curve, so the
                // interval comes from a Gaussian on the log-precision scale,
                // which keeps both endpoints positive.
                const HyperMoments rho = hyper_moments(points, h);
                const double z = stats::normal_quantile(0.975);
                row.laplace_q025 = std::exp(-(rho.mean + z * rho.sd));
                row.laplace_q975 = std::exp(-(rho.mean - z * rho.sd));
            }
            const auto sit = std::find_if(summaries.begin(), summaries.end(),
                                          [&](const gibbs::ParameterSummary& s) {
                                              return s.name == row.parameter;
                                          });
            if (sit == summaries.end())
                throw std::runtime_error("the sampler reports no parameter named " +
                                         row.parameter);
            row.gibbs_mean = sit->mean;
            row.gibbs_sd = sit->sd;
            row.gibbs_q025 = sit->q025;
            row.gibbs_q975 = sit->q975;
            row.mean_gap_sds =
                sit->sd > 0.0 ? std::abs(row.laplace_mean - row.gibbs_mean) / sit->sd
                              : std::numeric_limits<double>::infinity();
            const double gibbs_width = row.gibbs_q975 - row.gibbs_q025;
            row.width_ratio = gibbs_width > 0.0
                                  ? (row.laplace_q975 - row.laplace_q025) / gibbs_width
                                  : std::numeric_limits<double>::infinity();
            cmp.variances.push_back(std::move(row));
        }

        const auto row_cells = [](const EngineComparison::Row& r) {
            return std::vector<std::string>{
                r.parameter,           csv::cell(r.laplace_mean), csv::cell(r.laplace_sd),
                csv::cell(r.laplace_q025), csv::cell(r.laplace_q975), csv::cell(r.gibbs_mean),
                csv::cell(r.gibbs_sd), csv::cell(r.gibbs_q025),   csv::cell(r.gibbs_q975),
                csv::cell(r.mean_gap_sds), csv::cell(r.width_ratio)};
        };
        const std::vector<std::string> header = {
            "parameter",    "laplace_mean", "laplace_sd",  "laplace_q025", "laplace_q975",
            "gibbs_mean",   "gibbs_sd",     "gibbs_q025",  "gibbs_q975",   "mean_gap_sds",
            "width_ratio"};
        std::vector<std::vector<std::string>> coef_rows, var_rows;
        for (const EngineComparison::Row& r : cmp.coefficients) coef_rows.push_back(row_cells(r));
        for (const EngineComparison::Row& r : cmp.variances) var_rows.push_back(row_cells(r));
        const std::string coef_path = out_file(config, "compare_coefficients.csv");
        csv::write_table(coef_path, header, coef_rows);
        cmp.outputs.push_back(coef_path);
        const std::string var_path = out_file(config, "compare_variances.csv");
        csv::write_table(var_path, header, var_rows);
        cmp.outputs.push_back(var_path);

        const std::string timing_path = out_file(config, "compare_timing.csv");
        csv::write_table(timing_path, {"engine", "seconds", "speedup"},
                         {{engine_name(Engine::kNestedLaplace), csv::cell(cmp.laplace_seconds),
                           csv::cell(cmp.speedup)},
                          {engine_name(Engine::kGibbs), csv::cell(cmp.gibbs_seconds), ""}});
        cmp.outputs.push_back(timing_path);

        // Density table and overlay plot for the forcing coefficients.
        std::vector<std::vector<std::string>> density_rows;
        std::vector<CurveSpec> curves;
        std::size_t color = 0;
        for (std::size_t c = 0; c < chain->coefficient_names.size(); ++c) {
            const std::string& name = chain->coefficient_names[c];
            if (name.rfind("beta", 0) != 0) continue;
            const inla::PosteriorMarginal pm =
                inla::marginal(points, lgm->parameter_index(name));
            const inla::DensityCurve lc = marginal_curve(pm);
            std::vector<double> draws(chain->coefficients.col(static_cast<Eigen::Index>(c)).data(),
                                      chain->coefficients.col(static_cast<Eigen::Index>(c)).data() +
                                          chain->kept());
            const inla::DensityCurve gc = kde_curve(std::move(draws));
            for (std::size_t i = 0; i < lc.value.size(); ++i)
                density_rows.push_back({name, engine_name(Engine::kNestedLaplace),
                                        csv::cell(lc.value[i]), csv::cell(lc.density[i])});
            for (std::size_t i = 0; i < gc.value.size(); ++i)
                density_rows.push_back({name, engine_name(Engine::kGibbs), csv::cell(gc.value[i]),
                                        csv::cell(gc.density[i])});
            const std::string c1 = kPalette[color % kPalette.size()];
            curves.push_back({name + " (laplace)", lc, c1, ""});
            curves.push_back({name + " (gibbs)", gc, c1, "5,3"});
            ++color;
        }
        const std::string density_path = out_file(config, "compare_densities.csv");
        csv::write_table(density_path, {"parameter", "engine", "grid_value", "density"},
                         density_rows);
        cmp.outputs.push_back(density_path);
        if (config.plots && !curves.empty()) {
            const std::string svg_path = out_file(config, "compare_densities.svg");
            plot_density_curves(svg_path, "Engine agreement on the forcing coefficients", curves);
            cmp.outputs.push_back(svg_path);
        }
    });

    write_manifest(config, "compare_engines", timings, cmp.outputs, warnings);
    return cmp;
}

}  // namespace paleorec::pipeline
