#include <cinttypes>
#include <cstdio>
#include <exception>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "paleorec/pipeline.hpp"
#include "paleorec/pseudoproxy.hpp"

namespace {

using namespace paleorec;

struct PipelineArgs {
    std::string config_path;
    std::string manifest_path;
    std::string proxies, forcings, temperature, output;
    std::string engine, kind;
    std::vector<std::string> methods;
    std::uint64_t seed = 1;
    int nests = 8;
    int threads = 0;
    bool no_plots = false;

    CLI::Option* seed_opt = nullptr;
    CLI::Option* nests_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
};

void add_pipeline_options(CLI::App* cmd, PipelineArgs& a) {
    cmd->add_option("-c,--config", a.config_path, "INI configuration file");
    cmd->add_option("--from-manifest", a.manifest_path,
                    "replay the configuration stored in a manifest.json (ignores --config)");
    cmd->add_option("--proxies", a.proxies, "proxy CSV (year,proxy_id,value)");
    cmd->add_option("--forcings", a.forcings, "forcing CSV (year,solar,volcanic,co2)");
    cmd->add_option("--temperature", a.temperature, "instrumental CSV (year,anomaly)");
    cmd->add_option("-o,--output", a.output, "output directory");
    cmd->add_option("--engine", a.engine, "nested_laplace or gibbs");
    cmd->add_option("--kind", a.kind, "model kind: wf, nf or mixed");
    cmd->add_option("-m,--method", a.methods,
                    "reduction method (repeatable): lasso, spls, sir, pcr, spcr");
    a.seed_opt = cmd->add_option("--seed", a.seed, "run seed");
    a.nests_opt = cmd->add_option("--nests", a.nests, "8, or 1 for the oldest nest only");
    a.threads_opt = cmd->add_option("--threads", a.threads, "worker threads (0 = all cores)");
    cmd->add_flag("--no-plots", a.no_plots, "skip the SVG figures");
}

pipeline::RunConfig build_config(const PipelineArgs& a) {
    pipeline::RunConfig c;
    if (!a.manifest_path.empty())
        c = pipeline::manifest_config(a.manifest_path);
    else if (!a.config_path.empty())
        c = pipeline::load_config(a.config_path);

    if (!a.proxies.empty()) c.proxies_path = a.proxies;
    if (!a.forcings.empty()) c.forcings_path = a.forcings;
    if (!a.temperature.empty()) c.temperature_path = a.temperature;
    if (!a.output.empty()) c.output_dir = a.output;
    if (!a.engine.empty()) c.engine = pipeline::parse_engine(a.engine);
    if (!a.kind.empty()) c.kind = model::parse_kind(a.kind);
    if (!a.methods.empty()) {
        c.methods.clear();
        for (const std::string& name : a.methods) c.methods.push_back(reduce::parse_method(name));
    }
    if (a.seed_opt->count() > 0) c.seed = a.seed;
    if (a.nests_opt->count() > 0) c.nests = a.nests;
    if (a.threads_opt->count() > 0) c.threads = a.threads;
    if (a.no_plots) c.plots = false;

    pipeline::apply_env_overrides(c);
    return c;
}

void print_timings(const std::vector<pipeline::StageTiming>& timings) {
    for (const pipeline::StageTiming& t : timings)
        std::printf("  %-22s %8.2f s\n", t.name.c_str(), t.seconds);
}

int run_stages(const PipelineArgs& args, pipeline::Stage through) {
    const pipeline::RunConfig config = build_config(args);
    const pipeline::RunResult result = pipeline::run_pipeline(config, through);
    for (const std::string& w : result.warnings) std::cerr << "warning: " << w << '\n';
    print_timings(result.timings);
    if (through >= pipeline::Stage::kValidate) {
        std::printf("  %-6s %-10s %9s %9s %9s %9s %12s\n", "method", "window", "is80", "is95",
                    "crps", "mse", "mse_smoothed");
        for (const pipeline::MethodResult& mr : result.methods) {
            const scoring::ScoreReport& s = *mr.scores;
            std::printf("  %-6s %-10s %9.4f %9.4f %9.4f %9.4f", s.method.c_str(),
                        s.window.c_str(), s.is80, s.is95, s.crps, s.mse);
            if (s.mse_smoothed)
                std::printf(" %12.4f\n", *s.mse_smoothed);
            else
                std::printf(" %12s\n", "-");
        }
    }
    std::printf("wrote %zu files and manifest.json to %s\n", result.outputs.size(),
                result.config.output_dir.c_str());
    return 0;
}

int run_compare(const PipelineArgs& args) {
    const pipeline::RunConfig config = build_config(args);
    const pipeline::EngineComparison cmp = pipeline::compare_engines(config);
    std::printf("  %-16s %14s %14s %14s %12s\n", "parameter", "laplace_mean", "gibbs_mean",
                "mean_gap_sds", "width_ratio");
    for (const std::vector<pipeline::EngineComparison::Row>* rows :
         {&cmp.coefficients, &cmp.variances}) {
        for (const pipeline::EngineComparison::Row& r : *rows)
            std::printf("  %-16s %14.6g %14.6g %14.3f %12.3f\n", r.parameter.c_str(),
                        r.laplace_mean, r.gibbs_mean, r.mean_gap_sds, r.width_ratio);
    }
    std::printf("nested_laplace %.3f s, gibbs %.3f s, speedup %.1fx\n", cmp.laplace_seconds,
                cmp.gibbs_seconds, cmp.speedup);
    return 0;
}

int run_generate(const pseudoproxy::WorldConfig& wc, std::uint64_t seed,
                 const std::string& out_dir) {
    const pseudoproxy::PseudoWorld world = pseudoproxy::generate(wc, seed);
    const pseudoproxy::WorldPaths paths = pseudoproxy::write_world(world, out_dir);
    std::printf("wrote %s\n", paths.proxies.c_str());
    std::printf("wrote %s\n", paths.forcings.c_str());
    std::printf("wrote %s\n", paths.temperature.c_str());
    std::printf("%zu proxies, seed %" PRIu64 "\n", world.proxies.size(), seed);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Temperature reconstruction from proxy records"};
    app.require_subcommand(1);

    pseudoproxy::WorldConfig wc;
    std::uint64_t gen_seed = 0;
    std::string gen_out = "world";
    std::string gen_kind = "wf";
    CLI::App* gen = app.add_subcommand("generate", "write a synthetic proxy world");
    gen->add_option("--seed", gen_seed, "world seed")->required();
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--kind", gen_kind, "model kind: wf, nf or mixed");
    gen->add_option("--proxies-per-nest", wc.proxies_per_nest, "proxies per nest");
    gen->add_option("--snr-low", wc.snr_low, "lower signal-to-noise bound");
    gen->add_option("--snr-high", wc.snr_high, "upper signal-to-noise bound");
    gen->add_option("--missing", wc.missing_fraction, "pre-calibration missing chance");
    gen->add_option("--process-sd", wc.process_sd, "process noise sd");
    gen->add_option("--beta0", wc.beta[0], "intercept");
    gen->add_option("--beta1", wc.beta[1], "solar coefficient");
    gen->add_option("--beta2", wc.beta[2], "volcanic coefficient");
    gen->add_option("--beta3", wc.beta[3], "CO2 coefficient");
    gen->add_option("--spline-count", wc.spline_count, "trend basis size (nf / mixed)");
    gen->add_option("--spline-sd", wc.spline_coefficient_sd, "sd of drawn trend coefficients");

    struct BoundCommand {
        CLI::App* cmd = nullptr;
        pipeline::Stage through = pipeline::Stage::kValidate;
        bool compare = false;
        std::unique_ptr<PipelineArgs> args;
    };
    std::vector<BoundCommand> commands;
    const auto bind_command = [&](const char* name, const char* help, pipeline::Stage through,
                                  bool compare) {
        BoundCommand bc{app.add_subcommand(name, help), through, compare,
                        std::make_unique<PipelineArgs>()};
        add_pipeline_options(bc.cmd, *bc.args);
        commands.push_back(std::move(bc));
    };
    bind_command("reduce", "screen proxies and build the reduced series",
                 pipeline::Stage::kReduce, false);
    bind_command("fit", "reduce, then fit the posterior", pipeline::Stage::kFit, false);
    bind_command("reconstruct", "fit, then summarise the temperature block",
                 pipeline::Stage::kReconstruct, false);
    bind_command("validate", "reconstruct, then score the held-out window",
                 pipeline::Stage::kValidate, false);
    bind_command("all", "run every stage (same as validate)", pipeline::Stage::kValidate, false);
    bind_command("compare-engines", "fit both engines on one configuration",
                 pipeline::Stage::kValidate, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            wc.kind = model::parse_kind(gen_kind);
            return run_generate(wc, gen_seed, gen_out);
        }
        for (const BoundCommand& bc : commands)
            if (bc.cmd->parsed())
                return bc.compare ? run_compare(*bc.args) : run_stages(*bc.args, bc.through);
    } catch (const std::exception& e) {
        std::cerr << "paleorec: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
