// Command line front end: reset-opt <command> --config file [options].
//
// Commands
//   mfpt      reset-rate sweep of mean first-passage times, theory next to
//             Monte Carlo
//   train     repeated training runs with metrics traces and aggregates
//   sweep     one-axis experiment sweeps (r, B, tau, epsilon, section_mask,
//             checkpoint_offset) with matched seeds
//   diagnose  training under the gradient decomposition observer
//
// Exit codes: 0 success, 2 configuration or usage problems, 3 numerical
// failures, 4 file system failures, 1 anything else.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "resetopt/harness.hpp"

namespace {

int dispatch(const std::string& command, const resetopt::ExperimentConfig& cfg,
             const std::string& out_dir, std::size_t workers) {
    if (command == "mfpt")
        resetopt::cmd_mfpt(cfg, out_dir, workers);
    else if (command == "train")
        resetopt::cmd_train(cfg, out_dir, workers);
    else if (command == "sweep")
        resetopt::cmd_sweep(cfg, out_dir, workers);
    else
        resetopt::cmd_diagnose(cfg, out_dir, workers);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stochastic-resetting optimization toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::size_t workers = 1;
    std::int64_t seed_base = -1;

    const std::vector<std::string> names = {"mfpt", "train", "sweep", "diagnose"};
    const std::vector<std::string> blurbs = {
        "Mean first-passage times over the reset-rate grid",
        "Repeated training runs with aggregate statistics",
        "One-axis experiment sweep with matched seeds",
        "Training under the gradient decomposition observer"};
    for (std::size_t i = 0; i < names.size(); ++i) {
        auto* sub = app.add_subcommand(names[i], blurbs[i]);
        sub->add_option("--config", config_path, "JSON configuration file")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir,
                        "Output directory (default: config run.output_dir, then $RESETOPT_OUT, "
                        "then the working directory)");
        sub->add_option("--workers", workers, "Concurrent runs (default 1)")
            ->check(CLI::PositiveNumber);
        sub->add_option("--seed-base", seed_base, "Override run.seed_base from the config")
            ->check(CLI::NonNegativeNumber);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        auto cfg = resetopt::ExperimentConfig::parse_file(config_path);
        if (seed_base >= 0) cfg.run.seed_base = static_cast<std::uint64_t>(seed_base);

        std::string dir = out_dir;
        if (dir.empty()) dir = cfg.run.output_dir;
        if (dir.empty())
            if (const char* env = std::getenv("RESETOPT_OUT")) dir = env;
        if (dir.empty()) dir = ".";
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw resetopt::IoError("cannot create output directory " + dir);

        return dispatch(app.get_subcommands().front()->get_name(), cfg, dir, workers);
    } catch (const resetopt::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const resetopt::ArgumentError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const resetopt::DimensionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const resetopt::NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const resetopt::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const resetopt::FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
