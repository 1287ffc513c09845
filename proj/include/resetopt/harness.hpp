#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "resetopt/config.hpp"
#include "resetopt/csv.hpp"
#include "resetopt/dataset.hpp"
#include "resetopt/drift.hpp"
#include "resetopt/langevin.hpp"
#include "resetopt/network.hpp"
#include "resetopt/train.hpp"

namespace resetopt {

// --- data assembly ----------------------------------------------------------

struct DataBundle {
    LabeledDataset train, val, test;
};

/**
 * Assembles the train/val/test splits from the data and noise blocks. With
 * `clean_validation` (the default) the stratified split runs first and label
 * noise touches only the training part; clearing the flag corrupts the pool
 * before the split, so validation labels carry the same corruption process as
 * training labels. The test set stays clean either way. With `standardize`
 * set, statistics come from the training split alone and are applied to all
 * three parts.
 */
inline DataBundle build_data(const DataConfig& data, const NoiseConfig& noise) {
    data.validate();
    DataBundle b;
    LabeledDataset pool;
    if (data.source == "blobs") {
        pool = make_blobs(data.classes, data.per_class, data.dim, data.separation, data.seed);
        std::uint64_t test_state = data.seed ^ rng::hash_name("test_pool");
        b.test = make_blobs(data.classes, data.test_per_class, data.dim, data.separation,
                            rng::splitmix64(test_state));
    } else {
        pool = load_cifar_binary(data.cifar_train, data.classes, false);
        b.test = load_cifar_binary(data.cifar_test, data.classes, false);
    }
    if (data.clean_validation) {
        auto parts = split(pool, data.val_fraction, data.seed);
        b.train = corrupt(parts.first, noise.build(), data.seed);
        b.val = std::move(parts.second);
    } else {
        pool = corrupt(pool, noise.build(), data.seed);
        auto parts = split(pool, data.val_fraction, data.seed);
        b.train = std::move(parts.first);
        b.val = std::move(parts.second);
    }
    if (data.standardize) {
        const auto stats = compute_channel_stats(b.train);
        apply_standardization(b.train, stats);
        apply_standardization(b.val, stats);
        apply_standardization(b.test, stats);
    }
    return b;
}

// --- aggregation ------------------------------------------------------------

struct Aggregate {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double std_error = std::numeric_limits<double>::quiet_NaN();
    double std_dev = std::numeric_limits<double>::quiet_NaN();
    std::size_t n = 0;
};

// Mean with the sample standard deviation and its standard error, accumulated
// in input order so a recomputation from the emitted per-run rows reproduces
// the stored values bit for bit.
inline Aggregate aggregate(std::span<const double> xs) {
    Aggregate a;
    a.n = xs.size();
    if (a.n == 0) return a;
    double sum = 0.0;
    for (double x : xs) sum += x;
    a.mean = sum / static_cast<double>(a.n);
    if (a.n >= 2) {
        double ss = 0.0;
        for (double x : xs) {
            const double d = x - a.mean;
            ss += d * d;
        }
        a.std_dev = std::sqrt(ss / static_cast<double>(a.n - 1));
        a.std_error = a.std_dev / std::sqrt(static_cast<double>(a.n));
    }
    return a;
}

// --- shared plumbing --------------------------------------------------------

namespace detail {

inline void run_parallel(std::vector<std::function<void()>>& tasks, std::size_t workers) {
    if (workers <= 1 || tasks.size() <= 1) {
        for (auto& task : tasks) task();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr first_error;
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            try {
                tasks[i]();
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t count = std::min(workers, tasks.size());
    pool.reserve(count);
    for (std::size_t i = 0; i < count; ++i) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline std::filesystem::path join(const std::string& dir, const std::string& name) {
    return std::filesystem::path(dir) / name;
}

inline void write_meta(const std::string& dir, const ExperimentConfig& cfg,
                       const std::string& command, double wall_seconds,
                       json extra = json::object()) {
    json meta;
    meta["command"] = command;
    meta["config"] = cfg.to_json();
    meta["config_hash"] = cfg.hash_hex();
    meta["wall_time_seconds"] = wall_seconds;
    meta.update(extra);
    std::ofstream out(join(dir, "meta.json"));
    if (!out) throw IoError("write_meta: cannot open meta.json in " + dir);
    out << meta.dump(2) << "\n";
    out.close();
    if (out.fail()) throw IoError("write_meta: write failed");
}

class Timer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void check_shapes(const ExperimentConfig& cfg, const DataBundle& data) {
    if (cfg.network.classes != data.train.num_classes)
        throw ConfigError("config: network.classes must match the data classes");
}

/** One resolved training run; every command funnels through here. */
inline TrainResult run_one(const ExperimentConfig& cfg, const DataBundle& data,
                           std::uint64_t seed, const TrainHooks& hooks = {}) {
    Network net(cfg.network.build(cfg.data.input_shape()));
    return train(net, data.train, data.val, data.test, cfg.reset.build(), cfg.optimizer,
                 cfg.training.setup(seed), hooks);
}

inline std::string fmt_cell(double x) {
    return std::isnan(x) ? std::string{} : fmt_double(x);
}

inline std::vector<std::string> aggregate_cells(const Aggregate& a) {
    return {fmt_cell(a.mean), fmt_cell(a.std_error), fmt_cell(a.std_dev)};
}

inline std::optional<double> cell_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}

// Loads several tables that must all come from the same configuration; the
// recompute helpers refuse to aggregate across mismatched hashes.
inline std::vector<CsvTable> read_same_config(const std::vector<std::string>& paths) {
    require(!paths.empty(), "recompute: need at least one table");
    std::vector<CsvTable> tables;
    for (const auto& path : paths) {
        CsvTable t = read_csv(path);
        if (!tables.empty() && t.config_hash != tables.front().config_hash)
            throw FormatError("recompute: " + path +
                              " carries a different config hash than the first table");
        tables.push_back(std::move(t));
    }
    return tables;
}

}  // namespace detail

// --- mfpt command -----------------------------------------------------------

inline constexpr const char* kMfptSweepHeader =
    "gamma,D,v,L,mfpt_mc,mfpt_se,mfpt_closed,rel_gap,censored";
inline constexpr const char* kMfptSummaryHeader =
    "D,v,L,pe,reset_beneficial,gamma_star,mfpt_at_gamma_star,interior";

/**
 * Sweeps the reset rate grid of the langevin block: one Monte Carlo batch per
 * rate next to the closed-form mean. Rows where the mean diverges and no
 * explicit time cap is set skip the simulation and leave those cells empty;
 * the closed-form column always reports the zero-rate limit at gamma = 0.
 */
inline void cmd_mfpt(const ExperimentConfig& cfg, const std::string& out_dir,
                     std::size_t workers = 1) {
    detail::Timer timer;
    const auto& lang = cfg.langevin;
    if (lang.diffusion <= 0.0)
        throw ConfigError("config: langevin.diffusion must be positive for the mfpt command");
    if (lang.gamma_grid.empty())
        throw ConfigError("config: langevin.gamma_grid must not be empty");
    require(lang.trajectories > 0, "config: langevin.trajectories must be positive");
    const std::string hash = cfg.hash_hex();

    struct Row {
        double gamma = 0.0;
        double closed = 0.0;
        bool simulated = false;
        MfptResult mc;
    };
    std::vector<Row> rows(lang.gamma_grid.size());
    std::vector<std::function<void()>> tasks;
    for (std::size_t j = 0; j < lang.gamma_grid.size(); ++j) {
        tasks.emplace_back([&, j] {
            Row row;
            row.gamma = lang.gamma_grid[j];
            row.closed = mfpt_closed_form(lang.diffusion, lang.drift, lang.target, row.gamma);
            const bool can_simulate = std::isfinite(row.closed) || lang.max_time > 0.0;
            if (can_simulate) {
                const auto batch = simulate_fpt(lang.build(row.gamma), lang.trajectories,
                                                cfg.run.seed_base + j);
                row.mc = summarize_fpt(batch, row.closed);
                row.simulated = true;
            }
            rows[j] = row;
        });
    }
    detail::run_parallel(tasks, workers);

    CsvWriter sweep(detail::join(out_dir, "mfpt_sweep.csv").string(), kMfptSweepHeader, hash);
    for (const auto& row : rows) {
        sweep.row({fmt_double(row.gamma), fmt_double(lang.diffusion), fmt_double(lang.drift),
                   fmt_double(lang.target), row.simulated ? detail::fmt_cell(row.mc.estimate) : "",
                   row.simulated ? detail::fmt_cell(row.mc.std_error) : "",
                   fmt_double(row.closed),
                   row.simulated ? detail::fmt_cell(row.mc.relative_gap) : "",
                   row.simulated ? std::to_string(row.mc.censored) : ""});
    }
    sweep.close();

    const double pe = peclet(lang.diffusion, lang.drift, lang.target);
    const auto opt = optimal_reset_rate(lang.diffusion, lang.drift, lang.target);
    CsvWriter summary(detail::join(out_dir, "mfpt_summary.csv").string(), kMfptSummaryHeader, hash);
    summary.row({fmt_double(lang.diffusion), fmt_double(lang.drift), fmt_double(lang.target),
                 fmt_double(pe), reset_beneficial(lang.diffusion, lang.drift, lang.target) ? "1" : "0",
                 fmt_double(opt.gamma_star), fmt_double(opt.mfpt), opt.interior ? "1" : "0"});
    summary.close();

    detail::write_meta(out_dir, cfg, "mfpt", timer.seconds(),
                       {{"rows", rows.size()}, {"trajectories_per_rate", lang.trajectories}});
}

// --- train command ----------------------------------------------------------

inline constexpr const char* kTrainRunsHeader =
    "rep,seed,diverged,best_iteration,best_val_loss,best_val_acc,test_acc_at_best,"
    "final_mem_frac,reset_count";
inline constexpr const char* kTrainSummaryHeader = "metric,mean,std_error,std_dev,n_runs,n_failed";

namespace detail {

struct TrainRunRow {
    bool diverged = false;
    double best_val_loss = std::numeric_limits<double>::quiet_NaN();
    double best_val_acc = std::numeric_limits<double>::quiet_NaN();
    double test_acc_at_best = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> final_mem_frac;
    double reset_count = 0.0;
};

inline std::vector<std::vector<std::string>> summarize_train(const std::vector<TrainRunRow>& rows) {
    std::size_t failed = 0;
    for (const auto& r : rows)
        if (r.diverged) ++failed;
    auto collect = [&](auto getter) {
        std::vector<double> xs;
        for (const auto& r : rows) {
            if (r.diverged) continue;
            const std::optional<double> v = getter(r);
            if (v && !std::isnan(*v)) xs.push_back(*v);
        }
        return xs;
    };
    std::vector<std::vector<std::string>> out;
    auto emit = [&](const char* name, const std::vector<double>& xs) {
        const Aggregate a = aggregate(xs);
        const auto cells = aggregate_cells(a);
        out.push_back({name, cells[0], cells[1], cells[2], std::to_string(a.n),
                       std::to_string(failed)});
    };
    emit("best_val_loss",
         collect([](const TrainRunRow& r) { return std::optional<double>(r.best_val_loss); }));
    emit("best_val_acc",
         collect([](const TrainRunRow& r) { return std::optional<double>(r.best_val_acc); }));
    emit("test_acc_at_best",
         collect([](const TrainRunRow& r) { return std::optional<double>(r.test_acc_at_best); }));
    emit("final_mem_frac", collect([](const TrainRunRow& r) { return r.final_mem_frac; }));
    emit("reset_count",
         collect([](const TrainRunRow& r) { return std::optional<double>(r.reset_count); }));
    return out;
}

}  // namespace detail

/**
 * Re-derives the train_summary rows from emitted train_runs tables. Because
 * the per-run cells round-trip binary64 exactly, the result matches the
 * written summary bit for bit; tables stamped with different config hashes
 * are refused.
 */
inline std::vector<std::vector<std::string>> recompute_train_summary(
    const std::vector<std::string>& paths) {
    const auto tables = detail::read_same_config(paths);
    std::vector<detail::TrainRunRow> rows;
    for (const auto& t : tables) {
        const std::size_t c_div = t.column("diverged");
        const std::size_t c_loss = t.column("best_val_loss");
        const std::size_t c_acc = t.column("best_val_acc");
        const std::size_t c_test = t.column("test_acc_at_best");
        const std::size_t c_mem = t.column("final_mem_frac");
        const std::size_t c_rc = t.column("reset_count");
        for (const auto& r : t.rows) {
            detail::TrainRunRow row;
            row.diverged = r[c_div] == "1";
            const auto nan = std::numeric_limits<double>::quiet_NaN();
            row.best_val_loss = detail::cell_opt(r[c_loss]).value_or(nan);
            row.best_val_acc = detail::cell_opt(r[c_acc]).value_or(nan);
            row.test_acc_at_best = detail::cell_opt(r[c_test]).value_or(nan);
            row.final_mem_frac = detail::cell_opt(r[c_mem]);
            row.reset_count = detail::cell_opt(r[c_rc]).value_or(0.0);
            rows.push_back(row);
        }
    }
    return detail::summarize_train(rows);
}

/**
 * Repeated training runs over seeds seed_base..seed_base+repetitions-1 on one
 * shared dataset. Emits a metrics trace and best-parameter snapshot per run,
 * a per-run summary table, and aggregates carrying both the standard error
 * and the standard deviation. Diverged runs stay in the per-run table with
 * their flag set and are left out of the aggregates, never filled in.
 */
inline void cmd_train(const ExperimentConfig& cfg, const std::string& out_dir,
                      std::size_t workers = 1) {
    detail::Timer timer;
    const std::string hash = cfg.hash_hex();
    const DataBundle data = build_data(cfg.data, cfg.noise);
    detail::check_shapes(cfg, data);

    const std::size_t reps = cfg.run.repetitions;
    std::vector<TrainResult> results(reps);
    std::vector<std::function<void()>> tasks;
    for (std::size_t rep = 0; rep < reps; ++rep) {
        tasks.emplace_back([&, rep] {
            const std::uint64_t seed = cfg.run.seed_base + rep;
            TrainResult res = detail::run_one(cfg, data, seed);
            write_metrics_csv(
                detail::join(out_dir, "metrics_rep" + std::to_string(rep) + ".csv").string(),
                res.metrics, hash);
            if (!res.diverged && !res.best_params.empty()) {
                Network net(cfg.network.build(cfg.data.input_shape()));
                net.set_flat(res.best_params);
                net.params().save(
                    detail::join(out_dir, "best_rep" + std::to_string(rep) + ".params").string());
            }
            results[rep] = std::move(res);
        });
    }
    detail::run_parallel(tasks, workers);

    CsvWriter runs(detail::join(out_dir, "train_runs.csv").string(), kTrainRunsHeader, hash);
    for (std::size_t rep = 0; rep < reps; ++rep) {
        const auto& r = results[rep];
        runs.row({std::to_string(rep), std::to_string(cfg.run.seed_base + rep),
                  r.diverged ? "1" : "0", std::to_string(r.best_iteration),
                  detail::fmt_cell(r.best_val_loss), detail::fmt_cell(r.best_val_acc),
                  detail::fmt_cell(r.test_acc_at_best), fmt_opt(r.final_mem_frac),
                  std::to_string(r.reset_count)});
    }
    runs.close();

    std::vector<detail::TrainRunRow> run_rows;
    std::size_t failed = 0;
    for (const auto& r : results) {
        detail::TrainRunRow row;
        row.diverged = r.diverged;
        row.best_val_loss = r.best_val_loss;
        row.best_val_acc = r.best_val_acc;
        row.test_acc_at_best = r.test_acc_at_best;
        row.final_mem_frac = r.final_mem_frac;
        row.reset_count = static_cast<double>(r.reset_count);
        run_rows.push_back(row);
        if (r.diverged) ++failed;
    }
    CsvWriter summary(detail::join(out_dir, "train_summary.csv").string(), kTrainSummaryHeader,
                      hash);
    for (const auto& cells : detail::summarize_train(run_rows)) summary.row(cells);
    summary.close();

    detail::write_meta(out_dir, cfg, "train", timer.seconds(),
                       {{"repetitions", reps}, {"failed", failed}});
}

// --- sweep command ----------------------------------------------------------

inline constexpr const char* kSweepRawHeader =
    "axis,value,r,rep,seed,status,best_iteration,best_val_loss,best_val_acc,"
    "test_acc_at_best,rdv_loss,rdt_acc";
inline constexpr const char* kSweepSummaryHeader =
    "axis,value,rdv_loss_mean,rdv_loss_se,rdv_loss_sd,rdt_acc_mean,rdt_acc_se,rdt_acc_sd,"
    "n_reps,n_failed";

namespace detail {

struct SweepRow {
    std::string value_label;
    double r = 0.0;
    std::size_t rep = 0;
    std::uint64_t seed = 0;
    std::string status = "ok";  // ok | diverged | unreachable | no_baseline
    std::int64_t best_iteration = -1;
    double best_val_loss = std::numeric_limits<double>::quiet_NaN();
    double best_val_acc = std::numeric_limits<double>::quiet_NaN();
    double test_acc_at_best = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> rdv_loss, rdt_acc;
};

inline SweepRow sweep_row_from(const std::string& label, double r, std::size_t rep,
                               std::uint64_t seed, const TrainResult& res) {
    SweepRow row;
    row.value_label = label;
    row.r = r;
    row.rep = rep;
    row.seed = seed;
    row.status = res.diverged ? "diverged" : "ok";
    row.best_iteration = res.best_iteration;
    row.best_val_loss = res.best_val_loss;
    row.best_val_acc = res.best_val_acc;
    row.test_acc_at_best = res.test_acc_at_best;
    return row;
}

// Relative deviations against the matched-seed baseline run; left absent when
// either side failed or the baseline value is zero.
inline void attach_relative(SweepRow& row, const SweepRow& baseline) {
    if (baseline.status != "ok") {
        if (row.status == "ok") row.status = "no_baseline";
        return;
    }
    if (row.status != "ok") return;
    if (baseline.best_val_loss != 0.0)
        row.rdv_loss = relative_difference(row.best_val_loss, baseline.best_val_loss);
    if (baseline.test_acc_at_best != 0.0)
        row.rdt_acc = relative_difference(row.test_acc_at_best, baseline.test_acc_at_best);
}

inline double sweep_number(const json& v, const std::string& axis) {
    if (!v.is_number())
        throw ConfigError("config: sweep.values for axis " + axis + " must be numbers");
    return v.get<double>();
}

inline std::string sweep_value_label(const json& v, const std::string& axis) {
    if (axis == "section_mask") {
        if (!v.is_string())
            throw ConfigError("config: sweep.values for axis section_mask must be strings");
        return v.get<std::string>();
    }
    return fmt_double(sweep_number(v, axis));
}

// Per-value aggregates over the completed seeds. For the grid axes each seed
// contributes its best deviation across the positive reset rates (lowest loss
// deviation, highest accuracy deviation); elsewhere each seed contributes its
// single run at that value.
inline std::vector<std::vector<std::string>> summarize_sweep(const std::string& axis,
                                                             bool grid_axes, std::size_t reps,
                                                             const std::vector<SweepRow>& rows,
                                                             std::size_t* total_failed = nullptr) {
    std::vector<std::vector<std::string>> out;
    std::size_t all_failed = 0;
    std::vector<std::string> seen;
    for (const auto& probe : rows) {
        if (probe.value_label == "baseline") continue;
        if (std::find(seen.begin(), seen.end(), probe.value_label) != seen.end()) continue;
        seen.push_back(probe.value_label);

        std::vector<double> rdv, rdt;
        std::size_t failed = 0;
        for (std::size_t rep = 0; rep < reps; ++rep) {
            std::optional<double> best_rdv, best_rdt;
            bool contributes = false;
            for (const auto& row : rows) {
                if (row.value_label != probe.value_label || row.rep != rep) continue;
                if (grid_axes && row.r == 0.0) continue;
                if (row.status != "ok" || !row.rdv_loss || !row.rdt_acc) continue;
                contributes = true;
                if (!best_rdv || *row.rdv_loss < *best_rdv) best_rdv = row.rdv_loss;
                if (!best_rdt || *row.rdt_acc > *best_rdt) best_rdt = row.rdt_acc;
            }
            if (contributes) {
                rdv.push_back(*best_rdv);
                rdt.push_back(*best_rdt);
            } else {
                ++failed;
            }
        }
        all_failed += failed;
        const Aggregate av = aggregate(rdv);
        const Aggregate at = aggregate(rdt);
        const auto vc = aggregate_cells(av);
        const auto tc = aggregate_cells(at);
        out.push_back({axis, probe.value_label, vc[0], vc[1], vc[2], tc[0], tc[1], tc[2],
                       std::to_string(av.n), std::to_string(failed)});
    }
    if (total_failed) *total_failed = all_failed;
    return out;
}

}  // namespace detail

/**
 * Re-derives the sweep_summary rows from emitted sweep_raw tables; exact for
 * the same reason as the train recompute. Tables stamped with different
 * config hashes are refused.
 */
inline std::vector<std::vector<std::string>> recompute_sweep_summary(
    const std::vector<std::string>& paths) {
    const auto tables = detail::read_same_config(paths);
    std::string axis;
    std::vector<detail::SweepRow> rows;
    std::size_t reps = 0;
    for (const auto& t : tables) {
        const std::size_t c_axis = t.column("axis");
        const std::size_t c_value = t.column("value");
        const std::size_t c_r = t.column("r");
        const std::size_t c_rep = t.column("rep");
        const std::size_t c_status = t.column("status");
        const std::size_t c_rdv = t.column("rdv_loss");
        const std::size_t c_rdt = t.column("rdt_acc");
        for (const auto& r : t.rows) {
            if (axis.empty())
                axis = r[c_axis];
            else if (axis != r[c_axis])
                throw FormatError("recompute: sweep tables mix different axes");
            detail::SweepRow row;
            row.value_label = r[c_value];
            row.r = std::stod(r[c_r]);
            row.rep = static_cast<std::size_t>(std::stoull(r[c_rep]));
            row.status = r[c_status];
            row.rdv_loss = detail::cell_opt(r[c_rdv]);
            row.rdt_acc = detail::cell_opt(r[c_rdt]);
            reps = std::max(reps, row.rep + 1);
            rows.push_back(std::move(row));
        }
    }
    const bool grid_axes = axis == "B" || axis == "tau";
    return detail::summarize_sweep(axis, grid_axes, reps, rows);
}

/**
 * One-axis experiment sweeps with matched seeds. The axis picks what varies:
 *
 *  - "r": sweep.values are reset probabilities and must include 0; relative
 *    deviations compare each rate against the matched-seed zero run.
 *  - "B" / "tau": sweep.values are batch sizes or corruption rates; every
 *    value runs the whole sweep.r_grid (which must include 0), and the
 *    summary reports the per-seed best deviation over the positive rates
 *    (lowest loss deviation, highest accuracy deviation).
 *  - "epsilon" / "section_mask": sweep.values are perturbation radii or
 *    section names, run at the reset block's probability against a shared
 *    zero-probability baseline per seed.
 *  - "checkpoint_offset": three passes per seed. A zero-probability baseline
 *    locates its best iteration t_m, a replay with identical seed captures
 *    parameter snapshots at t_m plus each offset, and a final run per offset
 *    resets onto that snapshot as a fixed checkpoint. Offsets that land past
 *    the training horizon come back as "unreachable".
 *
 * Raw rows carry every run; the summary aggregates the relative deviations
 * over the seeds that completed. Failed runs are never filled in.
 */
inline void cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir,
                      std::size_t workers = 1) {
    detail::Timer timer;
    const std::string hash = cfg.hash_hex();
    const std::string& axis = cfg.sweep.axis;
    const auto& values = cfg.sweep.values;
    if (values.empty()) throw ConfigError("config: sweep.values must not be empty");
    const std::size_t reps = cfg.run.repetitions;

    static const std::set<std::string> axes = {"r",       "B",           "tau",
                                               "epsilon", "section_mask", "checkpoint_offset"};
    if (!axes.count(axis))
        throw ConfigError("config: sweep.axis must be one of r, B, tau, epsilon, section_mask, "
                          "checkpoint_offset");

    const bool grid_axes = axis == "B" || axis == "tau";
    const bool shared_baseline = axis == "epsilon" || axis == "section_mask" ||
                                 axis == "checkpoint_offset";
    if (axis == "r") {
        bool has_zero = false;
        for (const auto& v : values) has_zero |= detail::sweep_number(v, axis) == 0.0;
        if (!has_zero)
            throw ConfigError("config: sweep over r needs the baseline value 0 in sweep.values");
    }
    if (grid_axes) {
        if (std::find(cfg.sweep.r_grid.begin(), cfg.sweep.r_grid.end(), 0.0) ==
            cfg.sweep.r_grid.end())
            throw ConfigError("config: sweep.r_grid needs the baseline value 0 for axis " + axis);
        if (cfg.sweep.r_grid.size() < 2)
            throw ConfigError("config: sweep.r_grid needs at least one positive rate");
    }
    if (shared_baseline && cfg.reset.probability <= 0.0)
        throw ConfigError("config: sweep.axis " + axis + " needs reset.probability > 0");

    std::vector<detail::SweepRow> rows;

    if (axis == "checkpoint_offset") {
        std::vector<std::int64_t> offsets;
        for (const auto& v : values) {
            const double x = detail::sweep_number(v, axis);
            if (x < 0.0 || x != std::floor(x))
                throw ConfigError("config: checkpoint offsets must be non-negative integers");
            offsets.push_back(static_cast<std::int64_t>(x));
        }
        const DataBundle data = build_data(cfg.data, cfg.noise);
        detail::check_shapes(cfg, data);

        struct RepOut {
            detail::SweepRow baseline;
            std::vector<detail::SweepRow> per_offset;
        };
        std::vector<RepOut> outs(reps);
        std::vector<std::function<void()>> tasks;
        for (std::size_t rep = 0; rep < reps; ++rep) {
            tasks.emplace_back([&, rep] {
                const std::uint64_t seed = cfg.run.seed_base + rep;
                ExperimentConfig base = cfg;
                base.reset.probability = 0.0;
                base.reset.fixed_checkpoint = false;
                RepOut out;
                const TrainResult baseline = detail::run_one(base, data, seed);
                out.baseline = detail::sweep_row_from("baseline", 0.0, rep, seed, baseline);
                out.per_offset.resize(offsets.size());
                const std::int64_t t_m = baseline.best_iteration;

                std::map<std::int64_t, std::vector<double>> snapshots;
                if (out.baseline.status == "ok" && t_m > 0) {
                    TrainHooks capture;
                    for (std::int64_t off : offsets)
                        if (t_m + off <= cfg.training.total_iters)
                            capture.capture_at.push_back(t_m + off);
                    if (!capture.capture_at.empty())
                        snapshots = detail::run_one(base, data, seed, capture).captured;
                }

                for (std::size_t k = 0; k < offsets.size(); ++k) {
                    const std::string label = fmt_double(static_cast<double>(offsets[k]));
                    auto& row = out.per_offset[k];
                    if (out.baseline.status != "ok" || t_m <= 0) {
                        row.value_label = label;
                        row.r = cfg.reset.probability;
                        row.rep = rep;
                        row.seed = seed;
                        row.status = "no_baseline";
                        continue;
                    }
                    const std::int64_t at = t_m + offsets[k];
                    auto snap = snapshots.find(at);
                    if (snap == snapshots.end()) {
                        row.value_label = label;
                        row.r = cfg.reset.probability;
                        row.rep = rep;
                        row.seed = seed;
                        row.status = "unreachable";
                        continue;
                    }
                    ExperimentConfig variant = cfg;
                    variant.reset.fixed_checkpoint = true;
                    TrainHooks hooks;
                    hooks.preset_checkpoint = snap->second;
                    const TrainResult res = detail::run_one(variant, data, seed, hooks);
                    row = detail::sweep_row_from(label, cfg.reset.probability, rep, seed, res);
                    detail::attach_relative(row, out.baseline);
                }
                outs[rep] = std::move(out);
            });
        }
        detail::run_parallel(tasks, workers);
        for (std::size_t rep = 0; rep < reps; ++rep) rows.push_back(outs[rep].baseline);
        for (std::size_t k = 0; k < offsets.size(); ++k)
            for (std::size_t rep = 0; rep < reps; ++rep)
                rows.push_back(outs[rep].per_offset[k]);
    } else if (grid_axes) {
        struct Cell {
            std::string label;
            double axis_value = 0.0;
            double r = 0.0;
            std::size_t rep = 0;
        };
        std::vector<Cell> cells;
        for (const auto& v : values) {
            const double x = detail::sweep_number(v, axis);
            if (axis == "B" && (x < 1.0 || x != std::floor(x)))
                throw ConfigError("config: batch sizes must be positive integers");
            if (axis == "tau" && (x < 0.0 || x >= 1.0))
                throw ConfigError("config: corruption rates must lie in [0,1)");
            for (double r : cfg.sweep.r_grid)
                for (std::size_t rep = 0; rep < reps; ++rep)
                    cells.push_back({fmt_double(x), x, r, rep});
        }

        // One bundle per axis value (tau changes the data, B does not; the
        // per-value rebuild keeps the loop uniform and is cheap beside training).
        std::map<std::string, DataBundle> bundles;
        for (const auto& cell : cells)
            if (!bundles.count(cell.label)) {
                ExperimentConfig variant = cfg;
                if (axis == "tau") variant.noise.rate = cell.axis_value;
                bundles.emplace(cell.label, build_data(variant.data, variant.noise));
                detail::check_shapes(variant, bundles.at(cell.label));
            }

        std::vector<detail::SweepRow> cell_rows(cells.size());
        std::vector<std::function<void()>> tasks;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            tasks.emplace_back([&, i] {
                const auto& cell = cells[i];
                ExperimentConfig variant = cfg;
                if (axis == "tau") variant.noise.rate = cell.axis_value;
                if (axis == "B") variant.training.batch_size = static_cast<std::size_t>(cell.axis_value);
                variant.reset.probability = cell.r;
                const std::uint64_t seed = cfg.run.seed_base + cell.rep;
                const TrainResult res =
                    detail::run_one(variant, bundles.at(cell.label), seed);
                cell_rows[i] = detail::sweep_row_from(cell.label, cell.r, cell.rep, seed, res);
            });
        }
        detail::run_parallel(tasks, workers);

        for (std::size_t i = 0; i < cells.size(); ++i) {
            auto row = cell_rows[i];
            if (row.r != 0.0) {
                for (std::size_t j = 0; j < cells.size(); ++j)
                    if (cells[j].label == cells[i].label && cells[j].r == 0.0 &&
                        cells[j].rep == cells[i].rep) {
                        detail::attach_relative(row, cell_rows[j]);
                        break;
                    }
            } else {
                if (row.status == "ok") {
                    row.rdv_loss = 0.0;
                    row.rdt_acc = 0.0;
                }
            }
            rows.push_back(std::move(row));
        }
    } else {
        // r, epsilon, and section_mask sweeps share one flat run-per-cell shape.
        struct Cell {
            std::string label;
            json value;
            double r = 0.0;
            std::size_t rep = 0;
        };
        std::vector<Cell> cells;
        if (shared_baseline)
            for (std::size_t rep = 0; rep < reps; ++rep)
                cells.push_back({"baseline", json{}, 0.0, rep});
        for (const auto& v : values) {
            const std::string label = detail::sweep_value_label(v, axis);
            double r = cfg.reset.probability;
            if (axis == "r") {
                r = detail::sweep_number(v, axis);
                if (r < 0.0 || r > 1.0)
                    throw ConfigError("config: reset probabilities must lie in [0,1]");
            } else if (axis == "epsilon") {
                if (detail::sweep_number(v, axis) < 0.0)
                    throw ConfigError("config: perturbation radii must be non-negative");
            }
            for (std::size_t rep = 0; rep < reps; ++rep) cells.push_back({label, v, r, rep});
        }

        const DataBundle data = build_data(cfg.data, cfg.noise);
        detail::check_shapes(cfg, data);

        std::vector<detail::SweepRow> cell_rows(cells.size());
        std::vector<std::function<void()>> tasks;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            tasks.emplace_back([&, i] {
                const auto& cell = cells[i];
                ExperimentConfig variant = cfg;
                variant.reset.probability = cell.r;
                if (axis == "epsilon" && cell.label != "baseline")
                    variant.reset.epsilon = detail::sweep_number(cell.value, axis);
                if (axis == "section_mask" && cell.label != "baseline")
                    variant.reset.sections = cell.label;
                const std::uint64_t seed = cfg.run.seed_base + cell.rep;
                const TrainResult res = detail::run_one(variant, data, seed);
                cell_rows[i] = detail::sweep_row_from(cell.label, cell.r, cell.rep, seed, res);
            });
        }
        detail::run_parallel(tasks, workers);

        auto baseline_of = [&](std::size_t rep) -> const detail::SweepRow* {
            for (std::size_t j = 0; j < cells.size(); ++j) {
                const bool is_base = shared_baseline ? cells[j].label == "baseline"
                                                     : cells[j].r == 0.0;
                if (is_base && cells[j].rep == rep) return &cell_rows[j];
            }
            return nullptr;
        };
        for (std::size_t i = 0; i < cells.size(); ++i) {
            auto row = cell_rows[i];
            const bool is_base = shared_baseline ? cells[i].label == "baseline" : row.r == 0.0;
            if (is_base) {
                if (row.status == "ok") {
                    row.rdv_loss = 0.0;
                    row.rdt_acc = 0.0;
                }
            } else if (const auto* base = baseline_of(cells[i].rep)) {
                detail::attach_relative(row, *base);
            }
            rows.push_back(std::move(row));
        }
    }

    CsvWriter raw(detail::join(out_dir, "sweep_raw.csv").string(), kSweepRawHeader, hash);
    for (const auto& row : rows) {
        raw.row({axis, row.value_label, fmt_double(row.r), std::to_string(row.rep),
                 std::to_string(row.seed), row.status, std::to_string(row.best_iteration),
                 detail::fmt_cell(row.best_val_loss), detail::fmt_cell(row.best_val_acc),
                 detail::fmt_cell(row.test_acc_at_best), fmt_opt(row.rdv_loss),
                 fmt_opt(row.rdt_acc)});
    }
    raw.close();

    CsvWriter summary(detail::join(out_dir, "sweep_summary.csv").string(), kSweepSummaryHeader,
                      hash);
    std::size_t total_failed = 0;
    for (const auto& cells : detail::summarize_sweep(axis, grid_axes, reps, rows, &total_failed))
        summary.row(cells);
    summary.close();

    detail::write_meta(out_dir, cfg, "sweep", timer.seconds(),
                       {{"axis", axis}, {"rows", rows.size()}, {"failed_cells", total_failed}});
}

// --- diagnose command -------------------------------------------------------

inline constexpr const char* kDiagnoseRunsHeader =
    "variant,rep,seed,status,records,mean_abs_cos_cw,mean_cos_tc,mean_cos_tw,mean_norm_gap";
inline constexpr const char* kDiagnoseSummaryHeader =
    "variant,metric,mean,std_error,std_dev,n_runs,n_failed";

namespace detail {

// Smoothed companion file: every column that is present in all rows is
// resampled onto the shared log grid and box-filtered; columns with gaps pass
// through as empty cells. Grid iterations are fractional, hence their own
// formatting rather than the integer row writer.
inline void write_smoothed_diagnostics(const std::string& path,
                                       const std::vector<DiagnosticsRow>& rows,
                                       std::size_t window, const std::string& hash) {
    CsvWriter writer(path, kDiagnosticsHeader, hash);
    if (rows.empty()) {
        writer.close();
        return;
    }
    using Getter = std::function<std::optional<double>(const DiagnosticsRow&)>;
    const std::array<Getter, 8> getters = {
        Getter{[](const DiagnosticsRow& r) { return r.cos_tc; }},
        Getter{[](const DiagnosticsRow& r) { return r.cos_tw; }},
        Getter{[](const DiagnosticsRow& r) { return r.cos_cw; }},
        Getter{[](const DiagnosticsRow& r) { return std::optional<double>(r.norm_c); }},
        Getter{[](const DiagnosticsRow& r) { return std::optional<double>(r.norm_w); }},
        Getter{[](const DiagnosticsRow& r) { return std::optional<double>(r.norm_gap); }},
        Getter{[](const DiagnosticsRow& r) { return r.trace_sigma; }},
        Getter{[](const DiagnosticsRow& r) { return r.trace_d; }}};

    std::array<std::optional<std::vector<SeriesPoint>>, 8> smoothed;
    std::optional<std::vector<SeriesPoint>> grid;
    for (std::size_t c = 0; c < getters.size(); ++c) {
        std::vector<SeriesPoint> series;
        series.reserve(rows.size());
        bool full = true;
        for (const auto& r : rows) {
            const auto v = getters[c](r);
            if (!v) {
                full = false;
                break;
            }
            series.push_back({static_cast<double>(r.iteration), *v});
        }
        if (!full) continue;
        smoothed[c] = log_window_smooth(series, window);
        if (!grid) grid = smoothed[c];
    }
    if (grid) {
        for (std::size_t k = 0; k < grid->size(); ++k) {
            std::vector<std::string> cells;
            cells.push_back(fmt_double((*grid)[k].iteration));
            for (std::size_t c = 0; c < smoothed.size(); ++c)
                cells.push_back(smoothed[c] ? fmt_double((*smoothed[c])[k].value) : std::string{});
            writer.row(cells);
        }
    }
    writer.close();
}

}  // namespace detail

/**
 * Trains while observing the gradient split between correctly and wrongly
 * labeled samples. For presets with a batch-norm switch the run happens twice
 * per seed, once with it on and once off, so the two traces can be compared;
 * the vcnn preset runs a single variant. Decompositions are recorded at every
 * record_interval-th iteration on the full training set in eval mode; the
 * diffusion trace is added at the sparser diffusion_interval when enabled.
 */
inline void cmd_diagnose(const ExperimentConfig& cfg, const std::string& out_dir,
                         std::size_t workers = 1) {
    detail::Timer timer;
    const std::string hash = cfg.hash_hex();
    const auto& diag = cfg.diagnostics;
    require(diag.record_interval > 0, "config: diagnostics.record_interval must be positive");
    if (diag.record_interval % cfg.reset.validation_interval != 0)
        throw ConfigError(
            "config: diagnostics.record_interval must be a multiple of reset.validation_interval");
    if (diag.diffusion_samples > 0) {
        require(diag.diffusion_samples >= 2,
                "config: diagnostics.diffusion_samples must be at least 2");
        if (diag.diffusion_interval % diag.record_interval != 0)
            throw ConfigError(
                "config: diagnostics.diffusion_interval must be a multiple of record_interval");
    }
    require(diag.smooth_window >= 1, "config: diagnostics.smooth_window must be at least 1");

    const DataBundle data = build_data(cfg.data, cfg.noise);
    detail::check_shapes(cfg, data);

    std::vector<std::pair<std::string, bool>> variants;
    if (cfg.network.preset == "vcnn")
        variants = {{"bn_on", true}};
    else
        variants = {{"bn_on", true}, {"bn_off", false}};

    struct RunOut {
        std::string variant;
        std::size_t rep = 0;
        std::uint64_t seed = 0;
        bool diverged = false;
        std::vector<DiagnosticsRow> rows;
    };
    const std::size_t reps = cfg.run.repetitions;
    std::vector<RunOut> outs(variants.size() * reps);
    std::vector<std::function<void()>> tasks;
    for (std::size_t vi = 0; vi < variants.size(); ++vi)
        for (std::size_t rep = 0; rep < reps; ++rep) {
            tasks.emplace_back([&, vi, rep] {
                ExperimentConfig variant = cfg;
                variant.network.batch_norm = variants[vi].second;
                const std::uint64_t seed = cfg.run.seed_base + rep;

                RunOut out;
                out.variant = variants[vi].first;
                out.rep = rep;
                out.seed = seed;

                TrainHooks hooks;
                hooks.on_validation = [&](std::int64_t t, Network& net) {
                    if (t % diag.record_interval != 0) return;
                    // Train mode so batch normalization uses chunk statistics,
                    // matching the gradients the optimizer actually follows.
                    // Frozen running statistics reduce the layer to a fixed
                    // affine map and hide its effect on subset alignment.
                    const auto dec = decompose_dataset_gradient(
                        net, data.train, cfg.training.loss_kind(), Mode::Train, 0,
                        cfg.training.eval_chunk);
                    DiagnosticsRow row;
                    row.iteration = t;
                    row.cos_tc = dec.cos_tc;
                    row.cos_tw = dec.cos_tw;
                    row.cos_cw = dec.cos_cw;
                    row.norm_c = dec.norm_correct;
                    row.norm_w = dec.norm_wrong;
                    row.norm_gap = dec.norm_gap;
                    if (diag.diffusion_samples > 0 && t % diag.diffusion_interval == 0) {
                        const auto est = estimate_diffusion(
                            net, data.train, cfg.training.loss_kind(), cfg.optimizer.lr,
                            diag.diffusion_batch, diag.diffusion_samples,
                            seed + static_cast<std::uint64_t>(t), cfg.training.eval_chunk);
                        row.trace_sigma = est.trace_sigma;
                        row.trace_d = est.trace_d;
                    }
                    out.rows.push_back(row);
                };

                const TrainResult res = detail::run_one(variant, data, seed, hooks);
                out.diverged = res.diverged;

                const std::string stem = "diagnostics_" + out.variant + "_rep" +
                                         std::to_string(rep);
                write_diagnostics_csv(detail::join(out_dir, stem + ".csv").string(), out.rows,
                                      hash);
                detail::write_smoothed_diagnostics(
                    detail::join(out_dir, stem + "_smoothed.csv").string(), out.rows,
                    diag.smooth_window, hash);
                outs[vi * reps + rep] = std::move(out);
            });
        }
    detail::run_parallel(tasks, workers);

    struct RunStats {
        std::optional<double> abs_cos_cw, cos_tc, cos_tw, norm_gap;
    };
    auto stats_of = [](const RunOut& out) {
        RunStats s;
        auto mean_of = [&](auto getter) -> std::optional<double> {
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto& row : out.rows) {
                const std::optional<double> v = getter(row);
                if (!v) continue;
                sum += *v;
                ++n;
            }
            if (n == 0) return std::nullopt;
            return sum / static_cast<double>(n);
        };
        s.abs_cos_cw = mean_of([](const DiagnosticsRow& r) -> std::optional<double> {
            if (!r.cos_cw) return std::nullopt;
            return std::abs(*r.cos_cw);
        });
        s.cos_tc = mean_of([](const DiagnosticsRow& r) { return r.cos_tc; });
        s.cos_tw = mean_of([](const DiagnosticsRow& r) { return r.cos_tw; });
        s.norm_gap = mean_of(
            [](const DiagnosticsRow& r) { return std::optional<double>(r.norm_gap); });
        return s;
    };

    CsvWriter runs(detail::join(out_dir, "diagnose_runs.csv").string(), kDiagnoseRunsHeader, hash);
    for (const auto& out : outs) {
        const RunStats s = stats_of(out);
        runs.row({out.variant, std::to_string(out.rep), std::to_string(out.seed),
                  out.diverged ? "diverged" : "ok", std::to_string(out.rows.size()),
                  fmt_opt(s.abs_cos_cw), fmt_opt(s.cos_tc), fmt_opt(s.cos_tw),
                  fmt_opt(s.norm_gap)});
    }
    runs.close();

    CsvWriter summary(detail::join(out_dir, "diagnose_summary.csv").string(),
                      kDiagnoseSummaryHeader, hash);
    for (const auto& [name, bn] : variants) {
        std::size_t failed = 0;
        for (const auto& out : outs)
            if (out.variant == name && out.diverged) ++failed;
        auto emit = [&](const char* metric, auto getter) {
            std::vector<double> xs;
            for (const auto& out : outs) {
                if (out.variant != name || out.diverged) continue;
                const std::optional<double> v = getter(stats_of(out));
                if (v) xs.push_back(*v);
            }
            const Aggregate a = aggregate(xs);
            const auto cells = detail::aggregate_cells(a);
            summary.row({name, metric, cells[0], cells[1], cells[2], std::to_string(a.n),
                         std::to_string(failed)});
        };
        emit("mean_abs_cos_cw", [](const RunStats& s) { return s.abs_cos_cw; });
        emit("mean_cos_tc", [](const RunStats& s) { return s.cos_tc; });
        emit("mean_cos_tw", [](const RunStats& s) { return s.cos_tw; });
        emit("mean_norm_gap", [](const RunStats& s) { return s.norm_gap; });
    }
    summary.close();

    detail::write_meta(out_dir, cfg, "diagnose", timer.seconds(),
                       {{"variants", variants.size()}, {"repetitions", reps}});
}

}  // namespace resetopt
