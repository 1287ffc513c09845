#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "resetopt/common.hpp"
#include "resetopt/csv.hpp"
#include "resetopt/dataset.hpp"
#include "resetopt/network.hpp"
#include "resetopt/params.hpp"
#include "resetopt/rng.hpp"

namespace resetopt {

enum class SelectionMetric { ValLoss, ValAccuracy };

/**
 * Reset policy. After every optimizer step the controller flips a coin with
 * probability `reset_probability`; if an armed checkpoint exists, the
 * parameters in the selected sections jump back to it (optionally displaced
 * by a fresh random direction of length `perturbation_eps`).
 *
 * The checkpoint follows the best validation point seen so far: it re-points
 * whenever a new best appears, and the patience trigger arms it after
 * `patience` stale iterations even without improvement. `fixed_checkpoint`
 * switches to the literal fixed variant: armed once (by patience or by
 * presetting), then never moved.
 */
struct ResetConfig {
    double reset_probability = 0.0;
    std::int64_t patience = 1000;
    std::int64_t validation_interval = 20;
    SectionMask section_mask{};
    double perturbation_eps = 0.0;
    SelectionMetric metric = SelectionMetric::ValLoss;
    bool fixed_checkpoint = false;

    void validate() const {
        require(reset_probability >= 0.0 && reset_probability <= 1.0,
                "ResetConfig: reset_probability must lie in [0,1]");
        require(patience > 0, "ResetConfig: patience must be positive");
        require(validation_interval > 0, "ResetConfig: validation_interval must be positive");
        require(perturbation_eps >= 0.0, "ResetConfig: perturbation_eps must be non-negative");
        if (reset_probability > 0.0)
            require(!section_mask.empty(), "ResetConfig: reset with an empty section mask");
    }
};

struct OptimizerConfig {
    double lr = 0.01;
    double momentum = 0.0;

    void validate() const {
        require(lr > 0.0, "OptimizerConfig: lr must be positive");
        require(momentum >= 0.0 && momentum < 1.0, "OptimizerConfig: momentum must lie in [0,1)");
    }
};

/** Heavy-ball SGD. With momentum 0 the buffer is bypassed entirely. */
struct SgdState {
    double lr = 0.01;
    double momentum = 0.0;
    std::vector<double> buffer;
};

inline void sgd_step(std::vector<double>& params, std::span<const double> grad, SgdState& opt) {
    if (params.size() != grad.size()) throw DimensionError("sgd_step: params/grad length mismatch");
    if (opt.momentum == 0.0) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= opt.lr * grad[i];
        return;
    }
    if (opt.buffer.empty()) opt.buffer.assign(params.size(), 0.0);
    if (opt.buffer.size() != params.size()) throw DimensionError("sgd_step: stale momentum buffer");
    for (std::size_t i = 0; i < params.size(); ++i) {
        opt.buffer[i] = opt.momentum * opt.buffer[i] + grad[i];
        params[i] -= opt.lr * opt.buffer[i];
    }
}

/**
 * Book-keeping for the checkpoint/best pair. `observe` consumes one
 * validation measurement; `maybe_reset` is called once per iteration after
 * the optimizer step. The coin is drawn on every call so that arming the
 * checkpoint earlier or later never shifts any other random stream.
 */
class ResetController {
  public:
    struct ValidationOutcome {
        bool improved = false;
        bool checkpoint_updated = false;
    };

    explicit ResetController(ResetConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const ResetConfig& config() const { return cfg_; }
    bool has_best() const { return has_best_; }
    const std::vector<double>& best() const { return best_; }
    double best_metric() const { return best_metric_; }
    std::int64_t best_iteration() const { return best_iteration_; }
    std::int64_t stale_iterations() const { return stale_; }
    const std::optional<std::vector<double>>& checkpoint() const { return checkpoint_; }

    // Injects an externally chosen checkpoint, armed from the first
    // iteration. Only meaningful for the fixed variant, where it will never
    // be re-pointed; rejected otherwise to avoid silent surprises.
    void preset_checkpoint(std::vector<double> point) {
        require(cfg_.fixed_checkpoint,
                "ResetController: preset checkpoint requires fixed_checkpoint");
        checkpoint_ = std::move(point);
    }

    ValidationOutcome observe(double metric, std::int64_t iteration,
                              const std::vector<double>& params) {
        if (!std::isfinite(metric)) throw NumericError("ResetController: non-finite metric");
        ValidationOutcome out;
        const bool improved = !has_best_ || better(metric, best_metric_);
        if (improved) {
            has_best_ = true;
            best_ = params;
            best_metric_ = metric;
            best_iteration_ = iteration;
            stale_ = 0;
            out.improved = true;
            if (!cfg_.fixed_checkpoint) {
                // The current parameters are the best ones, so the
                // checkpoint re-points here.
                checkpoint_ = best_;
                out.checkpoint_updated = true;
            }
        } else {
            stale_ += cfg_.validation_interval;
            if (stale_ >= cfg_.patience && !checkpoint_.has_value()) {
                checkpoint_ = best_;
                out.checkpoint_updated = true;
            }
        }
        return out;
    }

    /** One reset opportunity; returns whether a reset fired. */
    bool maybe_reset(ParamSet& params, rng::Stream& coin, rng::Stream& perturb) {
        const double u = coin.uniform();
        if (!checkpoint_.has_value() || u >= cfg_.reset_probability) return false;
        const auto& target = *checkpoint_;
        if (target.size() != params.total_dim())
            throw DimensionError("ResetController: checkpoint/params dimension mismatch");
        auto flat = params.flatten();
        const auto ranges = params.masked_ranges(cfg_.section_mask);
        if (cfg_.perturbation_eps == 0.0) {
            for (const auto& [off, len] : ranges)
                std::copy(target.begin() + off, target.begin() + off + len, flat.begin() + off);
        } else {
            // Fresh unit direction over the masked coordinates per reset.
            std::vector<double> dir(params.masked_dim(cfg_.section_mask));
            double norm2 = 0.0;
            for (auto& x : dir) {
                x = perturb.normal();
                norm2 += x * x;
            }
            const double scale = cfg_.perturbation_eps / std::sqrt(norm2);
            std::size_t k = 0;
            for (const auto& [off, len] : ranges)
                for (std::size_t i = 0; i < len; ++i, ++k)
                    flat[off + i] = target[off + i] + scale * dir[k];
        }
        params.assign(flat);
        return true;
    }

  private:
    bool better(double metric, double incumbent) const {
        // Strict comparison: ties keep the earlier best.
        return cfg_.metric == SelectionMetric::ValLoss ? metric < incumbent : metric > incumbent;
    }

    ResetConfig cfg_;
    bool has_best_ = false;
    std::vector<double> best_;
    double best_metric_ = std::numeric_limits<double>::quiet_NaN();
    std::int64_t best_iteration_ = -1;
    std::int64_t stale_ = 0;
    std::optional<std::vector<double>> checkpoint_;
};

/** Fraction of corrupted training samples whose prediction equals the
 * original (pre-corruption) label; absent when nothing is corrupted. */
inline std::optional<double> memorization_fraction(Network& net, const LabeledDataset& ds,
                                                   std::size_t chunk = 256) {
    const auto idx = ds.corrupted_indices();
    if (idx.empty()) return std::nullopt;
    const Tensor feats = ds.gather(idx);
    const auto preds = net.predict(feats, chunk);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < idx.size(); ++i)
        if (preds[i] == ds.true_labels[idx[i]]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

/** (value - baseline) / baseline; the baseline must be nonzero. */
inline double relative_difference(double value, double baseline) {
    if (baseline == 0.0) throw ArgumentError("relative_difference: zero baseline");
    return (value - baseline) / baseline;
}

// --- training loop ---------------------------------------------------------

struct TrainSetup {
    std::size_t batch_size = 16;
    std::int64_t total_iters = 1000;
    std::uint64_t seed = 1;
    SamplingMode sampling = SamplingMode::WithReplacement;
    LossKind loss = LossKind::CrossEntropy;
    std::size_t eval_chunk = 256;

    void validate() const {
        require(batch_size > 0, "TrainSetup: batch_size must be positive");
        require(total_iters > 0, "TrainSetup: total_iters must be positive");
    }
};

struct MetricsRow {
    std::int64_t iteration = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_acc = 0;
    double test_acc = 0;
    std::optional<double> mem_frac;
    bool reset_event = false;
    bool ckpt_updated = false;
};

struct TrainResult {
    std::vector<double> best_params;   // params at the best validation point
    std::vector<double> final_params;  // params after the last iteration run
    std::vector<MetricsRow> metrics;
    bool diverged = false;
    std::int64_t best_iteration = -1;
    double best_val_loss = std::numeric_limits<double>::quiet_NaN();
    double best_val_acc = std::numeric_limits<double>::quiet_NaN();
    double test_acc_at_best = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> final_mem_frac;
    std::int64_t reset_count = 0;
    std::map<std::int64_t, std::vector<double>> captured;  // snapshots at requested iterations
};

struct TrainHooks {
    std::vector<std::int64_t> capture_at;                    // post-step snapshot iterations
    std::optional<std::vector<double>> preset_checkpoint;    // fixed-variant injection
    std::function<void(std::int64_t, Network&)> on_validation;
};

// Per-iteration dropout seeds, derived so that the whole dropout stream is a
// pure function of (seed, iteration).
inline std::uint64_t iteration_dropout_seed(std::uint64_t seed, std::int64_t iteration) {
    return rng::Stream(seed, rng::hash_name("dropout_iter"),
                       static_cast<std::uint64_t>(iteration))
        .next_u64();
}

/**
 * SGD on the noisy training labels with checkpoint resetting. Validation
 * (and one metrics row) happens every `validation_interval` iterations; the
 * reset coin is flipped after every step. Separate named random streams
 * drive initialization, batch sampling, dropout, the reset coin, and the
 * perturbation direction, so the whole run is a deterministic function of
 * the seed and any single feature can be toggled without shifting the rest.
 *
 * A non-finite loss or gradient aborts the run, keeping metrics collected so
 * far and flagging the result as diverged. The momentum buffer deliberately
 * survives resets; only the parameters jump.
 */
inline TrainResult train(Network& net, const LabeledDataset& train_ds,
                         const LabeledDataset& val_ds, const LabeledDataset& test_ds,
                         const ResetConfig& reset, const OptimizerConfig& opt,
                         const TrainSetup& setup, const TrainHooks& hooks = {}) {
    reset.validate();
    opt.validate();
    setup.validate();
    train_ds.check();
    val_ds.check();
    test_ds.check();

    net.init_params(setup.seed);
    BatchSampler sampler(train_ds.size(), setup.batch_size, setup.seed, setup.sampling);
    auto coin = rng::derive(setup.seed, "reset_coin");
    auto perturb = rng::derive(setup.seed, "reset_perturb");
    ResetController controller(reset);
    if (hooks.preset_checkpoint) controller.preset_checkpoint(*hooks.preset_checkpoint);
    SgdState sgd{opt.lr, opt.momentum, {}};
    const std::set<std::int64_t> capture(hooks.capture_at.begin(), hooks.capture_at.end());

    TrainResult result;
    double interval_loss = 0.0;
    std::int64_t interval_n = 0;
    bool interval_reset = false;

    for (std::int64_t t = 1; t <= setup.total_iters; ++t) {
        const auto idx = sampler.next();
        const Tensor batch = train_ds.gather(idx);
        const auto labels = train_ds.gather_labels(idx, true);

        LossGrad lg;
        bool finite = true;
        try {
            lg = net.loss_and_grad(batch, labels, setup.loss, Mode::Train,
                                   iteration_dropout_seed(setup.seed, t));
            finite = std::isfinite(lg.loss) && all_finite(lg.grad);
        } catch (const NumericError&) {
            finite = false;
        }
        if (!finite) {
            result.diverged = true;
            break;
        }

        auto flat = net.flat();
        sgd_step(flat, lg.grad, sgd);
        net.set_flat(flat);

        if (controller.maybe_reset(net.params(), coin, perturb)) {
            ++result.reset_count;
            interval_reset = true;
        }

        if (capture.count(t)) result.captured[t] = net.flat();

        interval_loss += lg.loss;
        ++interval_n;

        if (t % reset.validation_interval == 0) {
            const auto val = net.evaluate(val_ds.features, val_ds.noisy_labels, setup.loss,
                                          setup.eval_chunk);
            const auto test = net.evaluate(test_ds.features, test_ds.true_labels, setup.loss,
                                           setup.eval_chunk);
            const auto mem = memorization_fraction(net, train_ds, setup.eval_chunk);
            const double metric =
                reset.metric == SelectionMetric::ValLoss ? val.loss : val.accuracy;
            const auto outcome = controller.observe(metric, t, net.flat());
            if (outcome.improved) {
                result.best_iteration = t;
                result.best_val_loss = val.loss;
                result.best_val_acc = val.accuracy;
                result.test_acc_at_best = test.accuracy;
            }
            MetricsRow row;
            row.iteration = t;
            row.train_loss = interval_loss / static_cast<double>(interval_n);
            row.val_loss = val.loss;
            row.val_acc = val.accuracy;
            row.test_acc = test.accuracy;
            row.mem_frac = mem;
            row.reset_event = interval_reset;
            row.ckpt_updated = outcome.checkpoint_updated;
            result.metrics.push_back(row);
            result.final_mem_frac = mem;
            interval_loss = 0.0;
            interval_n = 0;
            interval_reset = false;
            if (hooks.on_validation) hooks.on_validation(t, net);
        }
    }

    result.final_params = net.flat();
    result.best_params = controller.has_best() ? controller.best() : result.final_params;
    return result;
}

// --- metrics table io ------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "iteration,train_loss,val_loss,val_acc,test_acc,mem_frac,reset_event,ckpt_updated";

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                              const std::string& config_hash = {}) {
    CsvWriter writer(path, kMetricsHeader, config_hash);
    for (const auto& r : rows) {
        writer.row({std::to_string(r.iteration), fmt_double(r.train_loss), fmt_double(r.val_loss),
                    fmt_double(r.val_acc), fmt_double(r.test_acc), fmt_opt(r.mem_frac),
                    r.reset_event ? "1" : "0", r.ckpt_updated ? "1" : "0"});
    }
    writer.close();
}

}  // namespace resetopt
