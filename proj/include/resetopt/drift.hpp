#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resetopt/common.hpp"
#include "resetopt/csv.hpp"
#include "resetopt/dataset.hpp"
#include "resetopt/network.hpp"
#include "resetopt/rng.hpp"

namespace resetopt {

/** a.b / (|a||b|), clamped to [-1,1]; absent when either vector is zero. */
inline std::optional<double> cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/**
 * Mean training gradient split by the corruption mask. The parts are scaled
 * subset means, g_correct = (n_correct/n)·mean_correct and likewise for the
 * wrong part, so g_correct + g_wrong reproduces g_total; the total is still
 * evaluated independently over the full sample order, making the additivity
 * identity a real check rather than a tautology. Both parts use the noisy
 * labels (a wrongly labeled sample is scored against its corrupted label).
 */
struct DriftDecomposition {
    std::vector<double> g_total, g_correct, g_wrong;
    std::size_t n_total = 0, n_correct = 0, n_wrong = 0;
    std::optional<double> cos_tc, cos_tw, cos_cw;
    double norm_total = 0.0, norm_correct = 0.0, norm_wrong = 0.0;
    double norm_gap = 0.0;       // norm_wrong - norm_correct
    double tau_effective = 0.0;  // empirical wrong fraction from the mask
};

struct DiffusionEstimate {
    double trace_sigma = 0.0;  // summed per-coordinate single-sample gradient variance
    double trace_d = 0.0;      // learning_rate * trace_sigma / (2 * batch_size)
    std::size_t batch_size = 0;
    double learning_rate = 0.0;
    std::size_t num_samples_used = 0;
};

namespace detail {

// Sum of per-sample loss gradients over the given rows, accumulated chunk by
// chunk in index order. Each chunk contributes mean * chunk_size.
inline std::vector<double> gradient_sum(Network& net, const LabeledDataset& ds,
                                        std::span<const std::size_t> idx, LossKind loss, Mode mode,
                                        std::uint64_t dropout_seed, std::size_t chunk) {
    std::vector<double> sum(net.dim(), 0.0);
    for (std::size_t begin = 0; begin < idx.size(); begin += chunk) {
        const std::size_t n = std::min(chunk, idx.size() - begin);
        const std::span<const std::size_t> part = idx.subspan(begin, n);
        const Tensor feats = ds.gather(part);
        const auto labels = ds.gather_labels(part, true);
        const auto lg = net.loss_and_grad(feats, labels, loss, mode, dropout_seed);
        const double w = static_cast<double>(n);
        for (std::size_t c = 0; c < sum.size(); ++c) sum[c] += lg.grad[c] * w;
    }
    return sum;
}

inline void finish_decomposition(DriftDecomposition& d) {
    d.cos_tc = cosine(d.g_total, d.g_correct);
    d.cos_tw = cosine(d.g_total, d.g_wrong);
    d.cos_cw = cosine(d.g_correct, d.g_wrong);
    d.norm_total = l2_norm(d.g_total);
    d.norm_correct = l2_norm(d.g_correct);
    d.norm_wrong = l2_norm(d.g_wrong);
    d.norm_gap = d.norm_wrong - d.norm_correct;
    d.tau_effective = static_cast<double>(d.n_wrong) / static_cast<double>(d.n_total);
}

}  // namespace detail

/**
 * Decomposes the full-dataset mean gradient at the current parameters.
 *
 * Eval mode (the default) probes the deterministic drift: dropout off,
 * running normalization statistics, so per-sample losses are independent of
 * batch composition and additivity holds to rounding error regardless of the
 * chunk size. Train mode gives strict parity with the training loss; with
 * batch-coupled normalization its chunk statistics differ between the three
 * passes, so additivity is only approximate there. Alignment between the
 * clean-subset and corrupted-subset gradients is a train-mode question:
 * frozen statistics turn normalization into a fixed affine map, and the
 * geometry it imposes on those two components never shows up.
 */
inline DriftDecomposition decompose_dataset_gradient(Network& net, const LabeledDataset& ds,
                                                     LossKind loss, Mode mode = Mode::Eval,
                                                     std::uint64_t dropout_seed = 0,
                                                     std::size_t chunk = 256) {
    ds.check();
    require(ds.size() > 0, "decompose_dataset_gradient: empty dataset");
    require(chunk > 0, "decompose_dataset_gradient: chunk must be positive");

    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    std::vector<std::size_t> correct, wrong;
    for (std::size_t i = 0; i < ds.size(); ++i)
        (ds.corrupted[i] ? wrong : correct).push_back(i);

    // Train mode updates running statistics as a side effect; run it on a
    // scratch copy so diagnostics never perturb the network under study.
    std::optional<Network> scratch;
    if (mode == Mode::Train) scratch.emplace(net);
    Network& exec_net = scratch ? *scratch : net;

    DriftDecomposition d;
    d.n_total = ds.size();
    d.n_correct = correct.size();
    d.n_wrong = wrong.size();
    const double n = static_cast<double>(ds.size());

    d.g_total = detail::gradient_sum(exec_net, ds, all, loss, mode, dropout_seed, chunk);
    d.g_correct = detail::gradient_sum(exec_net, ds, correct, loss, mode, dropout_seed, chunk);
    d.g_wrong = detail::gradient_sum(exec_net, ds, wrong, loss, mode, dropout_seed, chunk);
    for (auto& x : d.g_total) x /= n;
    for (auto& x : d.g_correct) x /= n;
    for (auto& x : d.g_wrong) x /= n;
    if (correct.empty()) d.g_correct.assign(net.dim(), 0.0);
    if (wrong.empty()) d.g_wrong.assign(net.dim(), 0.0);

    detail::finish_decomposition(d);
    return d;
}

namespace detail {

inline Tensor gather_rows(const Tensor& batch, std::span<const std::size_t> idx) {
    std::vector<std::size_t> shape = batch.shape;
    shape[0] = idx.size();
    Tensor out(shape);
    const std::size_t stride = batch.size() / batch.shape[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(batch.data.begin() + idx[i] * stride, batch.data.begin() + (idx[i] + 1) * stride,
                  out.data.begin() + i * stride);
    return out;
}

}  // namespace detail

/** Same split for one minibatch: parts carry B_subset/B weights, so the two
 * parts again sum to the batch-mean gradient. */
inline DriftDecomposition decompose_minibatch_gradient(Network& net, const Tensor& batch,
                                                       std::span<const int> labels,
                                                       std::span<const std::uint8_t> corrupted,
                                                       LossKind loss, Mode mode = Mode::Eval,
                                                       std::uint64_t dropout_seed = 0) {
    const std::size_t b = batch.shape.empty() ? 0 : batch.shape[0];
    require(b > 0, "decompose_minibatch_gradient: empty batch");
    if (labels.size() != b || corrupted.size() != b)
        throw DimensionError("decompose_minibatch_gradient: labels/mask length mismatch");

    std::vector<std::size_t> correct, wrong;
    for (std::size_t i = 0; i < b; ++i) (corrupted[i] ? wrong : correct).push_back(i);

    std::optional<Network> scratch;
    if (mode == Mode::Train) scratch.emplace(net);
    Network& exec_net = scratch ? *scratch : net;

    DriftDecomposition d;
    d.n_total = b;
    d.n_correct = correct.size();
    d.n_wrong = wrong.size();

    auto part_grad = [&](std::span<const std::size_t> idx) {
        if (idx.empty()) return std::vector<double>(net.dim(), 0.0);
        const Tensor feats = detail::gather_rows(batch, idx);
        std::vector<int> sub(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) sub[i] = labels[idx[i]];
        auto g = exec_net.loss_and_grad(feats, sub, loss, mode, dropout_seed).grad;
        const double w = static_cast<double>(idx.size()) / static_cast<double>(b);
        for (auto& x : g) x *= w;
        return g;
    };

    d.g_total = exec_net.loss_and_grad(batch, labels, loss, mode, dropout_seed).grad;
    d.g_correct = part_grad(correct);
    d.g_wrong = part_grad(wrong);

    detail::finish_decomposition(d);
    return d;
}

/**
 * Estimates the SGD noise scale at fixed parameters: trace_sigma is the
 * summed per-coordinate variance (unbiased) of single-sample gradients over
 * `sample_count` draws with replacement, and trace_d applies the
 * learning_rate/(2·batch_size) scaling. The batch size enters only through
 * that final scaling, so doubling it exactly halves trace_d.
 */
inline DiffusionEstimate estimate_diffusion(Network& net, const LabeledDataset& ds, LossKind loss,
                                            double learning_rate, std::size_t batch_size,
                                            std::size_t sample_count, std::uint64_t seed,
                                            std::size_t chunk = 256) {
    ds.check();
    require(ds.size() > 0, "estimate_diffusion: empty dataset");
    require(sample_count >= 2, "estimate_diffusion: sample_count must be at least 2");
    require(batch_size > 0, "estimate_diffusion: batch_size must be positive");
    require(learning_rate > 0.0, "estimate_diffusion: learning_rate must be positive");
    require(chunk > 0, "estimate_diffusion: chunk must be positive");

    auto stream = rng::derive(seed, "diffusion");
    std::vector<std::size_t> idx(sample_count);
    for (auto& i : idx) i = static_cast<std::size_t>(stream.below(ds.size()));

    const std::size_t dim = net.dim();
    std::vector<double> mean(dim, 0.0), m2(dim, 0.0);
    std::size_t seen = 0;
    for (std::size_t begin = 0; begin < sample_count; begin += chunk) {
        const std::size_t n = std::min(chunk, sample_count - begin);
        const std::span<const std::size_t> part(idx.data() + begin, n);
        const Tensor feats = ds.gather(part);
        const auto labels = ds.gather_labels(part, true);
        const auto grads = net.per_sample_grads(feats, labels, loss, Mode::Eval);
        for (const auto& g : grads) {
            ++seen;
            const double inv = 1.0 / static_cast<double>(seen);
            for (std::size_t c = 0; c < dim; ++c) {
                const double delta = g[c] - mean[c];
                mean[c] += delta * inv;
                m2[c] += delta * (g[c] - mean[c]);
            }
        }
    }

    DiffusionEstimate est;
    est.batch_size = batch_size;
    est.learning_rate = learning_rate;
    est.num_samples_used = sample_count;
    double trace = 0.0;
    const double denom = static_cast<double>(sample_count - 1);
    for (std::size_t c = 0; c < dim; ++c) trace += m2[c] / denom;
    est.trace_sigma = trace;
    est.trace_d = learning_rate * trace / (2.0 * static_cast<double>(batch_size));
    return est;
}

// --- smoothing -------------------------------------------------------------

struct SeriesPoint {
    double iteration = 0.0;
    double value = 0.0;
};

/**
 * Re-samples a series onto a log-spaced iteration grid with as many points
 * as the input (linear interpolation in log-iteration), then applies a
 * centered boxcar over `window` grid points. Even windows are widened by one
 * to stay symmetric; the boxcar truncates at the edges. Iterations must be
 * positive and strictly increasing.
 */
inline std::vector<SeriesPoint> log_window_smooth(std::span<const SeriesPoint> series,
                                                  std::size_t window) {
    require(window >= 1, "log_window_smooth: window must be at least 1");
    if (series.empty()) return {};
    for (std::size_t i = 0; i < series.size(); ++i) {
        require(series[i].iteration > 0.0, "log_window_smooth: iterations must be positive");
        if (i > 0)
            require(series[i].iteration > series[i - 1].iteration,
                    "log_window_smooth: iterations must be strictly increasing");
    }
    const std::size_t n = series.size();
    if (n == 1) return {series[0]};

    std::vector<double> logt(n);
    for (std::size_t i = 0; i < n; ++i) logt[i] = std::log(series[i].iteration);

    std::vector<SeriesPoint> grid(n);
    const double lo = logt.front(), hi = logt.back();
    std::size_t seg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
        while (seg + 2 < n && logt[seg + 1] <= g) ++seg;
        const double t0 = logt[seg], t1 = logt[seg + 1];
        const double w = (g - t0) / (t1 - t0);
        grid[i].iteration = std::exp(g);
        grid[i].value = (1.0 - w) * series[seg].value + w * series[seg + 1].value;
    }

    const std::size_t half = window / 2;
    std::vector<SeriesPoint> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t a = i >= half ? i - half : 0;
        const std::size_t b = std::min(n - 1, i + half);
        double s = 0.0;
        for (std::size_t j = a; j <= b; ++j) s += grid[j].value;
        out[i].iteration = grid[i].iteration;
        out[i].value = s / static_cast<double>(b - a + 1);
    }
    return out;
}

// --- diagnostics table io --------------------------------------------------

struct DiagnosticsRow {
    std::int64_t iteration = 0;
    std::optional<double> cos_tc, cos_tw, cos_cw;
    double norm_c = 0.0, norm_w = 0.0, norm_gap = 0.0;
    std::optional<double> trace_sigma, trace_d;
};

inline constexpr const char* kDiagnosticsHeader =
    "iteration,cos_tc,cos_tw,cos_cw,norm_c,norm_w,norm_gap,trace_sigma,trace_d";

inline void write_diagnostics_csv(const std::string& path, const std::vector<DiagnosticsRow>& rows,
                                  const std::string& config_hash = {}) {
    CsvWriter writer(path, kDiagnosticsHeader, config_hash);
    for (const auto& r : rows) {
        writer.row({std::to_string(r.iteration), fmt_opt(r.cos_tc), fmt_opt(r.cos_tw),
                    fmt_opt(r.cos_cw), fmt_double(r.norm_c), fmt_double(r.norm_w),
                    fmt_double(r.norm_gap), fmt_opt(r.trace_sigma), fmt_opt(r.trace_d)});
    }
    writer.close();
}

}  // namespace resetopt
