#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "resetopt/dataset.hpp"
#include "resetopt/drift.hpp"
#include "resetopt/network.hpp"
#include "resetopt/train.hpp"

using namespace resetopt;

namespace {

double max_abs_gap(const std::vector<double>& total, const std::vector<double>& a,
                   const std::vector<double>& b) {
    double gap = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < total.size(); ++i) {
        gap = std::max(gap, std::abs(total[i] - a[i] - b[i]));
        scale = std::max(scale, std::abs(total[i]));
    }
    return gap / std::max(1.0, scale);
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < order.size(); ++i) r[order[i]] = static_cast<double>(i);
        return r;
    };
    const auto rx = ranks(xs), ry = ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double num = 0, dx = 0, dy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    return num / std::sqrt(dx * dy);
}

}  // namespace

TEST_CASE("cosine of standard cases") {
    const std::vector<double> ex = {1.0, 0.0}, ey = {0.0, 1.0};
    const std::vector<double> ones = {1.0, 1.0}, twos = {2.0, 2.0};
    const std::vector<double> neg = {-1.0, 0.0}, zero = {0.0, 0.0};
    REQUIRE(cosine(ex, ey).value() == 0.0);
    REQUIRE(std::abs(cosine(ones, twos).value() - 1.0) < 1e-15);
    REQUIRE(std::abs(cosine(ex, neg).value() + 1.0) < 1e-15);
    REQUIRE_FALSE(cosine(ex, zero).has_value());
    REQUIRE_FALSE(cosine(zero, zero).has_value());
    const std::vector<double> three = {1.0, 2.0, 3.0};
    REQUIRE_THROWS_AS(cosine(ex, three), DimensionError);
}

TEST_CASE("clean data makes the wrong part vanish") {
    auto ds = make_blobs(3, 40, 6, 4.0, 101);
    Network net(fcn_spec({6}, 10, 3, false));
    net.init_params(3);
    const auto d = decompose_dataset_gradient(net, ds, LossKind::CrossEntropy);
    REQUIRE(d.n_wrong == 0);
    REQUIRE(d.tau_effective == 0.0);
    for (double x : d.g_wrong) REQUIRE(x == 0.0);
    REQUIRE_FALSE(d.cos_tw.has_value());
    REQUIRE_FALSE(d.cos_cw.has_value());
    REQUIRE(d.cos_tc.has_value());
    REQUIRE(std::abs(*d.cos_tc - 1.0) < 1e-12);
    REQUIRE(d.norm_wrong == 0.0);
    REQUIRE(d.norm_gap == -d.norm_correct);

    // The total must match a direct single-pass gradient of the mean loss.
    const auto lg = net.loss_and_grad(ds.features, ds.noisy_labels, LossKind::CrossEntropy,
                                      Mode::Eval);
    REQUIRE(max_abs_gap(d.g_total, lg.grad, std::vector<double>(lg.grad.size(), 0.0)) < 1e-12);
}

TEST_CASE("dataset decomposition is additive to rounding error") {
    auto clean = make_blobs(4, 60, 8, 4.0, 102);
    auto ds = corrupt(clean, NoiseSpec::symmetric(0.4), 103);
    Network net(fcn_spec({8}, 16, 4, true));
    net.init_params(5);
    const auto d = decompose_dataset_gradient(net, ds, LossKind::CrossEntropy);
    REQUIRE(max_abs_gap(d.g_total, d.g_correct, d.g_wrong) < 1e-12);
    REQUIRE(d.n_correct + d.n_wrong == d.n_total);
    REQUIRE(d.tau_effective ==
            static_cast<double>(d.n_wrong) / static_cast<double>(d.n_total));

    // Chunk size must not change anything but rounding.
    const auto d2 = decompose_dataset_gradient(net, ds, LossKind::CrossEntropy, Mode::Eval, 0, 37);
    REQUIRE(max_abs_gap(d2.g_total, d2.g_correct, d2.g_wrong) < 1e-12);
    for (std::size_t i = 0; i < d.g_total.size(); ++i)
        REQUIRE(std::abs(d.g_total[i] - d2.g_total[i]) < 1e-12);

    // Stored cosines agree with recomputation from the stored vectors.
    REQUIRE(*d.cos_tc == cosine(d.g_total, d.g_correct).value());
    REQUIRE(*d.cos_tw == cosine(d.g_total, d.g_wrong).value());
    REQUIRE(*d.cos_cw == cosine(d.g_correct, d.g_wrong).value());
    REQUIRE(d.norm_gap == d.norm_wrong - d.norm_correct);
}

TEST_CASE("decomposition works for the absolute-error loss as well") {
    auto clean = make_blobs(3, 50, 6, 4.0, 104);
    auto ds = corrupt(clean, NoiseSpec::symmetric(0.3), 105);
    Network net(fcn_spec({6}, 12, 3, false));
    net.init_params(7);
    const auto d = decompose_dataset_gradient(net, ds, LossKind::MeanAbsoluteError);
    REQUIRE(max_abs_gap(d.g_total, d.g_correct, d.g_wrong) < 1e-12);
    REQUIRE(d.cos_cw.has_value());
}

TEST_CASE("train-mode diagnostics leave the network untouched") {
    auto clean = make_blobs(3, 30, 6, 4.0, 106);
    auto ds = corrupt(clean, NoiseSpec::symmetric(0.3), 107);
    Network net(fcn_spec({6}, 10, 3, true));
    net.init_params(9);
    const auto before = net.forward(ds.features, Mode::Eval);
    decompose_dataset_gradient(net, ds, LossKind::CrossEntropy, Mode::Train, 123);
    const auto after = net.forward(ds.features, Mode::Eval);
    REQUIRE(before.data == after.data);
}

TEST_CASE("minibatch decomposition handles the boundary cases") {
    auto clean = make_blobs(3, 40, 6, 4.0, 108);
    auto ds = corrupt(clean, NoiseSpec::symmetric(0.4), 109);
    Network net(fcn_spec({6}, 10, 3, false));
    net.init_params(11);

    SECTION("entirely correct batch") {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < ds.size() && idx.size() < 8; ++i)
            if (!ds.corrupted[i]) idx.push_back(i);
        const auto batch = ds.gather(idx);
        const auto labels = ds.gather_labels(idx, true);
        std::vector<std::uint8_t> mask(idx.size(), 0);
        const auto d =
            decompose_minibatch_gradient(net, batch, labels, mask, LossKind::CrossEntropy);
        for (double x : d.g_wrong) REQUIRE(x == 0.0);
        REQUIRE_FALSE(d.cos_tw.has_value());
        REQUIRE(d.g_total == d.g_correct);
    }

    SECTION("single corrupted sample") {
        std::size_t pick = 0;
        while (!ds.corrupted[pick]) ++pick;
        const std::vector<std::size_t> idx = {pick};
        const auto batch = ds.gather(idx);
        const auto labels = ds.gather_labels(idx, true);
        const std::vector<std::uint8_t> mask = {1};
        const auto d =
            decompose_minibatch_gradient(net, batch, labels, mask, LossKind::CrossEntropy);
        REQUIRE(d.g_total == d.g_wrong);
        for (double x : d.g_correct) REQUIRE(x == 0.0);
        REQUIRE(d.tau_effective == 1.0);
    }

    SECTION("mixed batch stays additive") {
        std::vector<std::size_t> idx(16);
        std::iota(idx.begin(), idx.end(), 0);
        const auto batch = ds.gather(idx);
        const auto labels = ds.gather_labels(idx, true);
        std::vector<std::uint8_t> mask(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) mask[i] = ds.corrupted[idx[i]];
        const auto d =
            decompose_minibatch_gradient(net, batch, labels, mask, LossKind::CrossEntropy);
        REQUIRE(max_abs_gap(d.g_total, d.g_correct, d.g_wrong) < 1e-12);
    }
}

TEST_CASE("minibatch parts are unbiased for the dataset parts") {
    auto clean = make_blobs(3, 60, 6, 4.0, 110);
    auto ds = corrupt(clean, NoiseSpec::symmetric(0.3), 111);
    Network net(fcn_spec({6}, 10, 3, false));
    net.init_params(13);
    const auto ref = decompose_dataset_gradient(net, ds, LossKind::CrossEntropy);

    // Project each sampled minibatch part onto the dataset part's direction;
    // with replacement sampling the projection mean must sit within three
    // standard errors of the dataset part's norm.
    std::vector<double> uc(ref.g_correct), uw(ref.g_wrong);
    const double nc = l2_norm(uc), nw = l2_norm(uw);
    for (auto& x : uc) x /= nc;
    for (auto& x : uw) x /= nw;

    const std::size_t batches = 1500, B = 16;
    BatchSampler sampler(ds.size(), B, 222, SamplingMode::WithReplacement);
    double sum_c = 0, sum2_c = 0, sum_w = 0, sum2_w = 0;
    for (std::size_t k = 0; k < batches; ++k) {
        const auto idx = sampler.next();
        const auto batch = ds.gather(idx);
        const auto labels = ds.gather_labels(idx, true);
        std::vector<std::uint8_t> mask(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) mask[i] = ds.corrupted[idx[i]];
        const auto d =
            decompose_minibatch_gradient(net, batch, labels, mask, LossKind::CrossEntropy);
        double pc = 0, pw = 0;
        for (std::size_t i = 0; i < uc.size(); ++i) {
            pc += d.g_correct[i] * uc[i];
            pw += d.g_wrong[i] * uw[i];
        }
        sum_c += pc;
        sum2_c += pc * pc;
        sum_w += pw;
        sum2_w += pw * pw;
    }
    const double n = static_cast<double>(batches);
    const double mean_c = sum_c / n, mean_w = sum_w / n;
    const double se_c = std::sqrt((sum2_c / n - mean_c * mean_c) / (n - 1));
    const double se_w = std::sqrt((sum2_w / n - mean_w * mean_w) / (n - 1));
    REQUIRE(std::abs(mean_c - nc) < 3.0 * se_c);
    REQUIRE(std::abs(mean_w - nw) < 3.0 * se_w);
}

TEST_CASE("more corruption drags the total toward the wrong part") {
    auto clean = make_blobs(4, 50, 8, 4.0, 112);
    auto [tr, val] = split(clean, 0.2, 1);

    // A few hundred plain SGD iterations on clean labels give a parameter
    // point past early learning.
    TrainSetup setup;
    setup.batch_size = 16;
    setup.total_iters = 400;
    setup.seed = 3;
    Network net(fcn_spec({8}, 16, 4, false));
    train(net, tr, val, val, ResetConfig{}, OptimizerConfig{0.05, 0.9}, setup);

    std::vector<double> taus = {0.2, 0.4, 0.6}, cs;
    for (double tau : taus) {
        auto noisy = corrupt(tr, NoiseSpec::symmetric(tau), 999);
        const auto d = decompose_dataset_gradient(net, noisy, LossKind::CrossEntropy);
        REQUIRE(d.cos_tw.has_value());
        cs.push_back(*d.cos_tw);
    }
    REQUIRE(spearman(taus, cs) > 0.0);
}

TEST_CASE("diffusion trace vanishes for identical samples") {
    Tensor row({1, 4});
    row.data = {0.3, -0.2, 0.5, 0.1};
    LabeledDataset ds;
    ds.features = Tensor({20, 4});
    for (std::size_t i = 0; i < 20; ++i)
        std::copy(row.data.begin(), row.data.end(), ds.features.data.begin() + i * 4);
    ds.true_labels.assign(20, 1);
    ds.noisy_labels.assign(20, 1);
    ds.corrupted.assign(20, 0);
    ds.num_classes = 3;

    Network net(fcn_spec({4}, 6, 3, false));
    net.init_params(17);
    const auto est = estimate_diffusion(net, ds, LossKind::CrossEntropy, 0.1, 8, 50, 1);
    REQUIRE(est.trace_sigma == 0.0);
    REQUIRE(est.trace_d == 0.0);
}

TEST_CASE("doubling the batch size halves the diffusion trace exactly") {
    auto clean = make_blobs(3, 40, 6, 4.0, 113);
    auto ds = corrupt(clean, NoiseSpec::symmetric(0.3), 114);
    Network net(fcn_spec({6}, 10, 3, false));
    net.init_params(19);
    const auto a = estimate_diffusion(net, ds, LossKind::CrossEntropy, 0.1, 16, 400, 7);
    const auto b = estimate_diffusion(net, ds, LossKind::CrossEntropy, 0.1, 32, 400, 7);
    REQUIRE(a.trace_sigma == b.trace_sigma);
    REQUIRE(b.trace_d == a.trace_d / 2.0);
    REQUIRE_THROWS_AS(estimate_diffusion(net, ds, LossKind::CrossEntropy, 0.1, 16, 1, 7),
                      ArgumentError);
}

TEST_CASE("diffusion trace predicts the minibatch gradient noise") {
    auto clean = make_blobs(3, 100, 6, 4.0, 115);
    auto ds = corrupt(clean, NoiseSpec::symmetric(0.3), 116);
    Network net(fcn_spec({6}, 8, 3, false));
    net.init_params(23);
    const double eta = 0.1;
    const std::size_t B = 8;

    const auto est = estimate_diffusion(net, ds, LossKind::CrossEntropy, eta, B, 6000, 31);

    // Empirical counterpart: summed per-coordinate variance of minibatch
    // gradients, scaled by eta/2. With replacement sampling this estimates
    // eta * trace_sigma / (2B).
    const std::size_t batches = 4000;
    BatchSampler sampler(ds.size(), B, 717, SamplingMode::WithReplacement);
    const std::size_t dim = net.dim();
    std::vector<double> mean(dim, 0.0), m2(dim, 0.0);
    for (std::size_t k = 0; k < batches; ++k) {
        const auto idx = sampler.next();
        const auto batch = ds.gather(idx);
        const auto labels = ds.gather_labels(idx, true);
        const auto lg = net.loss_and_grad(batch, labels, LossKind::CrossEntropy, Mode::Eval);
        const double inv = 1.0 / static_cast<double>(k + 1);
        for (std::size_t c = 0; c < dim; ++c) {
            const double delta = lg.grad[c] - mean[c];
            mean[c] += delta * inv;
            m2[c] += delta * (lg.grad[c] - mean[c]);
        }
    }
    double trace_batch = 0.0;
    for (std::size_t c = 0; c < dim; ++c) trace_batch += m2[c] / static_cast<double>(batches - 1);
    const double empirical = eta * trace_batch / 2.0;
    REQUIRE(std::abs(empirical - est.trace_d) / est.trace_d < 0.1);
}

TEST_CASE("log-window smoothing basics") {
    REQUIRE(log_window_smooth({}, 5).empty());

    std::vector<SeriesPoint> flat;
    for (int i = 1; i <= 30; ++i) flat.push_back({static_cast<double>(i * 20), 2.5});
    const auto s = log_window_smooth(flat, 7);
    REQUIRE(s.size() == flat.size());
    for (const auto& p : s) REQUIRE(std::abs(p.value - 2.5) < 1e-12);
    REQUIRE(std::abs(s.front().iteration - 20.0) < 1e-9);
    REQUIRE(std::abs(s.back().iteration - 600.0) < 1e-9);

    std::vector<SeriesPoint> bad = {{10.0, 1.0}, {5.0, 2.0}};
    REQUIRE_THROWS_AS(log_window_smooth(bad, 3), ArgumentError);
    REQUIRE_THROWS_AS(log_window_smooth(flat, 0), ArgumentError);
}

TEST_CASE("window of one reproduces grid samples of the input") {
    // Input already log-spaced: the grid then coincides with the input
    // points and a width-one window changes nothing.
    std::vector<SeriesPoint> series;
    for (int i = 0; i < 25; ++i) series.push_back({std::exp(0.2 * i), 3.0 + 0.1 * i});
    const auto s = log_window_smooth(series, 1);
    for (std::size_t i = 0; i < series.size(); ++i) {
        REQUIRE(std::abs(s[i].iteration - series[i].iteration) < 1e-9);
        REQUIRE(std::abs(s[i].value - series[i].value) < 1e-9);
    }
}

TEST_CASE("linear-in-log series pass through the interior of the boxcar") {
    std::vector<SeriesPoint> series;
    for (int i = 0; i < 40; ++i) series.push_back({std::exp(0.1 * i), 1.0 - 0.05 * i});
    const std::size_t window = 9, half = window / 2;
    const auto s = log_window_smooth(series, window);
    for (std::size_t i = half; i + half < series.size(); ++i)
        REQUIRE(std::abs(s[i].value - series[i].value) < 1e-9);
}

TEST_CASE("diagnostics table round-trips through csv") {
    std::vector<DiagnosticsRow> rows(2);
    rows[0].iteration = 20;
    rows[0].cos_tc = 0.5;
    rows[0].cos_tw = std::nullopt;
    rows[0].cos_cw = -0.25;
    rows[0].norm_c = 1.5;
    rows[0].norm_w = 2.5;
    rows[0].norm_gap = 1.0;
    rows[0].trace_sigma = 0.125;
    rows[0].trace_d = std::nullopt;
    rows[1].iteration = 40;
    rows[1].cos_tc = 1.0 / 3.0;
    rows[1].norm_gap = -0.5;

    const std::string path = "diag_roundtrip_test.csv";
    write_diagnostics_csv(path, rows, "0123456789abcdef");
    const auto table = read_csv(path);
    std::remove(path.c_str());

    REQUIRE(table.columns ==
            std::vector<std::string>{"iteration", "cos_tc", "cos_tw", "cos_cw", "norm_c", "norm_w",
                                     "norm_gap", "trace_sigma", "trace_d"});
    REQUIRE(table.config_hash == "0123456789abcdef");
    REQUIRE(table.rows.size() == 2);
    REQUIRE(std::stod(table.rows[0][1]) == 0.5);
    REQUIRE(table.rows[0][2].empty());
    REQUIRE(std::stod(table.rows[0][3]) == -0.25);
    REQUIRE(std::stod(table.rows[1][1]) == 1.0 / 3.0);
    REQUIRE(table.rows[1][8].empty());
}
