#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <variant>
#include <vector>

#include "resetopt/network.hpp"
#include "resetopt/rng.hpp"

using namespace resetopt;

namespace {

Tensor random_batch(std::vector<std::size_t> shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    auto s = rng::derive(seed, "batch_data");
    for (auto& x : t.data) x = s.normal();
    return t;
}

std::vector<int> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
    auto s = rng::derive(seed, "labels");
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(s.below(classes));
    return labels;
}

// Independent slow oracle for the convolution forward pass: explicit
// padded-copy plus quadruple loop, written without reference to the layer
// kernel's indexing.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad,
                   std::size_t stride) {
    const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t OC = w.shape[0], K = w.shape[2];
    const std::size_t PH = H + 2 * pad, PW = W + 2 * pad;
    std::vector<double> padded(B * C * PH * PW, 0.0);
    for (std::size_t s = 0; s < B; ++s)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    padded[((s * C + c) * PH + i + pad) * PW + j + pad] = x.data[x.at4(s, c, i, j)];
    const std::size_t OH = (PH - K) / stride + 1, OW = (PW - K) / stride + 1;
    Tensor y({B, OC, OH, OW});
    for (std::size_t s = 0; s < B; ++s)
        for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t i = 0; i < OH; ++i)
                for (std::size_t j = 0; j < OW; ++j) {
                    double acc = b.data[oc];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ki = 0; ki < K; ++ki)
                            for (std::size_t kj = 0; kj < K; ++kj)
                                acc += w.data[w.at4(oc, c, ki, kj)] *
                                       padded[((s * C + c) * PH + i * stride + ki) * PW + j * stride + kj];
                    y.data[y.at4(s, oc, i, j)] = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("forward produces probability rows that sum to one") {
    auto spec = fcn_spec({7}, 12, 4, true);
    Network net(spec);
    net.init_params(11);
    auto batch = random_batch({5, 7}, 1);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
        Tensor probs = net.forward(batch, mode, 99);
        REQUIRE(probs.shape == std::vector<std::size_t>{5, 4});
        for (std::size_t s = 0; s < 5; ++s) {
            double sum = 0;
            for (std::size_t k = 0; k < 4; ++k) {
                const double p = probs.data[probs.at2(s, k)];
                REQUIRE(p >= 0.0);
                sum += p;
            }
            REQUIRE(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("losses at the uniform prediction hit their closed-form values") {
    // A linear layer with zero weights gives uniform probabilities over c
    // classes: cross-entropy log(c), absolute error 2(1 - 1/c).
    NetworkSpec spec;
    spec.input_shape = {3};
    spec.num_classes = 10;
    spec.layers = {LinearDesc{3, 10}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Latter};
    spec.validate();
    Network net(spec);  // params default to zero

    auto batch = random_batch({6, 3}, 2);
    std::vector<int> labels(6, 3);
    auto ce = net.loss_and_grad(batch, labels, LossKind::CrossEntropy, Mode::Eval);
    REQUIRE(std::abs(ce.loss - std::log(10.0)) < 1e-12);
    auto mae = net.loss_and_grad(batch, labels, LossKind::MeanAbsoluteError, Mode::Eval);
    REQUIRE(std::abs(mae.loss - 2.0 * (1.0 - 0.1)) < 1e-12);
}

TEST_CASE("finite differences confirm gradients on a plain MLP") {
    auto spec = fcn_spec({9}, 14, 5, false);
    Network net(spec);
    net.init_params(3);
    auto batch = random_batch({8, 9}, 4);
    auto labels = random_labels(8, 5, 5);
    for (LossKind kind : {LossKind::CrossEntropy, LossKind::MeanAbsoluteError}) {
        const double err = net.finite_diff_check(batch, labels, kind, 1e-6, 60, 17);
        REQUIRE(err <= 1e-4);
    }
}

TEST_CASE("finite differences confirm gradients with batch norm and dropout") {
    NetworkSpec spec;
    spec.input_shape = {6};
    spec.num_classes = 3;
    spec.layers = {LinearDesc{6, 10}, BatchNormDesc{10}, ReluDesc{}, DropoutDesc{0.2},
                   LinearDesc{10, 3}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Former, Section::Former, Section::Former,
                     Section::Latter, Section::Latter};
    spec.validate();
    Network net(spec);
    net.init_params(6);
    auto batch = random_batch({16, 6}, 7);
    auto labels = random_labels(16, 3, 8);
    const double err =
        net.finite_diff_check(batch, labels, LossKind::CrossEntropy, 1e-5, 40, 23);
    REQUIRE(err <= 1e-3);
}

TEST_CASE("finite differences confirm gradients through conv and pooling") {
    NetworkSpec spec;
    spec.input_shape = {2, 6, 6};
    spec.num_classes = 3;
    spec.layers = {Conv2dDesc{2, 4, 3, 1, 1}, ReluDesc{}, MaxPool2dDesc{2, 0, 2},
                   LinearDesc{4 * 3 * 3, 3}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Former, Section::Former, Section::Latter,
                     Section::Latter};
    spec.validate();
    Network net(spec);
    net.init_params(9);
    auto batch = random_batch({4, 2, 6, 6}, 10);
    auto labels = random_labels(4, 3, 11);
    const double err =
        net.finite_diff_check(batch, labels, LossKind::CrossEntropy, 1e-6, 50, 29);
    REQUIRE(err <= 1e-4);
}

TEST_CASE("train-mode batch statistics gradient is exact, not just the frozen one") {
    // Central differences of the raw train-mode loss (statistics recomputed
    // at every probe) against the analytic backward pass that differentiates
    // through the batch statistics.
    NetworkSpec spec;
    spec.input_shape = {5};
    spec.num_classes = 4;
    spec.layers = {LinearDesc{5, 8}, BatchNormDesc{8}, ReluDesc{}, LinearDesc{8, 4}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Former, Section::Former, Section::Latter,
                     Section::Latter};
    spec.validate();
    Network net(spec);
    net.init_params(13);
    auto batch = random_batch({12, 5}, 14);
    auto labels = random_labels(12, 4, 15);

    auto analytic = net.loss_and_grad(batch, labels, LossKind::CrossEntropy, Mode::Train);
    auto flat = net.flat();
    auto probe = rng::derive(31, "probe");
    const double h = 1e-6;
    for (int rep = 0; rep < 30; ++rep) {
        const std::size_t c = probe.below(flat.size());
        const double saved = flat[c];
        flat[c] = saved + h;
        net.set_flat(flat);
        const double up = net.loss_and_grad(batch, labels, LossKind::CrossEntropy, Mode::Train).loss;
        flat[c] = saved - h;
        net.set_flat(flat);
        const double down = net.loss_and_grad(batch, labels, LossKind::CrossEntropy, Mode::Train).loss;
        flat[c] = saved;
        const double fd = (up - down) / (2 * h);
        const double rel = std::abs(fd - analytic.grad[c]) / (std::abs(fd) + std::abs(analytic.grad[c]) + 1e-12);
        REQUIRE(rel < 1e-4);
    }
    net.set_flat(flat);
}

TEST_CASE("per-sample gradients average to the batch gradient") {
    auto spec = fcn_spec({9}, 10, 4, false);
    Network net(spec);
    net.init_params(21);
    auto batch = random_batch({8, 9}, 22);
    auto labels = random_labels(8, 4, 23);

    SECTION("without dropout or batch norm") {
        auto batch_grad = net.loss_and_grad(batch, labels, LossKind::CrossEntropy, Mode::Eval);
        auto rows = net.per_sample_grads(batch, labels, LossKind::CrossEntropy, Mode::Eval);
        REQUIRE(rows.size() == 8);
        for (std::size_t c = 0; c < net.dim(); ++c) {
            double mean = 0;
            for (const auto& r : rows) mean += r[c];
            mean /= 8.0;
            REQUIRE(std::abs(mean - batch_grad.grad[c]) < 1e-10);
        }
    }

    SECTION("with per-sample dropout masks in train mode") {
        NetworkSpec dspec;
        dspec.input_shape = {9};
        dspec.num_classes = 4;
        dspec.layers = {LinearDesc{9, 10}, ReluDesc{}, DropoutDesc{0.5}, LinearDesc{10, 4},
                        SoftmaxDesc{}};
        dspec.sections = {Section::Former, Section::Former, Section::Former, Section::Latter,
                          Section::Latter};
        dspec.validate();
        Network dnet(dspec);
        dnet.init_params(24);
        const std::uint64_t drop_seed = 77;
        auto batch_grad = dnet.loss_and_grad(batch, labels, LossKind::CrossEntropy, Mode::Train, drop_seed);
        auto rows = dnet.per_sample_grads(batch, labels, LossKind::CrossEntropy, Mode::Train, drop_seed);
        for (std::size_t c = 0; c < dnet.dim(); ++c) {
            double mean = 0;
            for (const auto& r : rows) mean += r[c];
            mean /= 8.0;
            REQUIRE(std::abs(mean - batch_grad.grad[c]) < 1e-10);
        }
    }
}

TEST_CASE("convolution agrees with the padded brute-force oracle") {
    NetworkSpec spec;
    spec.input_shape = {3, 5, 5};
    spec.num_classes = 2;
    spec.layers = {Conv2dDesc{3, 4, 3, 1, 2}, LinearDesc{4 * 3 * 3, 2}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Latter, Section::Latter};
    spec.validate();
    Network net(spec);
    net.init_params(41);

    auto x = random_batch({2, 3, 5, 5}, 42);
    const auto* w = net.params().find("layer0.weight");
    const auto* b = net.params().find("layer0.bias");
    REQUIRE(w != nullptr);
    REQUIRE(b != nullptr);
    Tensor expected = conv_oracle(x, w->tensor, b->tensor, 1, 2);

    // Probe the conv output through a pass that isolates it: identity head.
    // Instead, recompute with the kernel via a single-layer network is not
    // possible (softmax tail required), so compare against the activations
    // implied by a linear readout: use finite weights to recover outputs.
    // Simple approach: drive the public forward of a conv-only stack where
    // the linear head is the identity on flattened conv outputs.
    NetworkSpec probe_spec;
    probe_spec.input_shape = {3, 5, 5};
    probe_spec.num_classes = 4 * 3 * 3;
    probe_spec.layers = {Conv2dDesc{3, 4, 3, 1, 2}, LinearDesc{4 * 3 * 3, 4 * 3 * 3}, SoftmaxDesc{}};
    probe_spec.sections = {Section::Former, Section::Latter, Section::Latter};
    probe_spec.validate();
    Network probe(probe_spec);
    auto flat = probe.flat();
    std::fill(flat.begin(), flat.end(), 0.0);
    probe.set_flat(flat);
    // conv weights/bias copied from net; identity linear head
    {
        auto& pw = probe.params();
        for (std::size_t i = 0; i < pw.size(); ++i) {
            auto& e = pw.entry(i);
            if (e.name == "layer0.weight") e.tensor = w->tensor;
            if (e.name == "layer0.bias") e.tensor = b->tensor;
            if (e.name == "layer1.weight")
                for (std::size_t k = 0; k < 4 * 3 * 3; ++k) e.tensor.data[k * (4 * 3 * 3) + k] = 1.0;
        }
    }
    // softmax(z) preserves argmax and log-ratios; compare via logits using
    // log of probabilities differences: p_i/p_j = exp(z_i - z_j).
    Tensor probs = probe.forward(x, Mode::Eval);
    for (std::size_t s = 0; s < 2; ++s) {
        for (std::size_t k = 1; k < 4 * 3 * 3; ++k) {
            const double lhs = std::log(probs.data[probs.at2(s, k)] / probs.data[probs.at2(s, 0)]);
            const double rhs = expected.data[s * 4 * 3 * 3 + k] - expected.data[s * 4 * 3 * 3];
            REQUIRE(std::abs(lhs - rhs) < 1e-9);
        }
    }
}

TEST_CASE("preset shapes follow the reference tables") {
    SECTION("MLP preset on an image-shaped input") {
        auto spec = fcn_spec({3, 32, 32}, 50, 10, true);
        Network net(spec);
        auto batch = random_batch({2, 3, 32, 32}, 50);
        Tensor probs = net.forward(batch, Mode::Eval);
        REQUIRE(probs.shape == std::vector<std::size_t>{2, 10});
        // linear(3072,50) + bn + linear(50,50) + bn + linear(50,10)
        REQUIRE(net.dim() == (3072 * 50 + 50) + (50 + 50) + (50 * 50 + 50) + (50 + 50) +
                                 (50 * 10 + 10));
    }

    SECTION("compact CNN preset") {
        auto spec = small_cnn_spec(10, false);
        std::size_t convs = 0, pools = 0, drops = 0, linears = 0;
        for (const auto& l : spec.layers) {
            convs += std::holds_alternative<Conv2dDesc>(l);
            pools += std::holds_alternative<MaxPool2dDesc>(l);
            drops += std::holds_alternative<DropoutDesc>(l);
            linears += std::holds_alternative<LinearDesc>(l);
        }
        REQUIRE(convs == 2);
        REQUIRE(pools == 1);
        REQUIRE(drops == 1);
        REQUIRE(linears == 1);
        REQUIRE(spec.output_shapes.back() == std::vector<std::size_t>{10});
    }

    SECTION("VGG-style preset structure") {
        auto spec = vcnn_spec(10);
        std::vector<std::size_t> conv_out, linear_out;
        std::size_t bns = 0, pools = 0;
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            if (const auto* c = std::get_if<Conv2dDesc>(&spec.layers[i])) {
                conv_out.push_back(c->out_ch);
                REQUIRE(c->kernel == 3);
                REQUIRE(c->pad == 1);
                REQUIRE(c->stride == 1);
            }
            if (const auto* l = std::get_if<LinearDesc>(&spec.layers[i])) linear_out.push_back(l->out);
            bns += std::holds_alternative<BatchNormDesc>(spec.layers[i]);
            pools += std::holds_alternative<MaxPool2dDesc>(spec.layers[i]);
        }
        REQUIRE(conv_out == std::vector<std::size_t>{32, 64, 128, 128, 256, 256});
        REQUIRE(linear_out == std::vector<std::size_t>{1024, 512, 10});
        REQUIRE(pools == 3);
        // one per conv (6), one after the first pool, one per hidden linear (2)
        REQUIRE(bns == 9);
        // the stage right after the first pool is a normalization stage
        bool seen_pool = false;
        for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i) {
            if (std::holds_alternative<MaxPool2dDesc>(spec.layers[i]) && !seen_pool) {
                seen_pool = true;
                REQUIRE(std::holds_alternative<BatchNormDesc>(spec.layers[i + 1]));
            }
        }
        REQUIRE(seen_pool);
        // former/latter split: everything through dropout vs the linear head
        bool in_latter = false;
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            if (std::holds_alternative<LinearDesc>(spec.layers[i])) in_latter = true;
            REQUIRE(spec.sections[i] == (in_latter ? Section::Latter : Section::Former));
        }
    }
}

TEST_CASE("dropout scaling preserves the activation mean in train mode") {
    NetworkSpec spec;
    spec.input_shape = {40};
    spec.num_classes = 40;
    spec.layers = {DropoutDesc{0.2}, LinearDesc{40, 40}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Latter, Section::Latter};
    spec.validate();
    Network net(spec);
    // identity linear head
    auto& ps = net.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& e = ps.entry(i);
        if (e.name == "layer1.weight")
            for (std::size_t k = 0; k < 40; ++k) e.tensor.data[k * 40 + k] = 1.0;
    }

    Tensor batch({200, 40});
    for (auto& v : batch.data) v = 1.0;
    // In eval mode dropout is the identity, so logits equal inputs and the
    // probabilities are uniform.
    Tensor eval_probs = net.forward(batch, Mode::Eval);
    for (std::size_t k = 0; k < 40; ++k)
        REQUIRE(std::abs(eval_probs.data[k] - 1.0 / 40) < 1e-12);

    // In train mode roughly a fraction p of units is dropped; surviving
    // units are scaled by 1/(1-p).
    std::size_t kept = 0;
    const std::uint64_t seed = 4;
    NetworkSpec raw;
    raw.input_shape = {40};
    raw.num_classes = 40;
    raw.layers = {LinearDesc{40, 40}, SoftmaxDesc{}};
    raw.sections = {Section::Former, Section::Latter};
    (void)raw;
    // Count mask survivors through the probability ratios: a dropped unit
    // produces logit 0 while kept units produce 1/(1-p) = 1.25.
    Tensor train_probs = net.forward(batch, Mode::Train, seed);
    for (std::size_t s = 0; s < 200; ++s) {
        for (std::size_t k = 0; k < 40; ++k) {
            const double ratio = train_probs.data[train_probs.at2(s, k)] /
                                 *std::min_element(train_probs.data.begin() + s * 40,
                                                   train_probs.data.begin() + (s + 1) * 40);
            if (ratio > 1.0 + 1e-9) ++kept;
        }
    }
    const double frac_kept = static_cast<double>(kept) / (200.0 * 40.0);
    REQUIRE(frac_kept > 0.74);
    REQUIRE(frac_kept < 0.86);
}

TEST_CASE("spec validation rejects inconsistent stacks") {
    NetworkSpec spec;
    spec.input_shape = {8};
    spec.num_classes = 3;
    spec.layers = {LinearDesc{9, 3}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Latter};
    REQUIRE_THROWS_AS(spec.validate(), DimensionError);

    spec.layers = {LinearDesc{8, 4}, SoftmaxDesc{}};
    REQUIRE_THROWS_AS(spec.validate(), DimensionError);  // 4 != num_classes

    spec.layers = {LinearDesc{8, 3}};
    spec.sections = {Section::Former};
    REQUIRE_THROWS_AS(spec.validate(), DimensionError);  // no probability stage
}

TEST_CASE("forward rejects non-finite inputs and bad labels") {
    auto spec = fcn_spec({4}, 6, 3, false);
    Network net(spec);
    net.init_params(61);
    Tensor bad({1, 4});
    bad.data[2] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(net.forward(bad, Mode::Eval), NumericError);

    Tensor ok = random_batch({2, 4}, 62);
    std::vector<int> labels{0, 5};
    REQUIRE_THROWS_AS(net.loss_and_grad(ok, labels, LossKind::CrossEntropy, Mode::Eval),
                      ArgumentError);
}

TEST_CASE("running statistics converge toward the activation distribution") {
    NetworkSpec spec;
    spec.input_shape = {3};
    spec.num_classes = 3;
    spec.layers = {BatchNormDesc{3}, LinearDesc{3, 3}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Latter, Section::Latter};
    spec.validate();
    Network net(spec);
    net.init_params(70);

    // Feed batches with known mean 2 and variance 9.
    auto s = rng::derive(71, "bn_data");
    for (int it = 0; it < 400; ++it) {
        Tensor batch({64, 3});
        for (auto& v : batch.data) v = 2.0 + 3.0 * s.normal();
        net.forward(batch, Mode::Train, it);
    }
    // Eval-mode output of the normalization stage at the true mean is near
    // beta = 0; probe via logits of the identity-free head is indirect, so
    // instead check a fresh eval batch at exactly the population mean.
    Tensor probe_batch({1, 3});
    for (auto& v : probe_batch.data) v = 2.0;
    // With gamma=1, beta=0 and running stats near (2,9), normalized output
    // is near zero, so the linear head sees near-zero inputs and produces
    // near-uniform probabilities.
    Tensor probs = net.forward(probe_batch, Mode::Eval);
    for (std::size_t k = 0; k < 3; ++k) REQUIRE(std::abs(probs.data[k] - 1.0 / 3) < 0.05);
}
