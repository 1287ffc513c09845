#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "resetopt/dataset.hpp"
#include "resetopt/network.hpp"

using namespace resetopt;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

void write_fake_image_file(const std::filesystem::path& path, int records,
                           unsigned char label_of_record(int), unsigned char pixel_value) {
    std::ofstream out(path, std::ios::binary);
    for (int r = 0; r < records; ++r) {
        const unsigned char label = label_of_record(r);
        out.put(static_cast<char>(label));
        for (int k = 0; k < 3 * 32 * 32; ++k) out.put(static_cast<char>(pixel_value));
    }
}

}  // namespace

TEST_CASE("blobs are balanced and sit near their centers") {
    auto ds = make_blobs(10, 100, 32, 6.0, 5);
    REQUIRE(ds.size() == 1000);
    REQUIRE(ds.features.shape == std::vector<std::size_t>{1000, 32});

    std::vector<int> counts(10, 0);
    for (int y : ds.true_labels) ++counts[static_cast<std::size_t>(y)];
    for (int c : counts) REQUIRE(c == 100);

    // Class k is centered at separation * e_k; the sample mean along that
    // axis concentrates around 6 within 5 standard errors (sigma=1, n=100).
    for (int k = 0; k < 10; ++k) {
        double mean = 0;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (ds.true_labels[i] == k) mean += ds.features.data[i * 32 + static_cast<std::size_t>(k)];
        mean /= 100.0;
        REQUIRE(std::abs(mean - 6.0) < 5.0 / std::sqrt(100.0));
    }

    // Same seed, same bytes; different seed, different draw.
    auto again = make_blobs(10, 100, 32, 6.0, 5);
    REQUIRE(again.features.data == ds.features.data);
    auto other = make_blobs(10, 100, 32, 6.0, 6);
    REQUIRE(other.features.data != ds.features.data);
}

TEST_CASE("well-separated two-class blobs are linearly separable") {
    auto ds = make_blobs(2, 200, 2, 6.0, 7);
    NetworkSpec spec;
    spec.input_shape = {2};
    spec.num_classes = 2;
    spec.layers = {LinearDesc{2, 2}, SoftmaxDesc{}};
    spec.sections = {Section::Former, Section::Latter};
    spec.validate();
    Network probe(spec);
    probe.init_params(1);

    // Full-batch gradient descent on the linear probe.
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    Tensor x = ds.gather(all);
    auto labels = ds.gather_labels(all, false);
    for (int it = 0; it < 300; ++it) {
        auto lg = probe.loss_and_grad(x, labels, LossKind::CrossEntropy, Mode::Eval);
        auto flat = probe.flat();
        for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= 0.5 * lg.grad[i];
        probe.set_flat(flat);
    }
    const auto result = probe.evaluate(x, labels, LossKind::CrossEntropy);
    REQUIRE(result.accuracy > 0.99);
}

TEST_CASE("symmetric corruption matches its marginals") {
    auto ds = make_blobs(10, 12000, 4, 3.0, 11);  // 120000 labels
    auto noisy = corrupt(ds, NoiseSpec::symmetric(0.4), 13);
    noisy.check();

    const double n = static_cast<double>(noisy.size());
    std::size_t flipped = 0;
    for (auto c : noisy.corrupted) flipped += c;
    const double se_flip = std::sqrt(0.4 * 0.6 / n);
    REQUIRE(std::abs(static_cast<double>(flipped) / n - 0.4) < 3 * se_flip);

    // Every wrong class receives rate/(c-1) of the flips from each class.
    for (int y = 0; y < 3; ++y) {  // checking a few source classes suffices
        std::vector<double> to(10, 0);
        double from_y = 0;
        for (std::size_t i = 0; i < noisy.size(); ++i) {
            if (noisy.true_labels[i] != y) continue;
            from_y += 1;
            if (noisy.corrupted[i]) to[static_cast<std::size_t>(noisy.noisy_labels[i])] += 1;
        }
        REQUIRE(from_y == 12000);
        const double p = 0.4 / 9.0;
        const double se = std::sqrt(p * (1 - p) / from_y);
        for (int t = 0; t < 10; ++t) {
            if (t == y) {
                REQUIRE(to[static_cast<std::size_t>(t)] == 0);
            } else {
                REQUIRE(std::abs(to[static_cast<std::size_t>(t)] / from_y - p) < 5 * se);
            }
        }
    }

    // Mask marks exactly the changed labels.
    for (std::size_t i = 0; i < noisy.size(); ++i)
        REQUIRE((noisy.true_labels[i] != noisy.noisy_labels[i]) ==
                static_cast<bool>(noisy.corrupted[i]));
}

TEST_CASE("zero rate leaves the dataset untouched") {
    auto ds = make_blobs(4, 50, 3, 4.0, 17);
    auto same = corrupt(ds, NoiseSpec::symmetric(0.0), 19);
    REQUIRE(same.noisy_labels == ds.true_labels);
    for (auto c : same.corrupted) REQUIRE(c == 0);
}

TEST_CASE("asymmetric corruption follows the flip map") {
    auto ds = make_blobs(4, 5000, 3, 4.0, 23);
    SECTION("default cyclic pair flip") {
        auto noisy = corrupt(ds, NoiseSpec::asymmetric(0.3), 29);
        for (std::size_t i = 0; i < noisy.size(); ++i)
            if (noisy.corrupted[i])
                REQUIRE(noisy.noisy_labels[i] == (noisy.true_labels[i] + 1) % 4);
    }
    SECTION("explicit map") {
        auto noisy = corrupt(ds, NoiseSpec::asymmetric(0.3, {2, 3, 0, 1}), 31);
        for (std::size_t i = 0; i < noisy.size(); ++i)
            if (noisy.corrupted[i]) {
                const int y = noisy.true_labels[i];
                REQUIRE(noisy.noisy_labels[i] == (y + 2) % 4);
            }
    }
    SECTION("invalid maps are rejected") {
        REQUIRE_THROWS_AS(corrupt(ds, NoiseSpec::asymmetric(0.3, {0, 2, 3, 1}), 1), ArgumentError);
        REQUIRE_THROWS_AS(corrupt(ds, NoiseSpec::asymmetric(0.3, {1, 0}), 1), ArgumentError);
        REQUIRE_THROWS_AS(corrupt(ds, NoiseSpec::symmetric(1.0), 1), ArgumentError);
    }
}

TEST_CASE("stratified split is proportional within one sample") {
    auto ds = make_blobs(10, 100, 8, 5.0, 37);
    auto noisy = corrupt(ds, NoiseSpec::symmetric(0.4), 38);
    auto [train, val] = split(noisy, 0.1, 39);

    REQUIRE(train.size() == 900);
    REQUIRE(val.size() == 100);

    std::vector<int> val_counts(10, 0);
    for (int y : val.true_labels) ++val_counts[static_cast<std::size_t>(y)];
    for (int c : val_counts) REQUIRE(c == 10);

    // Corruption flags and noisy labels travel with their samples.
    train.check();
    val.check();

    // Unbalanced case still lands within +-1 of proportionality.
    LabeledDataset odd = noisy;
    // drop seven samples of class 0 to unbalance
    std::vector<std::size_t> keep;
    int removed = 0;
    for (std::size_t i = 0; i < odd.size(); ++i) {
        if (odd.true_labels[i] == 0 && removed < 7) {
            ++removed;
            continue;
        }
        keep.push_back(i);
    }
    LabeledDataset trimmed;
    trimmed.num_classes = odd.num_classes;
    trimmed.features = odd.gather(keep);
    trimmed.true_labels = odd.gather_labels(keep, false);
    trimmed.noisy_labels = odd.gather_labels(keep, true);
    trimmed.corrupted.resize(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) trimmed.corrupted[i] = odd.corrupted[keep[i]];

    auto [t2, v2] = split(trimmed, 0.25, 41);
    std::vector<int> totals(10, 0), vals(10, 0);
    for (int y : trimmed.true_labels) ++totals[static_cast<std::size_t>(y)];
    for (int y : v2.true_labels) ++vals[static_cast<std::size_t>(y)];
    for (int k = 0; k < 10; ++k) {
        const double exact = totals[static_cast<std::size_t>(k)] * 0.25;
        REQUIRE(std::abs(vals[static_cast<std::size_t>(k)] - exact) <= 1.0);
    }
    REQUIRE(t2.size() + v2.size() == trimmed.size());
}

TEST_CASE("with-replacement sampler is uniform and counter-reproducible") {
    BatchSampler sampler(50, 16, 77);
    std::vector<std::size_t> counts(50, 0);
    const int batches = 20000;
    for (int b = 0; b < batches; ++b)
        for (std::size_t i : sampler.next()) ++counts[i];

    const double draws = 16.0 * batches;
    const double p = 1.0 / 50.0;
    const double se = std::sqrt(draws * p * (1 - p));
    for (auto c : counts) REQUIRE(std::abs(static_cast<double>(c) - draws * p) < 5 * se);

    // A sampler reconstructed at an arbitrary counter continues the sequence.
    BatchSampler fresh(50, 16, 77);
    fresh.seek(12345);
    BatchSampler walked(50, 16, 77);
    for (int i = 0; i < 12345; ++i) walked.next();
    REQUIRE(fresh.next() == walked.next());
}

TEST_CASE("epoch shuffle visits every sample once per epoch") {
    BatchSampler sampler(60, 10, 99, SamplingMode::EpochShuffle);
    std::set<std::size_t> seen;
    for (int b = 0; b < 6; ++b)
        for (std::size_t i : sampler.next()) {
            REQUIRE(!seen.count(i));
            seen.insert(i);
        }
    REQUIRE(seen.size() == 60);

    // Next epoch revisits the population in a new order.
    std::set<std::size_t> second;
    for (int b = 0; b < 6; ++b)
        for (std::size_t i : sampler.next()) second.insert(i);
    REQUIRE(second.size() == 60);
}

TEST_CASE("dataset CSV export carries labels, mask, and features") {
    auto ds = make_blobs(3, 4, 2, 5.0, 43);
    auto noisy = corrupt(ds, NoiseSpec::symmetric(0.5), 44);
    const auto path = temp_file("resetopt_blobs_test.csv");
    export_csv(noisy, path.string());

    auto table = read_csv(path.string());
    REQUIRE(table.columns == std::vector<std::string>{"true_label", "noisy_label", "corrupted",
                                                      "f_0", "f_1"});
    REQUIRE(table.rows.size() == 12);
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        REQUIRE(std::stoi(table.rows[i][0]) == noisy.true_labels[i]);
        REQUIRE(std::stoi(table.rows[i][1]) == noisy.noisy_labels[i]);
        REQUIRE(std::stoi(table.rows[i][2]) == static_cast<int>(noisy.corrupted[i]));
        REQUIRE(std::stod(table.rows[i][3]) == noisy.features.data[i * 2]);
        REQUIRE(std::stod(table.rows[i][4]) == noisy.features.data[i * 2 + 1]);
    }
    std::filesystem::remove(path);
}

TEST_CASE("image binary loader parses records and scales pixels") {
    const auto path = temp_file("resetopt_fake_images.bin");
    write_fake_image_file(
        path, 10, [](int r) { return static_cast<unsigned char>(r); }, 128);

    auto ds = load_cifar_binary({path.string()}, 10, false);
    REQUIRE(ds.size() == 10);
    REQUIRE(ds.features.shape == std::vector<std::size_t>{10, 3, 32, 32});
    for (int r = 0; r < 10; ++r) REQUIRE(ds.true_labels[static_cast<std::size_t>(r)] == r);
    for (double v : ds.features.data) REQUIRE(v == 128.0 / 255.0);

    SECTION("standardization maps constant pixels to equal values") {
        auto std_ds = load_cifar_binary({path.string()}, 10, true);
        // degenerate scale guard: centered only, all values identical
        for (double v : std_ds.features.data) {
            REQUIRE(v == std_ds.features.data[0]);
            REQUIRE(std::abs(v) < 1e-12);
        }
    }

    SECTION("two files concatenate") {
        const auto path2 = temp_file("resetopt_fake_images2.bin");
        write_fake_image_file(
            path2, 5, [](int) { return static_cast<unsigned char>(3); }, 17);
        auto both = load_cifar_binary({path.string(), path2.string()}, 10, false);
        REQUIRE(both.size() == 15);
        REQUIRE(both.true_labels[12] == 3);
        std::filesystem::remove(path2);
    }

    SECTION("truncated files are rejected") {
        const auto bad = temp_file("resetopt_truncated.bin");
        std::ofstream out(bad, std::ios::binary);
        out.write("abc", 3);
        out.close();
        REQUIRE_THROWS_AS(load_cifar_binary({bad.string()}, 10, false), FormatError);
        std::filesystem::remove(bad);
    }

    SECTION("label bytes outside the class range are rejected") {
        const auto bad = temp_file("resetopt_badlabel.bin");
        write_fake_image_file(
            bad, 2, [](int) { return static_cast<unsigned char>(11); }, 0);
        REQUIRE_THROWS_AS(load_cifar_binary({bad.string()}, 10, false), FormatError);
        std::filesystem::remove(bad);
    }

    std::filesystem::remove(path);
}

TEST_CASE("split-statistics standardization applies train stats elsewhere") {
    auto ds = make_blobs(3, 300, 5, 4.0, 51);
    auto [train, val] = split(ds, 0.2, 52);
    auto stats = compute_channel_stats(train);
    apply_standardization(train, stats);
    apply_standardization(val, stats);

    // Train features are exactly standardized per column.
    auto after = compute_channel_stats(train);
    for (double m : after.mean) REQUIRE(std::abs(m) < 1e-10);
    for (double s : after.stdev) REQUIRE(std::abs(s - 1.0) < 1e-10);

    // Val features were shifted by the same affine map, so they are close to
    // but not exactly standardized.
    auto val_stats = compute_channel_stats(val);
    for (double m : val_stats.mean) REQUIRE(std::abs(m) < 0.5);
}
