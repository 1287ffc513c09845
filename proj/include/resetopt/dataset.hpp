#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "resetopt/common.hpp"
#include "resetopt/csv.hpp"
#include "resetopt/rng.hpp"
#include "resetopt/tensor.hpp"

namespace resetopt {

/**
 * Classification dataset with both the original labels and the (possibly
 * corrupted) training labels, plus the mask saying which entries were
 * flipped. Features are stored batch-major.
 */
struct LabeledDataset {
    Tensor features;  // {N, ...per-sample shape}
    std::vector<int> true_labels;
    std::vector<int> noisy_labels;
    std::vector<std::uint8_t> corrupted;
    int num_classes = 0;

    std::size_t size() const { return true_labels.size(); }

    std::size_t feature_dim() const {
        return size() == 0 ? 0 : features.size() / size();
    }

    std::vector<std::size_t> sample_shape() const {
        std::vector<std::size_t> s(features.shape.begin() + 1, features.shape.end());
        return s;
    }

    void check() const {
        const std::size_t n = size();
        if (features.shape.empty() || features.shape[0] != n || noisy_labels.size() != n ||
            corrupted.size() != n)
            throw DimensionError("LabeledDataset: inconsistent field lengths");
        if (num_classes <= 0) throw ArgumentError("LabeledDataset: num_classes must be positive");
        for (std::size_t i = 0; i < n; ++i) {
            if (true_labels[i] < 0 || true_labels[i] >= num_classes ||
                noisy_labels[i] < 0 || noisy_labels[i] >= num_classes)
                throw ArgumentError("LabeledDataset: label outside class range");
            if ((true_labels[i] != noisy_labels[i]) != static_cast<bool>(corrupted[i]))
                throw ArgumentError("LabeledDataset: corrupted mask disagrees with labels");
        }
        require_finite(features.span(), "LabeledDataset features");
    }

    Tensor gather(std::span<const std::size_t> idx) const {
        std::vector<std::size_t> shape = features.shape;
        shape[0] = idx.size();
        Tensor out(shape);
        const std::size_t stride = feature_dim();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= size()) throw ArgumentError("gather: index out of range");
            std::copy(features.data.begin() + idx[i] * stride,
                      features.data.begin() + (idx[i] + 1) * stride, out.data.begin() + i * stride);
        }
        return out;
    }

    std::vector<int> gather_labels(std::span<const std::size_t> idx, bool noisy) const {
        const auto& src = noisy ? noisy_labels : true_labels;
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = src[idx[i]];
        return out;
    }

    std::vector<std::size_t> corrupted_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < size(); ++i)
            if (corrupted[i]) idx.push_back(i);
        return idx;
    }
};

// --- synthetic clusters ----------------------------------------------------

/**
 * Balanced Gaussian clusters with identity covariance. For `classes` up to
 * the dimension the centers sit at `separation` along distinct coordinate
 * axes (pairwise distance separation*sqrt(2)); beyond that they fall back to
 * seeded random directions of the same radius. Samples are class-major.
 */
inline LabeledDataset make_blobs(int classes, std::size_t per_class, std::size_t dim,
                                 double separation, std::uint64_t seed) {
    require(classes >= 2, "make_blobs: need at least two classes");
    require(per_class > 0 && dim > 0, "make_blobs: empty geometry");
    require(separation >= 0, "make_blobs: separation must be non-negative");

    std::vector<std::vector<double>> centers(static_cast<std::size_t>(classes),
                                             std::vector<double>(dim, 0.0));
    if (static_cast<std::size_t>(classes) <= dim) {
        for (int k = 0; k < classes; ++k) centers[k][static_cast<std::size_t>(k)] = separation;
    } else {
        auto cs = rng::derive(seed, "blob_centers");
        for (int k = 0; k < classes; ++k) {
            double norm2 = 0;
            for (auto& x : centers[k]) {
                x = cs.normal();
                norm2 += x * x;
            }
            const double scale = separation / std::sqrt(norm2);
            for (auto& x : centers[k]) x *= scale;
        }
    }

    const std::size_t n = static_cast<std::size_t>(classes) * per_class;
    LabeledDataset ds;
    ds.num_classes = classes;
    ds.features = Tensor({n, dim});
    ds.true_labels.resize(n);
    auto stream = rng::derive(seed, "blob_samples");
    std::size_t row = 0;
    for (int k = 0; k < classes; ++k)
        for (std::size_t j = 0; j < per_class; ++j, ++row) {
            ds.true_labels[row] = k;
            double* f = ds.features.data.data() + row * dim;
            for (std::size_t t = 0; t < dim; ++t) f[t] = centers[k][t] + stream.normal();
        }
    ds.noisy_labels = ds.true_labels;
    ds.corrupted.assign(n, 0);
    ds.check();
    return ds;
}

// --- image binary loader ---------------------------------------------------

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stdev;
};

// Per-channel mean/std for image tensors ({N,C,H,W}: one entry per channel)
// or per-feature for flat ones ({N,p}: one entry per column).
inline ChannelStats compute_channel_stats(const LabeledDataset& ds) {
    const std::size_t n = ds.size();
    require(n > 0, "compute_channel_stats: empty dataset");
    ChannelStats stats;
    if (ds.features.shape.size() == 4) {
        const std::size_t c = ds.features.shape[1];
        const std::size_t plane = ds.features.shape[2] * ds.features.shape[3];
        stats.mean.assign(c, 0.0);
        stats.stdev.assign(c, 0.0);
        const double m = static_cast<double>(n * plane);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* x = ds.features.data.data() + (s * c + ch) * plane;
                double acc = 0;
                for (std::size_t k = 0; k < plane; ++k) acc += x[k];
                stats.mean[ch] += acc;
            }
        for (auto& v : stats.mean) v /= m;
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* x = ds.features.data.data() + (s * c + ch) * plane;
                double acc = 0;
                for (std::size_t k = 0; k < plane; ++k) {
                    const double d = x[k] - stats.mean[ch];
                    acc += d * d;
                }
                stats.stdev[ch] += acc;
            }
        for (auto& v : stats.stdev) v = std::sqrt(v / m);
    } else {
        const std::size_t p = ds.feature_dim();
        stats.mean.assign(p, 0.0);
        stats.stdev.assign(p, 0.0);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < p; ++k) stats.mean[k] += ds.features.data[s * p + k];
        for (auto& v : stats.mean) v /= static_cast<double>(n);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < p; ++k) {
                const double d = ds.features.data[s * p + k] - stats.mean[k];
                stats.stdev[k] += d * d;
            }
        for (auto& v : stats.stdev) v = std::sqrt(v / static_cast<double>(n));
    }
    return stats;
}

// Centers and scales in place. Channels with (near) zero spread are only
// centered, so constant inputs map to exactly equal outputs.
inline void apply_standardization(LabeledDataset& ds, const ChannelStats& stats) {
    auto scale_of = [](double s) { return s < 1e-12 ? 1.0 : s; };
    if (ds.features.shape.size() == 4) {
        const std::size_t c = ds.features.shape[1];
        if (stats.mean.size() != c) throw DimensionError("apply_standardization: channel mismatch");
        const std::size_t plane = ds.features.shape[2] * ds.features.shape[3];
        for (std::size_t s = 0; s < ds.size(); ++s)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double* x = ds.features.data.data() + (s * c + ch) * plane;
                const double mu = stats.mean[ch], sd = scale_of(stats.stdev[ch]);
                for (std::size_t k = 0; k < plane; ++k) x[k] = (x[k] - mu) / sd;
            }
    } else {
        const std::size_t p = ds.feature_dim();
        if (stats.mean.size() != p) throw DimensionError("apply_standardization: feature mismatch");
        for (std::size_t s = 0; s < ds.size(); ++s)
            for (std::size_t k = 0; k < p; ++k) {
                ds.features.data[s * p + k] =
                    (ds.features.data[s * p + k] - stats.mean[k]) / scale_of(stats.stdev[k]);
            }
    }
}

/**
 * Reads label+image records (1 label byte, then 3x32x32 channel planes per
 * record) from one or more files. Pixels are scaled to [0,1]; with
 * `standardize` set, per-channel statistics of the loaded data are applied
 * in place afterwards.
 */
inline LabeledDataset load_cifar_binary(const std::vector<std::string>& paths, int classes,
                                        bool standardize) {
    require(classes >= 2, "load_cifar_binary: need at least two classes");
    constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
    std::vector<unsigned char> bytes;
    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("load_cifar_binary: cannot open " + path);
        std::vector<unsigned char> chunk((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
        if (chunk.empty() || chunk.size() % kRecord != 0)
            throw FormatError("load_cifar_binary: " + path + " is not a whole number of records");
        bytes.insert(bytes.end(), chunk.begin(), chunk.end());
    }
    const std::size_t n = bytes.size() / kRecord;
    LabeledDataset ds;
    ds.num_classes = classes;
    ds.features = Tensor({n, 3, 32, 32});
    ds.true_labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + i * kRecord;
        if (rec[0] >= classes)
            throw FormatError("load_cifar_binary: label byte " + std::to_string(rec[0]) +
                              " outside class range");
        ds.true_labels[i] = rec[0];
        double* f = ds.features.data.data() + i * (kRecord - 1);
        for (std::size_t k = 0; k + 1 < kRecord; ++k) f[k] = static_cast<double>(rec[k + 1]) / 255.0;
    }
    ds.noisy_labels = ds.true_labels;
    ds.corrupted.assign(n, 0);
    if (standardize && n > 0) apply_standardization(ds, compute_channel_stats(ds));
    ds.check();
    return ds;
}

// --- label corruption ------------------------------------------------------

struct NoiseSpec {
    enum class Kind { Symmetric, Asymmetric };
    Kind kind = Kind::Symmetric;
    double rate = 0.0;
    // Asymmetric target per class; defaults to the cyclic pair flip k -> k+1.
    std::vector<int> flip_map;

    static NoiseSpec symmetric(double rate) { return {Kind::Symmetric, rate, {}}; }

    static NoiseSpec asymmetric(double rate, std::vector<int> flip_map = {}) {
        return {Kind::Asymmetric, rate, std::move(flip_map)};
    }

    void validate(int classes) const {
        require(rate >= 0.0 && rate < 1.0, "NoiseSpec: rate must lie in [0,1)");
        if (kind == Kind::Asymmetric && !flip_map.empty()) {
            if (flip_map.size() != static_cast<std::size_t>(classes))
                throw ArgumentError("NoiseSpec: flip map must cover every class");
            for (int k = 0; k < classes; ++k) {
                const int t = flip_map[static_cast<std::size_t>(k)];
                if (t < 0 || t >= classes) throw ArgumentError("NoiseSpec: flip target out of range");
                if (t == k) throw ArgumentError("NoiseSpec: flip map may not fix a class");
            }
        }
    }
};

/**
 * Flips each label independently with probability `rate`. Symmetric noise
 * redistributes uniformly over the other classes; asymmetric noise follows
 * the flip map. The corrupted mask records exactly the changed entries.
 */
inline LabeledDataset corrupt(const LabeledDataset& ds, const NoiseSpec& noise,
                              std::uint64_t seed) {
    noise.validate(ds.num_classes);
    LabeledDataset out = ds;
    auto stream = rng::derive(seed, "label_noise");
    const int c = ds.num_classes;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const int y = out.true_labels[i];
        int label = y;
        if (stream.uniform() < noise.rate) {
            if (noise.kind == NoiseSpec::Kind::Symmetric) {
                const int draw = static_cast<int>(stream.below(static_cast<std::uint64_t>(c - 1)));
                label = draw >= y ? draw + 1 : draw;
            } else if (!noise.flip_map.empty()) {
                label = noise.flip_map[static_cast<std::size_t>(y)];
            } else {
                label = (y + 1) % c;
            }
        }
        out.noisy_labels[i] = label;
        out.corrupted[i] = label != y ? 1 : 0;
    }
    out.check();
    return out;
}

// --- stratified split ------------------------------------------------------

/**
 * Stratified split on the true labels: per-class validation quotas follow
 * largest-remainder rounding of count*val_fraction toward a total of
 * round(N*val_fraction), so every class lands within one sample of exact
 * proportionality. Membership is drawn from the seed; both output datasets
 * keep ascending original order.
 */
inline std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds,
                                                       double val_fraction, std::uint64_t seed) {
    require(val_fraction > 0.0 && val_fraction < 1.0, "split: val_fraction must lie in (0,1)");
    ds.check();
    const std::size_t n = ds.size();
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t i = 0; i < n; ++i)
        by_class[static_cast<std::size_t>(ds.true_labels[i])].push_back(i);

    const auto total_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
    require(total_val > 0 && total_val < n, "split: fraction leaves an empty side");

    std::vector<std::size_t> quota(by_class.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        const double exact = static_cast<double>(by_class[k].size()) * val_fraction;
        quota[k] = static_cast<std::size_t>(exact);
        assigned += quota[k];
        remainders.emplace_back(exact - static_cast<double>(quota[k]), k);
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t i = 0; assigned < total_val && i < remainders.size(); ++i) {
        if (quota[remainders[i].second] < by_class[remainders[i].second].size()) {
            ++quota[remainders[i].second];
            ++assigned;
        }
    }
    if (assigned != total_val) throw ArgumentError("split: quotas cannot reach the target size");

    std::vector<std::uint8_t> in_val(n, 0);
    auto stream = rng::derive(seed, "split");
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        auto idx = by_class[k];
        for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
            const std::size_t j = i + stream.below(idx.size() - i);
            std::swap(idx[i], idx[j]);
        }
        for (std::size_t i = 0; i < quota[k]; ++i) in_val[idx[i]] = 1;
    }

    auto take = [&ds](const std::vector<std::size_t>& idx) {
        LabeledDataset part;
        part.num_classes = ds.num_classes;
        part.features = ds.gather(idx);
        part.true_labels = ds.gather_labels(idx, false);
        part.noisy_labels = ds.gather_labels(idx, true);
        part.corrupted.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) part.corrupted[i] = ds.corrupted[idx[i]];
        return part;
    };
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < n; ++i) (in_val[i] ? val_idx : train_idx).push_back(i);
    return {take(train_idx), take(val_idx)};
}

// --- CSV export ------------------------------------------------------------

inline void export_csv(const LabeledDataset& ds, const std::string& path) {
    ds.check();
    const std::size_t p = ds.feature_dim();
    std::string header = "true_label,noisy_label,corrupted";
    for (std::size_t k = 0; k < p; ++k) header += ",f_" + std::to_string(k);
    CsvWriter writer(path, header);
    std::vector<std::string> cells;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        cells.clear();
        cells.push_back(std::to_string(ds.true_labels[i]));
        cells.push_back(std::to_string(ds.noisy_labels[i]));
        cells.push_back(std::to_string(static_cast<int>(ds.corrupted[i])));
        for (std::size_t k = 0; k < p; ++k) cells.push_back(fmt_double(ds.features.data[i * p + k]));
        writer.row(cells);
    }
    writer.close();
}

// --- batch sampling --------------------------------------------------------

enum class SamplingMode { WithReplacement, EpochShuffle };

/**
 * Deterministic batch index source. The default mode draws i.i.d. uniform
 * indices with replacement; each batch's stream is a pure function of
 * (seed, counter), so a sampler reconstructed at any counter continues the
 * exact sequence. EpochShuffle instead walks a fresh seeded permutation per
 * epoch, dropping the incomplete tail batch.
 */
class BatchSampler {
  public:
    BatchSampler(std::size_t population, std::size_t batch, std::uint64_t seed,
                 SamplingMode mode = SamplingMode::WithReplacement)
        : population_(population), batch_(batch), seed_(seed), mode_(mode) {
        require(population > 0, "BatchSampler: empty population");
        require(batch > 0, "BatchSampler: empty batch");
        if (mode == SamplingMode::EpochShuffle)
            require(batch <= population, "BatchSampler: batch larger than population");
    }

    std::size_t population() const { return population_; }
    std::size_t batch() const { return batch_; }
    std::uint64_t counter() const { return counter_; }

    void seek(std::uint64_t counter) {
        counter_ = counter;
        perm_.clear();
        pos_ = 0;
        if (mode_ == SamplingMode::EpochShuffle) {
            // Replay whole epochs up to the target batch counter.
            const std::uint64_t per_epoch = population_ / batch_;
            epoch_ = counter / per_epoch;
            refill();
            pos_ = static_cast<std::size_t>(counter % per_epoch) * batch_;
        }
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> idx(batch_);
        if (mode_ == SamplingMode::WithReplacement) {
            auto stream = rng::derive(seed_, "batch", counter_);
            for (auto& i : idx) i = stream.below(population_);
        } else {
            if (perm_.empty() || pos_ + batch_ > population_) refill();
            for (std::size_t k = 0; k < batch_; ++k) idx[k] = perm_[pos_ + k];
            pos_ += batch_;
        }
        ++counter_;
        return idx;
    }

  private:
    void refill() {
        perm_.resize(population_);
        std::iota(perm_.begin(), perm_.end(), std::size_t{0});
        auto stream = rng::derive(seed_, "epoch", epoch_++);
        for (std::size_t i = 0; i + 1 < perm_.size(); ++i) {
            const std::size_t j = i + stream.below(perm_.size() - i);
            std::swap(perm_[i], perm_[j]);
        }
        pos_ = 0;
    }

    std::size_t population_;
    std::size_t batch_;
    std::uint64_t seed_;
    SamplingMode mode_;
    std::uint64_t counter_ = 0;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> perm_;
    std::size_t pos_ = 0;
};

}  // namespace resetopt
