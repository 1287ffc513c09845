#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resetopt/common.hpp"
#include "resetopt/layers.hpp"
#include "resetopt/params.hpp"
#include "resetopt/rng.hpp"
#include "resetopt/tensor.hpp"

namespace resetopt {

enum class LossKind { CrossEntropy, MeanAbsoluteError };

enum class Mode { Train, Eval };

/**
 * Feed-forward classifier description: input shape, layer sequence, section
 * tag per layer, and the class count. `validate()` walks the shapes once and
 * records each layer's output shape (without the batch dimension).
 */
struct NetworkSpec {
    std::vector<std::size_t> input_shape;
    std::vector<LayerDesc> layers;
    std::vector<Section> sections;
    std::size_t num_classes = 0;
    std::vector<std::vector<std::size_t>> output_shapes;  // filled by validate()

    void validate();

    const std::vector<std::size_t>& shape_before(std::size_t layer) const {
        return layer == 0 ? input_shape : output_shapes[layer - 1];
    }
};

inline std::size_t flat_count(const std::vector<std::size_t>& shape) {
    return Tensor::count(shape);
}

inline void NetworkSpec::validate() {
    if (input_shape.empty()) throw DimensionError("NetworkSpec: empty input shape");
    if (layers.empty()) throw DimensionError("NetworkSpec: no layers");
    if (sections.size() != layers.size())
        throw DimensionError("NetworkSpec: sections and layers differ in length");
    output_shapes.clear();
    std::vector<std::size_t> cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerDesc& d = layers[i];
        const std::string where = "layer " + std::to_string(i) + " (" + layer_kind(d) + ")";
        if (const auto* lin = std::get_if<LinearDesc>(&d)) {
            if (flat_count(cur) != lin->in)
                throw DimensionError(where + ": expects " + std::to_string(lin->in) +
                                     " inputs, got " + shape_string(cur));
            if (lin->out == 0) throw DimensionError(where + ": zero outputs");
            cur = {lin->out};
        } else if (const auto* conv = std::get_if<Conv2dDesc>(&d)) {
            if (cur.size() != 3 || cur[0] != conv->in_ch)
                throw DimensionError(where + ": expects " + std::to_string(conv->in_ch) +
                                     " channels, got " + shape_string(cur));
            if (conv->stride == 0 || conv->kernel == 0) throw DimensionError(where + ": bad geometry");
            const std::size_t h = cur[1], w = cur[2];
            if (h + 2 * conv->pad < conv->kernel || w + 2 * conv->pad < conv->kernel)
                throw DimensionError(where + ": kernel larger than padded input");
            cur = {conv->out_ch, (h + 2 * conv->pad - conv->kernel) / conv->stride + 1,
                   (w + 2 * conv->pad - conv->kernel) / conv->stride + 1};
        } else if (const auto* pool = std::get_if<MaxPool2dDesc>(&d)) {
            if (cur.size() != 3) throw DimensionError(where + ": expects a C,H,W input");
            if (pool->stride == 0 || pool->kernel == 0) throw DimensionError(where + ": bad geometry");
            const std::size_t h = cur[1], w = cur[2];
            if (h + 2 * pool->pad < pool->kernel || w + 2 * pool->pad < pool->kernel)
                throw DimensionError(where + ": kernel larger than padded input");
            if (pool->pad >= pool->kernel)
                throw DimensionError(where + ": padding must be smaller than the kernel");
            cur = {cur[0], (h + 2 * pool->pad - pool->kernel) / pool->stride + 1,
                   (w + 2 * pool->pad - pool->kernel) / pool->stride + 1};
        } else if (const auto* bn = std::get_if<BatchNormDesc>(&d)) {
            const std::size_t feats = cur.size() == 3 ? cur[0] : flat_count(cur);
            if (bn->features != feats)
                throw DimensionError(where + ": expects " + std::to_string(bn->features) +
                                     " features, got " + shape_string(cur));
            if (bn->epsilon <= 0) throw ArgumentError(where + ": epsilon must be positive");
        } else if (const auto* drop = std::get_if<DropoutDesc>(&d)) {
            if (drop->p < 0 || drop->p >= 1) throw ArgumentError(where + ": p must be in [0,1)");
        } else if (std::holds_alternative<SoftmaxDesc>(d)) {
            if (cur.size() != 1)
                throw DimensionError(where + ": expects a flat input, got " + shape_string(cur));
        }
        output_shapes.push_back(cur);
    }
    if (!std::holds_alternative<SoftmaxDesc>(layers.back()))
        throw DimensionError("NetworkSpec: last layer must produce class probabilities");
    if (cur.size() != 1 || cur[0] != num_classes)
        throw DimensionError("NetworkSpec: final output " + shape_string(cur) + " does not match " +
                             std::to_string(num_classes) + " classes");
}

// Presets ------------------------------------------------------------------

// Three-layer MLP: two hidden layers of `hidden` units (optionally with a
// normalization stage before each activation) and a linear classifier head.
// Hidden stages form the "former" section, the head the "latter" one.
inline NetworkSpec fcn_spec(std::vector<std::size_t> input_shape, std::size_t hidden,
                            std::size_t classes, bool batch_norm) {
    NetworkSpec spec;
    spec.input_shape = std::move(input_shape);
    spec.num_classes = classes;
    const std::size_t in = flat_count(spec.input_shape);
    auto push = [&spec](LayerDesc d, Section s) {
        spec.layers.push_back(std::move(d));
        spec.sections.push_back(s);
    };
    push(LinearDesc{in, hidden}, Section::Former);
    if (batch_norm) push(BatchNormDesc{hidden}, Section::Former);
    push(ReluDesc{}, Section::Former);
    push(LinearDesc{hidden, hidden}, Section::Former);
    if (batch_norm) push(BatchNormDesc{hidden}, Section::Former);
    push(ReluDesc{}, Section::Former);
    push(LinearDesc{hidden, classes}, Section::Latter);
    push(SoftmaxDesc{}, Section::Latter);
    spec.validate();
    return spec;
}

// Compact CNN for 3x32x32 inputs: two 3x3 conv stages of 8 channels, one
// 2x2 pooling stage, dropout, then a linear classifier head.
inline NetworkSpec small_cnn_spec(std::size_t classes, bool batch_norm) {
    NetworkSpec spec;
    spec.input_shape = {3, 32, 32};
    spec.num_classes = classes;
    auto push = [&spec](LayerDesc d, Section s) {
        spec.layers.push_back(std::move(d));
        spec.sections.push_back(s);
    };
    push(Conv2dDesc{3, 8, 3, 1, 1}, Section::Former);
    if (batch_norm) push(BatchNormDesc{8}, Section::Former);
    push(ReluDesc{}, Section::Former);
    push(Conv2dDesc{8, 8, 3, 1, 1}, Section::Former);
    if (batch_norm) push(BatchNormDesc{8}, Section::Former);
    push(ReluDesc{}, Section::Former);
    push(MaxPool2dDesc{2, 0, 2}, Section::Former);
    push(DropoutDesc{0.2}, Section::Former);
    push(LinearDesc{8 * 16 * 16, classes}, Section::Latter);
    push(SoftmaxDesc{}, Section::Latter);
    spec.validate();
    return spec;
}

// VGG-style CNN for 3x32x32 inputs. Batch normalization sits before each
// activation; note the layout also places one normalization stage directly
// after the first pooling stage, reproducing the reference layout verbatim.
// Convolutional/pooling stages are the "former" section, the three linear
// stages the "latter" one.
inline NetworkSpec vcnn_spec(std::size_t classes) {
    NetworkSpec spec;
    spec.input_shape = {3, 32, 32};
    spec.num_classes = classes;
    auto push = [&spec](LayerDesc d, Section s) {
        spec.layers.push_back(std::move(d));
        spec.sections.push_back(s);
    };
    const Section F = Section::Former, L = Section::Latter;
    push(Conv2dDesc{3, 32, 3, 1, 1}, F);
    push(BatchNormDesc{32}, F);
    push(ReluDesc{}, F);
    push(Conv2dDesc{32, 64, 3, 1, 1}, F);
    push(BatchNormDesc{64}, F);
    push(ReluDesc{}, F);
    push(MaxPool2dDesc{2, 0, 2}, F);
    push(BatchNormDesc{64}, F);
    push(Conv2dDesc{64, 128, 3, 1, 1}, F);
    push(BatchNormDesc{128}, F);
    push(ReluDesc{}, F);
    push(Conv2dDesc{128, 128, 3, 1, 1}, F);
    push(BatchNormDesc{128}, F);
    push(ReluDesc{}, F);
    push(MaxPool2dDesc{2, 0, 2}, F);
    push(Conv2dDesc{128, 256, 3, 1, 1}, F);
    push(BatchNormDesc{256}, F);
    push(ReluDesc{}, F);
    push(Conv2dDesc{256, 256, 3, 1, 1}, F);
    push(BatchNormDesc{256}, F);
    push(ReluDesc{}, F);
    push(MaxPool2dDesc{2, 0, 2}, F);
    push(DropoutDesc{0.2}, F);
    push(LinearDesc{256 * 4 * 4, 1024}, L);
    push(BatchNormDesc{1024}, L);
    push(ReluDesc{}, L);
    push(LinearDesc{1024, 512}, L);
    push(BatchNormDesc{512}, L);
    push(ReluDesc{}, L);
    push(LinearDesc{512, classes}, L);
    push(SoftmaxDesc{}, L);
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------------------

struct LossGrad {
    double loss = 0;
    std::vector<double> grad;
};

struct EvalResult {
    double loss = 0;
    double accuracy = 0;
};

/**
 * Executable network: binds a NetworkSpec to a ParamSet plus normalization
 * running statistics, and provides forward, loss gradient, per-sample
 * gradients, and a central-difference gradient check.
 *
 * Reductions run in a fixed order, so every result is a deterministic
 * function of (params, inputs, seeds).
 */
class Network {
  public:
    explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        build_params();
    }

    const NetworkSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    std::size_t dim() const { return params_.total_dim(); }

    std::vector<double> flat() const { return params_.flatten(); }
    void set_flat(std::span<const double> flat) { params_.assign(flat); }

    // He-style fan-in uniform init for weights, zeros for biases and shift
    // terms, ones for scale terms. Draw order is the entry order, so the
    // result depends only on the seed.
    void init_params(std::uint64_t seed) {
        auto stream = rng::derive(seed, "init");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& e = params_.entry(i);
            switch (init_kinds_[i].kind) {
                case InitKind::HeUniform: {
                    const double limit = std::sqrt(6.0 / static_cast<double>(init_kinds_[i].fan_in));
                    for (auto& x : e.tensor.data) x = (2.0 * stream.uniform() - 1.0) * limit;
                    break;
                }
                case InitKind::Zero:
                    e.tensor.fill(0.0);
                    break;
                case InitKind::One:
                    e.tensor.fill(1.0);
                    break;
            }
        }
        reset_running_stats();
    }

    void reset_running_stats() {
        for (auto& s : bn_state_) {
            std::fill(s.mean.begin(), s.mean.end(), 0.0);
            std::fill(s.var.begin(), s.var.end(), 1.0);
        }
    }

    /** Class probabilities for a batch; rows sum to 1. Train mode applies
     * dropout (seeded) and batch statistics; eval mode is deterministic. */
    Tensor forward(const Tensor& batch, Mode mode, std::uint64_t dropout_seed = 0) {
        Pass pass;
        run(batch, exec_for(mode), dropout_seed, 0, pass);
        return std::move(pass.acts.back());
    }

    /** Mean per-sample loss over the batch and its gradient with respect to
     * the flattened parameters. */
    LossGrad loss_and_grad(const Tensor& batch, std::span<const int> labels, LossKind kind,
                           Mode mode, std::uint64_t dropout_seed = 0) {
        Pass pass;
        run(batch, exec_for(mode), dropout_seed, 0, pass);
        return loss_backward(pass, labels, kind, exec_for(mode));
    }

    /**
     * Gradient of each sample's own loss, one row per sample. Dropout masks
     * match the batched pass sample for sample. Batch-coupled normalization
     * statistics are replaced by running statistics here, so with train-mode
     * batch norm in the batched pass the row mean is not expected to match;
     * in eval mode (and for nets without batch norm) it matches exactly.
     */
    std::vector<std::vector<double>> per_sample_grads(const Tensor& batch,
                                                      std::span<const int> labels, LossKind kind,
                                                      Mode mode, std::uint64_t dropout_seed = 0) {
        const std::size_t b = batch_size(batch);
        if (labels.size() != b) throw DimensionError("per_sample_grads: labels/batch mismatch");
        Exec exec = exec_for(mode);
        exec.bn = BnMode::Running;
        exec.update_running = false;
        std::vector<std::vector<double>> grads;
        grads.reserve(b);
        Tensor one(sample_shape(batch));
        const std::size_t stride = one.size();
        for (std::size_t i = 0; i < b; ++i) {
            std::copy(batch.data.begin() + i * stride, batch.data.begin() + (i + 1) * stride,
                      one.data.begin());
            Pass pass;
            run(one, exec, dropout_seed, i, pass);
            const int lab[1] = {labels[i]};
            grads.push_back(loss_backward(pass, lab, kind, exec).grad);
        }
        return grads;
    }

    /**
     * Max relative error between analytic and central-difference gradients
     * over a sampled coordinate subset. Dropout masks and batch statistics
     * are captured once and held fixed for every evaluation, so the loss is
     * a smooth function of the parameters being probed.
     */
    double finite_diff_check(const Tensor& batch, std::span<const int> labels, LossKind kind,
                             double step, std::size_t max_coords, std::uint64_t seed) {
        require(step > 0, "finite_diff_check: step must be positive");
        const std::uint64_t dropout_seed = seed ^ 0x5eedface0ddball;
        // Capture batch statistics at the base point.
        Exec capture = exec_for(Mode::Train);
        capture.update_running = false;
        Pass base;
        run(batch, capture, dropout_seed, 0, base);
        FrozenStats frozen = capture_stats(base);

        Exec frozen_exec = capture;
        frozen_exec.bn = BnMode::Frozen;
        frozen_exec.frozen = &frozen;

        Pass pass;
        run(batch, frozen_exec, dropout_seed, 0, pass);
        LossGrad lg = loss_backward(pass, labels, kind, frozen_exec);

        std::vector<std::size_t> coords = sample_coords(max_coords, seed);
        auto flat = params_.flatten();
        double worst = 0.0;
        for (std::size_t c : coords) {
            const double saved = flat[c];
            flat[c] = saved + step;
            params_.assign(flat);
            const double up = loss_only(batch, labels, kind, frozen_exec, dropout_seed);
            flat[c] = saved - step;
            params_.assign(flat);
            const double down = loss_only(batch, labels, kind, frozen_exec, dropout_seed);
            flat[c] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double rel = std::abs(fd - lg.grad[c]) / (std::abs(fd) + std::abs(lg.grad[c]) + 1e-12);
            worst = std::max(worst, rel);
        }
        params_.assign(flat);
        return worst;
    }

    /** Eval-mode loss and accuracy over a feature tensor, chunked. */
    EvalResult evaluate(const Tensor& features, std::span<const int> labels, LossKind kind,
                        std::size_t chunk = 256) {
        const std::size_t n = batch_size(features);
        if (labels.size() != n) throw DimensionError("evaluate: labels/features mismatch");
        require(chunk > 0, "evaluate: chunk must be positive");
        Exec exec = exec_for(Mode::Eval);
        Tensor piece;
        double loss_sum = 0.0;
        std::size_t correct = 0;
        const std::size_t stride = flat_count(spec_.input_shape);
        for (std::size_t start = 0; start < n; start += chunk) {
            const std::size_t b = std::min(chunk, n - start);
            slice_batch(features, start, b, piece);
            Pass pass;
            run(piece, exec, 0, start, pass);
            const Tensor& probs = pass.acts.back();
            const Tensor& logits = pass.acts[pass.acts.size() - 2];
            for (std::size_t i = 0; i < b; ++i) {
                const int y = labels[start + i];
                check_label(y);
                loss_sum += sample_loss(logits, probs, i, y, kind);
                if (argmax_row(probs, i) == y) ++correct;
            }
        }
        (void)stride;
        return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
    }

    /** Eval-mode argmax class per sample, chunked. */
    std::vector<int> predict(const Tensor& features, std::size_t chunk = 256) {
        const std::size_t n = batch_size(features);
        require(chunk > 0, "predict: chunk must be positive");
        Exec exec = exec_for(Mode::Eval);
        Tensor piece;
        std::vector<int> out(n);
        for (std::size_t start = 0; start < n; start += chunk) {
            const std::size_t b = std::min(chunk, n - start);
            slice_batch(features, start, b, piece);
            Pass pass;
            run(piece, exec, 0, start, pass);
            for (std::size_t i = 0; i < b; ++i) out[start + i] = argmax_row(pass.acts.back(), i);
        }
        return out;
    }

  private:
    enum class BnMode { Batch, Running, Frozen };

    struct FrozenStats {
        // per BN layer index: captured mean/var
        std::vector<std::vector<double>> mean;
        std::vector<std::vector<double>> var;
    };

    struct Exec {
        bool dropout = false;
        BnMode bn = BnMode::Running;
        bool update_running = false;
        const FrozenStats* frozen = nullptr;
    };

    struct BnState {
        std::vector<double> mean;
        std::vector<double> var;
    };

    struct LayerCache {
        Tensor xhat;                      // batchnorm normalized input
        std::vector<double> invstd;       // batchnorm, per feature
        std::vector<double> mean;         // batchnorm batch mean (capture)
        std::vector<double> var;          // batchnorm batch variance (capture)
        std::vector<std::size_t> argmax;  // maxpool winner per output cell
        Tensor mask;                      // dropout keep/scale factor
    };

    struct Pass {
        std::vector<Tensor> acts;
        std::vector<LayerCache> caches;
    };

    struct InitKind {
        enum Kind { HeUniform, Zero, One } kind = Zero;
        std::size_t fan_in = 1;
    };

    Exec exec_for(Mode mode) const {
        Exec e;
        if (mode == Mode::Train) {
            e.dropout = true;
            e.bn = BnMode::Batch;
            e.update_running = true;
        } else {
            e.dropout = false;
            e.bn = BnMode::Running;
            e.update_running = false;
        }
        return e;
    }

    void build_params() {
        init_kinds_.clear();
        bn_state_.clear();
        bn_index_.assign(spec_.layers.size(), static_cast<std::size_t>(-1));
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const LayerDesc& d = spec_.layers[i];
            const Section sec = spec_.sections[i];
            const std::string base = "layer" + std::to_string(i);
            if (const auto* lin = std::get_if<LinearDesc>(&d)) {
                params_.add(base + ".weight", Tensor({lin->out, lin->in}), sec);
                init_kinds_.push_back({InitKind::HeUniform, lin->in});
                params_.add(base + ".bias", Tensor({lin->out}), sec);
                init_kinds_.push_back({InitKind::Zero, 1});
            } else if (const auto* conv = std::get_if<Conv2dDesc>(&d)) {
                params_.add(base + ".weight",
                            Tensor({conv->out_ch, conv->in_ch, conv->kernel, conv->kernel}), sec);
                init_kinds_.push_back({InitKind::HeUniform, conv->in_ch * conv->kernel * conv->kernel});
                params_.add(base + ".bias", Tensor({conv->out_ch}), sec);
                init_kinds_.push_back({InitKind::Zero, 1});
            } else if (const auto* bn = std::get_if<BatchNormDesc>(&d)) {
                params_.add(base + ".gamma", Tensor({bn->features}), sec);
                init_kinds_.push_back({InitKind::One, 1});
                params_.add(base + ".beta", Tensor({bn->features}), sec);
                init_kinds_.push_back({InitKind::Zero, 1});
                bn_index_[i] = bn_state_.size();
                bn_state_.push_back({std::vector<double>(bn->features, 0.0),
                                     std::vector<double>(bn->features, 1.0)});
            }
        }
        // Entry index of each parametric layer's first entry, for gradient offsets.
        param_entry_.assign(spec_.layers.size(), static_cast<std::size_t>(-1));
        std::size_t entry = 0;
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            if (layer_has_params(spec_.layers[i])) {
                param_entry_[i] = entry;
                entry += 2;
            }
        }
    }

    static std::size_t batch_size(const Tensor& t) {
        if (t.shape.empty() || t.shape[0] == 0) throw DimensionError("empty batch");
        return t.shape[0];
    }

    std::vector<std::size_t> sample_shape(const Tensor& batch) const {
        std::vector<std::size_t> s = batch.shape;
        s[0] = 1;
        return s;
    }

    void check_input(const Tensor& batch) const {
        std::vector<std::size_t> expect = spec_.input_shape;
        expect.insert(expect.begin(), batch.shape.empty() ? 0 : batch.shape[0]);
        if (batch.shape != expect)
            throw DimensionError("forward: batch shape " + shape_string(batch.shape) +
                                 " does not match input " + shape_string(spec_.input_shape));
    }

    void check_label(int y) const {
        if (y < 0 || static_cast<std::size_t>(y) >= spec_.num_classes)
            throw ArgumentError("label " + std::to_string(y) + " outside [0, " +
                                std::to_string(spec_.num_classes) + ")");
    }

    void slice_batch(const Tensor& features, std::size_t start, std::size_t b, Tensor& out) const {
        std::vector<std::size_t> shape = features.shape;
        shape[0] = b;
        const std::size_t stride = flat_count(spec_.input_shape);
        out.shape = shape;
        out.data.assign(features.data.begin() + start * stride,
                        features.data.begin() + (start + b) * stride);
    }

    // Forward pass. `row_offset` is the position of this batch's first row
    // in the enclosing batch, so a one-row pass reproduces the dropout masks
    // row `row_offset` saw in the batched pass.
    void run(const Tensor& batch, const Exec& exec, std::uint64_t dropout_seed,
             std::size_t row_offset, Pass& pass) {
        batch_size(batch);  // rejects empty batches
        check_input(batch);
        require_finite(batch.span(), "forward input");
        const std::size_t n_layers = spec_.layers.size();
        pass.acts.clear();
        pass.acts.reserve(n_layers + 1);
        pass.caches.assign(n_layers, {});
        pass.acts.push_back(batch);
        for (std::size_t i = 0; i < n_layers; ++i) {
            const Tensor& x = pass.acts.back();
            Tensor y;
            const LayerDesc& d = spec_.layers[i];
            if (const auto* lin = std::get_if<LinearDesc>(&d)) {
                linear_forward(*lin, i, x, y);
            } else if (const auto* conv = std::get_if<Conv2dDesc>(&d)) {
                conv_forward(*conv, i, x, y);
            } else if (const auto* pool = std::get_if<MaxPool2dDesc>(&d)) {
                pool_forward(*pool, x, y, pass.caches[i]);
            } else if (std::holds_alternative<ReluDesc>(d)) {
                y = x;
                for (auto& v : y.data) v = v > 0 ? v : 0.0;
            } else if (const auto* bn = std::get_if<BatchNormDesc>(&d)) {
                bn_forward(*bn, i, x, y, exec, pass.caches[i]);
            } else if (const auto* drop = std::get_if<DropoutDesc>(&d)) {
                dropout_forward(*drop, i, x, y, exec, dropout_seed, row_offset, pass.caches[i]);
            } else {
                softmax_forward(x, y);
            }
            pass.acts.push_back(std::move(y));
        }
    }

    // --- layer kernels -----------------------------------------------------

    void linear_forward(const LinearDesc& lin, std::size_t layer, const Tensor& x, Tensor& y) const {
        const std::size_t b = x.shape[0];
        const Tensor& w = params_.entry(param_entry_[layer]).tensor;
        const Tensor& bias = params_.entry(param_entry_[layer] + 1).tensor;
        y = Tensor({b, lin.out});
        const std::size_t in = lin.in;
        for (std::size_t s = 0; s < b; ++s) {
            const double* xs = x.data.data() + s * in;
            double* ys = y.data.data() + s * lin.out;
            for (std::size_t o = 0; o < lin.out; ++o) {
                const double* wo = w.data.data() + o * in;
                double acc = bias.data[o];
                for (std::size_t k = 0; k < in; ++k) acc += wo[k] * xs[k];
                ys[o] = acc;
            }
        }
    }

    void linear_backward(const LinearDesc& lin, std::size_t layer, const Tensor& x, const Tensor& g,
                         Tensor& dx, std::vector<double>& grad) const {
        const std::size_t b = x.shape[0];
        const std::size_t in = lin.in;
        const Tensor& w = params_.entry(param_entry_[layer]).tensor;
        double* dw = grad.data() + params_.offset(param_entry_[layer]);
        double* db = grad.data() + params_.offset(param_entry_[layer] + 1);
        dx = Tensor({b, in});
        for (std::size_t s = 0; s < b; ++s) {
            const double* xs = x.data.data() + s * in;
            const double* gs = g.data.data() + s * lin.out;
            double* dxs = dx.data.data() + s * in;
            for (std::size_t o = 0; o < lin.out; ++o) {
                const double go = gs[o];
                if (go == 0.0) continue;
                const double* wo = w.data.data() + o * in;
                double* dwo = dw + o * in;
                db[o] += go;
                for (std::size_t k = 0; k < in; ++k) {
                    dwo[k] += go * xs[k];
                    dxs[k] += go * wo[k];
                }
            }
        }
    }

    void conv_forward(const Conv2dDesc& c, std::size_t layer, const Tensor& x, Tensor& y) const {
        const std::size_t b = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3];
        const std::size_t oh = (h + 2 * c.pad - c.kernel) / c.stride + 1;
        const std::size_t ow = (w + 2 * c.pad - c.kernel) / c.stride + 1;
        const Tensor& wt = params_.entry(param_entry_[layer]).tensor;
        const Tensor& bias = params_.entry(param_entry_[layer] + 1).tensor;
        y = Tensor({b, c.out_ch, oh, ow});
        const long pad = static_cast<long>(c.pad);
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t oc = 0; oc < c.out_ch; ++oc)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double acc = bias.data[oc];
                        const long base_h = static_cast<long>(i * c.stride) - pad;
                        const long base_w = static_cast<long>(j * c.stride) - pad;
                        for (std::size_t ic = 0; ic < ch; ++ic)
                            for (std::size_t kh = 0; kh < c.kernel; ++kh) {
                                const long ih = base_h + static_cast<long>(kh);
                                if (ih < 0 || ih >= static_cast<long>(h)) continue;
                                for (std::size_t kw = 0; kw < c.kernel; ++kw) {
                                    const long iw = base_w + static_cast<long>(kw);
                                    if (iw < 0 || iw >= static_cast<long>(w)) continue;
                                    acc += wt.data[wt.at4(oc, ic, kh, kw)] *
                                           x.data[x.at4(s, ic, static_cast<std::size_t>(ih),
                                                        static_cast<std::size_t>(iw))];
                                }
                            }
                        y.data[y.at4(s, oc, i, j)] = acc;
                    }
    }

    void conv_backward(const Conv2dDesc& c, std::size_t layer, const Tensor& x, const Tensor& g,
                       Tensor& dx, std::vector<double>& grad) const {
        const std::size_t b = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3];
        const std::size_t oh = g.shape[2], ow = g.shape[3];
        const Tensor& wt = params_.entry(param_entry_[layer]).tensor;
        double* dw = grad.data() + params_.offset(param_entry_[layer]);
        double* db = grad.data() + params_.offset(param_entry_[layer] + 1);
        dx = Tensor(x.shape);
        const long pad = static_cast<long>(c.pad);
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t oc = 0; oc < c.out_ch; ++oc)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const double go = g.data[g.at4(s, oc, i, j)];
                        if (go == 0.0) continue;
                        db[oc] += go;
                        const long base_h = static_cast<long>(i * c.stride) - pad;
                        const long base_w = static_cast<long>(j * c.stride) - pad;
                        for (std::size_t ic = 0; ic < ch; ++ic)
                            for (std::size_t kh = 0; kh < c.kernel; ++kh) {
                                const long ih = base_h + static_cast<long>(kh);
                                if (ih < 0 || ih >= static_cast<long>(h)) continue;
                                for (std::size_t kw = 0; kw < c.kernel; ++kw) {
                                    const long iw = base_w + static_cast<long>(kw);
                                    if (iw < 0 || iw >= static_cast<long>(w)) continue;
                                    const std::size_t xi = x.at4(s, ic, static_cast<std::size_t>(ih),
                                                                 static_cast<std::size_t>(iw));
                                    const std::size_t wi = wt.at4(oc, ic, kh, kw);
                                    dw[wi] += go * x.data[xi];
                                    dx.data[xi] += go * wt.data[wi];
                                }
                            }
                    }
    }

    void pool_forward(const MaxPool2dDesc& p, const Tensor& x, Tensor& y, LayerCache& cache) const {
        const std::size_t b = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3];
        const std::size_t oh = (h + 2 * p.pad - p.kernel) / p.stride + 1;
        const std::size_t ow = (w + 2 * p.pad - p.kernel) / p.stride + 1;
        y = Tensor({b, ch, oh, ow});
        cache.argmax.assign(y.size(), 0);
        const long pad = static_cast<long>(p.pad);
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t best_idx = 0;
                        const long base_h = static_cast<long>(i * p.stride) - pad;
                        const long base_w = static_cast<long>(j * p.stride) - pad;
                        for (std::size_t kh = 0; kh < p.kernel; ++kh) {
                            const long ih = base_h + static_cast<long>(kh);
                            if (ih < 0 || ih >= static_cast<long>(h)) continue;
                            for (std::size_t kw = 0; kw < p.kernel; ++kw) {
                                const long iw = base_w + static_cast<long>(kw);
                                if (iw < 0 || iw >= static_cast<long>(w)) continue;
                                const std::size_t xi = x.at4(s, c, static_cast<std::size_t>(ih),
                                                             static_cast<std::size_t>(iw));
                                if (x.data[xi] > best) {
                                    best = x.data[xi];
                                    best_idx = xi;
                                }
                            }
                        }
                        const std::size_t yi = y.at4(s, c, i, j);
                        y.data[yi] = best;
                        cache.argmax[yi] = best_idx;
                    }
    }

    static void pool_backward(const Tensor& x, const Tensor& g, const LayerCache& cache, Tensor& dx) {
        dx = Tensor(x.shape);
        for (std::size_t i = 0; i < g.size(); ++i) dx.data[cache.argmax[i]] += g.data[i];
    }

    // Normalization axis decomposition: rank-2 input normalizes per feature
    // over the batch, rank-4 per channel over batch and spatial positions.
    static void bn_axes(const Tensor& x, std::size_t& outer, std::size_t& feats, std::size_t& inner) {
        if (x.shape.size() == 2) {
            outer = x.shape[0];
            feats = x.shape[1];
            inner = 1;
        } else {
            outer = x.shape[0];
            feats = x.shape[1];
            inner = x.shape[2] * x.shape[3];
        }
    }

    void bn_forward(const BatchNormDesc& bn, std::size_t layer, const Tensor& x, Tensor& y,
                    const Exec& exec, LayerCache& cache) {
        std::size_t outer, feats, inner;
        bn_axes(x, outer, feats, inner);
        const double m = static_cast<double>(outer * inner);
        const Tensor& gamma = params_.entry(param_entry_[layer]).tensor;
        const Tensor& beta = params_.entry(param_entry_[layer] + 1).tensor;
        BnState& state = bn_state_[bn_index_[layer]];

        const std::vector<double>* mean = nullptr;
        const std::vector<double>* var = nullptr;
        if (exec.bn == BnMode::Batch) {
            cache.mean.assign(feats, 0.0);
            cache.var.assign(feats, 0.0);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t f = 0; f < feats; ++f) {
                    const double* xs = x.data.data() + (o * feats + f) * inner;
                    double acc = 0;
                    for (std::size_t k = 0; k < inner; ++k) acc += xs[k];
                    cache.mean[f] += acc;
                }
            for (auto& v : cache.mean) v /= m;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t f = 0; f < feats; ++f) {
                    const double* xs = x.data.data() + (o * feats + f) * inner;
                    const double mu = cache.mean[f];
                    double acc = 0;
                    for (std::size_t k = 0; k < inner; ++k) {
                        const double d = xs[k] - mu;
                        acc += d * d;
                    }
                    cache.var[f] += acc;
                }
            for (auto& v : cache.var) v /= m;
            mean = &cache.mean;
            var = &cache.var;
            if (exec.update_running) {
                const double mom = bn.momentum;
                const double unbias = m > 1 ? m / (m - 1.0) : 1.0;
                for (std::size_t f = 0; f < feats; ++f) {
                    state.mean[f] = (1 - mom) * state.mean[f] + mom * cache.mean[f];
                    state.var[f] = (1 - mom) * state.var[f] + mom * cache.var[f] * unbias;
                }
            }
        } else if (exec.bn == BnMode::Frozen) {
            const std::size_t bi = bn_index_[layer];
            mean = &exec.frozen->mean[bi];
            var = &exec.frozen->var[bi];
            cache.mean = *mean;
            cache.var = *var;
        } else {
            mean = &state.mean;
            var = &state.var;
            cache.mean = *mean;
            cache.var = *var;
        }

        cache.invstd.resize(feats);
        for (std::size_t f = 0; f < feats; ++f) cache.invstd[f] = 1.0 / std::sqrt((*var)[f] + bn.epsilon);

        y = Tensor(x.shape);
        cache.xhat = Tensor(x.shape);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t f = 0; f < feats; ++f) {
                const double mu = (*mean)[f];
                const double iv = cache.invstd[f];
                const double gm = gamma.data[f];
                const double bt = beta.data[f];
                const std::size_t base = (o * feats + f) * inner;
                for (std::size_t k = 0; k < inner; ++k) {
                    const double xh = (x.data[base + k] - mu) * iv;
                    cache.xhat.data[base + k] = xh;
                    y.data[base + k] = gm * xh + bt;
                }
            }
    }

    void bn_backward(const BatchNormDesc&, std::size_t layer, const Tensor& x, const Tensor& g,
                     const Exec& exec, const LayerCache& cache, Tensor& dx,
                     std::vector<double>& grad) const {
        std::size_t outer, feats, inner;
        bn_axes(x, outer, feats, inner);
        const double m = static_cast<double>(outer * inner);
        const Tensor& gamma = params_.entry(param_entry_[layer]).tensor;
        double* dgamma = grad.data() + params_.offset(param_entry_[layer]);
        double* dbeta = grad.data() + params_.offset(param_entry_[layer] + 1);

        std::vector<double> sum_g(feats, 0.0), sum_gx(feats, 0.0);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t f = 0; f < feats; ++f) {
                const std::size_t base = (o * feats + f) * inner;
                double a = 0, b = 0;
                for (std::size_t k = 0; k < inner; ++k) {
                    a += g.data[base + k];
                    b += g.data[base + k] * cache.xhat.data[base + k];
                }
                sum_g[f] += a;
                sum_gx[f] += b;
            }
        for (std::size_t f = 0; f < feats; ++f) {
            dgamma[f] += sum_gx[f];
            dbeta[f] += sum_g[f];
        }

        dx = Tensor(x.shape);
        if (exec.bn == BnMode::Batch) {
            // Statistics are functions of the batch; differentiate through them.
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t f = 0; f < feats; ++f) {
                    const double scale = gamma.data[f] * cache.invstd[f] / m;
                    const std::size_t base = (o * feats + f) * inner;
                    for (std::size_t k = 0; k < inner; ++k)
                        dx.data[base + k] = scale * (m * g.data[base + k] - sum_g[f] -
                                                     cache.xhat.data[base + k] * sum_gx[f]);
                }
        } else {
            // Statistics held constant: the stage is a per-feature affine map.
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t f = 0; f < feats; ++f) {
                    const double scale = gamma.data[f] * cache.invstd[f];
                    const std::size_t base = (o * feats + f) * inner;
                    for (std::size_t k = 0; k < inner; ++k) dx.data[base + k] = scale * g.data[base + k];
                }
        }
    }

    void dropout_forward(const DropoutDesc& drop, std::size_t layer, const Tensor& x, Tensor& y,
                         const Exec& exec, std::uint64_t dropout_seed, std::size_t row_offset,
                         LayerCache& cache) const {
        if (!exec.dropout || drop.p == 0.0) {
            y = x;
            return;
        }
        const std::size_t b = x.shape[0];
        const std::size_t stride = x.size() / b;
        const double keep_scale = 1.0 / (1.0 - drop.p);
        y = Tensor(x.shape);
        cache.mask = Tensor(x.shape);
        for (std::size_t s = 0; s < b; ++s) {
            // One stream per (seed, layer, absolute row): a single-row pass
            // at row_offset i reproduces the batched pass's masks for row i.
            auto stream = rng::Stream(dropout_seed, rng::hash_name("dropout") + layer,
                                      row_offset + s);
            const std::size_t base = s * stride;
            for (std::size_t k = 0; k < stride; ++k) {
                const double keep = stream.uniform() >= drop.p ? keep_scale : 0.0;
                cache.mask.data[base + k] = keep;
                y.data[base + k] = keep * x.data[base + k];
            }
        }
    }

    static void softmax_forward(const Tensor& x, Tensor& y) {
        const std::size_t b = x.shape[0], c = x.shape[1];
        y = Tensor(x.shape);
        for (std::size_t s = 0; s < b; ++s) {
            const double* xs = x.data.data() + s * c;
            double* ys = y.data.data() + s * c;
            double mx = xs[0];
            for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, xs[k]);
            double sum = 0;
            for (std::size_t k = 0; k < c; ++k) {
                ys[k] = std::exp(xs[k] - mx);
                sum += ys[k];
            }
            for (std::size_t k = 0; k < c; ++k) ys[k] /= sum;
        }
    }

    static void softmax_backward(const Tensor& probs, const Tensor& g, Tensor& dx) {
        const std::size_t b = probs.shape[0], c = probs.shape[1];
        dx = Tensor(probs.shape);
        for (std::size_t s = 0; s < b; ++s) {
            const double* p = probs.data.data() + s * c;
            const double* gs = g.data.data() + s * c;
            double* dxs = dx.data.data() + s * c;
            double dot = 0;
            for (std::size_t k = 0; k < c; ++k) dot += gs[k] * p[k];
            for (std::size_t k = 0; k < c; ++k) dxs[k] = p[k] * (gs[k] - dot);
        }
    }

    // --- loss head ---------------------------------------------------------

    // Per-sample loss from cached logits/probabilities. Cross-entropy runs
    // through log-sum-exp on the logits so tiny probabilities stay finite.
    static double sample_loss(const Tensor& logits, const Tensor& probs, std::size_t row, int y,
                              LossKind kind) {
        const std::size_t c = probs.shape[1];
        if (kind == LossKind::CrossEntropy) {
            const double* z = logits.data.data() + row * c;
            double mx = z[0];
            for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, z[k]);
            double sum = 0;
            for (std::size_t k = 0; k < c; ++k) sum += std::exp(z[k] - mx);
            return std::log(sum) + mx - z[static_cast<std::size_t>(y)];
        }
        const double* p = probs.data.data() + row * c;
        double acc = 0;
        for (std::size_t k = 0; k < c; ++k) {
            const double target = static_cast<std::size_t>(y) == k ? 1.0 : 0.0;
            acc += std::abs(p[k] - target);
        }
        return acc;
    }

    static int argmax_row(const Tensor& probs, std::size_t row) {
        const std::size_t c = probs.shape[1];
        const double* p = probs.data.data() + row * c;
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
            if (p[k] > p[best]) best = k;
        return static_cast<int>(best);
    }

    LossGrad loss_backward(Pass& pass, std::span<const int> labels, LossKind kind,
                           const Exec& exec) {
        const std::size_t n_layers = spec_.layers.size();
        const Tensor& probs = pass.acts[n_layers];
        const Tensor& logits = pass.acts[n_layers - 1];
        const std::size_t b = probs.shape[0], c = probs.shape[1];
        if (labels.size() != b) throw DimensionError("loss: labels/batch mismatch");

        LossGrad out;
        out.grad.assign(params_.total_dim(), 0.0);
        double loss_sum = 0;
        Tensor g;
        std::size_t start_layer;
        if (kind == LossKind::CrossEntropy) {
            // Gradient taken directly at the logits; the probability stage's
            // Jacobian is folded in analytically.
            g = Tensor(logits.shape);
            for (std::size_t s = 0; s < b; ++s) {
                check_label(labels[s]);
                loss_sum += sample_loss(logits, probs, s, labels[s], kind);
                const double* p = probs.data.data() + s * c;
                double* gs = g.data.data() + s * c;
                for (std::size_t k = 0; k < c; ++k)
                    gs[k] = (p[k] - (static_cast<std::size_t>(labels[s]) == k ? 1.0 : 0.0)) /
                            static_cast<double>(b);
            }
            start_layer = n_layers - 2;
        } else {
            g = Tensor(probs.shape);
            for (std::size_t s = 0; s < b; ++s) {
                check_label(labels[s]);
                loss_sum += sample_loss(logits, probs, s, labels[s], kind);
                const double* p = probs.data.data() + s * c;
                double* gs = g.data.data() + s * c;
                for (std::size_t k = 0; k < c; ++k) {
                    const double target = static_cast<std::size_t>(labels[s]) == k ? 1.0 : 0.0;
                    gs[k] = (p[k] >= target ? 1.0 : -1.0) / static_cast<double>(b);
                }
            }
            start_layer = n_layers - 1;
        }
        out.loss = loss_sum / static_cast<double>(b);

        for (std::size_t ii = start_layer + 1; ii-- > 0;) {
            const LayerDesc& d = spec_.layers[ii];
            const Tensor& x = pass.acts[ii];
            Tensor dx;
            if (const auto* lin = std::get_if<LinearDesc>(&d)) {
                // Linear consumes a flattened view; reshape g's source first.
                Tensor xf = x;
                if (x.shape.size() != 2) xf.shape = {x.shape[0], x.size() / x.shape[0]};
                linear_backward(*lin, ii, xf, g, dx, out.grad);
                dx.shape = x.shape;
            } else if (const auto* conv = std::get_if<Conv2dDesc>(&d)) {
                conv_backward(*conv, ii, x, g, dx, out.grad);
            } else if (std::holds_alternative<MaxPool2dDesc>(d)) {
                pool_backward(x, g, pass.caches[ii], dx);
            } else if (std::holds_alternative<ReluDesc>(d)) {
                dx = g;
                for (std::size_t k = 0; k < x.size(); ++k)
                    if (x.data[k] <= 0) dx.data[k] = 0.0;
            } else if (const auto* bn = std::get_if<BatchNormDesc>(&d)) {
                bn_backward(*bn, ii, x, g, exec, pass.caches[ii], dx, out.grad);
            } else if (std::holds_alternative<DropoutDesc>(d)) {
                if (pass.caches[ii].mask.size() == 0) {
                    dx = g;
                } else {
                    dx = g;
                    for (std::size_t k = 0; k < dx.size(); ++k)
                        dx.data[k] *= pass.caches[ii].mask.data[k];
                }
            } else {
                softmax_backward(pass.acts[ii + 1], g, dx);
            }
            g = std::move(dx);
        }
        return out;
    }

    double loss_only(const Tensor& batch, std::span<const int> labels, LossKind kind,
                     const Exec& exec, std::uint64_t dropout_seed) {
        Pass pass;
        run(batch, exec, dropout_seed, 0, pass);
        const Tensor& probs = pass.acts.back();
        const Tensor& logits = pass.acts[pass.acts.size() - 2];
        double loss_sum = 0;
        for (std::size_t s = 0; s < probs.shape[0]; ++s)
            loss_sum += sample_loss(logits, probs, s, labels[s], kind);
        return loss_sum / static_cast<double>(probs.shape[0]);
    }

    FrozenStats capture_stats(const Pass& pass) const {
        FrozenStats frozen;
        frozen.mean.resize(bn_state_.size());
        frozen.var.resize(bn_state_.size());
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            if (bn_index_[i] == static_cast<std::size_t>(-1)) continue;
            frozen.mean[bn_index_[i]] = pass.caches[i].mean;
            frozen.var[bn_index_[i]] = pass.caches[i].var;
        }
        return frozen;
    }

    std::vector<std::size_t> sample_coords(std::size_t max_coords, std::uint64_t seed) const {
        const std::size_t d = params_.total_dim();
        std::vector<std::size_t> coords;
        if (max_coords == 0 || max_coords >= d) {
            coords.resize(d);
            for (std::size_t i = 0; i < d; ++i) coords[i] = i;
            return coords;
        }
        // Partial Fisher-Yates over an index array.
        std::vector<std::size_t> idx(d);
        for (std::size_t i = 0; i < d; ++i) idx[i] = i;
        auto stream = rng::derive(seed, "fd_coords");
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j = i + stream.below(d - i);
            std::swap(idx[i], idx[j]);
        }
        coords.assign(idx.begin(), idx.begin() + max_coords);
        return coords;
    }

    NetworkSpec spec_;
    ParamSet params_;
    std::vector<InitKind> init_kinds_;
    std::vector<std::size_t> param_entry_;  // layer -> first ParamSet entry
    std::vector<std::size_t> bn_index_;     // layer -> BnState index
    std::vector<BnState> bn_state_;
};

}  // namespace resetopt
