#pragma once

#include <cstdio>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "resetopt/common.hpp"
#include "resetopt/dataset.hpp"
#include "resetopt/langevin.hpp"
#include "resetopt/network.hpp"
#include "resetopt/rng.hpp"
#include "resetopt/train.hpp"

namespace resetopt {

using json = nlohmann::json;

namespace detail {

/** Reads fields out of one JSON object, remembering which keys were touched
 * so that leftovers can be reported as errors with their full path. */
class StrictSection {
  public:
    StrictSection(const json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_object())
            throw ConfigError("config: " + path_ + " must be an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!node_.contains(key)) return;
        seen_.insert(key);
        try {
            out = node_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: bad value type at " + path_ + "." + key);
        }
    }

    void finish() const {
        for (const auto& [key, value] : node_.items())
            if (!seen_.count(key))
                throw ConfigError("config: unknown key " + path_ + "." + key);
    }

  private:
    const json& node_;
    std::string path_;
    std::set<std::string> seen_;
};

inline const json* section(const json& root, const char* name) {
    return root.contains(name) ? &root.at(name) : nullptr;
}

}  // namespace detail

// --- blocks ----------------------------------------------------------------

struct RunConfig {
    std::uint64_t seed_base = 1;
    std::size_t repetitions = 5;
    std::string output_dir;

    void validate() const {
        require(repetitions >= 1, "run.repetitions must be at least 1");
    }
};

struct NetworkConfig {
    std::string preset = "fcn";  // fcn | small_cnn | vcnn
    std::vector<std::size_t> input_shape;  // empty: derive from the data block
    std::size_t hidden = 50;
    int classes = 10;
    bool batch_norm = true;

    NetworkSpec build(const std::vector<std::size_t>& derived_input) const {
        const auto& shape = input_shape.empty() ? derived_input : input_shape;
        if (preset == "fcn") return fcn_spec(shape, hidden, classes, batch_norm);
        if (preset == "small_cnn") return small_cnn_spec(classes, batch_norm);
        if (preset == "vcnn") return vcnn_spec(classes);
        throw ConfigError("config: network.preset must be fcn, small_cnn, or vcnn");
    }
};

struct DataConfig {
    std::string source = "blobs";  // blobs | cifar
    int classes = 10;
    std::size_t per_class = 200;
    std::size_t dim = 32;
    double separation = 6.0;
    double val_fraction = 0.1;
    std::size_t test_per_class = 50;
    std::uint64_t seed = 7;
    bool clean_validation = true;
    bool standardize = false;
    std::vector<std::string> cifar_train;
    std::vector<std::string> cifar_test;

    void validate() const {
        if (source != "blobs" && source != "cifar")
            throw ConfigError("config: data.source must be blobs or cifar");
        if (source == "cifar" && (cifar_train.empty() || cifar_test.empty()))
            throw ConfigError("config: data.cifar_train and data.cifar_test are required");
        require(val_fraction > 0.0 && val_fraction < 1.0,
                "data.val_fraction must lie in (0,1)");
    }

    std::vector<std::size_t> input_shape() const {
        return source == "cifar" ? std::vector<std::size_t>{3, 32, 32}
                                 : std::vector<std::size_t>{dim};
    }
};

struct NoiseConfig {
    std::string kind = "symmetric";  // symmetric | asymmetric
    double rate = 0.0;
    std::vector<int> flip_map;

    NoiseSpec build() const {
        if (kind == "symmetric") return NoiseSpec::symmetric(rate);
        if (kind == "asymmetric") return NoiseSpec::asymmetric(rate, flip_map);
        throw ConfigError("config: noise.kind must be symmetric or asymmetric");
    }
};

struct TrainingConfig {
    std::size_t batch_size = 16;
    std::int64_t total_iters = 20000;
    std::string loss = "cross_entropy";  // cross_entropy | mae
    std::string sampling = "with_replacement";  // with_replacement | epoch_shuffle
    std::size_t eval_chunk = 256;

    LossKind loss_kind() const {
        if (loss == "cross_entropy") return LossKind::CrossEntropy;
        if (loss == "mae") return LossKind::MeanAbsoluteError;
        throw ConfigError("config: training.loss must be cross_entropy or mae");
    }

    SamplingMode sampling_mode() const {
        if (sampling == "with_replacement") return SamplingMode::WithReplacement;
        if (sampling == "epoch_shuffle") return SamplingMode::EpochShuffle;
        throw ConfigError("config: training.sampling must be with_replacement or epoch_shuffle");
    }

    TrainSetup setup(std::uint64_t seed) const {
        TrainSetup s;
        s.batch_size = batch_size;
        s.total_iters = total_iters;
        s.seed = seed;
        s.sampling = sampling_mode();
        s.loss = loss_kind();
        s.eval_chunk = eval_chunk;
        return s;
    }
};

struct ResetBlock {
    double probability = 0.0;
    std::int64_t patience = 1000;
    std::int64_t validation_interval = 20;
    std::string sections = "all";  // all | former | latter
    double epsilon = 0.0;
    std::string metric = "val_loss";  // val_loss | val_accuracy
    bool fixed_checkpoint = false;

    SectionMask mask() const {
        if (sections == "all") return {true, true};
        if (sections == "former") return {true, false};
        if (sections == "latter") return {false, true};
        throw ConfigError("config: reset.sections must be all, former, or latter");
    }

    ResetConfig build() const {
        ResetConfig cfg;
        cfg.reset_probability = probability;
        cfg.patience = patience;
        cfg.validation_interval = validation_interval;
        cfg.section_mask = mask();
        cfg.perturbation_eps = epsilon;
        cfg.metric = metric == "val_accuracy" ? SelectionMetric::ValAccuracy
                                              : SelectionMetric::ValLoss;
        if (metric != "val_loss" && metric != "val_accuracy")
            throw ConfigError("config: reset.metric must be val_loss or val_accuracy");
        cfg.fixed_checkpoint = fixed_checkpoint;
        cfg.validate();
        return cfg;
    }
};

struct LangevinBlock {
    double diffusion = 1.0;
    double drift = 0.0;
    double target = 1.0;
    double time_step = 1e-3;
    double max_time = 0.0;
    bool bridge_correction = true;
    std::size_t trajectories = 10000;
    std::vector<double> gamma_grid = {0.0, 0.5, 1.0, 2.0, 5.0};

    LangevinConfig build(double gamma) const {
        LangevinConfig cfg;
        cfg.diffusion = diffusion;
        cfg.drift = drift;
        cfg.target = target;
        cfg.reset_rate = gamma;
        cfg.time_step = time_step;
        cfg.max_time = max_time;
        cfg.bridge_correction = bridge_correction;
        cfg.validate();
        return cfg;
    }
};

struct SweepBlock {
    std::string axis = "r";  // r | B | tau | checkpoint_offset | epsilon | section_mask
    std::vector<json> values;
    std::vector<double> r_grid;
};

struct DiagnosticsBlock {
    std::int64_t record_interval = 20;
    std::size_t smooth_window = 50;
    std::size_t diffusion_samples = 0;  // 0 disables the diffusion estimator
    std::int64_t diffusion_interval = 200;
    std::size_t diffusion_batch = 16;
};

// --- the assembled config --------------------------------------------------

struct ExperimentConfig {
    RunConfig run;
    NetworkConfig network;
    DataConfig data;
    NoiseConfig noise;
    OptimizerConfig optimizer;
    TrainingConfig training;
    ResetBlock reset;
    LangevinBlock langevin;
    SweepBlock sweep;
    DiagnosticsBlock diagnostics;

    static ExperimentConfig from_json(const json& root);
    static ExperimentConfig parse_text(const std::string& text) {
        json root;
        try {
            root = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        return from_json(root);
    }
    static ExperimentConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot open " + path);
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        return parse_text(text);
    }

    json to_json() const;

    /** Compact serialization with lexicographically ordered keys; the same
     * settings always canonicalize to the same bytes. */
    std::string canonical_text() const { return to_json().dump(); }

    std::string hash_hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(rng::hash_name(canonical_text())));
        return std::string(buf);
    }
};

inline ExperimentConfig ExperimentConfig::from_json(const json& root) {
    if (!root.is_object()) throw ConfigError("config: top level must be an object");
    static const std::set<std::string> known = {"run",       "network", "data",  "noise",
                                               "optimizer", "training", "reset", "langevin",
                                               "sweep",     "diagnostics"};
    for (const auto& [key, value] : root.items())
        if (!known.count(key)) throw ConfigError("config: unknown section " + key);

    ExperimentConfig cfg;
    if (const json* node = detail::section(root, "run")) {
        detail::StrictSection s(*node, "run");
        s.read("seed_base", cfg.run.seed_base);
        s.read("repetitions", cfg.run.repetitions);
        s.read("output_dir", cfg.run.output_dir);
        s.finish();
    }
    if (const json* node = detail::section(root, "network")) {
        detail::StrictSection s(*node, "network");
        s.read("preset", cfg.network.preset);
        s.read("input_shape", cfg.network.input_shape);
        s.read("hidden", cfg.network.hidden);
        s.read("classes", cfg.network.classes);
        s.read("batch_norm", cfg.network.batch_norm);
        s.finish();
    }
    if (const json* node = detail::section(root, "data")) {
        detail::StrictSection s(*node, "data");
        s.read("source", cfg.data.source);
        s.read("classes", cfg.data.classes);
        s.read("per_class", cfg.data.per_class);
        s.read("dim", cfg.data.dim);
        s.read("separation", cfg.data.separation);
        s.read("val_fraction", cfg.data.val_fraction);
        s.read("test_per_class", cfg.data.test_per_class);
        s.read("seed", cfg.data.seed);
        s.read("clean_validation", cfg.data.clean_validation);
        s.read("standardize", cfg.data.standardize);
        s.read("cifar_train", cfg.data.cifar_train);
        s.read("cifar_test", cfg.data.cifar_test);
        s.finish();
    }
    if (const json* node = detail::section(root, "noise")) {
        detail::StrictSection s(*node, "noise");
        s.read("kind", cfg.noise.kind);
        s.read("rate", cfg.noise.rate);
        s.read("flip_map", cfg.noise.flip_map);
        s.finish();
    }
    if (const json* node = detail::section(root, "optimizer")) {
        detail::StrictSection s(*node, "optimizer");
        s.read("lr", cfg.optimizer.lr);
        s.read("momentum", cfg.optimizer.momentum);
        s.finish();
    }
    if (const json* node = detail::section(root, "training")) {
        detail::StrictSection s(*node, "training");
        s.read("batch_size", cfg.training.batch_size);
        s.read("total_iters", cfg.training.total_iters);
        s.read("loss", cfg.training.loss);
        s.read("sampling", cfg.training.sampling);
        s.read("eval_chunk", cfg.training.eval_chunk);
        s.finish();
    }
    if (const json* node = detail::section(root, "reset")) {
        detail::StrictSection s(*node, "reset");
        s.read("probability", cfg.reset.probability);
        s.read("patience", cfg.reset.patience);
        s.read("validation_interval", cfg.reset.validation_interval);
        s.read("sections", cfg.reset.sections);
        s.read("epsilon", cfg.reset.epsilon);
        s.read("metric", cfg.reset.metric);
        s.read("fixed_checkpoint", cfg.reset.fixed_checkpoint);
        s.finish();
    }
    if (const json* node = detail::section(root, "langevin")) {
        detail::StrictSection s(*node, "langevin");
        s.read("diffusion", cfg.langevin.diffusion);
        s.read("drift", cfg.langevin.drift);
        s.read("target", cfg.langevin.target);
        s.read("time_step", cfg.langevin.time_step);
        s.read("max_time", cfg.langevin.max_time);
        s.read("bridge_correction", cfg.langevin.bridge_correction);
        s.read("trajectories", cfg.langevin.trajectories);
        s.read("gamma_grid", cfg.langevin.gamma_grid);
        s.finish();
    }
    if (const json* node = detail::section(root, "sweep")) {
        detail::StrictSection s(*node, "sweep");
        s.read("axis", cfg.sweep.axis);
        s.read("values", cfg.sweep.values);
        s.read("r_grid", cfg.sweep.r_grid);
        s.finish();
    }
    if (const json* node = detail::section(root, "diagnostics")) {
        detail::StrictSection s(*node, "diagnostics");
        s.read("record_interval", cfg.diagnostics.record_interval);
        s.read("smooth_window", cfg.diagnostics.smooth_window);
        s.read("diffusion_samples", cfg.diagnostics.diffusion_samples);
        s.read("diffusion_interval", cfg.diagnostics.diffusion_interval);
        s.read("diffusion_batch", cfg.diagnostics.diffusion_batch);
        s.finish();
    }

    cfg.run.validate();
    cfg.data.validate();
    return cfg;
}

inline json ExperimentConfig::to_json() const {
    json root;
    root["run"] = {{"seed_base", run.seed_base},
                   {"repetitions", run.repetitions},
                   {"output_dir", run.output_dir}};
    root["network"] = {{"preset", network.preset},
                       {"input_shape", network.input_shape},
                       {"hidden", network.hidden},
                       {"classes", network.classes},
                       {"batch_norm", network.batch_norm}};
    root["data"] = {{"source", data.source},
                    {"classes", data.classes},
                    {"per_class", data.per_class},
                    {"dim", data.dim},
                    {"separation", data.separation},
                    {"val_fraction", data.val_fraction},
                    {"test_per_class", data.test_per_class},
                    {"seed", data.seed},
                    {"clean_validation", data.clean_validation},
                    {"standardize", data.standardize},
                    {"cifar_train", data.cifar_train},
                    {"cifar_test", data.cifar_test}};
    root["noise"] = {{"kind", noise.kind}, {"rate", noise.rate}, {"flip_map", noise.flip_map}};
    root["optimizer"] = {{"lr", optimizer.lr}, {"momentum", optimizer.momentum}};
    root["training"] = {{"batch_size", training.batch_size},
                        {"total_iters", training.total_iters},
                        {"loss", training.loss},
                        {"sampling", training.sampling},
                        {"eval_chunk", training.eval_chunk}};
    root["reset"] = {{"probability", reset.probability},
                     {"patience", reset.patience},
                     {"validation_interval", reset.validation_interval},
                     {"sections", reset.sections},
                     {"epsilon", reset.epsilon},
                     {"metric", reset.metric},
                     {"fixed_checkpoint", reset.fixed_checkpoint}};
    root["langevin"] = {{"diffusion", langevin.diffusion},
                        {"drift", langevin.drift},
                        {"target", langevin.target},
                        {"time_step", langevin.time_step},
                        {"max_time", langevin.max_time},
                        {"bridge_correction", langevin.bridge_correction},
                        {"trajectories", langevin.trajectories},
                        {"gamma_grid", langevin.gamma_grid}};
    root["sweep"] = {{"axis", sweep.axis}, {"values", sweep.values}, {"r_grid", sweep.r_grid}};
    root["diagnostics"] = {{"record_interval", diagnostics.record_interval},
                           {"smooth_window", diagnostics.smooth_window},
                           {"diffusion_samples", diagnostics.diffusion_samples},
                           {"diffusion_interval", diagnostics.diffusion_interval},
                           {"diffusion_batch", diagnostics.diffusion_batch}};
    return root;
}

}  // namespace resetopt
