#pragma once

#include <cstddef>
#include <string>
#include <variant>

namespace resetopt {

// Layer descriptors. A network is a flat sequence of these; shapes are
// validated once up front and kernels trust them afterwards.

struct LinearDesc {
    std::size_t in = 0;
    std::size_t out = 0;
};

struct Conv2dDesc {
    std::size_t in_ch = 0;
    std::size_t out_ch = 0;
    std::size_t kernel = 3;
    std::size_t pad = 1;
    std::size_t stride = 1;
};

struct MaxPool2dDesc {
    std::size_t kernel = 2;
    std::size_t pad = 0;
    std::size_t stride = 2;
};

struct ReluDesc {};

struct BatchNormDesc {
    std::size_t features = 0;
    double epsilon = 1e-5;
    double momentum = 0.1;
};

struct DropoutDesc {
    double p = 0.2;
};

struct SoftmaxDesc {};

using LayerDesc = std::variant<LinearDesc, Conv2dDesc, MaxPool2dDesc, ReluDesc, BatchNormDesc,
                               DropoutDesc, SoftmaxDesc>;

inline const char* layer_kind(const LayerDesc& d) {
    struct Visitor {
        const char* operator()(const LinearDesc&) const { return "linear"; }
        const char* operator()(const Conv2dDesc&) const { return "conv2d"; }
        const char* operator()(const MaxPool2dDesc&) const { return "maxpool2d"; }
        const char* operator()(const ReluDesc&) const { return "relu"; }
        const char* operator()(const BatchNormDesc&) const { return "batchnorm"; }
        const char* operator()(const DropoutDesc&) const { return "dropout"; }
        const char* operator()(const SoftmaxDesc&) const { return "softmax"; }
    };
    return std::visit(Visitor{}, d);
}

inline bool layer_has_params(const LayerDesc& d) {
    return std::holds_alternative<LinearDesc>(d) || std::holds_alternative<Conv2dDesc>(d) ||
           std::holds_alternative<BatchNormDesc>(d);
}

}  // namespace resetopt
