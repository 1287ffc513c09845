#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "resetopt/common.hpp"

namespace resetopt {

// Dense row-major tensor of doubles. Indexing is kept explicit and flat;
// layers compute their own offsets in hot loops.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape_in)
        : shape(std::move(shape_in)), data(count(shape), 0.0) {}

    Tensor(std::vector<std::size_t> shape_in, std::vector<double> values)
        : shape(std::move(shape_in)), data(std::move(values)) {
        if (data.size() != count(shape))
            throw DimensionError("Tensor: value count does not match shape");
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return n;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // Row-major offset helpers for the ranks the layers use.
    std::size_t at2(std::size_t i, std::size_t j) const { return i * shape[1] + j; }
    std::size_t at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return ((n * shape[1] + c) * shape[2] + h) * shape[3] + w;
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::span<const double> span() const { return {data.data(), data.size()}; }
    std::span<double> span() { return {data.data(), data.size()}; }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
}

}  // namespace resetopt
