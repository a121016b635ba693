#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctrl/rng.hpp"

namespace ctrl::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major tensor of 64-bit floats.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor vector(std::vector<double> d) {
        const std::size_t n = d.size();
        return Tensor({n}, std::move(d));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> d) {
        return Tensor({rows, cols}, std::move(d));
    }
    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = stddev * rng.normal();
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    double& at(std::size_t i) {
        assert(i < data.size());
        return data[i];
    }
    double at(std::size_t i) const {
        assert(i < data.size());
        return data[i];
    }
    double& at(std::size_t i, std::size_t j) {
        assert(rank() == 2 && i < shape[0] && j < shape[1]);
        return data[i * shape[1] + j];
    }
    double at(std::size_t i, std::size_t j) const {
        assert(rank() == 2 && i < shape[0] && j < shape[1]);
        return data[i * shape[1] + j];
    }
    double& at(std::size_t c, std::size_t h, std::size_t w) {
        assert(rank() == 3 && c < shape[0] && h < shape[1] && w < shape[2]);
        return data[(c * shape[1] + h) * shape[2] + w];
    }
    double at(std::size_t c, std::size_t h, std::size_t w) const {
        assert(rank() == 3 && c < shape[0] && h < shape[1] && w < shape[2]);
        return data[(c * shape[1] + h) * shape[2] + w];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

}  // namespace ctrl::diff
