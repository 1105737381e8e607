#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsc {

// Dense row-major matrix of 64-bit floats. The universal carrier for
// weights, adapter factors and activations. Entries must be finite when
// constructed from external data; internal algebra reuses the unchecked
// zero-initialized constructor.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Matrix() = default;

    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    Matrix(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols) {
            throw std::invalid_argument("Matrix: data length " + std::to_string(data.size()) +
                                        " does not match " + std::to_string(rows) + "x" +
                                        std::to_string(cols));
        }
        for (double v : data) {
            if (!std::isfinite(v)) {
                throw std::invalid_argument("Matrix: non-finite entry on construction");
            }
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.data[i * n + i] = 1.0;
        return m;
    }

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    bool empty() const { return rows == 0 || cols == 0; }
    std::size_t size() const { return rows * cols; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

}  // namespace nsc
