#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <random>
#include <vector>

#include "akd/common.hpp"

namespace akd {

// Row-major f32 matrix. Reductions that consume it accumulate in f64.
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<float>> rs) {
        DenseMatrix m;
        m.rows = rs.size();
        m.cols = rs.size() ? rs.begin()->size() : 0;
        m.data.reserve(m.rows * m.cols);
        for (const auto& r : rs) {
            if (r.size() != m.cols) throw dim_error("from_rows: ragged rows");
            for (float v : r) m.data.push_back(v);
        }
        return m;
    }

    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const float& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    const float* row(std::size_t r) const { return data.data() + r * cols; }
    float* row(std::size_t r) { return data.data() + r * cols; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const DenseMatrix& o) const { return rows == o.rows && cols == o.cols; }
    bool is_scalar() const { return rows == 1 && cols == 1; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(float v) {
        for (auto& x : data) x = v;
    }
};

inline std::string shape_str(const DenseMatrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
    if (!a.same_shape(b)) throw dim_error(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

// Glorot-uniform init: limit sqrt(6 / (fan_in + fan_out)), fan_in = rows.
inline DenseMatrix glorot_uniform(std::size_t rows, std::size_t cols, std::mt19937& rng) {
    const float limit = std::sqrt(6.0f / static_cast<float>(rows + cols));
    std::uniform_real_distribution<float> dist(-limit, limit);
    DenseMatrix m(rows, cols);
    for (auto& v : m.data) v = dist(rng);
    return m;
}

inline DenseMatrix uniform_matrix(std::size_t rows, std::size_t cols, float lo, float hi, std::mt19937& rng) {
    std::uniform_real_distribution<float> dist(lo, hi);
    DenseMatrix m(rows, cols);
    for (auto& v : m.data) v = dist(rng);
    return m;
}

// Column-wise mean as a 1 x cols row; the READOUT for summary vectors.
inline DenseMatrix readout_mean(const DenseMatrix& h) {
    if (h.rows == 0) throw contract_error("readout_mean: empty input");
    DenseMatrix s(1, h.cols);
    for (std::size_t j = 0; j < h.cols; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < h.rows; ++i) acc += h.at(i, j);
        s.at(0, j) = static_cast<float>(acc / static_cast<double>(h.rows));
    }
    return s;
}

}  // namespace akd
