#pragma once

#include <algorithm>
#include <cstddef>
#include <tuple>
#include <vector>

#include "akd/common.hpp"
#include "akd/dense.hpp"

namespace akd {

// Compressed sparse row matrix. Column indices are strictly increasing
// within each row.
struct CsrMatrix {
    std::size_t n_rows = 0;
    std::size_t n_cols = 0;
    std::vector<std::size_t> row_ptr;  // length n_rows + 1
    std::vector<std::size_t> col_idx;
    std::vector<float> values;

    std::size_t nnz() const { return col_idx.size(); }

    static CsrMatrix identity(std::size_t n) {
        CsrMatrix m;
        m.n_rows = m.n_cols = n;
        m.row_ptr.resize(n + 1);
        m.col_idx.resize(n);
        m.values.assign(n, 1.0f);
        for (std::size_t i = 0; i < n; ++i) {
            m.row_ptr[i] = i;
            m.col_idx[i] = i;
        }
        m.row_ptr[n] = n;
        return m;
    }

    // Entries (row, col, value); duplicates are summed.
    static CsrMatrix from_coo(std::size_t n_rows, std::size_t n_cols,
                              std::vector<std::tuple<std::size_t, std::size_t, float>> entries) {
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            return std::get<0>(a) != std::get<0>(b) ? std::get<0>(a) < std::get<0>(b)
                                                    : std::get<1>(a) < std::get<1>(b);
        });
        CsrMatrix m;
        m.n_rows = n_rows;
        m.n_cols = n_cols;
        m.row_ptr.assign(n_rows + 1, 0);
        for (std::size_t e = 0; e < entries.size();) {
            auto [r, c, v] = entries[e];
            if (r >= n_rows || c >= n_cols) throw dim_error("from_coo: entry out of bounds");
            double acc = v;
            std::size_t e2 = e + 1;
            while (e2 < entries.size() && std::get<0>(entries[e2]) == r && std::get<1>(entries[e2]) == c) {
                acc += std::get<2>(entries[e2]);
                ++e2;
            }
            m.col_idx.push_back(c);
            m.values.push_back(static_cast<float>(acc));
            ++m.row_ptr[r + 1];
            e = e2;
        }
        for (std::size_t i = 0; i < n_rows; ++i) m.row_ptr[i + 1] += m.row_ptr[i];
        return m;
    }

    void validate() const {
        if (row_ptr.size() != n_rows + 1 || row_ptr.front() != 0 || row_ptr.back() != col_idx.size() ||
            col_idx.size() != values.size())
            throw contract_error("CsrMatrix: inconsistent structure");
        for (std::size_t i = 0; i < n_rows; ++i) {
            if (row_ptr[i] > row_ptr[i + 1]) throw contract_error("CsrMatrix: row_ptr not monotone");
            for (std::size_t k = row_ptr[i]; k < row_ptr[i + 1]; ++k) {
                if (col_idx[k] >= n_cols) throw contract_error("CsrMatrix: column out of range");
                if (k > row_ptr[i] && col_idx[k - 1] >= col_idx[k])
                    throw contract_error("CsrMatrix: columns not strictly increasing");
            }
        }
    }

    DenseMatrix to_dense() const {
        DenseMatrix d(n_rows, n_cols);
        for (std::size_t i = 0; i < n_rows; ++i)
            for (std::size_t k = row_ptr[i]; k < row_ptr[i + 1]; ++k) d.at(i, col_idx[k]) = values[k];
        return d;
    }
};

}  // namespace akd
