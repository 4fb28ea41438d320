#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "akd/common.hpp"
#include "akd/csr.hpp"
#include "akd/dense.hpp"

namespace akd {

// Trainable tensor. Persists across tapes; gradients accumulate here
// during backward() and are consumed by the optimizer.
struct Param {
    DenseMatrix value;
    DenseMatrix grad;

    Param() = default;
    explicit Param(DenseMatrix v) : value(std::move(v)), grad(value.rows, value.cols) {}

    void zero_grad() { grad.fill(0.0f); }
};

enum class Op {
    Constant,
    ParamLeaf,
    Matmul,
    Spmm,
    Relu,
    Sigmoid,
    RowSoftmax,
    RowLogSoftmax,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowVector,
    GatherRows,
    ReadoutMean,
    ColSum,
    SumAll,
    SliceCols,
    DiagBilinear,
    BceWithLogits,
    SoftmaxCrossEntropy,
    L1Loss,
    MseLoss,
    KdLoss,
};

struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

struct TapeNode {
    Op op = Op::Constant;
    std::array<int, 3> parents{-1, -1, -1};
    DenseMatrix value;
    DenseMatrix grad;  // allocated on demand in backward()
    bool requires_grad = false;

    // Per-op payloads; only the relevant ones are set.
    Param* param = nullptr;            // ParamLeaf
    const CsrMatrix* csr = nullptr;    // Spmm (structure; values from parent[2] if set)
    double scalar = 0.0;               // Scale factor, KD temperature
    std::size_t c0 = 0, c1 = 0;        // SliceCols range [c0, c1)
    std::vector<std::size_t> indices;  // GatherRows
    std::vector<int> labels;           // SoftmaxCrossEntropy
    DenseMatrix aux;                   // BCE targets
    double scalar_hi = 0.0;            // f64 value of scalar-valued nodes
};

namespace detail {

inline double sigmoid_d(double t) {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

// -[t*log(sigmoid(x)) + (1-t)*log(1-sigmoid(x))] in log-sum-exp form.
inline double bce_term(double x, double t) {
    return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

// One forward/backward pass. Append-only DAG in creation order; backward
// walks it once in reverse. Parameters outlive the tape via Param leaves.
class Tape {
public:
    Value constant(DenseMatrix m) {
        TapeNode n;
        n.op = Op::Constant;
        n.value = std::move(m);
        return push(std::move(n));
    }

    Value param(Param& p) {
        TapeNode n;
        n.op = Op::ParamLeaf;
        n.param = &p;
        n.value = p.value;
        n.requires_grad = true;
        return push(std::move(n));
    }

    Value matmul(Value a, Value b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.cols != B.rows)
            throw dim_error("matmul: " + shape_str(A) + " x " + shape_str(B));
        TapeNode n;
        n.op = Op::Matmul;
        n.parents = {a.id, b.id, -1};
        n.value = DenseMatrix(A.rows, B.cols);
        std::vector<double> acc(B.cols);
        for (std::size_t i = 0; i < A.rows; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t k = 0; k < A.cols; ++k) {
                const double av = A.at(i, k);
                const float* brow = B.row(k);
                for (std::size_t j = 0; j < B.cols; ++j) acc[j] += av * brow[j];
            }
            float* crow = n.value.row(i);
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] = static_cast<float>(acc[j]);
        }
        return push(std::move(n));
    }

    // Sparse-dense product with the CSR's own values.
    Value spmm(const CsrMatrix& s, Value b) { return spmm_impl(s, Value{}, b); }

    // Variant with trainable values (1 x nnz node) replacing s.values.
    Value spmm(const CsrMatrix& s, Value values, Value b) {
        const auto& V = value(values);
        if (V.rows != 1 || V.cols != s.nnz()) throw dim_error("spmm: values must be 1 x nnz");
        return spmm_impl(s, values, b);
    }

    Value relu(Value x) {
        TapeNode n = unary(Op::Relu, x);
        for (std::size_t i = 0; i < n.value.size(); ++i)
            n.value.data[i] = n.value.data[i] > 0.0f ? n.value.data[i] : 0.0f;
        return push(std::move(n));
    }

    Value sigmoid(Value x) {
        TapeNode n = unary(Op::Sigmoid, x);
        for (auto& v : n.value.data) v = static_cast<float>(detail::sigmoid_d(v));
        return push(std::move(n));
    }

    Value row_softmax(Value x) {
        TapeNode n = unary(Op::RowSoftmax, x);
        softmax_rows(n.value, false);
        return push(std::move(n));
    }

    Value row_log_softmax(Value x) {
        TapeNode n = unary(Op::RowLogSoftmax, x);
        softmax_rows(n.value, true);
        return push(std::move(n));
    }

    Value add(Value a, Value b) { return binary_same_shape(Op::Add, a, b); }
    Value sub(Value a, Value b) { return binary_same_shape(Op::Sub, a, b); }
    Value mul(Value a, Value b) { return binary_same_shape(Op::Mul, a, b); }

    Value scale(Value x, double s) {
        TapeNode n = unary(Op::Scale, x);
        n.scalar = s;
        for (auto& v : n.value.data) v = static_cast<float>(s * v);
        return push(std::move(n));
    }

    // n x d plus a 1 x d row vector (the one permitted broadcast).
    Value add_row_vector(Value a, Value bias) {
        const auto& A = value(a);
        const auto& B = value(bias);
        if (B.rows != 1 || B.cols != A.cols)
            throw dim_error("add_row_vector: " + shape_str(A) + " + " + shape_str(B));
        TapeNode n;
        n.op = Op::AddRowVector;
        n.parents = {a.id, bias.id, -1};
        n.value = A;
        for (std::size_t i = 0; i < A.rows; ++i)
            for (std::size_t j = 0; j < A.cols; ++j) n.value.at(i, j) += B.at(0, j);
        return push(std::move(n));
    }

    Value gather_rows(Value a, std::vector<std::size_t> idx) {
        const auto& A = value(a);
        TapeNode n;
        n.op = Op::GatherRows;
        n.parents = {a.id, -1, -1};
        n.value = DenseMatrix(idx.size(), A.cols);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= A.rows) throw index_error("gather_rows: row index out of range");
            for (std::size_t j = 0; j < A.cols; ++j) n.value.at(i, j) = A.at(idx[i], j);
        }
        n.indices = std::move(idx);
        return push(std::move(n));
    }

    Value readout_mean(Value h) {
        const auto& H = value(h);
        if (H.rows == 0) throw contract_error("readout_mean: empty input");
        TapeNode n;
        n.op = Op::ReadoutMean;
        n.parents = {h.id, -1, -1};
        n.value = akd::readout_mean(H);
        return push(std::move(n));
    }

    Value col_sum(Value h) {
        const auto& H = value(h);
        TapeNode n;
        n.op = Op::ColSum;
        n.parents = {h.id, -1, -1};
        n.value = DenseMatrix(1, H.cols);
        for (std::size_t j = 0; j < H.cols; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < H.rows; ++i) acc += H.at(i, j);
            n.value.at(0, j) = static_cast<float>(acc);
        }
        return push(std::move(n));
    }

    Value sum_all(Value x) {
        const auto& X = value(x);
        TapeNode n;
        n.op = Op::SumAll;
        n.parents = {x.id, -1, -1};
        double acc = 0.0;
        for (float v : X.data) acc += v;
        n.scalar_hi = acc;
        n.value = DenseMatrix(1, 1, static_cast<float>(acc));
        return push(std::move(n));
    }

    Value slice_cols(Value a, std::size_t c0, std::size_t c1) {
        const auto& A = value(a);
        if (c0 >= c1 || c1 > A.cols) throw dim_error("slice_cols: bad range");
        TapeNode n;
        n.op = Op::SliceCols;
        n.parents = {a.id, -1, -1};
        n.c0 = c0;
        n.c1 = c1;
        n.value = DenseMatrix(A.rows, c1 - c0);
        for (std::size_t i = 0; i < A.rows; ++i)
            for (std::size_t j = c0; j < c1; ++j) n.value.at(i, j - c0) = A.at(i, j);
        return push(std::move(n));
    }

    // Per-row <h_a[i], diag(w) h_b[i]> as an n x 1 column of scores.
    Value diag_bilinear(Value h_a, Value w, Value h_b) {
        const auto& A = value(h_a);
        const auto& W = value(w);
        const auto& B = value(h_b);
        if (W.rows != 1 || W.cols != A.cols || !A.same_shape(B))
            throw dim_error("diag_bilinear: " + shape_str(A) + ", " + shape_str(W) + ", " + shape_str(B));
        TapeNode n;
        n.op = Op::DiagBilinear;
        n.parents = {h_a.id, w.id, h_b.id};
        n.value = DenseMatrix(A.rows, 1);
        for (std::size_t i = 0; i < A.rows; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < A.cols; ++j)
                acc += static_cast<double>(A.at(i, j)) * W.at(0, j) * B.at(i, j);
            n.value.at(i, 0) = static_cast<float>(acc);
        }
        return push(std::move(n));
    }

    // Mean over elements of the stable binary cross entropy on logits.
    Value bce_with_logits(Value logits, DenseMatrix targets) {
        const auto& X = value(logits);
        require_same_shape(X, targets, "bce_with_logits");
        for (float t : targets.data)
            if (t != 0.0f && t != 1.0f) throw contract_error("bce_with_logits: targets must be 0 or 1");
        TapeNode n;
        n.op = Op::BceWithLogits;
        n.parents = {logits.id, -1, -1};
        double acc = 0.0;
        for (std::size_t i = 0; i < X.size(); ++i) acc += detail::bce_term(X.data[i], targets.data[i]);
        n.scalar_hi = acc / static_cast<double>(X.size());
        n.value = DenseMatrix(1, 1, static_cast<float>(n.scalar_hi));
        n.aux = std::move(targets);
        return push(std::move(n));
    }

    // Mean over rows of -log_softmax(row)[label].
    Value softmax_cross_entropy(Value logits, std::vector<int> labels) {
        const auto& Z = value(logits);
        if (labels.size() != Z.rows) throw dim_error("softmax_cross_entropy: one label per row");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= Z.cols)
                throw index_error("softmax_cross_entropy: label out of range [0, C)");
        TapeNode n;
        n.op = Op::SoftmaxCrossEntropy;
        n.parents = {logits.id, -1, -1};
        double acc = 0.0;
        for (std::size_t i = 0; i < Z.rows; ++i) {
            const double lse = row_logsumexp(Z, i);
            acc += lse - Z.at(i, static_cast<std::size_t>(labels[i]));
        }
        n.scalar_hi = acc / static_cast<double>(Z.rows);
        n.value = DenseMatrix(1, 1, static_cast<float>(n.scalar_hi));
        n.labels = std::move(labels);
        return push(std::move(n));
    }

    // Mean over rows of the per-row L1 norm of a - b.
    Value l1_loss(Value a, Value b) {
        const auto& A = value(a);
        const auto& B = value(b);
        require_same_shape(A, B, "l1_loss");
        TapeNode n;
        n.op = Op::L1Loss;
        n.parents = {a.id, b.id, -1};
        double acc = 0.0;
        for (std::size_t i = 0; i < A.size(); ++i) acc += std::abs(static_cast<double>(A.data[i]) - B.data[i]);
        n.scalar_hi = acc / static_cast<double>(A.rows);
        n.value = DenseMatrix(1, 1, static_cast<float>(n.scalar_hi));
        return push(std::move(n));
    }

    // Mean over all entries of (a - b)^2.
    Value mse_loss(Value a, Value b) {
        const auto& A = value(a);
        const auto& B = value(b);
        require_same_shape(A, B, "mse_loss");
        TapeNode n;
        n.op = Op::MseLoss;
        n.parents = {a.id, b.id, -1};
        double acc = 0.0;
        for (std::size_t i = 0; i < A.size(); ++i) {
            const double d = static_cast<double>(A.data[i]) - B.data[i];
            acc += d * d;
        }
        n.scalar_hi = acc / static_cast<double>(A.size());
        n.value = DenseMatrix(1, 1, static_cast<float>(n.scalar_hi));
        return push(std::move(n));
    }

    // T^2 * mean over rows of KL(softmax(z_t/T) || softmax(z_s/T)).
    Value kd_loss(Value z_s, Value z_t, double temperature) {
        if (temperature <= 0.0) throw contract_error("kd_loss: temperature must be positive");
        const auto& S = value(z_s);
        const auto& T = value(z_t);
        require_same_shape(S, T, "kd_loss");
        TapeNode n;
        n.op = Op::KdLoss;
        n.parents = {z_s.id, z_t.id, -1};
        n.scalar = temperature;
        double acc = 0.0;
        std::vector<double> logp(S.cols), logq(S.cols);
        for (std::size_t i = 0; i < S.rows; ++i) {
            row_log_probs(T, i, temperature, logp);
            row_log_probs(S, i, temperature, logq);
            for (std::size_t j = 0; j < S.cols; ++j) acc += std::exp(logp[j]) * (logp[j] - logq[j]);
        }
        n.scalar_hi = acc * temperature * temperature / static_cast<double>(S.rows);
        n.value = DenseMatrix(1, 1, static_cast<float>(n.scalar_hi));
        return push(std::move(n));
    }

    const DenseMatrix& value(Value v) const { return node(v).value; }
    const DenseMatrix& grad(Value v) const { return node(v).grad; }

    // f64 value of a scalar reduction node, before the f32 rounding of the cell.
    double scalar_value(Value v) const {
        const auto& n = node(v);
        if (!n.value.is_scalar()) throw contract_error("scalar_value: node is not scalar");
        switch (n.op) {
            case Op::SumAll:
            case Op::BceWithLogits:
            case Op::SoftmaxCrossEntropy:
            case Op::L1Loss:
            case Op::MseLoss:
            case Op::KdLoss:
                return n.scalar_hi;
            default:
                return n.value.at(0, 0);
        }
    }

    const std::vector<TapeNode>& nodes() const { return nodes_; }

    // Reverse sweep from a scalar loss. Parameter gradients accumulate
    // into their Param::grad buffers.
    void backward(Value loss) {
        auto& ln = node(loss);
        if (!ln.value.is_scalar()) throw contract_error("backward: loss must be scalar");
        if (!ln.requires_grad) return;  // constant loss: all gradients stay zero
        ensure_grad(ln);
        ln.grad.at(0, 0) = 1.0f;
        for (int id = loss.id; id >= 0; --id) {
            TapeNode& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            propagate(n);
        }
        for (auto& n : nodes_)
            if (n.op == Op::ParamLeaf && n.grad.size() != 0)
                for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad.data[i] += n.grad.data[i];
    }

private:
    std::vector<TapeNode> nodes_;

    TapeNode& node(Value v) {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw contract_error("tape: invalid value handle");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const TapeNode& node(Value v) const { return const_cast<Tape*>(this)->node(v); }

    Value push(TapeNode n) {
        for (int p : n.parents)
            if (p >= 0 && nodes_[static_cast<std::size_t>(p)].requires_grad) n.requires_grad = true;
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    TapeNode unary(Op op, Value x) {
        TapeNode n;
        n.op = op;
        n.parents = {x.id, -1, -1};
        n.value = value(x);
        return n;
    }

    Value binary_same_shape(Op op, Value a, Value b) {
        const auto& A = value(a);
        const auto& B = value(b);
        require_same_shape(A, B, op == Op::Add ? "add" : op == Op::Sub ? "sub" : "mul");
        TapeNode n;
        n.op = op;
        n.parents = {a.id, b.id, -1};
        n.value = A;
        if (op == Op::Add)
            for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] += B.data[i];
        else if (op == Op::Sub)
            for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] -= B.data[i];
        else
            for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] *= B.data[i];
        return push(std::move(n));
    }

    Value spmm_impl(const CsrMatrix& s, Value values, Value b) {
        const auto& B = value(b);
        if (s.n_cols != B.rows)
            throw dim_error("spmm: " + std::to_string(s.n_rows) + "x" + std::to_string(s.n_cols) + " x " +
                            shape_str(B));
        const float* vals = values.valid() ? value(values).data.data() : s.values.data();
        TapeNode n;
        n.op = Op::Spmm;
        n.parents = {b.id, -1, values.id};
        n.csr = &s;
        n.value = DenseMatrix(s.n_rows, B.cols);
        std::vector<double> acc(B.cols);
        for (std::size_t i = 0; i < s.n_rows; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t k = s.row_ptr[i]; k < s.row_ptr[i + 1]; ++k) {
                const double v = vals[k];
                const float* brow = B.row(s.col_idx[k]);
                for (std::size_t j = 0; j < B.cols; ++j) acc[j] += v * brow[j];
            }
            float* crow = n.value.row(i);
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] = static_cast<float>(acc[j]);
        }
        return push(std::move(n));
    }

    static void ensure_grad(TapeNode& n) {
        if (n.grad.size() == 0) n.grad = DenseMatrix(n.value.rows, n.value.cols);
    }

    TapeNode* parent_for_grad(int id) {
        if (id < 0) return nullptr;
        TapeNode& p = nodes_[static_cast<std::size_t>(id)];
        if (!p.requires_grad) return nullptr;
        ensure_grad(p);
        return &p;
    }

    static double row_logsumexp(const DenseMatrix& z, std::size_t i) {
        double m = z.at(i, 0);
        for (std::size_t j = 1; j < z.cols; ++j) m = std::max(m, static_cast<double>(z.at(i, j)));
        double s = 0.0;
        for (std::size_t j = 0; j < z.cols; ++j) s += std::exp(z.at(i, j) - m);
        return m + std::log(s);
    }

    static void row_log_probs(const DenseMatrix& z, std::size_t i, double temperature, std::vector<double>& out) {
        double m = z.at(i, 0) / temperature;
        for (std::size_t j = 1; j < z.cols; ++j) m = std::max(m, z.at(i, j) / temperature);
        double s = 0.0;
        for (std::size_t j = 0; j < z.cols; ++j) {
            out[j] = z.at(i, j) / temperature - m;
            s += std::exp(out[j]);
        }
        const double lse = std::log(s);
        for (std::size_t j = 0; j < z.cols; ++j) out[j] -= lse;
    }

    static void softmax_rows(DenseMatrix& m, bool log_form) {
        for (std::size_t i = 0; i < m.rows; ++i) {
            double mx = m.at(i, 0);
            for (std::size_t j = 1; j < m.cols; ++j) mx = std::max(mx, static_cast<double>(m.at(i, j)));
            double s = 0.0;
            for (std::size_t j = 0; j < m.cols; ++j) s += std::exp(m.at(i, j) - mx);
            const double lse = mx + std::log(s);
            for (std::size_t j = 0; j < m.cols; ++j) {
                const double t = m.at(i, j) - lse;
                m.at(i, j) = static_cast<float>(log_form ? t : std::exp(t));
            }
        }
    }

    void propagate(TapeNode& n) {
        switch (n.op) {
            case Op::Constant:
            case Op::ParamLeaf:
                return;
            case Op::Matmul:
                backward_matmul(n);
                return;
            case Op::Spmm:
                backward_spmm(n);
                return;
            case Op::Relu: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.value.size(); ++i)
                        if (p->value.data[i] > 0.0f) p->grad.data[i] += n.grad.data[i];
                return;
            }
            case Op::Sigmoid: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.value.size(); ++i) {
                        const double y = n.value.data[i];
                        p->grad.data[i] += static_cast<float>(n.grad.data[i] * y * (1.0 - y));
                    }
                return;
            }
            case Op::RowSoftmax: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.value.rows; ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < n.value.cols; ++j)
                            dot += static_cast<double>(n.grad.at(i, j)) * n.value.at(i, j);
                        for (std::size_t j = 0; j < n.value.cols; ++j)
                            p->grad.at(i, j) += static_cast<float>(n.value.at(i, j) * (n.grad.at(i, j) - dot));
                    }
                return;
            }
            case Op::RowLogSoftmax: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.value.rows; ++i) {
                        double gsum = 0.0;
                        for (std::size_t j = 0; j < n.value.cols; ++j) gsum += n.grad.at(i, j);
                        for (std::size_t j = 0; j < n.value.cols; ++j)
                            p->grad.at(i, j) +=
                                static_cast<float>(n.grad.at(i, j) - std::exp(n.value.at(i, j)) * gsum);
                    }
                return;
            }
            case Op::Add: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] += n.grad.data[i];
                if (TapeNode* p = parent_for_grad(n.parents[1]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] += n.grad.data[i];
                return;
            }
            case Op::Sub: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] += n.grad.data[i];
                if (TapeNode* p = parent_for_grad(n.parents[1]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] -= n.grad.data[i];
                return;
            }
            case Op::Mul: {
                const auto& A = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const auto& B = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] += n.grad.data[i] * B.data[i];
                if (TapeNode* p = parent_for_grad(n.parents[1]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] += n.grad.data[i] * A.data[i];
                return;
            }
            case Op::Scale: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                        p->grad.data[i] += static_cast<float>(n.scalar * n.grad.data[i]);
                return;
            }
            case Op::AddRowVector: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] += n.grad.data[i];
                if (TapeNode* p = parent_for_grad(n.parents[1]))
                    for (std::size_t j = 0; j < n.grad.cols; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < n.grad.rows; ++i) acc += n.grad.at(i, j);
                        p->grad.at(0, j) += static_cast<float>(acc);
                    }
                return;
            }
            case Op::GatherRows: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.indices.size(); ++i)
                        for (std::size_t j = 0; j < n.grad.cols; ++j)
                            p->grad.at(n.indices[i], j) += n.grad.at(i, j);
                return;
            }
            case Op::ReadoutMean: {
                if (TapeNode* p = parent_for_grad(n.parents[0])) {
                    const float inv = 1.0f / static_cast<float>(p->value.rows);
                    for (std::size_t i = 0; i < p->value.rows; ++i)
                        for (std::size_t j = 0; j < p->value.cols; ++j)
                            p->grad.at(i, j) += inv * n.grad.at(0, j);
                }
                return;
            }
            case Op::ColSum: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < p->value.rows; ++i)
                        for (std::size_t j = 0; j < p->value.cols; ++j) p->grad.at(i, j) += n.grad.at(0, j);
                return;
            }
            case Op::SumAll: {
                if (TapeNode* p = parent_for_grad(n.parents[0])) {
                    const float g = n.grad.at(0, 0);
                    for (auto& v : p->grad.data) v += g;
                }
                return;
            }
            case Op::SliceCols: {
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < n.grad.rows; ++i)
                        for (std::size_t j = 0; j < n.grad.cols; ++j) p->grad.at(i, n.c0 + j) += n.grad.at(i, j);
                return;
            }
            case Op::DiagBilinear:
                backward_diag_bilinear(n);
                return;
            case Op::BceWithLogits: {
                if (TapeNode* p = parent_for_grad(n.parents[0])) {
                    const double g = n.grad.at(0, 0) / static_cast<double>(p->value.size());
                    for (std::size_t i = 0; i < p->value.size(); ++i)
                        p->grad.data[i] +=
                            static_cast<float>(g * (detail::sigmoid_d(p->value.data[i]) - n.aux.data[i]));
                }
                return;
            }
            case Op::SoftmaxCrossEntropy: {
                if (TapeNode* p = parent_for_grad(n.parents[0])) {
                    const auto& Z = p->value;
                    const double g = n.grad.at(0, 0) / static_cast<double>(Z.rows);
                    for (std::size_t i = 0; i < Z.rows; ++i) {
                        const double lse = row_logsumexp(Z, i);
                        for (std::size_t j = 0; j < Z.cols; ++j) {
                            double d = std::exp(Z.at(i, j) - lse);
                            if (static_cast<std::size_t>(n.labels[i]) == j) d -= 1.0;
                            p->grad.at(i, j) += static_cast<float>(g * d);
                        }
                    }
                }
                return;
            }
            case Op::L1Loss: {
                const auto& A = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const auto& B = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const double g = n.grad.at(0, 0) / static_cast<double>(A.rows);
                // sign(0) = 0: the chosen subgradient at ties
                auto sgn = [](float a, float b) { return a > b ? 1.0 : (a < b ? -1.0 : 0.0); };
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < A.size(); ++i)
                        p->grad.data[i] += static_cast<float>(g * sgn(A.data[i], B.data[i]));
                if (TapeNode* p = parent_for_grad(n.parents[1]))
                    for (std::size_t i = 0; i < A.size(); ++i)
                        p->grad.data[i] -= static_cast<float>(g * sgn(A.data[i], B.data[i]));
                return;
            }
            case Op::MseLoss: {
                const auto& A = nodes_[static_cast<std::size_t>(n.parents[0])].value;
                const auto& B = nodes_[static_cast<std::size_t>(n.parents[1])].value;
                const double g = 2.0 * n.grad.at(0, 0) / static_cast<double>(A.size());
                if (TapeNode* p = parent_for_grad(n.parents[0]))
                    for (std::size_t i = 0; i < A.size(); ++i)
                        p->grad.data[i] += static_cast<float>(g * (static_cast<double>(A.data[i]) - B.data[i]));
                if (TapeNode* p = parent_for_grad(n.parents[1]))
                    for (std::size_t i = 0; i < A.size(); ++i)
                        p->grad.data[i] -= static_cast<float>(g * (static_cast<double>(A.data[i]) - B.data[i]));
                return;
            }
            case Op::KdLoss:
                backward_kd(n);
                return;
        }
    }

    void backward_matmul(TapeNode& n) {
        const auto& A = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const auto& B = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        const auto& G = n.grad;
        if (TapeNode* p = parent_for_grad(n.parents[0])) {
            // dA[i,k] = sum_j G[i,j] * B[k,j]
            for (std::size_t i = 0; i < A.rows; ++i)
                for (std::size_t k = 0; k < A.cols; ++k) {
                    double acc = 0.0;
                    const float* grow = G.row(i);
                    const float* brow = B.row(k);
                    for (std::size_t j = 0; j < B.cols; ++j) acc += static_cast<double>(grow[j]) * brow[j];
                    p->grad.at(i, k) += static_cast<float>(acc);
                }
        }
        if (TapeNode* p = parent_for_grad(n.parents[1])) {
            // dB[k,j] = sum_i A[i,k] * G[i,j]
            std::vector<double> acc(B.rows * B.cols, 0.0);
            for (std::size_t i = 0; i < A.rows; ++i) {
                const float* grow = G.row(i);
                for (std::size_t k = 0; k < A.cols; ++k) {
                    const double av = A.at(i, k);
                    double* arow = acc.data() + k * B.cols;
                    for (std::size_t j = 0; j < B.cols; ++j) arow[j] += av * grow[j];
                }
            }
            for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad.data[i] += static_cast<float>(acc[i]);
        }
    }

    void backward_spmm(TapeNode& n) {
        const CsrMatrix& s = *n.csr;
        const auto& B = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const float* vals =
            n.parents[2] >= 0 ? nodes_[static_cast<std::size_t>(n.parents[2])].value.data.data() : s.values.data();
        if (TapeNode* p = parent_for_grad(n.parents[0])) {
            // dB = s^T * G, applied as row scatters
            std::vector<double> acc(B.rows * B.cols, 0.0);
            for (std::size_t i = 0; i < s.n_rows; ++i) {
                const float* grow = n.grad.row(i);
                for (std::size_t k = s.row_ptr[i]; k < s.row_ptr[i + 1]; ++k) {
                    const double v = vals[k];
                    double* arow = acc.data() + s.col_idx[k] * B.cols;
                    for (std::size_t j = 0; j < B.cols; ++j) arow[j] += v * grow[j];
                }
            }
            for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad.data[i] += static_cast<float>(acc[i]);
        }
        if (TapeNode* p = parent_for_grad(n.parents[2])) {
            // d values[k at (i,c)] = sum_j G[i,j] * B[c,j]
            for (std::size_t i = 0; i < s.n_rows; ++i) {
                const float* grow = n.grad.row(i);
                for (std::size_t k = s.row_ptr[i]; k < s.row_ptr[i + 1]; ++k) {
                    const float* brow = B.row(s.col_idx[k]);
                    double acc = 0.0;
                    for (std::size_t j = 0; j < B.cols; ++j) acc += static_cast<double>(grow[j]) * brow[j];
                    p->grad.at(0, k) += static_cast<float>(acc);
                }
            }
        }
    }

    void backward_diag_bilinear(TapeNode& n) {
        const auto& A = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const auto& W = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        const auto& B = nodes_[static_cast<std::size_t>(n.parents[2])].value;
        if (TapeNode* p = parent_for_grad(n.parents[0]))
            for (std::size_t i = 0; i < A.rows; ++i) {
                const double g = n.grad.at(i, 0);
                for (std::size_t j = 0; j < A.cols; ++j)
                    p->grad.at(i, j) += static_cast<float>(g * W.at(0, j) * B.at(i, j));
            }
        if (TapeNode* p = parent_for_grad(n.parents[1]))
            for (std::size_t j = 0; j < A.cols; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < A.rows; ++i)
                    acc += static_cast<double>(n.grad.at(i, 0)) * A.at(i, j) * B.at(i, j);
                p->grad.at(0, j) += static_cast<float>(acc);
            }
        if (TapeNode* p = parent_for_grad(n.parents[2]))
            for (std::size_t i = 0; i < A.rows; ++i) {
                const double g = n.grad.at(i, 0);
                for (std::size_t j = 0; j < A.cols; ++j)
                    p->grad.at(i, j) += static_cast<float>(g * W.at(0, j) * A.at(i, j));
            }
    }

    void backward_kd(TapeNode& n) {
        const auto& S = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const auto& T = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        const double temp = n.scalar;
        const double g = n.grad.at(0, 0) * temp / static_cast<double>(S.rows);
        std::vector<double> logp(S.cols), logq(S.cols);
        TapeNode* ps = parent_for_grad(n.parents[0]);
        TapeNode* pt = parent_for_grad(n.parents[1]);
        if (!ps && !pt) return;
        for (std::size_t i = 0; i < S.rows; ++i) {
            row_log_probs(T, i, temp, logp);
            row_log_probs(S, i, temp, logq);
            if (ps)
                for (std::size_t j = 0; j < S.cols; ++j)
                    ps->grad.at(i, j) += static_cast<float>(g * (std::exp(logq[j]) - std::exp(logp[j])));
            if (pt) {
                double kl = 0.0;
                for (std::size_t j = 0; j < S.cols; ++j) kl += std::exp(logp[j]) * (logp[j] - logq[j]);
                for (std::size_t j = 0; j < S.cols; ++j)
                    pt->grad.at(i, j) += static_cast<float>(g * std::exp(logp[j]) * (logp[j] - logq[j] - kl));
            }
        }
    }
};

}  // namespace akd
