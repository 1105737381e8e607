#pragma once

#include <functional>
#include <vector>

#include "nsc/matrix.hpp"

namespace nsc::ad {

// Define-by-run reverse-mode tape over Matrix values. Values are computed
// eagerly; backward() replays the recorded closures in reverse creation
// order. Scalars are 1x1 matrices.
class Tape {
public:
    using Var = std::size_t;

    Var leaf(Matrix value, bool requires_grad);
    Var scalar_leaf(double value, bool requires_grad);

    const Matrix& value(Var v) const { return nodes_[v].value; }
    const Matrix& grad(Var v) const { return nodes_[v].grad; }
    double scalar(Var v) const { return nodes_[v].value.data[0]; }

    Var matmul(Var a, Var b);     // A * B
    Var matmul_nt(Var a, Var b);  // A * B^T
    Var add(Var a, Var b);
    Var scale_const(Var a, double c);
    // base + scalar * direction, with a constant direction matrix
    Var add_scaled(Var base, Var scalar, Matrix direction);
    Var add_row_const(Var a, Matrix row);  // broadcast-add a 1 x d constant row

    Var layer_norm(Var x, Matrix gain, Matrix bias);  // row-wise, frozen affine
    Var gelu(Var x);
    // fused multi-head self-attention over row blocks of q/k/v (one block of
    // seq rows per sample); no masking
    Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads);
    Var mean_pool(Var x, std::size_t batch, std::size_t seq);  // (batch*seq, d) -> (batch, d)

    Var cross_entropy(Var logits, std::vector<int> labels);  // scalar, mean NLL
    Var mse(Var pred, Matrix targets);                       // scalar, mean over entries
    Var mean_entropy(Var logits);                            // scalar, natural log

    // per-row null-space ratio |z - A^T G^-1 A z| / |z| against a fixed
    // down-projection; returns an (n, 1) column of ratios in [0, 1]
    Var null_ratio_batch(Var z, Matrix a, Matrix gram_inv);

    Var mean_vector(Var v);                                           // (n,1) -> scalar
    Var combine(const std::vector<Var>& xs, const std::vector<double>& ws);  // scalar sum

    void backward(Var out);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        std::function<void(Tape&)> back;  // empty for leaves / constant paths
    };

    Var push(Matrix value, bool requires_grad, std::function<void(Tape&)> back);
    Matrix& grad_ref(Var v) { return nodes_[v].grad; }
    bool needs(Var v) const { return nodes_[v].requires_grad; }

    std::vector<Node> nodes_;
};

}  // namespace nsc::ad
