// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "loramerge/matrix.hpp"

namespace loramerge {

// Reverse-mode autodiff over matrix-valued nodes. Nodes are appended in
// topological order by construction; backward walks the list once in
// reverse. Scalars are 1x1 matrices. The op set is exactly what the toy
// transformer and coefficient tuning need -- first-order only.
class Tape {
public:
    using Id = std::int32_t;

    Id leaf(Matrix value, bool trainable = false);
    Id constant(Matrix value) { return leaf(std::move(value), false); }

    Id matmul(Id a, Id b);     // a @ b
    Id matmul_nt(Id a, Id b);  // a @ b^T  (linear layer with out x in weights)
    Id add(Id a, Id b);
    Id scale(Id a, double s);    // constant scalar
    Id scalar_mul(Id s, Id a);   // differentiable 1x1 scalar times matrix
    Id hadamard(Id a, Id b);
    Id transpose(Id a);
    Id leaky_relu(Id a, double negative_slope);
    Id silu(Id a);
    Id softmax_rows(Id a);
    Id softmax_cols(Id a);
    Id rms_norm_rows(Id a, double eps);
    Id mul_row_vec(Id x, Id g);  // g is 1 x cols, broadcast over rows
    Id gather_rows(Id table, std::vector<std::int32_t> row_ids);
    // Multi-head causal self-attention over `batch` packed sequences of
    // length `seq`; q/k/v are (batch*seq) x d_model.
    Id causal_attention(Id q, Id k, Id v, int n_heads, int batch, int seq);
    // Mean of -log softmax(logits)[target] over rows with positive weight.
    Id cross_entropy(Id logits, std::vector<std::int32_t> targets, std::vector<double> weights);
    Id entry(Id m, std::size_t i, std::size_t j);  // single element as 1x1

    const Matrix& value(Id id) const;
    std::size_t node_count() const { return nodes_.size(); }

    // Gradient of the scalar `loss` node w.r.t. every trainable leaf.
    // Trainable leaves the loss does not depend on get a zero gradient.
    std::map<Id, Matrix> backward(Id loss) const;

private:
    enum class Op : std::uint8_t {
        leaf, matmul, matmul_nt, add, scale, scalar_mul, hadamard, transpose,
        leaky_relu, silu, softmax_rows, softmax_cols, rms_norm, mul_row_vec,
        gather_rows, attention, cross_entropy, entry,
    };

    struct Node {
        Op op;
        Id a = -1, b = -1, c = -1;
        Matrix value;
        Matrix aux;       // cached probabilities / row norms for backward
        double param = 0.0;
        std::size_t i = 0, j = 0;
        std::vector<std::int32_t> ids;
        std::vector<double> weights;
        int heads = 0, batch = 0, seq = 0;
        bool trainable = false;
    };

    Id push(Node n);
    const Node& node(Id id) const;
    static const char* op_name(Op op);

    std::vector<Node> nodes_;
};

}  // namespace loramerge
