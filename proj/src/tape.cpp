// SPDX-License-Identifier: Apache-2.0
#include "loramerge/tape.hpp"

#include <cmath>

#include "loramerge/kernels.hpp"

namespace loramerge {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tape::Id Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
}

const Tape::Node& Tape::node(Id id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw ArgumentError("tape: invalid node id " + std::to_string(id));
    return nodes_[static_cast<std::size_t>(id)];
}

const Matrix& Tape::value(Id id) const { return node(id).value; }

const char* Tape::op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::matmul: return "matmul";
        case Op::matmul_nt: return "matmul_nt";
        case Op::add: return "add";
        case Op::scale: return "scale";
        case Op::scalar_mul: return "scalar_mul";
        case Op::hadamard: return "hadamard";
        case Op::transpose: return "transpose";
        case Op::leaky_relu: return "leaky_relu";
        case Op::silu: return "silu";
        case Op::softmax_rows: return "softmax_rows";
        case Op::softmax_cols: return "softmax_cols";
        case Op::rms_norm: return "rms_norm";
        case Op::mul_row_vec: return "mul_row_vec";
        case Op::gather_rows: return "gather_rows";
        case Op::attention: return "attention";
        case Op::cross_entropy: return "cross_entropy";
        case Op::entry: return "entry";
    }
    return "?";
}

Tape::Id Tape::leaf(Matrix value, bool trainable) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.trainable = trainable;
    return push(std::move(n));
}

Tape::Id Tape::matmul(Id a, Id b) {
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.value = loramerge::matmul(value(a), value(b));
    return push(std::move(n));
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    Node n;
    n.op = Op::matmul_nt;
    n.a = a;
    n.b = b;
    n.value = loramerge::matmul_nt(value(a), value(b));
    return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
    Node n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    n.value = loramerge::add(value(a), value(b));
    return push(std::move(n));
}

Tape::Id Tape::scale(Id a, double s) {
    Node n;
    n.op = Op::scale;
    n.a = a;
    n.param = s;
    n.value = loramerge::scale(value(a), s);
    return push(std::move(n));
}

Tape::Id Tape::scalar_mul(Id s, Id a) {
    if (value(s).size() != 1)
        throw DimensionError("scalar_mul: scalar operand has shape " + value(s).shape());
    Node n;
    n.op = Op::scalar_mul;
    n.a = s;
    n.b = a;
    n.value = loramerge::scale(value(a), value(s)(0, 0));
    return push(std::move(n));
}

Tape::Id Tape::hadamard(Id a, Id b) {
    Node n;
    n.op = Op::hadamard;
    n.a = a;
    n.b = b;
    n.value = loramerge::hadamard(value(a), value(b));
    return push(std::move(n));
}

Tape::Id Tape::transpose(Id a) {
    Node n;
    n.op = Op::transpose;
    n.a = a;
    n.value = loramerge::transpose(value(a));
    return push(std::move(n));
}

Tape::Id Tape::leaky_relu(Id a, double negative_slope) {
    Node n;
    n.op = Op::leaky_relu;
    n.a = a;
    n.param = negative_slope;
    const Matrix& x = value(a);
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        y.data()[i] = v >= 0.0 ? v : negative_slope * v;
    }
    n.value = std::move(y);
    return push(std::move(n));
}

Tape::Id Tape::silu(Id a) {
    Node n;
    n.op = Op::silu;
    n.a = a;
    const Matrix& x = value(a);
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        y.data()[i] = v * sigmoid(v);
    }
    n.value = std::move(y);
    return push(std::move(n));
}

Tape::Id Tape::softmax_rows(Id a) {
    Node n;
    n.op = Op::softmax_rows;
    n.a = a;
    const Matrix& x = value(a);
    Matrix y(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = -1e300;
        for (std::size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) sum += (y(r, c) = std::exp(x(r, c) - mx));
        for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) /= sum;
    }
    n.value = std::move(y);
    return push(std::move(n));
}

Tape::Id Tape::softmax_cols(Id a) {
    Node n;
    n.op = Op::softmax_cols;
    n.a = a;
    const Matrix& x = value(a);
    Matrix y(x.rows(), x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c) {
        double mx = -1e300;
        for (std::size_t r = 0; r < x.rows(); ++r) mx = std::max(mx, x(r, c));
        double sum = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) sum += (y(r, c) = std::exp(x(r, c) - mx));
        for (std::size_t r = 0; r < x.rows(); ++r) y(r, c) /= sum;
    }
    n.value = std::move(y);
    return push(std::move(n));
}

Tape::Id Tape::rms_norm_rows(Id a, double eps) {
    Node n;
    n.op = Op::rms_norm;
    n.a = a;
    n.param = eps;
    const Matrix& x = value(a);
    Matrix y(x.rows(), x.cols());
    Matrix norms(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double ms = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) ms += x(r, c) * x(r, c);
        const double denom = std::sqrt(ms / static_cast<double>(x.cols()) + eps);
        norms(r, 0) = denom;
        for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) / denom;
    }
    n.value = std::move(y);
    n.aux = std::move(norms);
    return push(std::move(n));
}

Tape::Id Tape::mul_row_vec(Id x, Id g) {
    const Matrix& xm = value(x);
    const Matrix& gm = value(g);
    if (gm.rows() != 1 || gm.cols() != xm.cols())
        throw DimensionError("mul_row_vec: gain " + gm.shape() + " does not broadcast over " +
                             xm.shape());
    Node n;
    n.op = Op::mul_row_vec;
    n.a = x;
    n.b = g;
    Matrix y(xm.rows(), xm.cols());
    for (std::size_t r = 0; r < xm.rows(); ++r)
        for (std::size_t c = 0; c < xm.cols(); ++c) y(r, c) = xm(r, c) * gm(0, c);
    n.value = std::move(y);
    return push(std::move(n));
}

Tape::Id Tape::gather_rows(Id table, std::vector<std::int32_t> row_ids) {
    const Matrix& t = value(table);
    Node n;
    n.op = Op::gather_rows;
    n.a = table;
    Matrix y(row_ids.size(), t.cols());
    for (std::size_t i = 0; i < row_ids.size(); ++i) {
        const auto r = row_ids[i];
        if (r < 0 || static_cast<std::size_t>(r) >= t.rows())
            throw ArgumentError("gather_rows: id " + std::to_string(r) + " out of range for " +
                                t.shape());
        for (std::size_t c = 0; c < t.cols(); ++c) y(i, c) = t(static_cast<std::size_t>(r), c);
    }
    n.ids = std::move(row_ids);
    n.value = std::move(y);
    return push(std::move(n));
}

Tape::Id Tape::causal_attention(Id q, Id k, Id v, int n_heads, int batch, int seq) {
    const Matrix& qm = value(q);
    const Matrix& km = value(k);
    const Matrix& vm = value(v);
    const std::size_t rows = static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq);
    if (!qm.same_shape(km) || !qm.same_shape(vm) || qm.rows() != rows)
        throw DimensionError("attention: q " + qm.shape() + ", k " + km.shape() + ", v " +
                             vm.shape() + " inconsistent with batch*seq=" + std::to_string(rows));
    const std::size_t d = qm.cols();
    if (n_heads <= 0 || d % static_cast<std::size_t>(n_heads) != 0)
        throw ArgumentError("attention: d_model " + std::to_string(d) +
                            " not divisible by heads " + std::to_string(n_heads));
    const std::size_t dh = d / static_cast<std::size_t>(n_heads);
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Node n;
    n.op = Op::attention;
    n.a = q;
    n.b = k;
    n.c = v;
    n.heads = n_heads;
    n.batch = batch;
    n.seq = seq;

    Matrix out(rows, d);
    // probs laid out as ((b * H + h) * T + t) x T, lower-triangular rows
    Matrix probs(rows * static_cast<std::size_t>(n_heads), static_cast<std::size_t>(seq));
    std::vector<double> scores(static_cast<std::size_t>(seq));
    for (int b = 0; b < batch; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * static_cast<std::size_t>(seq);
        for (int h = 0; h < n_heads; ++h) {
            const std::size_t hoff = static_cast<std::size_t>(h) * dh;
            for (int t = 0; t < seq; ++t) {
                const std::size_t qrow = base + static_cast<std::size_t>(t);
                double mx = -1e300;
                for (int t2 = 0; t2 <= t; ++t2) {
                    const std::size_t krow = base + static_cast<std::size_t>(t2);
                    double s = 0.0;
                    for (std::size_t dd = 0; dd < dh; ++dd)
                        s += qm(qrow, hoff + dd) * km(krow, hoff + dd);
                    scores[static_cast<std::size_t>(t2)] = s * att_scale;
                    mx = std::max(mx, scores[static_cast<std::size_t>(t2)]);
                }
                double sum = 0.0;
                for (int t2 = 0; t2 <= t; ++t2)
                    sum += (scores[static_cast<std::size_t>(t2)] =
                                std::exp(scores[static_cast<std::size_t>(t2)] - mx));
                const std::size_t prow =
                    (static_cast<std::size_t>(b) * static_cast<std::size_t>(n_heads) +
                     static_cast<std::size_t>(h)) *
                        static_cast<std::size_t>(seq) +
                    static_cast<std::size_t>(t);
                for (int t2 = 0; t2 <= t; ++t2) {
                    const double p = scores[static_cast<std::size_t>(t2)] / sum;
                    probs(prow, static_cast<std::size_t>(t2)) = p;
                    const std::size_t vrow = base + static_cast<std::size_t>(t2);
                    for (std::size_t dd = 0; dd < dh; ++dd)
                        out(qrow, hoff + dd) += p * vm(vrow, hoff + dd);
                }
            }
        }
    }
    n.value = std::move(out);
    n.aux = std::move(probs);
    return push(std::move(n));
}

Tape::Id Tape::cross_entropy(Id logits, std::vector<std::int32_t> targets,
                             std::vector<double> weights) {
    const Matrix& x = value(logits);
    if (targets.size() != x.rows() || weights.size() != x.rows())
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets / " + std::to_string(weights.size()) +
                             " weights for logits " + x.shape());
    double wsum = 0.0;
    for (const double w : weights) wsum += w;
    if (wsum <= 0.0) throw ArgumentError("cross_entropy: no positive-weight positions");

    Node n;
    n.op = Op::cross_entropy;
    n.a = logits;
    Matrix probs(x.rows(), x.cols());
    double loss = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = -1e300;
        for (std::size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) sum += (probs(r, c) = std::exp(x(r, c) - mx));
        for (std::size_t c = 0; c < x.cols(); ++c) probs(r, c) /= sum;
        if (weights[r] > 0.0) {
            const auto t = targets[r];
            if (t < 0 || static_cast<std::size_t>(t) >= x.cols())
                throw ArgumentError("cross_entropy: target " + std::to_string(t) +
                                    " out of range for " + x.shape());
            loss += weights[r] * (std::log(sum) + mx - x(r, static_cast<std::size_t>(t)));
        }
    }
    loss /= wsum;
    n.ids = std::move(targets);
    n.weights = std::move(weights);
    n.param = wsum;
    n.aux = std::move(probs);
    n.value = Matrix(1, 1, {loss});
    return push(std::move(n));
}

Tape::Id Tape::entry(Id m, std::size_t i, std::size_t j) {
    const Matrix& x = value(m);
    if (i >= x.rows() || j >= x.cols())
        throw ArgumentError("entry: (" + std::to_string(i) + "," + std::to_string(j) +
                            ") out of range for " + x.shape());
    Node n;
    n.op = Op::entry;
    n.a = m;
    n.i = i;
    n.j = j;
    n.value = Matrix(1, 1, {x(i, j)});
    return push(std::move(n));
}

std::map<Tape::Id, Matrix> Tape::backward(Id loss) const {
    const Node& ln = node(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
        throw ContractError("backward: loss node has shape " + ln.value.shape() +
                            ", expected a scalar");

    std::vector<Matrix> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss)] = Matrix(1, 1, {1.0});

    auto accum = [&](Id target, Matrix contribution) {
        Matrix& g = grads[static_cast<std::size_t>(target)];
        if (g.empty())
            g = std::move(contribution);
        else
            kernels::active().add(g.data(), contribution.data(), g.data(), g.size());
    };

    for (Id id = loss; id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        const Matrix& g = grads[static_cast<std::size_t>(id)];
        if (g.empty()) continue;
        if (!g.all_finite())
            throw NumericError("backward: non-finite gradient at node #" + std::to_string(id) +
                               " (" + op_name(n.op) + ")");
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::matmul:
                accum(n.a, loramerge::matmul_nt(g, value(n.b)));
                accum(n.b, loramerge::matmul_tn(value(n.a), g));
                break;
            case Op::matmul_nt:
                accum(n.a, loramerge::matmul(g, value(n.b)));
                accum(n.b, loramerge::matmul_tn(g, value(n.a)));
                break;
            case Op::add:
                accum(n.a, g);
                accum(n.b, g);
                break;
            case Op::scale:
                accum(n.a, loramerge::scale(g, n.param));
                break;
            case Op::scalar_mul: {
                accum(n.a, Matrix(1, 1, {loramerge::dot(g, value(n.b))}));
                accum(n.b, loramerge::scale(g, value(n.a)(0, 0)));
                break;
            }
            case Op::hadamard:
                accum(n.a, loramerge::hadamard(g, value(n.b)));
                accum(n.b, loramerge::hadamard(g, value(n.a)));
                break;
            case Op::transpose:
                accum(n.a, loramerge::transpose(g));
                break;
            case Op::leaky_relu: {
                const Matrix& x = value(n.a);
                Matrix dx(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.size(); ++i)
                    dx.data()[i] = g.data()[i] * (x.data()[i] >= 0.0 ? 1.0 : n.param);
                accum(n.a, std::move(dx));
                break;
            }
            case Op::silu: {
                const Matrix& x = value(n.a);
                Matrix dx(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double s = sigmoid(x.data()[i]);
                    dx.data()[i] = g.data()[i] * (s * (1.0 + x.data()[i] * (1.0 - s)));
                }
                accum(n.a, std::move(dx));
                break;
            }
            case Op::softmax_rows: {
                const Matrix& y = n.value;
                Matrix dx(y.rows(), y.cols());
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    double gy = 0.0;
                    for (std::size_t c = 0; c < y.cols(); ++c) gy += g(r, c) * y(r, c);
                    for (std::size_t c = 0; c < y.cols(); ++c)
                        dx(r, c) = (g(r, c) - gy) * y(r, c);
                }
                accum(n.a, std::move(dx));
                break;
            }
            case Op::softmax_cols: {
                const Matrix& y = n.value;
                Matrix dx(y.rows(), y.cols());
                for (std::size_t c = 0; c < y.cols(); ++c) {
                    double gy = 0.0;
                    for (std::size_t r = 0; r < y.rows(); ++r) gy += g(r, c) * y(r, c);
                    for (std::size_t r = 0; r < y.rows(); ++r)
                        dx(r, c) = (g(r, c) - gy) * y(r, c);
                }
                accum(n.a, std::move(dx));
                break;
            }
            case Op::rms_norm: {
                const Matrix& x = value(n.a);
                const Matrix& norms = n.aux;
                const double dcols = static_cast<double>(x.cols());
                Matrix dx(x.rows(), x.cols());
                for (std::size_t r = 0; r < x.rows(); ++r) {
                    const double s = norms(r, 0);
                    double gx = 0.0;
                    for (std::size_t c = 0; c < x.cols(); ++c) gx += g(r, c) * x(r, c);
                    const double k = gx / (dcols * s * s * s);
                    for (std::size_t c = 0; c < x.cols(); ++c)
                        dx(r, c) = g(r, c) / s - x(r, c) * k;
                }
                accum(n.a, std::move(dx));
                break;
            }
            case Op::mul_row_vec: {
                const Matrix& x = value(n.a);
                const Matrix& gain = value(n.b);
                Matrix dx(x.rows(), x.cols());
                Matrix dg(1, x.cols());
                for (std::size_t r = 0; r < x.rows(); ++r)
                    for (std::size_t c = 0; c < x.cols(); ++c) {
                        dx(r, c) = g(r, c) * gain(0, c);
                        dg(0, c) += g(r, c) * x(r, c);
                    }
                accum(n.a, std::move(dx));
                accum(n.b, std::move(dg));
                break;
            }
            case Op::gather_rows: {
                const Matrix& t = value(n.a);
                Matrix dt(t.rows(), t.cols());
                for (std::size_t i = 0; i < n.ids.size(); ++i) {
                    const auto r = static_cast<std::size_t>(n.ids[i]);
                    for (std::size_t c = 0; c < t.cols(); ++c) dt(r, c) += g(i, c);
                }
                accum(n.a, std::move(dt));
                break;
            }
            case Op::attention: {
                const Matrix& qm = value(n.a);
                const Matrix& km = value(n.b);
                const Matrix& vm = value(n.c);
                const Matrix& probs = n.aux;
                const std::size_t d = qm.cols();
                const std::size_t dh = d / static_cast<std::size_t>(n.heads);
                const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
                Matrix dq(qm.rows(), d), dk(qm.rows(), d), dv(qm.rows(), d);
                std::vector<double> dp(static_cast<std::size_t>(n.seq));
                std::vector<double> ds(static_cast<std::size_t>(n.seq));
                for (int b = 0; b < n.batch; ++b) {
                    const std::size_t base =
                        static_cast<std::size_t>(b) * static_cast<std::size_t>(n.seq);
                    for (int h = 0; h < n.heads; ++h) {
                        const std::size_t hoff = static_cast<std::size_t>(h) * dh;
                        for (int t = 0; t < n.seq; ++t) {
                            const std::size_t qrow = base + static_cast<std::size_t>(t);
                            const std::size_t prow =
                                (static_cast<std::size_t>(b) *
                                     static_cast<std::size_t>(n.heads) +
                                 static_cast<std::size_t>(h)) *
                                    static_cast<std::size_t>(n.seq) +
                                static_cast<std::size_t>(t);
                            double pdp = 0.0;
                            for (int t2 = 0; t2 <= t; ++t2) {
                                const std::size_t vrow = base + static_cast<std::size_t>(t2);
                                double acc = 0.0;
                                for (std::size_t dd = 0; dd < dh; ++dd)
                                    acc += g(qrow, hoff + dd) * vm(vrow, hoff + dd);
                                dp[static_cast<std::size_t>(t2)] = acc;
                                pdp += acc * probs(prow, static_cast<std::size_t>(t2));
                            }
                            for (int t2 = 0; t2 <= t; ++t2) {
                                const double p = probs(prow, static_cast<std::size_t>(t2));
                                ds[static_cast<std::size_t>(t2)] =
                                    (dp[static_cast<std::size_t>(t2)] - pdp) * p * att_scale;
                            }
                            for (int t2 = 0; t2 <= t; ++t2) {
                                const std::size_t krow = base + static_cast<std::size_t>(t2);
                                const double dsv = ds[static_cast<std::size_t>(t2)];
                                const double p = probs(prow, static_cast<std::size_t>(t2));
                                for (std::size_t dd = 0; dd < dh; ++dd) {
                                    dq(qrow, hoff + dd) += dsv * km(krow, hoff + dd);
                                    dk(krow, hoff + dd) += dsv * qm(qrow, hoff + dd);
                                    dv(krow, hoff + dd) += p * g(qrow, hoff + dd);
                                }
                            }
                        }
                    }
                }
                accum(n.a, std::move(dq));
                accum(n.b, std::move(dk));
                accum(n.c, std::move(dv));
                break;
            }
            case Op::cross_entropy: {
                const Matrix& probs = n.aux;
                const double gs = g(0, 0);
                Matrix dx(probs.rows(), probs.cols());
                for (std::size_t r = 0; r < probs.rows(); ++r) {
                    const double w = n.weights[r];
                    if (w <= 0.0) continue;
                    const double f = gs * w / n.param;
                    for (std::size_t c = 0; c < probs.cols(); ++c) dx(r, c) = f * probs(r, c);
                    dx(r, static_cast<std::size_t>(n.ids[r])) -= f;
                }
                accum(n.a, std::move(dx));
                break;
            }
            case Op::entry: {
                const Matrix& x = value(n.a);
                Matrix dx(x.rows(), x.cols());
                dx(n.i, n.j) = g(0, 0);
                accum(n.a, std::move(dx));
                break;
            }
        }
    }

    std::map<Id, Matrix> result;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].trainable) continue;
        Matrix& g = grads[i];
        if (g.empty()) g = Matrix(nodes_[i].value.rows(), nodes_[i].value.cols());
        result.emplace(static_cast<Id>(i), std::move(g));
    }
    return result;
}

}  // namespace loramerge
