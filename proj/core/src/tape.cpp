#include "mergeforge/tape.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "mergeforge/errors.hpp"

namespace mergeforge {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC map2d(const Tensor& t) { return MapC(t.data(), t.rows(), t.cols()); }
MapM map2d(Tensor& t) { return MapM(t.data(), t.rows(), t.cols()); }

void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

void require_finite(const Tensor& t, const char* where) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + where);
}

}  // namespace

NodeId Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Tape::in(NodeId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
        throw ContractViolation("node id out of range");
    }
    return nodes_[static_cast<size_t>(id)].value;
}

NodeId Tape::leaf(Tensor value) {
    require_finite(value, "leaf");
    return push({OpKind::leaf, std::move(value)});
}

NodeId Tape::constant(Tensor value) {
    require_finite(value, "constant");
    return push({OpKind::constant, std::move(value)});
}

NodeId Tape::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
    const Tensor& A = in(a);
    const Tensor& B = in(b);
    const int64_t ar = trans_a ? A.cols() : A.rows();
    const int64_t ac = trans_a ? A.rows() : A.cols();
    const int64_t br = trans_b ? B.cols() : B.rows();
    const int64_t bc = trans_b ? B.rows() : B.cols();
    require(ac == br, "matmul shape mismatch " + A.shape_str() + (trans_a ? "^T" : "") + " * " +
                          B.shape_str() + (trans_b ? "^T" : ""));
    Tensor out({ar, bc});
    auto O = map2d(out);
    auto MA = map2d(A);
    auto MB = map2d(B);
    if (!trans_a && !trans_b) O.noalias() = MA * MB;
    else if (!trans_a && trans_b) O.noalias() = MA * MB.transpose();
    else if (trans_a && !trans_b) O.noalias() = MA.transpose() * MB;
    else O.noalias() = MA.transpose() * MB.transpose();
    Node n{OpKind::matmul, std::move(out)};
    n.a = a;
    n.b = b;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    const Tensor& A = in(a);
    const Tensor& B = in(b);
    if (A.same_shape(B)) {
        Tensor out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += B.at(i);
        Node n{OpKind::add, std::move(out)};
        n.a = a;
        n.b = b;
        return push(std::move(n));
    }
    // [r x c] + [c] row broadcast
    require(A.rank() == 2 && B.rank() == 1 && A.cols() == B.numel(),
            "add shape mismatch " + A.shape_str() + " + " + B.shape_str());
    Tensor out = A;
    for (int64_t r = 0; r < A.rows(); ++r)
        for (int64_t c = 0; c < A.cols(); ++c) out.at(r, c) += B.at(c);
    Node n{OpKind::add, std::move(out)};
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Tape::multiply_scalar(NodeId a, double s) {
    if (!std::isfinite(s)) throw NumericError("non-finite scalar in multiply_scalar");
    Tensor out = in(a);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= s;
    Node n{OpKind::multiply_scalar, std::move(out)};
    n.a = a;
    n.scalar = s;
    return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
    Tensor out = in(a);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = out.at(i) > 0.0 ? out.at(i) : 0.0;
    Node n{OpKind::relu, std::move(out)};
    n.a = a;
    return push(std::move(n));
}

NodeId Tape::embedding_lookup(NodeId table, std::vector<int32_t> ids) {
    const Tensor& T = in(table);
    require(T.rank() == 2, "embedding table must be 2-D");
    for (int32_t id : ids) {
        require(id >= 0 && id < T.rows(), "embedding index " + std::to_string(id) + " out of range");
    }
    const int64_t d = T.cols();
    Tensor out({static_cast<int64_t>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r)
        for (int64_t c = 0; c < d; ++c) out.at(static_cast<int64_t>(r), c) = T.at(ids[r], c);
    Node n{OpKind::embedding_lookup, std::move(out)};
    n.a = table;
    n.indices = std::move(ids);
    return push(std::move(n));
}

NodeId Tape::log_softmax_rows(NodeId a) {
    const Tensor& A = in(a);
    require(A.rank() == 2, "log_softmax_rows expects a 2-D tensor");
    Tensor out = A;
    const int64_t R = A.rows(), C = A.cols();
    for (int64_t r = 0; r < R; ++r) {
        double mx = out.at(r, 0);
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, out.at(r, c));
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) s += std::exp(out.at(r, c) - mx);
        const double lse = mx + std::log(s);
        for (int64_t c = 0; c < C; ++c) out.at(r, c) -= lse;
    }
    Node n{OpKind::log_softmax_rows, std::move(out)};
    n.a = a;
    return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId a, std::vector<int32_t> rows) {
    const Tensor& A = in(a);
    require(A.rank() == 2, "gather_rows expects a 2-D tensor");
    for (int32_t r : rows) {
        require(r >= 0 && r < A.rows(), "gather row " + std::to_string(r) + " out of range");
    }
    Tensor out({static_cast<int64_t>(rows.size()), A.cols()});
    for (size_t i = 0; i < rows.size(); ++i)
        for (int64_t c = 0; c < A.cols(); ++c) out.at(static_cast<int64_t>(i), c) = A.at(rows[i], c);
    Node n{OpKind::gather_rows, std::move(out)};
    n.a = a;
    n.indices = std::move(rows);
    return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
    const Tensor& A = in(a);
    double s = 0.0;
    for (int64_t i = 0; i < A.numel(); ++i) s += A.at(i);
    Node n{OpKind::mean, Tensor::scalar(s / static_cast<double>(A.numel()))};
    n.a = a;
    return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
    const Tensor& A = in(a);
    double s = 0.0;
    for (int64_t i = 0; i < A.numel(); ++i) s += A.at(i);
    Node n{OpKind::sum, Tensor::scalar(s)};
    n.a = a;
    return push(std::move(n));
}

NodeId Tape::layer_scale(NodeId x, NodeId s) {
    const Tensor& X = in(x);
    const Tensor& S = in(s);
    require(S.numel() == 1, "layer_scale factor must be a 1-element tensor");
    Tensor out = X;
    const double f = S.at(0);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= f;
    Node n{OpKind::layer_scale, std::move(out)};
    n.a = x;
    n.b = s;
    return push(std::move(n));
}

NodeId Tape::exp(NodeId a) {
    Tensor out = in(a);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = std::exp(out.at(i));
    require_finite(out, "exp output");
    Node n{OpKind::exp, std::move(out)};
    n.a = a;
    return push(std::move(n));
}

NodeId Tape::log(NodeId a) {
    Tensor out = in(a);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = std::log(out.at(i));
    require_finite(out, "log output");
    Node n{OpKind::log, std::move(out)};
    n.a = a;
    return push(std::move(n));
}

NodeId Tape::multiply(NodeId a, NodeId b) {
    const Tensor& A = in(a);
    const Tensor& B = in(b);
    require(A.same_shape(B), "multiply shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = A;
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= B.at(i);
    Node n{OpKind::multiply, std::move(out)};
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

std::vector<Tensor> Tape::backward(NodeId loss) const {
    const Tensor& L = in(loss);
    if (L.numel() != 1) throw ContractViolation("backward requires a scalar loss node");

    std::vector<Tensor> grad(nodes_.size());
    grad[static_cast<size_t>(loss)] = Tensor(L.shape(), {1.0});

    auto ensure = [&](NodeId id) -> Tensor& {
        auto& g = grad[static_cast<size_t>(id)];
        if (g.empty()) g = Tensor(nodes_[static_cast<size_t>(id)].value.shape());
        return g;
    };

    for (NodeId id = loss; id >= 0; --id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        const Tensor& g = grad[static_cast<size_t>(id)];
        if (g.empty()) continue;

        switch (n.kind) {
            case OpKind::leaf:
            case OpKind::constant:
                break;
            case OpKind::matmul: {
                const Tensor& A = in(n.a);
                const Tensor& B = in(n.b);
                Tensor& ga = ensure(n.a);
                Tensor& gb = ensure(n.b);
                auto G = map2d(g);
                auto MA = map2d(A);
                auto MB = map2d(B);
                auto GA = map2d(ga);
                auto GB = map2d(gb);
                if (!n.trans_a && !n.trans_b) {
                    GA.noalias() += G * MB.transpose();
                    GB.noalias() += MA.transpose() * G;
                } else if (!n.trans_a && n.trans_b) {
                    GA.noalias() += G * MB;
                    GB.noalias() += G.transpose() * MA;
                } else if (n.trans_a && !n.trans_b) {
                    GA.noalias() += MB * G.transpose();
                    GB.noalias() += MA * G;
                } else {
                    GA.noalias() += MB.transpose() * G.transpose();
                    GB.noalias() += G.transpose() * MA.transpose();
                }
                break;
            }
            case OpKind::add: {
                const Tensor& A = in(n.a);
                const Tensor& B = in(n.b);
                Tensor& ga = ensure(n.a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i);
                Tensor& gb = ensure(n.b);
                if (A.same_shape(B)) {
                    for (int64_t i = 0; i < g.numel(); ++i) gb.at(i) += g.at(i);
                } else {
                    for (int64_t r = 0; r < A.rows(); ++r)
                        for (int64_t c = 0; c < A.cols(); ++c) gb.at(c) += g.at(r, c);
                }
                break;
            }
            case OpKind::multiply_scalar: {
                Tensor& ga = ensure(n.a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += n.scalar * g.at(i);
                break;
            }
            case OpKind::relu: {
                const Tensor& A = in(n.a);
                Tensor& ga = ensure(n.a);
                for (int64_t i = 0; i < g.numel(); ++i)
                    if (A.at(i) > 0.0) ga.at(i) += g.at(i);
                break;
            }
            case OpKind::embedding_lookup: {
                Tensor& gt = ensure(n.a);
                const int64_t d = gt.cols();
                for (size_t r = 0; r < n.indices.size(); ++r)
                    for (int64_t c = 0; c < d; ++c)
                        gt.at(n.indices[r], c) += g.at(static_cast<int64_t>(r), c);
                break;
            }
            case OpKind::log_softmax_rows: {
                // dx = dy - softmax(x) * rowsum(dy); softmax read off the output.
                Tensor& ga = ensure(n.a);
                const Tensor& Y = n.value;
                for (int64_t r = 0; r < Y.rows(); ++r) {
                    double rowsum = 0.0;
                    for (int64_t c = 0; c < Y.cols(); ++c) rowsum += g.at(r, c);
                    for (int64_t c = 0; c < Y.cols(); ++c)
                        ga.at(r, c) += g.at(r, c) - std::exp(Y.at(r, c)) * rowsum;
                }
                break;
            }
            case OpKind::gather_rows: {
                Tensor& ga = ensure(n.a);
                for (size_t r = 0; r < n.indices.size(); ++r)
                    for (int64_t c = 0; c < ga.cols(); ++c)
                        ga.at(n.indices[r], c) += g.at(static_cast<int64_t>(r), c);
                break;
            }
            case OpKind::mean: {
                Tensor& ga = ensure(n.a);
                const double w = g.at(0) / static_cast<double>(ga.numel());
                for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += w;
                break;
            }
            case OpKind::sum: {
                Tensor& ga = ensure(n.a);
                for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += g.at(0);
                break;
            }
            case OpKind::layer_scale: {
                const Tensor& X = in(n.a);
                const double f = in(n.b).at(0);
                Tensor& gx = ensure(n.a);
                Tensor& gs = ensure(n.b);
                double dot = 0.0;
                for (int64_t i = 0; i < g.numel(); ++i) {
                    gx.at(i) += f * g.at(i);
                    dot += g.at(i) * X.at(i);
                }
                gs.at(0) += dot;
                break;
            }
            case OpKind::exp: {
                Tensor& ga = ensure(n.a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i) * n.value.at(i);
                break;
            }
            case OpKind::log: {
                const Tensor& A = in(n.a);
                Tensor& ga = ensure(n.a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i) / A.at(i);
                break;
            }
            case OpKind::multiply: {
                const Tensor& A = in(n.a);
                const Tensor& B = in(n.b);
                Tensor& ga = ensure(n.a);
                Tensor& gb = ensure(n.b);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    ga.at(i) += g.at(i) * B.at(i);
                    gb.at(i) += g.at(i) * A.at(i);
                }
                break;
            }
        }
    }
    return grad;
}

}  // namespace mergeforge
