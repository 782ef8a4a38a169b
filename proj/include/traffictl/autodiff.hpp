#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "traffictl/errors.hpp"
#include "traffictl/matrix.hpp"
#include "traffictl/params.hpp"

namespace traffictl {

class Tape;

/// Handle to a node on a Tape.
struct Val {
    Tape* tape = nullptr;
    int node = -1;
};

/// Reverse-mode tape over the fixed operation set the architecture needs.
///
/// Nodes are recorded in execution order, which is a valid topological
/// order, so backward() is a single reverse sweep that visits each node
/// exactly once. A tape is single-threaded; distinct tapes are independent.
class Tape {
public:
    /// Constant / input leaf. Gradient is tracked but not reported.
    Val input(Matrix v) { return push(std::move(v), {}, nullptr); }

    /// Parameter leaf. Binding the same name twice returns the same node so
    /// gradients accumulate in one place.
    Val bind(const ParamSet& ps, const std::string& name) {
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end()) return Val{this, it->second};
        Val v = push(ps.at(name), {}, nullptr);
        param_nodes_[name] = v.node;
        return v;
    }

    const Matrix& value(Val v) const { return nodes_[v.node].value; }
    const Matrix& grad(Val v) const { return nodes_[v.node].grad; }
    size_t size() const { return nodes_.size(); }

    // ---- primitive operations -------------------------------------------

    Val matmul(Val a, Val b) {
        Matrix c = traffictl::matmul(value(a), value(b));
        return push(std::move(c), {a.node, b.node}, [](Tape& t, Node& n) {
            const Matrix& g = n.grad;
            const Matrix& av = t.nodes_[n.parents[0]].value;
            const Matrix& bv = t.nodes_[n.parents[1]].value;
            t.accum(n.parents[0], traffictl::matmul(g, traffictl::transpose(bv)));
            t.accum(n.parents[1], traffictl::matmul(traffictl::transpose(av), g));
        });
    }

    /// Per-block product L * X_s where X is `blocks` stacked row-blocks of
    /// equal height. L is a constant (not differentiated); used for graph
    /// convolution over a batch.
    Val block_matmul(const Matrix& l, Val x, int blocks) {
        const Matrix& xv = value(x);
        if (blocks <= 0 || xv.rows() % blocks != 0)
            throw ShapeError("block_matmul: rows " + std::to_string(xv.rows()) +
                             " not divisible into " + std::to_string(blocks) + " blocks");
        const int n = xv.rows() / blocks;
        if (l.rows() != n || l.cols() != n)
            throw ShapeError("block_matmul: L " + l.shape_str() + " vs block height " +
                             std::to_string(n));
        Matrix c(xv.rows(), xv.cols());
        for (int b = 0; b < blocks; ++b)
            multiply_block(l, xv, c, b * n, n);
        Matrix lt = traffictl::transpose(l);
        return push(std::move(c), {x.node}, [lt, blocks, n](Tape& t, Node& nd) {
            Matrix gx(nd.grad.rows(), nd.grad.cols());
            for (int b = 0; b < blocks; ++b)
                multiply_block(lt, nd.grad, gx, b * n, n);
            t.accum(nd.parents[0], std::move(gx));
        });
    }

    Val add(Val a, Val b) {
        Matrix c = traffictl::add(value(a), value(b));
        return push(std::move(c), {a.node, b.node}, [](Tape& t, Node& n) {
            t.accum(n.parents[0], n.grad);
            t.accum(n.parents[1], n.grad);
        });
    }

    Val sub(Val a, Val b) {
        Matrix c = traffictl::sub(value(a), value(b));
        return push(std::move(c), {a.node, b.node}, [](Tape& t, Node& n) {
            t.accum(n.parents[0], n.grad);
            t.accum(n.parents[1], traffictl::scale(n.grad, -1.0));
        });
    }

    Val mul(Val a, Val b) {
        Matrix c = traffictl::hadamard(value(a), value(b));
        return push(std::move(c), {a.node, b.node}, [](Tape& t, Node& n) {
            t.accum(n.parents[0], traffictl::hadamard(n.grad, t.nodes_[n.parents[1]].value));
            t.accum(n.parents[1], traffictl::hadamard(n.grad, t.nodes_[n.parents[0]].value));
        });
    }

    Val scale(Val a, double s) {
        Matrix c = traffictl::scale(value(a), s);
        return push(std::move(c), {a.node}, [s](Tape& t, Node& n) {
            t.accum(n.parents[0], traffictl::scale(n.grad, s));
        });
    }

    Val add_scalar(Val a, double s) {
        Matrix c = traffictl::map(value(a), [s](double v) { return v + s; });
        return push(std::move(c), {a.node},
                    [](Tape& t, Node& n) { t.accum(n.parents[0], n.grad); });
    }

    Val transpose(Val a) {
        Matrix c = traffictl::transpose(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            t.accum(n.parents[0], traffictl::transpose(n.grad));
        });
    }

    Val sigmoid(Val a) {
        Matrix c = traffictl::sigmoid(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            Matrix g = n.grad;
            for (size_t i = 0; i < g.size(); ++i) {
                const double y = n.value.values()[i];
                g.values()[i] *= y * (1.0 - y);
            }
            t.accum(n.parents[0], std::move(g));
        });
    }

    Val tanh(Val a) {
        Matrix c = traffictl::tanh_m(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            Matrix g = n.grad;
            for (size_t i = 0; i < g.size(); ++i) {
                const double y = n.value.values()[i];
                g.values()[i] *= 1.0 - y * y;
            }
            t.accum(n.parents[0], std::move(g));
        });
    }

    Val relu(Val a) {
        Matrix c = traffictl::relu(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            Matrix g = n.grad;
            const Matrix& x = t.nodes_[n.parents[0]].value;
            for (size_t i = 0; i < g.size(); ++i)
                if (x.values()[i] <= 0.0) g.values()[i] = 0.0;
            t.accum(n.parents[0], std::move(g));
        });
    }

    Val softmax_rows(Val a) {
        Matrix c = traffictl::softmax_rows(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            // dx_i = y_i * (dy_i - <dy, y>) per row
            const Matrix& y = n.value;
            Matrix g(y.rows(), y.cols());
            for (int i = 0; i < y.rows(); ++i) {
                double dot = 0.0;
                for (int j = 0; j < y.cols(); ++j) dot += n.grad(i, j) * y(i, j);
                for (int j = 0; j < y.cols(); ++j)
                    g(i, j) = y(i, j) * (n.grad(i, j) - dot);
            }
            t.accum(n.parents[0], std::move(g));
        });
    }

    /// Natural log with inputs clamped to kLogFloor; keeps outputs finite
    /// when softmax probabilities underflow.
    Val log(Val a) {
        Matrix clamped = traffictl::map(value(a), [](double v) { return std::max(v, kLogFloor); });
        Matrix c = traffictl::map(clamped, [](double v) { return std::log(v); });
        return push(std::move(c), {a.node}, [clamped](Tape& t, Node& n) {
            Matrix g = n.grad;
            for (size_t i = 0; i < g.size(); ++i) g.values()[i] /= clamped.values()[i];
            t.accum(n.parents[0], std::move(g));
        });
    }

    Val abs(Val a) {
        Matrix c = traffictl::map(value(a), [](double v) { return std::fabs(v); });
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            Matrix g = n.grad;
            const Matrix& x = t.nodes_[n.parents[0]].value;
            for (size_t i = 0; i < g.size(); ++i) {
                const double v = x.values()[i];
                g.values()[i] *= (v > 0.0) ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
            }
            t.accum(n.parents[0], std::move(g));
        });
    }

    Val concat_cols(Val a, Val b) {
        Matrix c = traffictl::concat_cols(value(a), value(b));
        const int ac = value(a).cols();
        return push(std::move(c), {a.node, b.node}, [ac](Tape& t, Node& n) {
            t.accum(n.parents[0], traffictl::slice_cols(n.grad, 0, ac));
            t.accum(n.parents[1], traffictl::slice_cols(n.grad, ac, n.grad.cols()));
        });
    }

    Val slice_cols(Val a, int begin, int end) {
        Matrix c = traffictl::slice_cols(value(a), begin, end);
        return push(std::move(c), {a.node}, [begin](Tape& t, Node& n) {
            const Matrix& pv = t.nodes_[n.parents[0]].value;
            Matrix g(pv.rows(), pv.cols());
            for (int i = 0; i < n.grad.rows(); ++i)
                for (int j = 0; j < n.grad.cols(); ++j) g(i, begin + j) = n.grad(i, j);
            t.accum(n.parents[0], std::move(g));
        });
    }

    Val row_sums(Val a) {
        Matrix c = traffictl::row_sums(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            const Matrix& pv = t.nodes_[n.parents[0]].value;
            Matrix g(pv.rows(), pv.cols());
            for (int i = 0; i < g.rows(); ++i)
                for (int j = 0; j < g.cols(); ++j) g(i, j) = n.grad(i, 0);
            t.accum(n.parents[0], std::move(g));
        });
    }

    Val col_sums(Val a) {
        Matrix c = traffictl::col_sums(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            const Matrix& pv = t.nodes_[n.parents[0]].value;
            Matrix g(pv.rows(), pv.cols());
            for (int i = 0; i < g.rows(); ++i)
                for (int j = 0; j < g.cols(); ++j) g(i, j) = n.grad(0, j);
            t.accum(n.parents[0], std::move(g));
        });
    }

    /// Adds a 1 x cols row vector to every row of a.
    Val add_row_broadcast(Val a, Val row) {
        const Matrix& av = value(a);
        const Matrix& rv = value(row);
        if (rv.rows() != 1 || rv.cols() != av.cols())
            throw ShapeError("add_row_broadcast: " + av.shape_str() + " + " + rv.shape_str());
        Matrix c = av;
        for (int i = 0; i < c.rows(); ++i)
            for (int j = 0; j < c.cols(); ++j) c(i, j) += rv(0, j);
        return push(std::move(c), {a.node, row.node}, [](Tape& t, Node& n) {
            t.accum(n.parents[0], n.grad);
            t.accum(n.parents[1], traffictl::col_sums(n.grad));
        });
    }

    Val sum(Val a) {
        Matrix c(1, 1);
        c(0, 0) = traffictl::sum(value(a));
        return push(std::move(c), {a.node}, [](Tape& t, Node& n) {
            const Matrix& pv = t.nodes_[n.parents[0]].value;
            t.accum(n.parents[0], Matrix(pv.rows(), pv.cols(), n.grad(0, 0)));
        });
    }

    Val mean(Val a) {
        const double inv = 1.0 / static_cast<double>(value(a).size());
        Matrix c(1, 1);
        c(0, 0) = traffictl::sum(value(a)) * inv;
        return push(std::move(c), {a.node}, [inv](Tape& t, Node& n) {
            const Matrix& pv = t.nodes_[n.parents[0]].value;
            t.accum(n.parents[0], Matrix(pv.rows(), pv.cols(), n.grad(0, 0) * inv));
        });
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates from a scalar loss node. Each node's backward rule runs
    /// exactly once, in reverse execution order.
    void backward(Val loss) {
        Node& ln = nodes_[loss.node];
        if (ln.value.rows() != 1 || ln.value.cols() != 1)
            throw ContractError("backward: loss must be scalar, got " + ln.value.shape_str());
        ln.grad = Matrix(1, 1, 1.0);
        ln.grad_live = true;
        for (int i = loss.node; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.grad_live || !n.back) continue;
            n.back(*this, n);
        }
        ran_backward_ = true;
    }

    /// Gradient of the loss w.r.t. every parameter in ps; parameters that
    /// did not participate in the forward pass get zero gradients.
    GradMap param_grads(const ParamSet& ps) const {
        if (!ran_backward_) throw ContractError("param_grads: backward() has not run");
        GradMap out;
        for (const auto& name : ps.names()) {
            auto it = param_nodes_.find(name);
            if (it != param_nodes_.end() && nodes_[it->second].grad_live)
                out.emplace(name, nodes_[it->second].grad);
            else
                out.emplace(name, Matrix(ps.at(name).rows(), ps.at(name).cols()));
        }
        return out;
    }

    static constexpr double kLogFloor = 1e-30;

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool grad_live = false;
        std::vector<int> parents;
        std::function<void(Tape&, Node&)> back;
    };

    Val push(Matrix value, std::vector<int> parents, std::function<void(Tape&, Node&)> back) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Val{this, static_cast<int>(nodes_.size()) - 1};
    }

    void accum(int node, Matrix g) {
        Node& n = nodes_[node];
        if (!n.grad_live) {
            n.grad = std::move(g);
            n.grad_live = true;
        } else {
            for (size_t i = 0; i < n.grad.size(); ++i) n.grad.values()[i] += g.values()[i];
        }
    }

    static void multiply_block(const Matrix& l, const Matrix& x, Matrix& out, int row0, int n) {
        const int cols = x.cols();
        for (int i = 0; i < n; ++i) {
            double* orow = out.data() + static_cast<size_t>(row0 + i) * cols;
            for (int k = 0; k < n; ++k) {
                const double lv = l(i, k);
                if (lv == 0.0) continue;
                const double* xrow = x.data() + static_cast<size_t>(row0 + k) * cols;
                for (int j = 0; j < cols; ++j) orow[j] += lv * xrow[j];
            }
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, int> param_nodes_;
    bool ran_backward_ = false;
};

}  // namespace traffictl
