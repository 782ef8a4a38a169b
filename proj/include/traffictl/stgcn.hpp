#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "traffictl/autodiff.hpp"
#include "traffictl/errors.hpp"
#include "traffictl/matrix.hpp"
#include "traffictl/optim.hpp"
#include "traffictl/params.hpp"
#include "traffictl/rng.hpp"

namespace traffictl {

/// Symmetric normalized Laplacian with self-loops:
/// A~ = A + I, D = degree matrix of A~, L = D^{-1/2} A~ D^{-1/2}.
inline Matrix laplacian(const Matrix& a) {
    if (a.rows() != a.cols())
        throw ContractError("laplacian: adjacency must be square, got " + a.shape_str());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = i + 1; j < a.cols(); ++j)
            if (std::fabs(a(i, j) - a(j, i)) > 1e-12)
                throw ContractError("laplacian: adjacency not symmetric at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");
    for (double v : a.values())
        if (v < 0.0) throw ContractError("laplacian: adjacency has negative entries");

    const int n = a.rows();
    Matrix at = a;
    for (int i = 0; i < n; ++i) at(i, i) += 1.0;  // self-loops make degrees >= 1
    std::vector<double> dinv(n);
    for (int i = 0; i < n; ++i) {
        double deg = 0.0;
        for (int j = 0; j < n; ++j) deg += at(i, j);
        dinv[i] = 1.0 / std::sqrt(deg);
    }
    Matrix l(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) l(i, j) = dinv[i] * at(i, j) * dinv[j];
    return l;
}

// ---- GRU cell, shared by the predictive network and the cluster network ---

inline void add_gru_params(ParamSet& ps, const std::string& prefix, int in_features, int hidden,
                           bool bias, std::mt19937_64& rng) {
    const int rows = hidden + in_features;
    for (const char* gate : {"r", "z", "h"}) {
        ps.add(prefix + ".w" + gate, glorot_matrix(rows, hidden, rng));
        if (bias) ps.add(prefix + ".b" + gate, Matrix(1, hidden));
    }
}

namespace detail {
inline Val gru_linear(Tape& t, const ParamSet& ps, const std::string& w, const std::string& b,
                      Val x, bool bias) {
    Val y = t.matmul(x, t.bind(ps, w));
    if (bias) y = t.add_row_broadcast(y, t.bind(ps, b));
    return y;
}
}  // namespace detail

/// r = sig(Wr [h,x]); z = sig(Wz [h,x]); hh = tanh(Wh [r.h, x]);
/// h' = (1-z).h + z.hh
inline Val gru_cell(Tape& t, const ParamSet& ps, const std::string& prefix, Val h_prev, Val x,
                    bool bias) {
    Val cat = t.concat_cols(h_prev, x);
    Val r = t.sigmoid(detail::gru_linear(t, ps, prefix + ".wr", prefix + ".br", cat, bias));
    Val z = t.sigmoid(detail::gru_linear(t, ps, prefix + ".wz", prefix + ".bz", cat, bias));
    Val cat2 = t.concat_cols(t.mul(r, h_prev), x);
    Val hh = t.tanh(detail::gru_linear(t, ps, prefix + ".wh", prefix + ".bh", cat2, bias));
    Val keep = t.add_scalar(t.scale(z, -1.0), 1.0);  // 1 - z
    return t.add(t.mul(keep, h_prev), t.mul(z, hh));
}

/// Tape-free variant for frozen inference.
inline Matrix gru_cell_plain(const ParamSet& ps, const std::string& prefix, const Matrix& h_prev,
                             const Matrix& x, bool bias) {
    auto lin = [&](const std::string& w, const std::string& b, const Matrix& in) {
        Matrix y = matmul(in, ps.at(w));
        if (bias) {
            const Matrix& bv = ps.at(b);
            for (int i = 0; i < y.rows(); ++i)
                for (int j = 0; j < y.cols(); ++j) y(i, j) += bv(0, j);
        }
        return y;
    };
    Matrix cat = concat_cols(h_prev, x);
    Matrix r = sigmoid(lin(prefix + ".wr", prefix + ".br", cat));
    Matrix z = sigmoid(lin(prefix + ".wz", prefix + ".bz", cat));
    Matrix cat2 = concat_cols(hadamard(r, h_prev), x);
    Matrix hh = tanh_m(lin(prefix + ".wh", prefix + ".bh", cat2));
    Matrix h(h_prev.rows(), h_prev.cols());
    for (size_t i = 0; i < h.size(); ++i) {
        const double zi = z.values()[i];
        h.values()[i] = (1.0 - zi) * h_prev.values()[i] + zi * hh.values()[i];
    }
    return h;
}

struct StgcnConfig {
    int history = 12;   // H: encoder steps
    int horizon = 12;   // Q: decoder steps
    int gcn_hidden = 32;
    int gcn_out = 32;
    int gru_hidden = 64;
    bool bias = true;
    bool autoregressive_decoder = true;  // decoder input = its previous projected output
};

/// Per-cluster predictive network: a two-hop GCN feeding a GRU cell,
/// unrolled H times as the encoder and Q times as the decoder, with a
/// per-node linear projection to a speed value. Weights are shared across
/// time steps within each role.
///
/// Batched execution folds (sample, node) into matrix rows: a step input is
/// (batch*N) x F and the Laplacian is applied per sample block.
class StgcnModel {
public:
    StgcnConfig cfg;
    int nodes = 0;
    Matrix graph_laplacian;
    ParamSet params;

    static StgcnModel init(const StgcnConfig& cfg, const Matrix& adjacency, uint64_t seed) {
        StgcnModel m;
        m.cfg = cfg;
        m.nodes = adjacency.rows();
        m.graph_laplacian = laplacian(adjacency);
        auto rng = make_rng(seed, 0x7073690);  // "psi"
        m.add_gcn("enc.gcn", 1, rng);
        m.add_gru("enc.gru", cfg.gcn_out, rng);
        m.add_gcn("dec.gcn", 1, rng);
        m.add_gru("dec.gru", cfg.gcn_out, rng);
        m.params.add("out.w", glorot_matrix(cfg.gru_hidden, 1, rng));
        if (cfg.bias) m.params.add("out.b", Matrix(1, 1));
        return m;
    }

    /// f(X) = sigmoid(L ReLU(L X W0) W1), applied per sample block.
    Val gcn_forward(Tape& t, Val x, const std::string& prefix, int batch) const {
        Val h = t.matmul(t.block_matmul(graph_laplacian, x, batch), t.bind(params, prefix + ".w0"));
        if (cfg.bias) h = t.add_row_broadcast(h, t.bind(params, prefix + ".b0"));
        h = t.relu(h);
        h = t.matmul(t.block_matmul(graph_laplacian, h, batch), t.bind(params, prefix + ".w1"));
        if (cfg.bias) h = t.add_row_broadcast(h, t.bind(params, prefix + ".b1"));
        return t.sigmoid(h);
    }

    Val gru_step(Tape& t, Val h_prev, Val x, const std::string& prefix) const {
        return gru_cell(t, params, prefix, h_prev, x, cfg.bias);
    }

    /// Unrolls encoder and decoder on a tape. steps: H inputs, each
    /// (batch*N) x 1; last_obs seeds the decoder. Returns Q outputs of
    /// (batch*N) x 1.
    std::vector<Val> forward_tape(Tape& t, const std::vector<Val>& steps, Val last_obs,
                                  int batch) const {
        if (static_cast<int>(steps.size()) != cfg.history)
            throw ContractError("forward: expected " + std::to_string(cfg.history) +
                                " history steps, got " + std::to_string(steps.size()));
        Val h = t.input(Matrix(batch * nodes, cfg.gru_hidden));
        for (const Val& x : steps) {
            Val g = gcn_forward(t, x, "enc.gcn", batch);
            h = gru_step(t, h, g, "enc.gru");
        }
        std::vector<Val> outputs;
        Val y_prev = last_obs;
        for (int q = 0; q < cfg.horizon; ++q) {
            Val g = gcn_forward(t, y_prev, "dec.gcn", batch);
            h = gru_step(t, h, g, "dec.gru");
            Val y = t.matmul(h, t.bind(params, "out.w"));
            if (cfg.bias) y = t.add_row_broadcast(y, t.bind(params, "out.b"));
            outputs.push_back(y);
            if (cfg.autoregressive_decoder)
                y_prev = y;
            else
                y_prev = t.input(Matrix(batch * nodes, 1));
        }
        return outputs;
    }

    /// Single-window forward: history is H x N, result is Q x N.
    Matrix forward(const Matrix& history) const {
        if (history.rows() != cfg.history || history.cols() != nodes)
            throw ContractError("forward: history " + history.shape_str() + ", expected " +
                                std::to_string(cfg.history) + "x" + std::to_string(nodes));
        Tape t;
        std::vector<Val> steps;
        for (int s = 0; s < cfg.history; ++s)
            steps.push_back(t.input(transpose(slice_rows(history, s, s + 1))));
        Val last = t.input(transpose(slice_rows(history, cfg.history - 1, cfg.history)));
        std::vector<Val> outs = forward_tape(t, steps, last, 1);
        Matrix pred(cfg.horizon, nodes);
        for (int q = 0; q < cfg.horizon; ++q)
            for (int n = 0; n < nodes; ++n) pred(q, n) = t.value(outs[q])(n, 0);
        return pred;
    }

private:
    void add_gcn(const std::string& prefix, int in_features, std::mt19937_64& rng) {
        params.add(prefix + ".w0", glorot_matrix(in_features, cfg.gcn_hidden, rng));
        if (cfg.bias) params.add(prefix + ".b0", Matrix(1, cfg.gcn_hidden));
        params.add(prefix + ".w1", glorot_matrix(cfg.gcn_hidden, cfg.gcn_out, rng));
        if (cfg.bias) params.add(prefix + ".b1", Matrix(1, cfg.gcn_out));
    }

    void add_gru(const std::string& prefix, int in_features, std::mt19937_64& rng) {
        add_gru_params(params, prefix, in_features, cfg.gru_hidden, cfg.bias, rng);
    }
};

/// One training batch laid out for forward_tape: H step matrices of
/// (batch*N) x 1, the decoder seed, the stacked truth (batch*N) x Q and an
/// optional 0/1 weight mask of the same shape (1 = counted in the loss).
struct StgcnBatch {
    std::vector<Matrix> steps;
    Matrix last_obs;
    Matrix truth;
    Matrix weights;
    int batch = 0;
    double valid = 0.0;  // number of weighted entries
};

/// Assembles a batch from window anchors over a (time x nodes) matrix.
inline StgcnBatch make_batch(const Matrix& speeds, const MissingMask* mask,
                             const std::vector<int>& anchors, int H, int Q) {
    const int b = static_cast<int>(anchors.size());
    const int n = speeds.cols();
    StgcnBatch out;
    out.batch = b;
    out.steps.assign(H, Matrix(b * n, 1));
    out.last_obs = Matrix(b * n, 1);
    out.truth = Matrix(b * n, Q);
    out.weights = Matrix(b * n, Q, 1.0);
    for (int s = 0; s < b; ++s) {
        const int t0 = anchors[s];
        for (int h = 0; h < H; ++h)
            for (int j = 0; j < n; ++j) out.steps[h](s * n + j, 0) = speeds(t0 - H + h, j);
        for (int j = 0; j < n; ++j) out.last_obs(s * n + j, 0) = speeds(t0 - 1, j);
        for (int q = 0; q < Q; ++q)
            for (int j = 0; j < n; ++j) {
                out.truth(s * n + j, q) = speeds(t0 + q, j);
                if (mask && mask->get(t0 + q, j)) out.weights(s * n + j, q) = 0.0;
            }
    }
    out.valid = sum(out.weights);
    return out;
}

/// Masked L1 loss of one batch on a fresh tape; returns the loss node.
inline Val batch_loss(Tape& t, const StgcnModel& model, const StgcnBatch& batch) {
    std::vector<Val> steps;
    steps.reserve(batch.steps.size());
    for (const Matrix& s : batch.steps) steps.push_back(t.input(s));
    std::vector<Val> outs = model.forward_tape(t, steps, t.input(batch.last_obs), batch.batch);
    Val pred = outs[0];
    for (size_t q = 1; q < outs.size(); ++q) pred = t.concat_cols(pred, outs[q]);
    Val diff = t.abs(t.sub(pred, t.input(batch.truth)));
    if (batch.valid <= 0.0) throw ContractError("batch_loss: no valid entries");
    Val weighted = t.mul(diff, t.input(batch.weights));
    return t.scale(t.sum(weighted), 1.0 / batch.valid);
}

struct TrainOptions {
    int max_epochs = 50;
    int patience = 5;
    int batch_size = 64;
    double lr = 0.05;
    uint64_t seed = 0;
};

struct EpochRecord {
    int epoch;
    double train_l1;
    double val_l1;
};

/// Adam training with early stopping on a caller-supplied validation loss.
/// Keeps the best-validation snapshot and restores it before returning.
/// Throws TrainingError naming the batch when the loss turns non-finite.
inline std::vector<EpochRecord> train_stgcn(StgcnModel& model, const Matrix& speeds,
                                            const MissingMask* mask,
                                            const std::vector<int>& anchors,
                                            const std::function<double(const StgcnModel&)>& val_loss,
                                            const TrainOptions& opt) {
    if (anchors.empty()) throw ContractError("train: no training windows");
    AdamOptimizer adam(opt.lr);
    std::vector<EpochRecord> history;
    ParamSet best = model.params;
    double best_val = std::numeric_limits<double>::infinity();
    int stall = 0;

    std::vector<int> order = anchors;
    auto rng = make_rng(opt.seed, 0x74726e);  // "trn"
    const int H = model.cfg.history, Q = model.cfg.horizon;

    for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t off = 0; off < order.size(); off += opt.batch_size) {
            std::vector<int> chunk(order.begin() + off,
                                   order.begin() + std::min(order.size(),
                                                            off + opt.batch_size));
            StgcnBatch batch = make_batch(speeds, mask, chunk, H, Q);
            if (batch.valid <= 0.0) continue;
            Tape t;
            Val loss = batch_loss(t, model, batch);
            const double l = t.value(loss)(0, 0);
            if (!std::isfinite(l))
                throw TrainingError("train: non-finite loss in epoch " + std::to_string(epoch) +
                                    " batch " + std::to_string(batches));
            t.backward(loss);
            adam.step(model.params, t.param_grads(model.params));
            epoch_loss += l;
            ++batches;
        }
        const double train_l1 = batches ? epoch_loss / batches : 0.0;
        const double v = val_loss ? val_loss(model) : train_l1;
        history.push_back({epoch, train_l1, v});
        if (v < best_val - 1e-12) {
            best_val = v;
            best = model.params;
            stall = 0;
        } else if (++stall >= opt.patience) {
            break;
        }
    }
    model.params = best;
    return history;
}

}  // namespace traffictl
