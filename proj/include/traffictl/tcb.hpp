#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "traffictl/autodiff.hpp"
#include "traffictl/dataset.hpp"
#include "traffictl/errors.hpp"
#include "traffictl/grb.hpp"
#include "traffictl/matrix.hpp"
#include "traffictl/optim.hpp"
#include "traffictl/stgcn.hpp"

namespace traffictl {

struct TcbConfig {
    int history = 12;          // H, window length fed to the cluster net
    int tau = 6;               // view offset, 0 < tau < H
    int hidden = 64;           // GRU state size of the cluster net
    int pretrain_epochs = 5;
    int pretrain_batches = 30;  // batches per pretrain epoch
    int pretrain_batch_size = 64;
    double pretrain_lr = 0.01;
    int head_epochs = 30;      // per candidate c
    int head_batches = 8;      // batches per head epoch
    int pair_batch = 64;       // m, window pairs per batch
    double head_lr = 0.01;
    int anchor_pool = 256;     // cached training anchors
    int eval_anchors = 64;     // held-out anchors for scoring and assignment
    bool normalized_mi = false;   // compare candidates by I / ln(c)
    bool train_encoder = false;   // backprop MI into the GRU instead of freezing it
};

/// Cluster network: a pretrained GRU encoder shared across candidates and
/// a per-candidate classification head ending in a softmax.
struct ClusterNet {
    int hidden = 0;
    int clusters = 0;
    ParamSet encoder;  // gru.* (+ the discarded pretrain head pre.*)
    ParamSet head;     // head.w: hidden x c, head.b: 1 x c
};

/// Symmetrized joint distribution of cluster assignments over two views.
struct JointMatrix {
    Matrix joint;                  // c x c, symmetrized, sums to 1
    std::vector<double> row_marg;  // P(z_c = j)
    std::vector<double> col_marg;  // P(z_c' = k)
};

/// P = (1/m) sum over rows of outer(p1_i, p2_i), symmetrized as
/// (P + P^T)/2; marginals are row/column sums of the symmetrized matrix.
inline JointMatrix joint_matrix(const Matrix& p1, const Matrix& p2) {
    if (!p1.same_shape(p2))
        throw ContractError("joint_matrix: shape mismatch " + p1.shape_str() + " vs " +
                            p2.shape_str());
    if (p1.rows() == 0) throw ContractError("joint_matrix: empty batch");
    const int c = p1.cols();
    Matrix p = scale(matmul(transpose(p1), p2), 1.0 / p1.rows());
    JointMatrix jm;
    jm.joint = Matrix(c, c);
    for (int j = 0; j < c; ++j)
        for (int k = 0; k < c; ++k) jm.joint(j, k) = 0.5 * (p(j, k) + p(k, j));
    jm.row_marg.assign(c, 0.0);
    jm.col_marg.assign(c, 0.0);
    for (int j = 0; j < c; ++j)
        for (int k = 0; k < c; ++k) {
            jm.row_marg[j] += jm.joint(j, k);
            jm.col_marg[k] += jm.joint(j, k);
        }
    return jm;
}

/// I = sum_jk P_jk ln(P_jk / (P_j P_k)); terms with P_jk = 0 contribute 0.
inline double mutual_information(const JointMatrix& jm) {
    double info = 0.0;
    const int c = jm.joint.rows();
    for (int j = 0; j < c; ++j)
        for (int k = 0; k < c; ++k) {
            const double p = jm.joint(j, k);
            if (p <= 0.0) continue;
            info += p * std::log(p / (jm.row_marg[j] * jm.col_marg[k]));
        }
    return info;
}

// ---- encoder --------------------------------------------------------------

/// Final GRU state for the H-step window ending at `anchor`, one row per
/// node: the cluster net runs independently on each node's univariate
/// series. Frozen-encoder fast path (no tape).
inline Matrix encode_window(const ParamSet& encoder, int hidden, const Matrix& speeds, int anchor,
                            int H) {
    const int n = speeds.cols();
    Matrix h(n, hidden);
    for (int s = anchor - H; s < anchor; ++s) {
        Matrix x(n, 1);
        for (int j = 0; j < n; ++j) x(j, 0) = speeds(s, j);
        h = gru_cell_plain(encoder, "gru", h, x, true);
    }
    return h;
}

/// Same unroll on a tape, used when cfg.train_encoder is set. Anchors are
/// stacked into (|anchors| * n) rows.
inline Val encode_windows_tape(Tape& t, const ParamSet& encoder, int hidden, const Matrix& speeds,
                               const std::vector<int>& anchors, int H) {
    const int n = speeds.cols();
    const int b = static_cast<int>(anchors.size());
    Val h = t.input(Matrix(b * n, hidden));
    for (int s = 0; s < H; ++s) {
        Matrix x(b * n, 1);
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < n; ++j) x(i * n + j, 0) = speeds(anchors[i] - H + s, j);
        h = gru_cell(t, encoder, "gru", h, t.input(std::move(x)), true);
    }
    return h;
}

/// Pretrains the GRU as a per-node one-step-ahead forecaster (read H
/// normalized values, predict value H+1, L1 loss) and freezes it. The
/// temporary projection head stays in the ParamSet under pre.* but is not
/// used afterwards.
inline ParamSet pretrain_encoder(const CombinedDataset& cd, const TcbConfig& cfg, uint64_t seed) {
    ParamSet enc;
    auto rng = make_rng(seed, 0x656e63);  // "enc"
    add_gru_params(enc, "gru", 1, cfg.hidden, true, rng);
    enc.add("pre.w", glorot_matrix(cfg.hidden, 1, rng));
    enc.add("pre.b", Matrix(1, 1));

    const int H = cfg.history;
    if (cd.length() < H + 1) throw ContractError("pretrain: series shorter than H + 1");
    AdamOptimizer adam(cfg.pretrain_lr);
    std::uniform_int_distribution<int> anchor_pick(H, cd.length() - 2);
    std::uniform_int_distribution<int> node_pick(0, cd.nodes() - 1);

    for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
        for (int b = 0; b < cfg.pretrain_batches; ++b) {
            const int bs = cfg.pretrain_batch_size;
            std::vector<Matrix> steps(H, Matrix(bs, 1));
            Matrix truth(bs, 1);
            for (int i = 0; i < bs; ++i) {
                const int t0 = anchor_pick(rng);
                const int node = node_pick(rng);
                for (int s = 0; s < H; ++s) steps[s](i, 0) = cd.speeds(t0 - H + s, node);
                truth(i, 0) = cd.speeds(t0, node);
            }
            Tape t;
            Val h = t.input(Matrix(bs, cfg.hidden));
            for (Matrix& s : steps) h = gru_cell(t, enc, "gru", h, t.input(std::move(s)), true);
            Val pred = t.add_row_broadcast(t.matmul(h, t.bind(enc, "pre.w")), t.bind(enc, "pre.b"));
            Val loss = t.mean(t.abs(t.sub(pred, t.input(truth))));
            const double l = t.value(loss)(0, 0);
            if (!std::isfinite(l))
                throw TrainingError("pretrain: non-finite loss in epoch " +
                                    std::to_string(epoch + 1) + " batch " + std::to_string(b));
            t.backward(loss);
            adam.step(enc, t.param_grads(enc));
        }
    }
    return enc;
}

/// Softmax head probabilities for already-encoded node features.
inline Matrix head_probs(const ClusterNet& net, const Matrix& features) {
    Matrix logits = matmul(features, net.head.at("head.w"));
    const Matrix& b = net.head.at("head.b");
    for (int i = 0; i < logits.rows(); ++i)
        for (int j = 0; j < logits.cols(); ++j) logits(i, j) += b(0, j);
    return softmax_rows(logits);
}

/// Per-node cluster probabilities for one H x nodes window.
inline Matrix forward_probs(const ClusterNet& net, const Matrix& window) {
    if (window.rows() < 1) throw ContractError("forward_probs: empty window");
    Matrix feats = encode_window(net.encoder, net.hidden, window, window.rows(), window.rows());
    return head_probs(net, feats);
}

// ---- Alg. 1: candidate search over c ---------------------------------------

struct CandidateRun {
    int c = 0;
    double mi = 0.0;                 // Eq. 4 on the held-out anchors, final epoch
    std::vector<double> epoch_mi;    // per-epoch held-out MI
    std::vector<int> assignment;     // argmax of time-averaged probabilities
    Matrix avg_probs;                // nodes x c
    int occupied = 0;
};

/// Node -> cluster map over the combined node set plus the bookkeeping
/// Alg. 1 needs to justify the chosen c.
struct ClusterAssignment {
    int chosen_c = 0;
    double mi_score = 0.0;
    std::vector<int> cluster;        // per combined node, compacted ids
    std::vector<NodeRef> provenance;
    Matrix probs;                    // nodes x chosen_c (pre-repair head output)
    std::vector<CandidateRun> candidates;
};

namespace detail {

inline Matrix stack_rows(const std::vector<Matrix>& parts) {
    int rows = 0;
    for (const Matrix& p : parts) rows += p.rows();
    Matrix out(rows, parts.empty() ? 0 : parts[0].cols());
    int at = 0;
    for (const Matrix& p : parts) {
        for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < p.cols(); ++j) out(at + i, j) = p(i, j);
        at += p.rows();
    }
    return out;
}

inline double eval_candidate_mi(const ClusterNet& net, const std::vector<Matrix>& feats_first,
                                const std::vector<Matrix>& feats_second) {
    Matrix p1 = head_probs(net, stack_rows(feats_first));
    Matrix p2 = head_probs(net, stack_rows(feats_second));
    return mutual_information(joint_matrix(p1, p2));
}

/// -I as a tape node from two stacked probability matrices.
inline Val mi_loss(Tape& t, Val p1, Val p2) {
    const double inv_rows = 1.0 / t.value(p1).rows();
    Val p = t.scale(t.matmul(t.transpose(p1), p2), inv_rows);
    Val sym = t.scale(t.add(p, t.transpose(p)), 0.5);
    Val marg_r = t.row_sums(sym);                       // c x 1
    Val marg_c = t.col_sums(sym);                       // 1 x c
    Val outer = t.matmul(marg_r, marg_c);               // c x c
    Val info = t.sum(t.mul(sym, t.sub(t.log(sym), t.log(outer))));
    return t.scale(info, -1.0);
}

}  // namespace detail

/// Trains the classification head for one cluster count c by maximizing
/// Eq. 4 over sampled window pairs, with the encoder frozen (default) or
/// trained jointly (cfg.train_encoder). RNG stream is keyed by (seed, c).
inline CandidateRun train_candidate(const CombinedDataset& cd, const ParamSet& encoder,
                                    const TcbConfig& cfg, int c,
                                    const std::vector<int>& train_anchors,
                                    const std::vector<int>& eval_anchors, uint64_t seed) {
    if (c < 1) throw ContractError("tcb: cluster count must be positive");
    ClusterNet net;
    net.hidden = cfg.hidden;
    net.clusters = c;
    net.encoder = encoder;
    auto rng = make_rng(seed, 0x68656164, static_cast<uint64_t>(c));  // "head"
    net.head.add("head.w", glorot_matrix(cfg.hidden, c, rng));
    net.head.add("head.b", Matrix(1, c));

    // Frozen-path feature cache: the encoder output of a window depends only
    // on the anchor, so both views share the cache at anchors t and t+tau.
    std::map<int, Matrix> cache;
    auto features = [&](int anchor) -> const Matrix& {
        auto it = cache.find(anchor);
        if (it == cache.end())
            it = cache.emplace(anchor, encode_window(net.encoder, cfg.hidden, cd.speeds, anchor,
                                                     cfg.history))
                     .first;
        return it->second;
    };

    std::vector<Matrix> eval_first, eval_second;
    auto refresh_eval = [&]() {
        eval_first.clear();
        eval_second.clear();
        for (int a : eval_anchors) {
            eval_first.push_back(cfg.train_encoder
                                     ? encode_window(net.encoder, cfg.hidden, cd.speeds, a,
                                                     cfg.history)
                                     : features(a));
            eval_second.push_back(cfg.train_encoder
                                      ? encode_window(net.encoder, cfg.hidden, cd.speeds, a + cfg.tau,
                                                      cfg.history)
                                      : features(a + cfg.tau));
        }
    };

    AdamOptimizer adam(cfg.head_lr);
    CandidateRun run;
    run.c = c;
    std::uniform_int_distribution<size_t> pick(0, train_anchors.size() - 1);

    for (int epoch = 0; epoch < cfg.head_epochs; ++epoch) {
        for (int b = 0; b < cfg.head_batches; ++b) {
            std::vector<int> batch;
            for (int i = 0; i < cfg.pair_batch; ++i) batch.push_back(train_anchors[pick(rng)]);

            Tape t;
            Val f1, f2;
            if (cfg.train_encoder) {
                std::vector<int> shifted = batch;
                for (int& a : shifted) a += cfg.tau;
                f1 = encode_windows_tape(t, net.encoder, cfg.hidden, cd.speeds, batch, cfg.history);
                f2 = encode_windows_tape(t, net.encoder, cfg.hidden, cd.speeds, shifted,
                                         cfg.history);
            } else {
                Matrix m1(static_cast<int>(batch.size()) * cd.nodes(), cfg.hidden);
                Matrix m2(m1.rows(), cfg.hidden);
                for (size_t i = 0; i < batch.size(); ++i) {
                    const Matrix& a = features(batch[i]);
                    const Matrix& bb = features(batch[i] + cfg.tau);
                    for (int r = 0; r < a.rows(); ++r)
                        for (int cc = 0; cc < a.cols(); ++cc) {
                            m1(static_cast<int>(i) * cd.nodes() + r, cc) = a(r, cc);
                            m2(static_cast<int>(i) * cd.nodes() + r, cc) = bb(r, cc);
                        }
                }
                f1 = t.input(std::move(m1));
                f2 = t.input(std::move(m2));
            }
            Val w = t.bind(net.head, "head.w");
            Val bias = t.bind(net.head, "head.b");
            Val p1 = t.softmax_rows(t.add_row_broadcast(t.matmul(f1, w), bias));
            Val p2 = t.softmax_rows(t.add_row_broadcast(t.matmul(f2, w), bias));
            Val loss = detail::mi_loss(t, p1, p2);
            if (!std::isfinite(t.value(loss)(0, 0)))
                throw TrainingError("tcb: non-finite MI loss for c=" + std::to_string(c));
            t.backward(loss);
            adam.step(net.head, t.param_grads(net.head));
            if (cfg.train_encoder) adam.step(net.encoder, t.param_grads(net.encoder));
        }
        if (cfg.train_encoder || eval_first.empty()) refresh_eval();
        run.epoch_mi.push_back(detail::eval_candidate_mi(net, eval_first, eval_second));
    }

    run.mi = run.epoch_mi.empty() ? 0.0 : run.epoch_mi.back();

    // Assignment: argmax of node probabilities time-averaged over the
    // held-out windows.
    if (eval_first.empty()) refresh_eval();
    Matrix avg(cd.nodes(), c);
    for (const Matrix& f : eval_first) {
        Matrix p = head_probs(net, f);
        for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < c; ++j) avg(i, j) += p(i, j);
    }
    avg = scale(avg, 1.0 / static_cast<double>(eval_first.size()));
    run.avg_probs = avg;
    run.assignment.resize(cd.nodes());
    for (int i = 0; i < cd.nodes(); ++i) {
        int best = 0;
        for (int j = 1; j < c; ++j)
            if (avg(i, j) > avg(i, best)) best = j;
        run.assignment[i] = best;
    }
    std::vector<int> occ(c, 0);
    for (int a : run.assignment) occ[a] = 1;
    for (int o : occ) run.occupied += o;
    return run;
}

namespace detail {

/// Mean daily profile of a set of combined-data columns.
inline std::vector<double> mean_day_profile(const CombinedDataset& cd,
                                            const std::vector<int>& cols) {
    const int d = cd.steps_per_day;
    std::vector<double> prof(d, 0.0);
    std::vector<long> cnt(d, 0);
    for (int col : cols)
        for (int t = 0; t < cd.length(); ++t) {
            if (cd.mask.rows > 0 && cd.mask.get(t, col)) continue;
            prof[t % d] += cd.speeds(t, col);
            ++cnt[t % d];
        }
    for (int i = 0; i < d; ++i) prof[i] = cnt[i] ? prof[i] / cnt[i] : 0.0;
    return prof;
}

}  // namespace detail

/// Repairs an argmax assignment so every cluster id is occupied and every
/// cluster contains at least one source node: empty ids are compacted away
/// and a cluster with no source nodes is merged into the cluster whose
/// source-centroid day profile is nearest by DTW.
inline void repair_assignment(const CombinedDataset& cd, std::vector<int>& assignment) {
    auto compact = [&]() {
        std::map<int, int> remap;
        for (int a : assignment) remap.emplace(a, 0);
        int next = 0;
        for (auto& kv : remap) kv.second = next++;
        for (int& a : assignment) a = remap[a];
        return next;
    };
    int k = compact();

    for (;;) {
        std::vector<std::vector<int>> source_cols(k), member_cols(k);
        for (int i = 0; i < cd.nodes(); ++i) {
            member_cols[assignment[i]].push_back(i);
            if (cd.provenance[i].city == City::source) source_cols[assignment[i]].push_back(i);
        }
        int orphan = -1;
        for (int c = 0; c < k; ++c)
            if (source_cols[c].empty()) {
                orphan = c;
                break;
            }
        if (orphan < 0) break;
        if (k <= 1)
            throw DataError("tcb: no cluster contains a source node");

        const auto orphan_prof = detail::mean_day_profile(cd, member_cols[orphan]);
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (c == orphan || source_cols[c].empty()) continue;
            const auto prof = detail::mean_day_profile(cd, source_cols[c]);
            const double d = dtw_distance(orphan_prof, prof);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        for (int& a : assignment)
            if (a == orphan) a = best;
        k = compact();
    }
}

/// Alg. 1: trains the head for every candidate c, keeps the assignment
/// with the highest converged mutual information, then repairs it.
inline ClusterAssignment fit_tcb(const CombinedDataset& cd, const ParamSet& encoder,
                                 const TcbConfig& cfg, const std::vector<int>& candidates,
                                 uint64_t seed) {
    if (candidates.empty()) throw ContractError("tcb: empty candidate list");
    if (cfg.tau <= 0 || cfg.tau >= cfg.history)
        throw ContractError("tcb: require 0 < tau < H");

    // One draw, then split: training pool first, held-out anchors after.
    const int want = cfg.anchor_pool + cfg.eval_anchors;
    std::vector<int> anchors = sample_pair_anchors(cd.length(), cfg.history, cfg.tau, want,
                                                   mix_seed(seed) ^ 0x616e6368);
    if (static_cast<int>(anchors.size()) < 2)
        throw ContractError("tcb: not enough windows for training and evaluation");
    const int pool = std::max(1, static_cast<int>(anchors.size()) - cfg.eval_anchors);
    std::vector<int> train_anchors(anchors.begin(), anchors.begin() + pool);
    std::vector<int> eval_anchors(anchors.begin() + pool, anchors.end());
    if (eval_anchors.empty()) eval_anchors = train_anchors;

    ClusterAssignment out;
    out.provenance = cd.provenance;
    double best_score = -std::numeric_limits<double>::infinity();
    int best_idx = -1;
    for (int c : candidates) {
        CandidateRun run = train_candidate(cd, encoder, cfg, c, train_anchors, eval_anchors, seed);
        const double score = cfg.normalized_mi && c > 1 ? run.mi / std::log(double(c)) : run.mi;
        out.candidates.push_back(std::move(run));
        if (score > best_score) {
            best_score = score;
            best_idx = static_cast<int>(out.candidates.size()) - 1;
        }
    }

    const CandidateRun& best = out.candidates[best_idx];
    if (best.occupied < 2 && best.c > 1)
        throw DataError("tcb: all candidates collapsed to a single occupied cluster");
    out.chosen_c = best.c;
    out.mi_score = best.mi;
    out.probs = best.avg_probs;
    out.cluster = best.assignment;
    repair_assignment(cd, out.cluster);
    return out;
}

/// Cluster ids present after repair (max id + 1).
inline int cluster_count(const ClusterAssignment& a) {
    int k = 0;
    for (int c : a.cluster) k = std::max(k, c + 1);
    return k;
}

}  // namespace traffictl
