#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "traffictl/dataset.hpp"
#include "traffictl/errors.hpp"
#include "traffictl/grb.hpp"
#include "traffictl/matrix.hpp"
#include "traffictl/stgcn.hpp"
#include "traffictl/tcb.hpp"

namespace traffictl {

// ---- replacement plan (Rep) -------------------------------------------------

/// One round of node replacement inside a cluster: pairs of
/// (source slot, target node), both as indices into the cluster's node list.
using RoundMapping = std::vector<std::pair<int, int>>;

struct ClusterPlan {
    int cluster = 0;
    std::vector<int> source_slots;   // cluster node-list indices of source members
    std::vector<int> target_members; // cluster node-list indices of target members
    int slots_per_round = 0;         // max(1, floor(beta * N_source))
    std::vector<RoundMapping> rounds;
};

struct TransferPlan {
    double beta = 0.2;
    bool similarity_mode = true;
    uint64_t seed = 0;
    std::vector<ClusterPlan> clusters;
};

/// Builds the round-robin replacement plan. Similarity mode sends each
/// target node to the free source slot with the smallest DTW distance W
/// (ties by lower index); random mode picks a free slot uniformly. Every
/// target node appears in exactly one round.
inline TransferPlan build_plan(const std::vector<SimilarityGraph>& graphs, double beta,
                               bool similarity_mode, uint64_t seed) {
    if (beta <= 0.0 || beta > 1.0)
        throw ContractError("plan: beta must be in (0, 1], got " + std::to_string(beta));
    TransferPlan plan;
    plan.beta = beta;
    plan.similarity_mode = similarity_mode;
    plan.seed = seed;

    for (const SimilarityGraph& g : graphs) {
        ClusterPlan cp;
        cp.cluster = g.cluster;
        for (int i = 0; i < static_cast<int>(g.nodes.size()); ++i) {
            if (g.nodes[i].city == City::source)
                cp.source_slots.push_back(i);
            else
                cp.target_members.push_back(i);
        }
        if (cp.source_slots.empty())
            throw ContractError("plan: cluster " + std::to_string(g.cluster) +
                                " has no source nodes");
        const int ns = static_cast<int>(cp.source_slots.size());
        cp.slots_per_round = std::max(1, static_cast<int>(std::floor(beta * ns)));

        auto rng = make_rng(seed, 0x706c616e, static_cast<uint64_t>(g.cluster));  // "plan"
        size_t next_target = 0;
        while (next_target < cp.target_members.size()) {
            RoundMapping round;
            std::vector<uint8_t> used(cp.source_slots.size(), 0);
            for (int s = 0; s < cp.slots_per_round && next_target < cp.target_members.size();
                 ++s, ++next_target) {
                const int tgt = cp.target_members[next_target];
                int pick = -1;
                if (similarity_mode) {
                    double best = std::numeric_limits<double>::infinity();
                    for (size_t i = 0; i < cp.source_slots.size(); ++i) {
                        if (used[i]) continue;
                        const double d = g.w(tgt, cp.source_slots[i]);
                        if (d < best) {
                            best = d;
                            pick = static_cast<int>(i);
                        }
                    }
                } else {
                    std::vector<int> free;
                    for (size_t i = 0; i < cp.source_slots.size(); ++i)
                        if (!used[i]) free.push_back(static_cast<int>(i));
                    std::uniform_int_distribution<size_t> dist(0, free.size() - 1);
                    pick = free[dist(rng)];
                }
                used[pick] = 1;
                round.emplace_back(cp.source_slots[pick], tgt);
            }
            cp.rounds.push_back(std::move(round));
        }
        plan.clusters.push_back(std::move(cp));
    }
    return plan;
}

/// Rep(.): copies a history window of the cluster's source nodes and
/// overwrites the mapped slots with the target nodes' series. Columns are
/// ordered like cluster_plan.source_slots.
inline Matrix apply_rep(const Matrix& source_window, const ClusterPlan& cp,
                        const RoundMapping& mapping,
                        const std::function<double(int node_idx, int step)>& target_at) {
    if (source_window.cols() != static_cast<int>(cp.source_slots.size()))
        throw ContractError("apply_rep: window has " + std::to_string(source_window.cols()) +
                            " columns, plan has " + std::to_string(cp.source_slots.size()) +
                            " slots");
    Matrix mixed = source_window;
    for (const auto& [slot, tgt] : mapping) {
        const auto it = std::find(cp.source_slots.begin(), cp.source_slots.end(), slot);
        const int col = static_cast<int>(it - cp.source_slots.begin());
        for (int s = 0; s < mixed.rows(); ++s) mixed(s, col) = target_at(tgt, s);
    }
    return mixed;
}

// ---- metrics ----------------------------------------------------------------

struct HorizonMetrics {
    double mae = 0.0;
    double rmse = 0.0;
    double mape = 0.0;   // percent
    long n_valid = 0;    // samples entering MAPE
    long n_excluded = 0; // masked or |truth| < eps_mape
};

struct ClusterMetrics {
    int cluster = 0;
    bool has_targets = true;
    std::map<int, HorizonMetrics> endpoint;   // value at step Q-1
    std::map<int, HorizonMetrics> mean_over;  // mean over steps 0..Q-1
};

struct MetricsReport {
    std::vector<ClusterMetrics> clusters;
    std::map<int, HorizonMetrics> aggregate_endpoint;
    std::map<int, HorizonMetrics> aggregate_mean;
    std::vector<int> clusters_without_targets;
};

namespace detail {

struct MetricAccum {
    double abs_sum = 0.0, sq_sum = 0.0, ape_sum = 0.0;
    long n = 0, n_valid = 0, n_excluded = 0;

    void add(double truth, double pred, bool masked, double eps_mape) {
        if (masked) {
            ++n_excluded;
            return;
        }
        ++n;
        const double d = truth - pred;
        abs_sum += std::fabs(d);
        sq_sum += d * d;
        if (std::fabs(truth) >= eps_mape) {
            ape_sum += std::fabs(d / truth);
            ++n_valid;
        } else {
            ++n_excluded;
        }
    }

    HorizonMetrics finish() const {
        if (n == 0) throw DataError("metrics: zero valid samples");
        HorizonMetrics m;
        m.mae = abs_sum / n;
        m.rmse = std::sqrt(sq_sum / n);
        m.mape = n_valid > 0 ? 100.0 * ape_sum / n_valid : 0.0;
        m.n_valid = n_valid;
        m.n_excluded = n_excluded;
        return m;
    }
};

}  // namespace detail

/// Predictions for the target nodes of one cluster over the test anchors,
/// already denormalized to km/h.
struct ClusterPredictions {
    int cluster = 0;
    std::vector<NodeRef> targets;             // provenance of each predicted node
    std::vector<Matrix> pred;                 // per node: anchors x Q
    std::vector<Matrix> truth;                // per node: anchors x Q
    std::vector<std::vector<uint8_t>> masked; // per node: anchors*Q flags
    std::vector<int> anchors;
};

/// MAE / RMSE / MAPE per horizon for one cluster's predictions.
/// MAPE skips masked points and truths below eps_mape and reports the
/// exclusion count; MAE and RMSE use all unmasked points.
inline ClusterMetrics metrics(const ClusterPredictions& cp, const std::vector<int>& horizons,
                              double eps_mape) {
    ClusterMetrics cm;
    cm.cluster = cp.cluster;
    cm.has_targets = !cp.targets.empty();
    for (int h : horizons) {
        detail::MetricAccum end_acc, mean_acc;
        for (size_t node = 0; node < cp.pred.size(); ++node) {
            const Matrix& p = cp.pred[node];
            const Matrix& y = cp.truth[node];
            const auto& mk = cp.masked[node];
            for (int a = 0; a < p.rows(); ++a) {
                const int q = h - 1;
                end_acc.add(y(a, q), p(a, q), mk[a * p.cols() + q] != 0, eps_mape);
                for (int s = 0; s < h; ++s)
                    mean_acc.add(y(a, s), p(a, s), mk[a * p.cols() + s] != 0, eps_mape);
            }
        }
        cm.endpoint[h] = end_acc.finish();
        cm.mean_over[h] = mean_acc.finish();
    }
    return cm;
}

/// Eq. 18: aggregate metric = arithmetic mean over clusters that produced
/// target predictions; clusters without target nodes are noted instead.
inline MetricsReport aggregate_metrics(const std::vector<ClusterMetrics>& per_cluster,
                                       const std::vector<int>& horizons) {
    MetricsReport rep;
    rep.clusters = per_cluster;
    int counted = 0;
    for (const ClusterMetrics& cm : per_cluster) {
        if (!cm.has_targets) {
            rep.clusters_without_targets.push_back(cm.cluster);
            continue;
        }
        ++counted;
        for (int h : horizons) {
            auto& ae = rep.aggregate_endpoint[h];
            const auto& e = cm.endpoint.at(h);
            ae.mae += e.mae;
            ae.rmse += e.rmse;
            ae.mape += e.mape;
            ae.n_valid += e.n_valid;
            ae.n_excluded += e.n_excluded;
            auto& am = rep.aggregate_mean[h];
            const auto& mo = cm.mean_over.at(h);
            am.mae += mo.mae;
            am.rmse += mo.rmse;
            am.mape += mo.mape;
            am.n_valid += mo.n_valid;
            am.n_excluded += mo.n_excluded;
        }
    }
    if (counted == 0) throw DataError("metrics: no cluster produced target predictions");
    for (int h : horizons) {
        rep.aggregate_endpoint[h].mae /= counted;
        rep.aggregate_endpoint[h].rmse /= counted;
        rep.aggregate_endpoint[h].mape /= counted;
        rep.aggregate_mean[h].mae /= counted;
        rep.aggregate_mean[h].rmse /= counted;
        rep.aggregate_mean[h].mape /= counted;
    }
    return rep;
}

// ---- evaluation timeline ----------------------------------------------------

/// Chronological split of the target timeline: everything before the
/// validation day is available as history, validation is one day, and the
/// test split is the last ten days or as many as remain.
struct EvalSplit {
    int val_start = 0;
    int test_start = 0;
    int length = 0;
    std::vector<int> val_anchors;
    std::vector<int> test_anchors;
};

inline EvalSplit make_eval_split(int target_len, int steps_per_day, int H, int Q,
                                 int val_days = 1, int test_days_wanted = 10) {
    const int days = target_len / steps_per_day;
    if (days < val_days + 2)
        throw ContractError("split: need at least " + std::to_string(val_days + 2) +
                            " target days (train + validation + test), got " +
                            std::to_string(days));
    const int test_days = std::min(test_days_wanted, days - val_days - 1);
    EvalSplit s;
    s.length = target_len;
    s.test_start = target_len - test_days * steps_per_day;
    s.val_start = s.test_start - val_days * steps_per_day;
    for (int t = std::max(H, s.val_start); t + Q <= s.test_start; ++t) s.val_anchors.push_back(t);
    for (int t = std::max(H, s.test_start); t + Q <= target_len; ++t) s.test_anchors.push_back(t);
    if (s.val_anchors.empty() || s.test_anchors.empty())
        throw ContractError("split: validation or test day shorter than H + Q");
    return s;
}

// ---- transfer prediction ----------------------------------------------------

/// Original normalized city views recovered from the combined dataset:
/// source columns as-is, target columns truncated to the first replication.
struct CityViews {
    Matrix source;          // L_S x N_S normalized
    Matrix target;          // L_T x N_T normalized
    MissingMask source_mask;
    MissingMask target_mask;
    MinMax source_scale, target_scale;
    int steps_per_day = 0;

    static CityViews from_combined(const CombinedDataset& cd, int target_len) {
        CityViews v;
        v.source_scale = cd.source_scale;
        v.target_scale = cd.target_scale;
        v.steps_per_day = cd.steps_per_day;
        v.source = Matrix(cd.length(), cd.source_nodes);
        v.source_mask = MissingMask(cd.length(), cd.source_nodes);
        for (int t = 0; t < cd.length(); ++t)
            for (int j = 0; j < cd.source_nodes; ++j) {
                v.source(t, j) = cd.speeds(t, j);
                v.source_mask.set(t, j, cd.mask.get(t, j));
            }
        v.target = Matrix(target_len, cd.target_nodes);
        v.target_mask = MissingMask(target_len, cd.target_nodes);
        for (int t = 0; t < target_len; ++t)
            for (int j = 0; j < cd.target_nodes; ++j) {
                v.target(t, j) = cd.speeds(t, cd.source_nodes + j);
                v.target_mask.set(t, j, cd.mask.get(t, cd.source_nodes + j));
            }
        return v;
    }
};

/// Runs the parameter-sharing twin over the mixed windows of every round
/// and collects the predictions at the replaced slots, denormalized. The
/// model is identical to the trained one by construction (same ParamSet
/// object); inference mutates nothing.
inline ClusterPredictions transfer_predict(const StgcnModel& model, const SimilarityGraph& graph,
                                           const ClusterPlan& cp, const CityViews& views,
                                           const std::vector<int>& anchors) {
    ClusterPredictions out;
    out.cluster = cp.cluster;
    out.anchors = anchors;
    const int H = model.cfg.history, Q = model.cfg.horizon;
    const int ncols = static_cast<int>(cp.source_slots.size());
    const int b = static_cast<int>(anchors.size());

    for (const RoundMapping& round : cp.rounds) {
        // Mixed timeline for this round: cluster source columns with the
        // mapped slots carrying the target node's series.
        Matrix mixed(views.target.rows(), ncols);
        MissingMask mixed_mask(views.target.rows(), ncols);
        std::vector<int> col_target(ncols, -1);
        for (int c = 0; c < ncols; ++c) {
            const int src_node = graph.nodes[cp.source_slots[c]].index;
            for (int t = 0; t < mixed.rows(); ++t) {
                mixed(t, c) = views.source(t, src_node);
                mixed_mask.set(t, c, views.source_mask.get(t, src_node));
            }
        }
        for (const auto& [slot, tgt] : round) {
            const int c = static_cast<int>(
                std::find(cp.source_slots.begin(), cp.source_slots.end(), slot) -
                cp.source_slots.begin());
            const int tgt_node = graph.nodes[tgt].index;
            col_target[c] = tgt;
            for (int t = 0; t < mixed.rows(); ++t) {
                mixed(t, c) = views.target(t, tgt_node);
                mixed_mask.set(t, c, views.target_mask.get(t, tgt_node));
            }
        }

        StgcnBatch batch = make_batch(mixed, &mixed_mask, anchors, H, Q);
        Tape t;
        std::vector<Val> steps;
        for (const Matrix& s : batch.steps) steps.push_back(t.input(s));
        std::vector<Val> outs = model.forward_tape(t, steps, t.input(batch.last_obs), b);

        for (int c = 0; c < ncols; ++c) {
            if (col_target[c] < 0) continue;
            const int tgt_node = graph.nodes[col_target[c]].index;
            Matrix pred(b, Q), truth(b, Q);
            std::vector<uint8_t> masked(static_cast<size_t>(b) * Q, 0);
            for (int a = 0; a < b; ++a)
                for (int q = 0; q < Q; ++q) {
                    pred(a, q) = views.target_scale.denormalize(t.value(outs[q])(a * ncols + c, 0));
                    truth(a, q) =
                        views.target_scale.denormalize(views.target(anchors[a] + q, tgt_node));
                    masked[static_cast<size_t>(a) * Q + q] =
                        views.target_mask.get(anchors[a] + q, tgt_node) ? 1 : 0;
                }
            out.targets.push_back(graph.nodes[col_target[c]]);
            out.pred.push_back(std::move(pred));
            out.truth.push_back(std::move(truth));
            out.masked.push_back(std::move(masked));
        }
    }
    return out;
}

/// Normalized L1 of the transfer path on given anchors; used as the early
/// stopping signal (one day of target data serves as validation).
inline double transfer_val_loss(const StgcnModel& model, const SimilarityGraph& graph,
                                const ClusterPlan& cp, const CityViews& views,
                                const std::vector<int>& anchors) {
    ClusterPredictions p = transfer_predict(model, graph, cp, views, anchors);
    double sum = 0.0;
    long n = 0;
    for (size_t node = 0; node < p.pred.size(); ++node)
        for (int a = 0; a < p.pred[node].rows(); ++a)
            for (int q = 0; q < p.pred[node].cols(); ++q) {
                if (p.masked[node][static_cast<size_t>(a) * p.pred[node].cols() + q]) continue;
                sum += std::fabs(views.target_scale.normalize(p.pred[node](a, q)) -
                                 views.target_scale.normalize(p.truth[node](a, q)));
                ++n;
            }
    return n ? sum / n : 0.0;
}

// ---- ensemble driver ----------------------------------------------------------

struct EnsembleConfig {
    StgcnConfig model;
    TrainOptions train;
    std::vector<int> horizons = {3, 6, 12};
    double beta = 0.2;
    bool similarity_mode = true;
    double eps_mape = 1.0;  // km/h threshold below which MAPE skips a sample
    int val_days = 1;
    int test_days = 10;
    int threads = 1;
    uint64_t seed = 0;
};

struct ClusterOutcome {
    int cluster = 0;
    bool has_targets = false;
    ClusterPredictions predictions;
    std::vector<EpochRecord> loss_history;
    uint64_t checksum_before_transfer = 0;
    uint64_t checksum_after_transfer = 0;
};

struct EnsembleResult {
    MetricsReport report;
    std::vector<ClusterOutcome> outcomes;
    TransferPlan plan;
    EvalSplit split;
};

namespace detail {

/// Cluster member columns (graph node order) mapped to combined columns.
inline std::vector<std::vector<int>> cluster_members(const ClusterAssignment& assignment) {
    std::vector<std::vector<int>> members(cluster_count(assignment));
    for (int i = 0; i < static_cast<int>(assignment.cluster.size()); ++i)
        members[assignment.cluster[i]].push_back(i);
    return members;
}

}  // namespace detail

/// Alg. 2: per cluster, train Psi on the cluster's source nodes, then run
/// the parameter-sharing twin over mixed windows and score the target
/// predictions. Clusters run on their own seed streams so the result is
/// identical for any thread count.
inline EnsembleResult run_ensemble(const CombinedDataset& cd, const ClusterAssignment& assignment,
                                   const std::vector<SimilarityGraph>& graphs,
                                   const EnsembleConfig& cfg) {
    const int k = static_cast<int>(graphs.size());
    if (k == 0) throw ContractError("ensemble: no clusters");

    CityViews views = CityViews::from_combined(cd, cd.target_length);
    EvalSplit split = make_eval_split(target_len, cd.steps_per_day, cfg.model.history,
                                      cfg.model.horizon, cfg.val_days, cfg.test_days);
    TransferPlan plan = build_plan(graphs, cfg.beta, cfg.similarity_mode, cfg.seed);

    EnsembleResult result;
    result.plan = plan;
    result.split = split;
    result.outcomes.resize(k);

    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= k) return;
            const SimilarityGraph& graph = graphs[i];
            const ClusterPlan& cp = plan.clusters[i];
            ClusterOutcome& out = result.outcomes[i];
            out.cluster = graph.cluster;
            out.has_targets = !cp.target_members.empty();

            // Training matrix: the cluster's source columns over the full
            // source timeline.
            Matrix speeds(cd.length(), static_cast<int>(cp.source_slots.size()));
            MissingMask mask(cd.length(), speeds.cols());
            for (int c = 0; c < speeds.cols(); ++c) {
                const int col = graph.nodes[cp.source_slots[c]].index;  // source column index
                for (int t = 0; t < cd.length(); ++t) {
                    speeds(t, c) = views.source(t, col);
                    mask.set(t, c, views.source_mask.get(t, col));
                }
            }

            StgcnModel model = StgcnModel::init(cfg.model, graph.adjacency,
                                                mix_seed(cfg.seed) ^ (0x1000ull + graph.cluster));
            std::vector<int> anchors =
                sliding_window_anchors(cd.length(), cfg.model.history, cfg.model.horizon);
            std::function<double(const StgcnModel&)> val;
            if (out.has_targets)
                val = [&](const StgcnModel& m) {
                    return transfer_val_loss(m, graph, cp, views, split.val_anchors);
                };
            TrainOptions topt = cfg.train;
            topt.seed = mix_seed(cfg.seed) ^ (0x2000ull + graph.cluster);
            out.loss_history = train_stgcn(model, speeds, &mask, anchors, val, topt);

            out.checksum_before_transfer = model.params.checksum();
            if (out.has_targets)
                out.predictions = transfer_predict(model, graph, cp, views, split.test_anchors);
            out.predictions.cluster = graph.cluster;
            out.checksum_after_transfer = model.params.checksum();
            if (out.checksum_before_transfer != out.checksum_after_transfer)
                throw TrainingError("ensemble: transfer mutated shared parameters");
        }
    };

    const int nthreads = std::max(1, std::min(cfg.threads, k));
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::vector<ClusterMetrics> per_cluster;
    for (const ClusterOutcome& out : result.outcomes) {
        if (out.has_targets)
            per_cluster.push_back(metrics(out.predictions, cfg.horizons, cfg.eps_mape));
        else {
            ClusterMetrics cm;
            cm.cluster = out.cluster;
            cm.has_targets = false;
            per_cluster.push_back(cm);
        }
    }
    result.report = aggregate_metrics(per_cluster, cfg.horizons);
    return result;
}

// ---- baselines ----------------------------------------------------------------

/// Repeat-last-observed-value forecaster over the same test anchors and
/// masking rules as the main model.
inline ClusterPredictions persistence_baseline(const CityViews& views,
                                               const std::vector<int>& anchors, int Q) {
    ClusterPredictions out;
    out.cluster = 0;
    out.anchors = anchors;
    const int n = views.target.cols();
    const int b = static_cast<int>(anchors.size());
    for (int node = 0; node < n; ++node) {
        Matrix pred(b, Q), truth(b, Q);
        std::vector<uint8_t> masked(static_cast<size_t>(b) * Q, 0);
        for (int a = 0; a < b; ++a) {
            int t = anchors[a] - 1;
            while (t > 0 && views.target_mask.get(t, node)) --t;  // last observed value
            const double last = views.target_scale.denormalize(views.target(t, node));
            for (int q = 0; q < Q; ++q) {
                pred(a, q) = last;
                truth(a, q) = views.target_scale.denormalize(views.target(anchors[a] + q, node));
                masked[static_cast<size_t>(a) * Q + q] =
                    views.target_mask.get(anchors[a] + q, node) ? 1 : 0;
            }
        }
        out.targets.push_back({City::target, node});
        out.pred.push_back(std::move(pred));
        out.truth.push_back(std::move(truth));
        out.masked.push_back(std::move(masked));
    }
    return out;
}

/// Non-transfer comparison: one model over all target nodes, trained only
/// on the target data before the validation day with a DTW-kernel graph
/// built from that same region.
inline ClusterPredictions target_only_baseline(const CityViews& views, const EvalSplit& split,
                                               const EnsembleConfig& cfg) {
    const int n = views.target.cols();
    std::vector<NodeRef> refs;
    for (int j = 0; j < n; ++j) refs.push_back({City::target, j});

    Matrix train_region = slice_rows(views.target, 0, split.val_start);
    MissingMask train_mask(split.val_start, n);
    for (int t = 0; t < split.val_start; ++t)
        for (int j = 0; j < n; ++j) train_mask.set(t, j, views.target_mask.get(t, j));

    const int day_len = std::min(views.steps_per_day, train_region.rows());
    std::vector<std::optional<std::vector<double>>> series;
    for (int j = 0; j < n; ++j)
        series.push_back(select_day(train_region, train_mask, j, day_len, cfg.seed));
    SimilarityGraph graph = build_similarity_graph(0, refs, series, GrbOptions{});

    StgcnModel model = StgcnModel::init(cfg.model, graph.adjacency, mix_seed(cfg.seed) ^ 0x7467);
    std::vector<int> anchors;
    for (int t = cfg.model.history; t + cfg.model.horizon <= split.val_start; ++t)
        anchors.push_back(t);
    if (anchors.empty()) throw ContractError("target-only: training day shorter than H + Q");

    auto val = [&](const StgcnModel& m) {
        double sum = 0.0;
        long cnt = 0;
        for (int t : split.val_anchors) {
            Matrix hist = extract_window(views.target, t - cfg.model.history, cfg.model.history);
            Matrix pred = m.forward(hist);
            for (int q = 0; q < cfg.model.horizon; ++q)
                for (int j = 0; j < n; ++j) {
                    if (views.target_mask.get(t + q, j)) continue;
                    sum += std::fabs(pred(q, j) - views.target(t + q, j));
                    ++cnt;
                }
        }
        return cnt ? sum / cnt : 0.0;
    };
    TrainOptions topt = cfg.train;
    topt.seed = mix_seed(cfg.seed) ^ 0x74676f;  // "tgo"
    train_stgcn(model, views.target, &views.target_mask, anchors, val, topt);

    // predictions over the test anchors
    ClusterPredictions out;
    out.cluster = 0;
    out.anchors = split.test_anchors;
    const int b = static_cast<int>(split.test_anchors.size());
    const int Q = cfg.model.horizon;
    std::vector<Matrix> preds(n, Matrix(b, Q)), truths(n, Matrix(b, Q));
    std::vector<std::vector<uint8_t>> masked(n, std::vector<uint8_t>(static_cast<size_t>(b) * Q, 0));
    for (int a = 0; a < b; ++a) {
        const int t = split.test_anchors[a];
        Matrix hist = extract_window(views.target, t - cfg.model.history, cfg.model.history);
        Matrix pred = model.forward(hist);
        for (int j = 0; j < n; ++j)
            for (int q = 0; q < Q; ++q) {
                preds[j](a, q) = views.target_scale.denormalize(pred(q, j));
                truths[j](a, q) = views.target_scale.denormalize(views.target(t + q, j));
                masked[j][static_cast<size_t>(a) * Q + q] = views.target_mask.get(t + q, j) ? 1 : 0;
            }
    }
    for (int j = 0; j < n; ++j) {
        out.targets.push_back(refs[j]);
        out.pred.push_back(std::move(preds[j]));
        out.truth.push_back(std::move(truths[j]));
        out.masked.push_back(std::move(masked[j]));
    }
    return out;
}

// ---- rank correlation (used by the c sweep) -----------------------------------

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw ContractError("spearman: need two equal-length series of size >= 2");
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0 || vb == 0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace traffictl
