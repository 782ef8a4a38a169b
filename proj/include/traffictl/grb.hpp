#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "traffictl/dataset.hpp"
#include "traffictl/errors.hpp"
#include "traffictl/matrix.hpp"
#include "traffictl/rng.hpp"

namespace traffictl {

/// Dynamic-time-warping distance between two equal-length series:
/// cost M_jk = |a_j - b_k|, shortest monotone path from M_11 to M_DD.
/// O(D^2) time, O(D) memory. An optional Sakoe-Chiba band (half-width in
/// steps) restricts the path for speed; band < 0 means exact.
inline double dtw_distance(const std::vector<double>& a, const std::vector<double>& b,
                           int band = -1) {
    if (a.size() != b.size())
        throw ContractError("dtw: length mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
    if (a.empty()) throw ContractError("dtw: empty series");
    const int d = static_cast<int>(a.size());
    const double inf = std::numeric_limits<double>::infinity();

    std::vector<double> prev(d, inf), cur(d, inf);
    for (int j = 0; j < d; ++j) {
        std::fill(cur.begin(), cur.end(), inf);
        const int klo = band >= 0 ? std::max(0, j - band) : 0;
        const int khi = band >= 0 ? std::min(d - 1, j + band) : d - 1;
        for (int k = klo; k <= khi; ++k) {
            const double cost = std::fabs(a[j] - b[k]);
            if (j == 0 && k == 0) {
                cur[k] = cost;
                continue;
            }
            double best = inf;
            if (j > 0) best = std::min(best, prev[k]);
            if (k > 0) best = std::min(best, cur[k - 1]);
            if (j > 0 && k > 0) best = std::min(best, prev[k - 1]);
            cur[k] = best + cost;
        }
        std::swap(prev, cur);
    }
    return prev[d - 1];
}

/// Full D x D cost matrix M_jk = |a_j - b_k|; exposed for inspection and
/// tests, the distance itself uses the rolling-row recursion above.
inline Matrix dtw_cost_matrix(const std::vector<double>& a, const std::vector<double>& b) {
    Matrix m(static_cast<int>(a.size()), static_cast<int>(b.size()));
    for (int j = 0; j < m.rows(); ++j)
        for (int k = 0; k < m.cols(); ++k) m(j, k) = std::fabs(a[j] - b[k]);
    return m;
}

/// One day of one node's series, selected uniformly at random among days
/// whose missing fraction is at most 50%, with masked points linearly
/// interpolated inside the day. Returns nullopt when no day qualifies.
inline std::optional<std::vector<double>> select_day(const Matrix& speeds,
                                                     const MissingMask& mask, int node,
                                                     int day_len, uint64_t seed) {
    if (day_len < 1 || speeds.rows() < day_len)
        throw ContractError("select_day: series shorter than one day");
    const int days = speeds.rows() / day_len;

    std::vector<int> good;
    for (int d = 0; d < days; ++d) {
        int missing = 0;
        for (int t = 0; t < day_len; ++t)
            if (mask.rows > 0 && mask.get(d * day_len + t, node)) ++missing;
        if (missing * 2 <= day_len) good.push_back(d);
    }
    if (good.empty()) return std::nullopt;

    auto rng = make_rng(seed, 0x64617973, static_cast<uint64_t>(node));  // "days"
    std::uniform_int_distribution<int> pick(0, static_cast<int>(good.size()) - 1);
    const int day = good[pick(rng)];

    std::vector<double> series(day_len);
    std::vector<bool> missing(day_len, false);
    for (int t = 0; t < day_len; ++t) {
        series[t] = speeds(day * day_len + t, node);
        missing[t] = mask.rows > 0 && mask.get(day * day_len + t, node);
    }
    // Linear fill between the nearest observed neighbours; runs touching a
    // day boundary copy the nearest observed value.
    int t = 0;
    while (t < day_len) {
        if (!missing[t]) {
            ++t;
            continue;
        }
        int run_end = t;
        while (run_end < day_len && missing[run_end]) ++run_end;
        const int left = t - 1, right = run_end;
        for (int i = t; i < run_end; ++i) {
            if (left < 0 && right >= day_len) {
                series[i] = 0.0;
            } else if (left < 0) {
                series[i] = series[right];
            } else if (right >= day_len) {
                series[i] = series[left];
            } else {
                const double w = static_cast<double>(i - left) / (right - left);
                series[i] = series[left] * (1.0 - w) + series[right] * w;
            }
        }
        t = run_end;
    }
    return series;
}

/// Per-cluster reconstructed graph: pairwise DTW distances W over the
/// cluster's nodes and the kernelized adjacency used for convolution.
struct SimilarityGraph {
    int cluster = 0;
    std::vector<NodeRef> nodes;
    Matrix w;          // DTW distances, symmetric, zero diagonal
    Matrix adjacency;  // exp(-W^2 / sigma^2), unit diagonal, entries in [0,1]
    double sigma = 0.0;
    std::vector<uint8_t> isolated;  // nodes with no usable day; self-loop only
};

struct GrbOptions {
    int day_len = 0;       // 0 = steps_per_day of the combined data
    int band = -1;         // Sakoe-Chiba half-width, -1 = exact
    int top_k = 0;         // 0 = dense; otherwise keep k nearest neighbours
    bool raw_speeds = false;  // use km/h instead of normalized values
};

/// Day series for every node of a cluster, taken from the original city
/// matrices so replicated target copies are not re-sampled.
inline std::vector<std::optional<std::vector<double>>> cluster_day_series(
    const std::vector<NodeRef>& nodes, const CityDataset& source, const CityDataset& target,
    int day_len, uint64_t seed) {
    std::vector<std::optional<std::vector<double>>> out;
    out.reserve(nodes.size());
    for (const NodeRef& ref : nodes) {
        const CityDataset& ds = ref.city == City::source ? source : target;
        const uint64_t node_tag =
            (ref.city == City::source ? 0u : 1u << 20) | static_cast<uint64_t>(ref.index);
        out.push_back(select_day(ds.speeds, ds.mask, ref.index, day_len, mix_seed(seed) ^ node_tag));
    }
    return out;
}

/// Builds W and its Gaussian-kernel adjacency for one cluster.
/// sigma is the standard deviation of the off-diagonal distances; when that
/// degenerates to 0 the mean distance is used, and if that is also 0 the
/// nodes are identical and the adjacency is all ones.
inline SimilarityGraph build_similarity_graph(
    int cluster_id, const std::vector<NodeRef>& nodes,
    const std::vector<std::optional<std::vector<double>>>& day_series, const GrbOptions& opt) {
    if (nodes.empty()) throw ContractError("grb: empty cluster");
    const int n = static_cast<int>(nodes.size());

    SimilarityGraph g;
    g.cluster = cluster_id;
    g.nodes = nodes;
    g.w = Matrix(n, n);
    g.isolated.assign(n, 0);
    for (int i = 0; i < n; ++i)
        if (!day_series[i]) g.isolated[i] = 1;

    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (g.isolated[i] || g.isolated[j]) continue;
            const double d = dtw_distance(*day_series[i], *day_series[j], opt.band);
            g.w(i, j) = d;
            g.w(j, i) = d;
        }
    }

    // sigma over off-diagonal entries between connected nodes
    double sum = 0.0, sq = 0.0;
    int cnt = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j || g.isolated[i] || g.isolated[j]) continue;
            sum += g.w(i, j);
            sq += g.w(i, j) * g.w(i, j);
            ++cnt;
        }
    if (cnt > 0) {
        const double mean = sum / cnt;
        const double var = std::max(0.0, sq / cnt - mean * mean);
        g.sigma = std::sqrt(var);
        if (g.sigma == 0.0) g.sigma = mean;  // constant distances
    }

    g.adjacency = Matrix(n, n);
    for (int i = 0; i < n; ++i) {
        g.adjacency(i, i) = 1.0;
        for (int j = i + 1; j < n; ++j) {
            if (g.isolated[i] || g.isolated[j]) continue;
            const double a =
                g.sigma > 0.0 ? std::exp(-(g.w(i, j) * g.w(i, j)) / (g.sigma * g.sigma)) : 1.0;
            g.adjacency(i, j) = a;
            g.adjacency(j, i) = a;
        }
    }

    if (opt.top_k > 0 && opt.top_k < n - 1) {
        // keep the k strongest off-diagonal entries per row, symmetrically
        Matrix keep(n, n);
        for (int i = 0; i < n; ++i) {
            std::vector<int> idx;
            for (int j = 0; j < n; ++j)
                if (j != i) idx.push_back(j);
            std::partial_sort(idx.begin(), idx.begin() + opt.top_k, idx.end(),
                              [&](int x, int y) { return g.adjacency(i, x) > g.adjacency(i, y); });
            for (int r = 0; r < opt.top_k; ++r) keep(i, idx[r]) = 1.0;
        }
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j && keep(i, j) == 0.0 && keep(j, i) == 0.0) g.adjacency(i, j) = 0.0;
    }
    return g;
}

}  // namespace traffictl
