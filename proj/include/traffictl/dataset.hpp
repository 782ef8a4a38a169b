#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "traffictl/errors.hpp"
#include "traffictl/matrix.hpp"
#include "traffictl/rng.hpp"

namespace traffictl {

enum class City { source, target };

inline const char* city_name(City c) { return c == City::source ? "source" : "target"; }

/// Per-cell missing-data flags, row-major over the same L x N grid as the
/// speed matrix. Missing values are stored as 0 in the speeds and excluded
/// from normalization statistics and MAPE.
struct MissingMask {
    int rows = 0, cols = 0;
    std::vector<uint8_t> bits;

    MissingMask() = default;
    MissingMask(int r, int c) : rows(r), cols(c), bits(static_cast<size_t>(r) * c, 0) {}
    bool get(int i, int j) const { return bits[static_cast<size_t>(i) * cols + j] != 0; }
    void set(int i, int j, bool v) { bits[static_cast<size_t>(i) * cols + j] = v ? 1 : 0; }
    bool any() const {
        for (uint8_t b : bits)
            if (b) return true;
        return false;
    }
    size_t count() const {
        size_t n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }
};

/// One city's speed record: L time steps x N sensor nodes, km/h.
struct CityDataset {
    std::string name;
    Matrix speeds;  // L x N
    MissingMask mask;
    int interval_minutes = 5;
    std::optional<Matrix> prior_adjacency;  // N x N binary, symmetric

    int length() const { return speeds.rows(); }
    int nodes() const { return speeds.cols(); }
    int steps_per_day() const { return 1440 / interval_minutes; }
    int days() const { return length() / steps_per_day(); }
};

/// Per-city min/max used for normalization and for mapping predictions
/// back to km/h.
struct MinMax {
    double min = 0.0;
    double max = 1.0;
    double normalize(double v) const { return (v - min) / (max - min); }
    double denormalize(double v) const { return v * (max - min) + min; }
};

/// Min/max over non-missing entries. Throws DataError when the dataset is
/// constant (max == min) since the scale would be degenerate.
inline MinMax compute_minmax(const CityDataset& ds) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < ds.length(); ++t)
        for (int n = 0; n < ds.nodes(); ++n) {
            if (ds.mask.rows > 0 && ds.mask.get(t, n)) continue;
            lo = std::min(lo, ds.speeds(t, n));
            hi = std::max(hi, ds.speeds(t, n));
        }
    if (!(hi > lo))
        throw DataError("normalize: degenerate dataset '" + ds.name + "' (max == min)");
    return MinMax{lo, hi};
}

inline CityDataset normalize_minmax(const CityDataset& ds, MinMax& out_scale) {
    out_scale = compute_minmax(ds);
    CityDataset norm = ds;
    for (int t = 0; t < ds.length(); ++t)
        for (int n = 0; n < ds.nodes(); ++n)
            norm.speeds(t, n) = (ds.mask.rows > 0 && ds.mask.get(t, n))
                                    ? 0.0
                                    : out_scale.normalize(ds.speeds(t, n));
    return norm;
}

struct NodeRef {
    City city;
    int index;  // node index within the original city dataset
    bool operator==(const NodeRef& o) const { return city == o.city && index == o.index; }
};

/// Source and replicated-target data concatenated along the node axis,
/// normalized per city. Column order: all source nodes, then all target
/// nodes.
struct CombinedDataset {
    Matrix speeds;  // L_S x (N_S + N_T)
    MissingMask mask;
    std::vector<NodeRef> provenance;
    int replication_count = 1;  // n = ceil(L_S / L_T)
    int source_nodes = 0;
    int target_nodes = 0;
    int target_length = 0;  // L_T before replication
    int steps_per_day = 0;
    MinMax source_scale, target_scale;

    int length() const { return speeds.rows(); }
    int nodes() const { return speeds.cols(); }
};

/// Length alignment and concatenation: target columns are tiled
/// n = ceil(L_S / L_T) times along time and truncated to L_S, then appended
/// after the source columns. Both cities are min-max normalized here.
inline CombinedDataset align_and_combine(const CityDataset& source, const CityDataset& target) {
    if (source.interval_minutes != target.interval_minutes)
        throw ContractError("align_and_combine: interval mismatch (" +
                            std::to_string(source.interval_minutes) + " vs " +
                            std::to_string(target.interval_minutes) + " minutes)");
    const int ls = source.length(), lt = target.length();
    if (lt < 1 || ls < lt)
        throw ContractError("align_and_combine: need L_source >= L_target >= 1, got " +
                            std::to_string(ls) + " and " + std::to_string(lt));

    CombinedDataset cd;
    cd.source_nodes = source.nodes();
    cd.target_nodes = target.nodes();
    cd.target_length = lt;
    cd.steps_per_day = source.steps_per_day();
    cd.replication_count = (ls + lt - 1) / lt;

    CityDataset src_n = normalize_minmax(source, cd.source_scale);
    CityDataset tgt_n = normalize_minmax(target, cd.target_scale);

    const int cols = cd.source_nodes + cd.target_nodes;
    cd.speeds = Matrix(ls, cols);
    cd.mask = MissingMask(ls, cols);
    cd.provenance.reserve(cols);
    for (int j = 0; j < cd.source_nodes; ++j) cd.provenance.push_back({City::source, j});
    for (int j = 0; j < cd.target_nodes; ++j) cd.provenance.push_back({City::target, j});

    for (int t = 0; t < ls; ++t) {
        for (int j = 0; j < cd.source_nodes; ++j) {
            cd.speeds(t, j) = src_n.speeds(t, j);
            if (source.mask.rows > 0) cd.mask.set(t, j, source.mask.get(t, j));
        }
        const int tt = t % lt;  // replicated copy index
        for (int j = 0; j < cd.target_nodes; ++j) {
            cd.speeds(t, cd.source_nodes + j) = tgt_n.speeds(tt, j);
            if (target.mask.rows > 0) cd.mask.set(t, cd.source_nodes + j, target.mask.get(tt, j));
        }
    }
    return cd;
}

/// Two H-step views of the combined data offset by tau.
struct WindowPair {
    Matrix first;   // H x nodes, rows [anchor-H, anchor)
    Matrix second;  // H x nodes, rows [anchor-H+tau, anchor+tau)
    int anchor;
    int offset;
};

/// Rows [t0, t0+len) of a speed matrix.
inline Matrix extract_window(const Matrix& speeds, int t0, int len) {
    return slice_rows(speeds, t0, t0 + len);
}

/// Anchors drawn uniformly without replacement from [H, L - tau]; capped at
/// the number of valid anchors when m exceeds it.
inline std::vector<int> sample_pair_anchors(int length, int H, int tau, int m, uint64_t seed) {
    if (H < 2) throw ContractError("sample_window_pairs: H must be >= 2");
    if (tau <= 0 || tau >= H)
        throw ContractError("sample_window_pairs: require 0 < tau < H, got tau=" +
                            std::to_string(tau) + " H=" + std::to_string(H));
    if (length < H + tau)
        throw ContractError("sample_window_pairs: series length " + std::to_string(length) +
                            " < H + tau = " + std::to_string(H + tau));
    const int lo = H, hi = length - tau;  // inclusive
    const int range = hi - lo + 1;
    auto rng = make_rng(seed, 0x70616972);  // "pair"
    std::vector<int> picks = sample_without_replacement(range, std::min(m, range), rng);
    for (int& p : picks) p += lo;
    return picks;
}

inline std::vector<WindowPair> sample_window_pairs(const CombinedDataset& cd, int H, int tau,
                                                   int m, uint64_t seed) {
    std::vector<WindowPair> out;
    for (int t : sample_pair_anchors(cd.length(), H, tau, m, seed)) {
        WindowPair wp;
        wp.first = extract_window(cd.speeds, t - H, H);
        wp.second = extract_window(cd.speeds, t - H + tau, H);
        wp.anchor = t;
        wp.offset = tau;
        out.push_back(std::move(wp));
    }
    return out;
}

/// Every anchor t in [H, L-Q]; history covers [t-H, t), future [t, t+Q).
inline std::vector<int> sliding_window_anchors(int length, int H, int Q) {
    if (length < H + Q)
        throw ContractError("sliding_windows: series length " + std::to_string(length) +
                            " < H + Q = " + std::to_string(H + Q));
    std::vector<int> anchors;
    anchors.reserve(length - H - Q + 1);
    for (int t = H; t <= length - Q; ++t) anchors.push_back(t);
    return anchors;
}

struct WindowSample {
    Matrix history;  // H x N
    Matrix future;   // Q x N
    int anchor;
};

inline std::vector<WindowSample> sliding_windows(const Matrix& speeds, int H, int Q) {
    std::vector<WindowSample> out;
    for (int t : sliding_window_anchors(speeds.rows(), H, Q)) {
        out.push_back({extract_window(speeds, t - H, H), extract_window(speeds, t, Q), t});
    }
    return out;
}

// ---- CSV ------------------------------------------------------------------

namespace detail {

inline bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size();
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cells.push_back(trim(cur));
    return cells;
}

}  // namespace detail

/// Parses a numeric CSV. Rows are time steps, columns are nodes. A single
/// leading header row is skipped when any of its cells is non-numeric and
/// non-empty. Empty cells become 0 with the missing mask set; any other
/// non-numeric cell is a parse error naming its row and column.
inline void load_feature_csv(const std::string& path, Matrix& speeds, MissingMask& mask) {
    std::ifstream f(path);
    if (!f) throw ParseError("csv: cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (detail::trim(line).empty()) continue;
        rows.push_back(detail::split_csv_line(line));
    }
    if (rows.empty()) throw ParseError("csv: " + path + " is empty");

    size_t start = 0;
    for (const auto& cell : rows[0]) {
        double tmp;
        if (!cell.empty() && !detail::parse_double(cell, tmp)) {
            start = 1;  // header row
            break;
        }
    }
    if (rows.size() <= start) throw ParseError("csv: " + path + " has no data rows");

    const size_t ncols = rows[start].size();
    const size_t nrows = rows.size() - start;
    speeds = Matrix(static_cast<int>(nrows), static_cast<int>(ncols));
    mask = MissingMask(static_cast<int>(nrows), static_cast<int>(ncols));
    for (size_t r = start; r < rows.size(); ++r) {
        if (rows[r].size() != ncols)
            throw ParseError("csv: " + path + " row " + std::to_string(r + 1) + " has " +
                             std::to_string(rows[r].size()) + " cells, expected " +
                             std::to_string(ncols));
        for (size_t c = 0; c < ncols; ++c) {
            const std::string& cell = rows[r][c];
            const int i = static_cast<int>(r - start), j = static_cast<int>(c);
            if (cell.empty()) {
                speeds(i, j) = 0.0;
                mask.set(i, j, true);
                continue;
            }
            double v;
            if (!detail::parse_double(cell, v))
                throw ParseError("csv: " + path + " row " + std::to_string(r + 1) + " col " +
                                 std::to_string(c + 1) + ": non-numeric cell '" + cell + "'");
            speeds(i, j) = v;
        }
    }
}

inline Matrix load_adjacency_csv(const std::string& path, int expected_nodes) {
    Matrix a;
    MissingMask m;
    load_feature_csv(path, a, m);
    if (m.any()) throw ParseError("adjacency: " + path + " has empty cells");
    if (a.rows() != a.cols())
        throw ParseError("adjacency: " + path + " is " + a.shape_str() + ", expected square");
    if (expected_nodes > 0 && a.rows() != expected_nodes)
        throw ParseError("adjacency: " + path + " is " + a.shape_str() + " but feature matrix has " +
                         std::to_string(expected_nodes) + " nodes");
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j)
            if (a(i, j) != 0.0 && a(i, j) != 1.0)
                throw ParseError("adjacency: " + path + " row " + std::to_string(i + 1) + " col " +
                                 std::to_string(j + 1) + ": expected 0 or 1");
    return a;
}

inline CityDataset load_csv(const std::string& features_path,
                            const std::optional<std::string>& adjacency_path,
                            int interval_minutes, const std::string& name = "") {
    CityDataset ds;
    ds.name = name.empty() ? features_path : name;
    ds.interval_minutes = interval_minutes;
    load_feature_csv(features_path, ds.speeds, ds.mask);
    if (adjacency_path) ds.prior_adjacency = load_adjacency_csv(*adjacency_path, ds.nodes());
    return ds;
}

/// Writes speeds as CSV with missing cells left empty, 17 significant
/// digits so a reload reproduces the matrix exactly.
inline void write_feature_csv(const std::string& path, const Matrix& speeds,
                              const MissingMask* mask = nullptr) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("csv: cannot open " + path + " for writing");
    char buf[40];
    for (int i = 0; i < speeds.rows(); ++i) {
        for (int j = 0; j < speeds.cols(); ++j) {
            if (j) f << ',';
            if (mask && mask->get(i, j)) continue;
            std::snprintf(buf, sizeof(buf), "%.17g", speeds(i, j));
            f << buf;
        }
        f << '\n';
    }
}

}  // namespace traffictl
