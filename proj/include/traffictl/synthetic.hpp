#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "traffictl/dataset.hpp"
#include "traffictl/errors.hpp"
#include "traffictl/rng.hpp"

namespace traffictl {

/// Parameters of the labeled multi-city benchmark generator. Every node
/// carries a ground-truth archetype label; labels are returned beside the
/// datasets and are only ever read by tests.
struct SyntheticSpec {
    int archetypes = 4;
    int source_nodes = 40;
    int target_nodes = 12;
    int source_days = 30;
    int target_days = 3;
    double noise = 0.05;          // Gaussian std as a fraction of daily swing
    double missing_rate = 0.01;   // fraction of cells zeroed in runs
    double amp_jitter = 0.05;     // per-node amplitude spread
    double phase_jitter = 0.01;   // per-node phase spread, fraction of a day
    int interval_minutes = 30;
    uint64_t seed = 0;

    void validate() const {
        if (archetypes < 2) throw ContractError("synthetic: need at least 2 archetypes");
        if (source_nodes < 1 || target_nodes < 1)
            throw ContractError("synthetic: need at least one node per city");
        if (source_days < 1 || target_days < 1)
            throw ContractError("synthetic: need at least one day per city");
        if (source_days < target_days)
            throw ContractError("synthetic: source must have at least as many days as target");
        if (noise < 0 || missing_rate < 0 || missing_rate >= 1)
            throw ContractError("synthetic: invalid noise/missing rate");
        if (1440 % interval_minutes != 0)
            throw ContractError("synthetic: interval must divide 1440 minutes");
    }
};

struct SyntheticData {
    CityDataset source;
    CityDataset target;
    std::vector<int> source_labels;  // archetype per node; test-only
    std::vector<int> target_labels;
};

namespace detail {

/// Smooth daily profile of one archetype: base speed plus two or three
/// day-harmonics whose peaks are spread so archetypes have distinct
/// rush-hour shapes. x is the fraction of the day in [0, 1).
struct Archetype {
    double a1, p1;  // first harmonic amplitude / peak position
    double a2, p2;  // second harmonic
    double a3, p3;  // third harmonic, 0 for even archetype ids

    static Archetype make(int id, int total) {
        Archetype a;
        a.a1 = 14.0 + 4.0 * ((id % 3) - 1);
        a.p1 = static_cast<double>(id) / total;
        a.a2 = 5.0 + 2.0 * (id % 2);
        a.p2 = (id + 0.37) / total;
        a.a3 = (id % 2) ? 3.0 : 0.0;
        a.p3 = (id + 0.61) / total;
        return a;
    }

    double value(double x) const {
        constexpr double tau = 6.283185307179586;
        return kBaseSpeed + a1 * std::cos(tau * (x - p1)) + a2 * std::cos(2 * tau * (x - p2)) +
               a3 * std::cos(3 * tau * (x - p3));
    }

    double swing() const { return a1 + a2 + a3; }

    static constexpr double kBaseSpeed = 50.0;
};

inline CityDataset generate_city(const SyntheticSpec& spec, City city, int nodes, int days,
                                 std::vector<int>& labels) {
    const int d = 1440 / spec.interval_minutes;
    const int length = days * d;
    CityDataset ds;
    ds.name = city_name(city);
    ds.interval_minutes = spec.interval_minutes;
    ds.speeds = Matrix(length, nodes);
    ds.mask = MissingMask(length, nodes);
    labels.resize(nodes);

    const uint64_t city_tag = city == City::source ? 0x73726300 : 0x74677400;
    for (int n = 0; n < nodes; ++n) {
        const int arch_id = n % spec.archetypes;
        labels[n] = arch_id;
        const Archetype arch = Archetype::make(arch_id, spec.archetypes);

        auto rng = make_rng(spec.seed, city_tag, static_cast<uint64_t>(n));
        std::normal_distribution<double> gauss(0.0, 1.0);
        const double amp = std::max(0.2, 1.0 + spec.amp_jitter * gauss(rng));
        const double shift = spec.phase_jitter * gauss(rng);
        const double noise_std = spec.noise * arch.swing();

        for (int t = 0; t < length; ++t) {
            const double x = static_cast<double>(t % d) / d + shift;
            double v = Archetype::kBaseSpeed + amp * (arch.value(x) - Archetype::kBaseSpeed);
            if (noise_std > 0) v += noise_std * gauss(rng);
            ds.speeds(t, n) = std::max(0.0, v);
        }
    }

    if (spec.missing_rate > 0) {
        auto rng = make_rng(spec.seed, city_tag ^ 0x6d697373, 0);  // "miss"
        std::uniform_int_distribution<int> node_pick(0, nodes - 1);
        std::uniform_int_distribution<int> start_pick(0, length - 1);
        std::uniform_int_distribution<int> run_pick(3, 20);
        const size_t want = static_cast<size_t>(spec.missing_rate * length * nodes);
        while (ds.mask.count() < want) {
            const int n = node_pick(rng);
            const int t0 = start_pick(rng);
            const int run = run_pick(rng);
            for (int t = t0; t < std::min(length, t0 + run); ++t) {
                ds.mask.set(t, n, true);
                ds.speeds(t, n) = 0.0;
            }
        }
    }
    return ds;
}

}  // namespace detail

/// Builds the two-city benchmark. Both cities share the archetype set;
/// node counts and day counts differ. Fully determined by spec.seed.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticData data;
    data.source = detail::generate_city(spec, City::source, spec.source_nodes, spec.source_days,
                                        data.source_labels);
    data.target = detail::generate_city(spec, City::target, spec.target_nodes, spec.target_days,
                                        data.target_labels);
    return data;
}

/// Labels sidecar: node_id, city, archetype. Consumed by tests only.
inline void write_labels_csv(const std::string& path, const SyntheticData& data) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("labels: cannot open " + path + " for writing");
    f << "node_id,city,archetype\n";
    for (size_t n = 0; n < data.source_labels.size(); ++n)
        f << n << ",source," << data.source_labels[n] << "\n";
    for (size_t n = 0; n < data.target_labels.size(); ++n)
        f << n << ",target," << data.target_labels[n] << "\n";
}

}  // namespace traffictl
