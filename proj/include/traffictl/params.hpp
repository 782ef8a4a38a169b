#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "traffictl/errors.hpp"
#include "traffictl/matrix.hpp"

namespace traffictl {

/// Named collection of trainable matrices. Names keep insertion order so
/// serialization and checksums are reproducible.
class ParamSet {
public:
    Matrix& add(const std::string& name, Matrix init) {
        if (values_.count(name)) throw ContractError("ParamSet: duplicate parameter " + name);
        order_.push_back(name);
        return values_.emplace(name, std::move(init)).first->second;
    }

    bool contains(const std::string& name) const { return values_.count(name) != 0; }

    Matrix& at(const std::string& name) {
        auto it = values_.find(name);
        if (it == values_.end()) throw ContractError("ParamSet: unknown parameter " + name);
        return it->second;
    }
    const Matrix& at(const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end()) throw ContractError("ParamSet: unknown parameter " + name);
        return it->second;
    }

    const std::vector<std::string>& names() const { return order_; }
    size_t count() const { return order_.size(); }

    /// FNV-1a over the raw float64 bytes of all parameters in name order.
    /// Two ParamSets with identical weights have identical checksums.
    uint64_t checksum() const {
        uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* p, size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& name : order_) {
            mix(name.data(), name.size());
            const Matrix& m = values_.at(name);
            mix(m.data(), m.size() * sizeof(double));
        }
        return h;
    }

    // --- weight container (text, documented in the README) ---------------
    //
    //   traffictl-weights 1
    //   <param count>
    //   <name> <rows> <cols>
    //   <rows*cols values, space separated, 17 significant digits>
    //   ...
    //
    // 17 digits round-trips IEEE float64 exactly.

    void save(std::ostream& os) const {
        os << "traffictl-weights 1\n" << order_.size() << "\n";
        char buf[40];
        for (const auto& name : order_) {
            const Matrix& m = values_.at(name);
            os << name << " " << m.rows() << " " << m.cols() << "\n";
            for (size_t i = 0; i < m.size(); ++i) {
                std::snprintf(buf, sizeof(buf), "%.17g", m.values()[i]);
                os << buf << (i + 1 == m.size() ? '\n' : ' ');
            }
            if (m.size() == 0) os << "\n";
        }
    }

    static ParamSet load(std::istream& is) {
        std::string magic;
        int version = 0;
        is >> magic >> version;
        if (magic != "traffictl-weights" || version != 1)
            throw ArtifactError("weights: unrecognized header");
        size_t n = 0;
        is >> n;
        ParamSet ps;
        for (size_t p = 0; p < n; ++p) {
            std::string name;
            int rows = 0, cols = 0;
            if (!(is >> name >> rows >> cols))
                throw ArtifactError("weights: truncated parameter table");
            Matrix m(rows, cols);
            for (size_t i = 0; i < m.size(); ++i)
                if (!(is >> m.values()[i]))
                    throw ArtifactError("weights: truncated values for " + name);
            ps.add(name, std::move(m));
        }
        return ps;
    }

    void save_file(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw ArtifactError("weights: cannot open " + path + " for writing");
        save(f);
    }

    static ParamSet load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ArtifactError("weights: cannot open " + path);
        return load(f);
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Matrix> values_;
};

using GradMap = std::unordered_map<std::string, Matrix>;

}  // namespace traffictl
