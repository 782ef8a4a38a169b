#pragma once

#include <cmath>
#include <string>
#include <unordered_map>

#include "traffictl/errors.hpp"
#include "traffictl/matrix.hpp"
#include "traffictl/params.hpp"

namespace traffictl {

class SgdOptimizer {
public:
    explicit SgdOptimizer(double lr) : lr_(lr) {}

    void step(ParamSet& params, const GradMap& grads) {
        for (const auto& name : params.names()) {
            auto it = grads.find(name);
            if (it == grads.end()) continue;
            Matrix& p = params.at(name);
            const Matrix& g = it->second;
            if (!p.same_shape(g))
                throw ContractError("sgd: grad shape " + g.shape_str() + " vs param " +
                                    p.shape_str() + " for " + name);
            for (size_t i = 0; i < p.size(); ++i) p.values()[i] -= lr_ * g.values()[i];
        }
    }

    double lr() const { return lr_; }

private:
    double lr_;
};

/// Adam with bias correction. First/second moments and the step counter
/// live in the optimizer object, keyed by parameter name.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamSet& params, const GradMap& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (const auto& name : params.names()) {
            auto it = grads.find(name);
            if (it == grads.end()) continue;
            Matrix& p = params.at(name);
            const Matrix& g = it->second;
            if (!p.same_shape(g))
                throw ContractError("adam: grad shape " + g.shape_str() + " vs param " +
                                    p.shape_str() + " for " + name);
            Matrix& m = moment(m1_, name, p);
            Matrix& v = moment(m2_, name, p);
            for (size_t i = 0; i < p.size(); ++i) {
                const double gi = g.values()[i];
                m.values()[i] = beta1_ * m.values()[i] + (1.0 - beta1_) * gi;
                v.values()[i] = beta2_ * v.values()[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = m.values()[i] / bc1;
                const double vhat = v.values()[i] / bc2;
                p.values()[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void reset() {
        t_ = 0;
        m1_.clear();
        m2_.clear();
    }

    long step_count() const { return t_; }

private:
    Matrix& moment(std::unordered_map<std::string, Matrix>& store, const std::string& name,
                   const Matrix& like) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Matrix(like.rows(), like.cols())).first;
        return it->second;
    }

    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::unordered_map<std::string, Matrix> m1_, m2_;
};

}  // namespace traffictl
