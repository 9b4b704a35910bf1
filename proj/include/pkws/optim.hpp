#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "pkws/array.hpp"
#include "pkws/errors.hpp"

namespace pkws {

/// base_lr halved every `every` epochs (step decay).
inline double lr_at_epoch(double base_lr, std::uint64_t epoch, double factor = 0.5,
                          std::uint64_t every = 20) {
    double lr = base_lr;
    for (std::uint64_t i = 0; i < epoch / every; ++i) lr *= factor;
    return lr;
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily on the first update of each parameter.
class AdamState {
public:
    AdamState() = default;
    AdamState(double base_lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : base_lr_(base_lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    std::uint64_t step() const { return step_; }
    double base_lr() const { return base_lr_; }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }

    /// One optimizer step over all parameters. `lr` is the effective rate for
    /// this step (after any schedule).
    void update(std::map<std::string, Array>& params,
                const std::map<std::string, Array>& grads, double lr) {
        if (lr <= 0.0) throw ShapeError("adam: lr must be positive");
        ++step_;
        const double t = static_cast<double>(step_);
        const double bc1 = 1.0 - std::pow(beta1_, t);
        const double bc2 = 1.0 - std::pow(beta2_, t);
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) {
                throw ShapeError("adam: no gradient for parameter '" + name + "'");
            }
            const Array& g = git->second;
            if (!g.same_shape(p)) {
                throw ShapeError("adam: gradient shape " + shape_str(g.shape()) +
                                 " vs parameter '" + name + "' " + shape_str(p.shape()));
            }
            Array& m = moment(m_, name, p);
            Array& v = moment(v_, name, p);
            for (std::size_t i = 0; i < p.numel(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    const std::map<std::string, Array>& first_moments() const { return m_; }
    const std::map<std::string, Array>& second_moments() const { return v_; }

    /// Restores a serialized state (checkpoint loading).
    void restore(std::uint64_t step, std::map<std::string, Array> m, std::map<std::string, Array> v) {
        step_ = step;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    Array& moment(std::map<std::string, Array>& store, const std::string& name, const Array& p) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Array(p.shape(), 0.0)).first;
        else if (!it->second.same_shape(p)) {
            throw ShapeError("adam: stale moment shape for '" + name + "'");
        }
        return it->second;
    }

    std::uint64_t step_ = 0;
    double base_lr_ = 0.001;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    std::map<std::string, Array> m_, v_;
};

}  // namespace pkws
