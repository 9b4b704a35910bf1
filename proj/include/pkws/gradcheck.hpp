#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "pkws/array.hpp"
#include "pkws/autograd.hpp"

namespace pkws {

/// Outcome of one finite-difference comparison.
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::map<std::string, double> per_param;

    bool pass(double tol) const { return max_rel_err < tol; }
};

/// Builds a scalar loss from named parameter leaves on the given tape.
using LossBuilder = std::function<Var(Tape&, const std::map<std::string, Array>&)>;

/// Compares reverse-mode gradients against central finite differences.
/// Relative error uses denominator max(1, |analytic|, |numeric|), which keeps
/// near-zero gradients from blowing up the ratio while matching plain relative
/// error where gradients are O(1) or larger.
inline GradCheckReport finite_diff_check(const LossBuilder& build,
                                         std::map<std::string, Array> params,
                                         double h = 1e-5) {
    if (h <= 0.0) throw ShapeError("finite_diff_check: h must be positive");

    auto eval = [&](const std::map<std::string, Array>& p) {
        Tape tape;
        return tape.value(build(tape, p)).item();
    };

    std::map<std::string, Array> analytic;
    {
        Tape tape;
        Var loss = build(tape, params);
        analytic = tape.backward(loss);
    }

    GradCheckReport report;
    for (auto& [name, p] : params) {
        const Array& g = analytic.at(name);
        double param_worst = 0.0;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double keep = p[i];
            p[i] = keep + h;
            const double up = eval(params);
            p[i] = keep - h;
            const double dn = eval(params);
            p[i] = keep;
            const double numeric = (up - dn) / (2.0 * h);
            const double denom = std::max({1.0, std::fabs(g[i]), std::fabs(numeric)});
            const double rel = std::fabs(g[i] - numeric) / denom;
            if (rel > param_worst) param_worst = rel;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_index = i;
            }
        }
        report.per_param[name] = param_worst;
    }
    return report;
}

}  // namespace pkws
