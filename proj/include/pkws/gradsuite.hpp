#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pkws/gradcheck.hpp"
#include "pkws/model.hpp"
#include "pkws/objectives.hpp"
#include "pkws/rng.hpp"

namespace pkws {

/// Finite-difference verification of the three trainable losses, run on a
/// test-scale encoder over random 3-way/2-shot episodes with open queries.
struct GradSuiteResult {
    double dummy_proto_max = 0.0;
    double aux_ce_max = 0.0;
    double combined_max = 0.0;
    int trials = 0;

    double worst() const { return std::max({dummy_proto_max, aux_ce_max, combined_max}); }
    bool pass(double tol) const { return worst() < tol; }
};

inline GradSuiteResult run_grad_suite(int trials, std::uint64_t seed, double h = 1e-5) {
    const EncoderConfig cfg = EncoderConfig::named("micro");
    const int n_closed = 3, k_shot = 2, m_query = 2, n_open = 1;
    const int n_aux_classes = 5, aux_batch = 4;
    const double lambda = 1.0;

    GradSuiteResult result;
    result.trials = trials;
    Rng gen(mix_seed(seed, 0x6C4D));

    for (int trial = 0; trial < trials; ++trial) {
        Model model = Model::init(cfg, n_aux_classes, gen.next_u64());

        auto random_maps = [&](int count) {
            std::vector<FeatureMap> maps;
            for (int i = 0; i < count; ++i) {
                FeatureMap fm;
                fm.bins = cfg.input_bins;
                fm.frames = cfg.input_frames;
                fm.values.resize(fm.bins * fm.frames);
                for (double& v : fm.values) v = gen.uniform(-1.5, 1.5);
                maps.push_back(std::move(fm));
            }
            return maps;
        };
        const Array support = stack_feature_maps(random_maps(n_closed * k_shot));
        const Array queries = stack_feature_maps(random_maps((n_closed + n_open) * m_query));
        const Array aux = stack_feature_maps(random_maps(aux_batch));

        std::vector<int> support_labels, query_labels, aux_labels;
        for (int n = 0; n < n_closed; ++n) {
            for (int i = 0; i < k_shot; ++i) support_labels.push_back(n);
        }
        for (int n = 0; n < n_closed; ++n) {
            for (int i = 0; i < m_query; ++i) query_labels.push_back(n);
        }
        for (int i = 0; i < n_open * m_query; ++i) query_labels.push_back(n_closed);
        for (int i = 0; i < aux_batch; ++i) {
            aux_labels.push_back(static_cast<int>(gen.uniform_int(n_aux_classes)));
        }

        auto leaves_of = [](Tape& t, const std::map<std::string, Array>& prm) {
            std::map<std::string, Var> p;
            for (const auto& [name, value] : prm) p.emplace(name, t.leaf(name, value));
            return p;
        };

        auto fsl_loss = [&](Tape& t, const std::map<std::string, Var>& p) {
            Var emb_s = encode(t, model, p, t.constant(support));
            Var emb_q = encode(t, model, p, t.constant(queries));
            Var protos = t.class_means(emb_s, support_labels, n_closed, k_shot);
            Var all = t.concat_rows(protos, p.at("dummy"));
            Var logits = t.scale(t.squared_distance(emb_q, all), -1.0);
            return t.cross_entropy_rows(logits, query_labels);
        };
        auto aux_loss = [&](Tape& t, const std::map<std::string, Var>& p) {
            Var emb = encode(t, model, p, t.constant(aux));
            return t.cross_entropy_rows(classify_aux(t, p, emb), aux_labels);
        };

        auto check = [&](auto&& builder) {
            return finite_diff_check(
                       [&](Tape& t, const std::map<std::string, Array>& prm) {
                           auto p = leaves_of(t, prm);
                           return builder(t, p);
                       },
                       model.params, h)
                .max_rel_err;
        };

        result.dummy_proto_max = std::max(result.dummy_proto_max, check(fsl_loss));
        result.aux_ce_max = std::max(result.aux_ce_max, check(aux_loss));
        result.combined_max = std::max(
            result.combined_max, check([&](Tape& t, const std::map<std::string, Var>& p) {
                return t.add(fsl_loss(t, p), t.scale(aux_loss(t, p), lambda));
            }));
    }
    return result;
}

}  // namespace pkws
