#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pkws/array.hpp"
#include "pkws/autograd.hpp"
#include "pkws/errors.hpp"

namespace pkws {

enum class DistanceMetric { SquaredEuclidean };

/// N class centroids plus the learnable open-set (dummy) centroid.
struct PrototypeSet {
    Array closed;  // [N, D]
    Array dummy;   // [D]
    DistanceMetric metric = DistanceMetric::SquaredEuclidean;

    std::size_t n_closed() const { return closed.dim(0); }
    std::size_t embed_dim() const { return closed.dim(1); }
};

/// Class centroids from support embeddings: c_n = mean of the K member rows.
/// Members are summed in value-sorted order, so permuting supports within a
/// class leaves the result bit-identical.
inline PrototypeSet compute_prototypes(const Array& support_emb, const std::vector<int>& labels,
                                       int k, const Array& dummy) {
    if (support_emb.ndim() != 2) {
        throw ShapeError("compute_prototypes: embeddings must be 2-D, got " +
                         shape_str(support_emb.shape()));
    }
    int n_classes = 0;
    for (int lb : labels) n_classes = std::max(n_classes, lb + 1);
    Tape tape;
    Var emb = tape.constant(support_emb);
    PrototypeSet out;
    out.closed = tape.value(tape.class_means(emb, labels, n_classes, k));
    out.dummy = dummy;
    if (dummy.numel() != out.embed_dim()) {
        throw ShapeError("compute_prototypes: dummy dim " + std::to_string(dummy.numel()) +
                         " vs embeddings " + std::to_string(out.embed_dim()));
    }
    return out;
}

/// Logit rows over the N+1 prototypes: -d(e_q, c_n), squared Euclidean.
inline Array proto_logits(const PrototypeSet& protos, const Array& query_emb) {
    if (query_emb.ndim() != 2 || query_emb.dim(1) != protos.embed_dim()) {
        throw ShapeError("proto_logits: queries " + shape_str(query_emb.shape()) +
                         " vs prototypes of dim " + std::to_string(protos.embed_dim()));
    }
    const std::size_t q = query_emb.dim(0);
    const std::size_t n = protos.n_closed();
    const std::size_t d = protos.embed_dim();
    Array logits(Shape{q, n + 1});
    for (std::size_t i = 0; i < q; ++i) {
        const double* e = query_emb.data() + i * d;
        for (std::size_t c = 0; c <= n; ++c) {
            const double* proto =
                c < n ? protos.closed.data() + c * d : protos.dummy.data();
            double acc = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                const double diff = e[t] - proto[t];
                acc += diff * diff;
            }
            logits[i * (n + 1) + c] = -acc;
        }
    }
    return logits;
}

/// Classification probabilities over the N+1 prototypes: softmax of the
/// negative squared distances, max-subtraction stabilized. Rows sum to 1.
inline Array query_probabilities(const PrototypeSet& protos, const Array& query_emb) {
    Array logits = proto_logits(protos, query_emb);
    Array probs(logits.shape());
    kernels::softmax_rows(logits.data(), probs.data(), logits.dim(0), logits.dim(1));
    return probs;
}

/// Dummy-prototypical loss: mean over queries of -log p(y = label) in the
/// N+1 classification task. Computed from the logits via log-sum-exp, so the
/// value stays finite even when some probability underflows.
inline double dummy_proto_loss(const Array& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2 || labels.size() != logits.dim(0)) {
        throw ShapeError("dummy_proto_loss: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t cols = logits.dim(1);
    double acc = 0.0;
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
        const int lb = labels[r];
        if (lb < 0 || static_cast<std::size_t>(lb) >= cols) {
            throw ShapeError("dummy_proto_loss: label " + std::to_string(lb) + " outside [0, " +
                             std::to_string(cols) + ")");
        }
        acc += kernels::logsumexp_row(logits.data() + r * cols, cols) - logits.at(r, lb);
    }
    return acc / static_cast<double>(logits.dim(0));
}

inline double dummy_proto_loss(const PrototypeSet& protos, const Array& query_emb,
                               const std::vector<int>& labels) {
    return dummy_proto_loss(proto_logits(protos, query_emb), labels);
}

/// Auxiliary supervised loss: mean -log softmax(logits)[label].
inline double cross_entropy_aux(const Array& logits, const std::vector<int>& labels) {
    return dummy_proto_loss(logits, labels);  // same stabilized form
}

/// Scalar loss components of one AuxSL step.
struct LossBundle {
    double l_fsl = 0.0;
    std::optional<double> l_sl;
    double lambda = 0.0;
    double l_total = 0.0;
};

/// L_AuxSL = L_FSL + lambda * L_SL; reduces to L_FSL when no auxiliary term.
inline LossBundle auxsl_combine(double l_fsl, std::optional<double> l_sl, double lambda) {
    if (lambda < 0.0) throw ShapeError("auxsl_combine: lambda must be >= 0");
    LossBundle b;
    b.l_fsl = l_fsl;
    b.l_sl = l_sl;
    b.lambda = lambda;
    b.l_total = l_sl.has_value() ? l_fsl + lambda * *l_sl : l_fsl;
    return b;
}

/// Fraction of queries whose argmax column (over all N+1, ties toward the
/// lowest index) matches the label. By default only closed-label queries
/// count; with include_open, open queries join the denominator and are
/// correct when assigned to column N.
inline double closed_accuracy(const Array& probabilities, const std::vector<int>& labels,
                              bool include_open = false) {
    if (probabilities.ndim() != 2 || labels.size() != probabilities.dim(0)) {
        throw ShapeError("closed_accuracy: probabilities " + shape_str(probabilities.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t cols = probabilities.dim(1);
    const int open_label = static_cast<int>(cols) - 1;
    std::size_t counted = 0, correct = 0;
    for (std::size_t r = 0; r < probabilities.dim(0); ++r) {
        if (!include_open && labels[r] == open_label) continue;
        ++counted;
        std::size_t arg = 0;
        for (std::size_t c = 1; c < cols; ++c) {
            if (probabilities.at(r, c) > probabilities.at(r, arg)) arg = c;
        }
        if (static_cast<int>(arg) == labels[r]) ++correct;
    }
    if (counted == 0) return 0.0;
    return static_cast<double>(correct) / static_cast<double>(counted);
}

/// Threshold-free AUROC with open-set queries as positives. Rank-based
/// Mann-Whitney with average ranks for ties: (wins + 0.5*ties) / (|o|*|c|).
inline double auroc(const std::vector<double>& open_scores,
                    const std::vector<double>& closed_scores) {
    if (open_scores.empty() || closed_scores.empty()) {
        throw DataError("auroc: needs at least one open and one closed score");
    }
    struct Entry {
        double score;
        bool open;
    };
    std::vector<Entry> all;
    all.reserve(open_scores.size() + closed_scores.size());
    for (double s : open_scores) all.push_back({s, true});
    for (double s : closed_scores) all.push_back({s, false});
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

    double rank_sum_open = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t t = i; t < j; ++t) {
            if (all[t].open) rank_sum_open += avg_rank;
        }
        i = j;
    }
    const double no = static_cast<double>(open_scores.size());
    const double nc = static_cast<double>(closed_scores.size());
    const double u = rank_sum_open - no * (no + 1.0) / 2.0;
    return u / (no * nc);
}

/// Open-set verification rule: open iff p(y = N+1) strictly exceeds the
/// threshold.
inline bool verify_open(double p_open, double threshold) {
    if (threshold <= 0.0 || threshold >= 1.0) throw ShapeError("verify_open: threshold outside (0,1)");
    return p_open > threshold;
}

inline bool verify_open(const Array& probability_row, double threshold) {
    if (probability_row.ndim() != 1 && probability_row.ndim() != 2) {
        throw ShapeError("verify_open: expected a probability row");
    }
    return verify_open(probability_row[probability_row.numel() - 1], threshold);
}

/// ROC area by sweeping the verification threshold over all distinct scores
/// and integrating the (FPR, TPR) staircase with trapezoids. Equals the
/// Mann-Whitney statistic; kept as the independent route for the metric.
inline double roc_sweep_auc(const std::vector<double>& open_scores,
                            const std::vector<double>& closed_scores) {
    if (open_scores.empty() || closed_scores.empty()) {
        throw DataError("roc_sweep_auc: needs open and closed scores");
    }
    std::vector<double> thresholds;
    thresholds.reserve(open_scores.size() + closed_scores.size());
    thresholds.insert(thresholds.end(), open_scores.begin(), open_scores.end());
    thresholds.insert(thresholds.end(), closed_scores.begin(), closed_scores.end());
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    auto rates = [&](double thr) {
        std::size_t tp = 0, fp = 0;
        for (double s : open_scores) tp += s > thr ? 1 : 0;
        for (double s : closed_scores) fp += s > thr ? 1 : 0;
        return std::pair<double, double>{
            static_cast<double>(fp) / static_cast<double>(closed_scores.size()),
            static_cast<double>(tp) / static_cast<double>(open_scores.size())};
    };

    // sweep from the highest threshold (0,0) to below the lowest (1,1)
    std::vector<std::pair<double, double>> pts;
    pts.emplace_back(0.0, 0.0);
    for (std::size_t t = thresholds.size(); t-- > 0;) pts.push_back(rates(thresholds[t]));
    pts.emplace_back(1.0, 1.0);

    double area = 0.0;
    for (std::size_t t = 1; t < pts.size(); ++t) {
        area += (pts[t].first - pts[t - 1].first) * 0.5 * (pts[t].second + pts[t - 1].second);
    }
    return area;
}

/// Aggregated evaluation outcome (means and deviations taken across seeds).
struct EvalReport {
    std::string strategy;
    int shots = 5;
    double acc_mean = 0.0, acc_std = 0.0;
    double auroc_mean = 0.0, auroc_std = 0.0;
    std::size_t n_episodes = 0;
    std::vector<std::uint64_t> seeds;
    std::optional<double> threshold;        // verify_open demo inputs/outputs
    double open_detect_rate = 0.0;
    double false_alarm_rate = 0.0;

    std::string csv_row() const {
        std::ostringstream os;
        os << std::setprecision(10) << strategy << "," << shots << "," << acc_mean << ","
           << acc_std << "," << auroc_mean << "," << auroc_std << "," << n_episodes << ",";
        for (std::size_t i = 0; i < seeds.size(); ++i) os << (i ? ";" : "") << seeds[i];
        return os.str();
    }

    static std::string csv_header() {
        return "strategy,shots,acc_mean,acc_std,auroc_mean,auroc_std,n_episodes,seed_list";
    }
};

inline void write_eval_reports_csv(const std::filesystem::path& path,
                                   const std::vector<EvalReport>& reports) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_eval_reports_csv: cannot open " + path.string());
    f << EvalReport::csv_header() << "\n";
    for (const auto& r : reports) f << r.csv_row() << "\n";
}

}  // namespace pkws
