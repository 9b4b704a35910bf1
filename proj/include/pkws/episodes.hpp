#pragma once

#include <string>
#include <vector>

#include "pkws/dataset.hpp"
#include "pkws/errors.hpp"
#include "pkws/rng.hpp"

namespace pkws {

/// Episode geometry: N closed classes with K supports each, plus open-set
/// classes contributing query samples only.
struct EpisodeSpec {
    int n_closed = 5;
    int n_open = 5;
    int k_shot = 5;
    int m_query = 5;

    void validate() const {
        if (n_closed < 2) throw ConfigError("episode: n_closed must be >= 2");
        if (n_open < 0) throw ConfigError("episode: n_open must be >= 0");
        if (k_shot < 1) throw ConfigError("episode: k_shot must be >= 1");
        if (m_query < 1) throw ConfigError("episode: m_query must be >= 1");
    }

    int open_label() const { return n_closed; }
};

struct EpisodeItem {
    std::size_t clip_index;  // index into the Dataset
    int label;               // 0..N-1 closed, N for open queries
};

struct Episode {
    std::vector<EpisodeItem> support;  // n_closed * k_shot
    std::vector<EpisodeItem> queries;  // (n_closed + n_open) * m_query
    std::vector<int> view_classes;     // chosen ClassView indices, closed first
};

/// Draws classes without replacement, then clips without replacement within
/// each class: k+m for closed classes (first k are supports), m for open
/// classes. Deterministic given the rng state.
inline Episode sample_episode(const ClassView& view, const EpisodeSpec& spec, Rng& rng) {
    spec.validate();
    const std::size_t need = static_cast<std::size_t>(spec.n_closed + spec.n_open);
    if (view.n_classes() < need) {
        throw DataError("sample_episode: need " + std::to_string(need) + " classes, view has " +
                        std::to_string(view.n_classes()));
    }
    Episode ep;
    const auto chosen = rng.sample_without_replacement(view.n_classes(), need);
    ep.view_classes.assign(chosen.begin(), chosen.end());

    for (int n = 0; n < spec.n_closed; ++n) {
        const auto& cls = view.classes[chosen[static_cast<std::size_t>(n)]];
        const std::size_t want = static_cast<std::size_t>(spec.k_shot + spec.m_query);
        if (cls.clip_indices.size() < want) {
            throw DataError("sample_episode: class '" + cls.name + "' has " +
                            std::to_string(cls.clip_indices.size()) + " clips, needs " +
                            std::to_string(want));
        }
        const auto picks = rng.sample_without_replacement(cls.clip_indices.size(), want);
        for (int i = 0; i < spec.k_shot; ++i) {
            ep.support.push_back({cls.clip_indices[picks[static_cast<std::size_t>(i)]], n});
        }
        for (int i = 0; i < spec.m_query; ++i) {
            ep.queries.push_back(
                {cls.clip_indices[picks[static_cast<std::size_t>(spec.k_shot + i)]], n});
        }
    }
    for (int n = 0; n < spec.n_open; ++n) {
        const auto& cls = view.classes[chosen[static_cast<std::size_t>(spec.n_closed + n)]];
        const std::size_t want = static_cast<std::size_t>(spec.m_query);
        if (cls.clip_indices.size() < want) {
            throw DataError("sample_episode: open class '" + cls.name + "' has " +
                            std::to_string(cls.clip_indices.size()) + " clips, needs " +
                            std::to_string(want));
        }
        const auto picks = rng.sample_without_replacement(cls.clip_indices.size(), want);
        for (std::size_t i = 0; i < want; ++i) {
            ep.queries.push_back({cls.clip_indices[picks[i]], spec.open_label()});
        }
    }
    return ep;
}

struct AuxBatch {
    std::vector<std::size_t> clip_indices;
    std::vector<int> labels;  // positions in the view's class list
};

/// Uniform draw with replacement over all clips of the view; one batch per
/// training episode ("parallel sampling").
inline AuxBatch sample_aux_batch(const ClassView& view, std::size_t batch_size, Rng& rng) {
    if (view.all_clips.empty()) throw DataError("sample_aux_batch: empty auxiliary dataset");
    AuxBatch batch;
    batch.clip_indices.reserve(batch_size);
    batch.labels.reserve(batch_size);

    // clip index -> view label, built once per call
    std::vector<int> label_of;
    label_of.assign(view.dataset->clips.size(), -1);
    for (std::size_t c = 0; c < view.classes.size(); ++c) {
        for (std::size_t idx : view.classes[c].clip_indices) {
            label_of[idx] = static_cast<int>(c);
        }
    }
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t pick = view.all_clips[rng.uniform_int(view.all_clips.size())];
        batch.clip_indices.push_back(pick);
        batch.labels.push_back(label_of[pick]);
    }
    return batch;
}

}  // namespace pkws
