#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pkws/dataset.hpp"
#include "pkws/errors.hpp"
#include "pkws/manifest.hpp"
#include "pkws/rng.hpp"
#include "pkws/wav.hpp"

namespace pkws {

/// Auxiliary dataset construction settings. Defaults follow the reference
/// recipe: top 1000 keywords at 300 samples each, word length 0.3-2.2 s,
/// morphological overlap rules for plural/past/negative forms.
struct ForgeConfig {
    std::size_t top_k = 1000;
    std::size_t samples_per_keyword = 300;
    double min_duration_s = 0.3;
    double max_duration_s = 2.2;
    std::vector<std::string> exclusion_list;
    std::vector<std::string> suffix_rules = {"s", "es", "ed", "d", "ing"};
    std::vector<std::string> prefix_rules = {"un", "in", "non"};
    std::uint64_t seed = 1;
    bool balanced = true;

    void validate() const {
        if (top_k < 1) throw ConfigError("forge: top_k must be >= 1");
        if (samples_per_keyword < 1) throw ConfigError("forge: samples_per_keyword must be >= 1");
        if (min_duration_s >= max_duration_s) throw ConfigError("forge: bad duration bounds");
    }
};

/// Stage-by-stage accounting. Every stage satisfies
/// input == survivors + dropped.
struct ForgeReport {
    std::size_t manifest_rows = 0;
    std::size_t rejected_rows = 0;
    std::size_t input_entries = 0;
    std::size_t after_duration = 0;
    std::size_t duration_dropped = 0;
    std::size_t after_morph = 0;
    std::size_t morph_dropped_entries = 0;
    std::size_t after_exclusion = 0;
    std::size_t exclusion_dropped_entries = 0;
    std::size_t emitted_entries = 0;
    std::size_t selection_dropped = 0;
    std::size_t shortfall = 0;  // keywords missing toward top_k

    std::vector<std::string> final_keywords;
    std::map<std::string, std::size_t> per_keyword_counts;
    std::vector<std::string> drop_log;
    std::vector<std::string> cut_errors;

    std::string text() const {
        std::ostringstream os;
        os << "forge report\n"
           << "  manifest rows        " << manifest_rows << " (" << rejected_rows
           << " rejected)\n"
           << "  entries in           " << input_entries << "\n"
           << "  duration filter      " << after_duration << " kept, " << duration_dropped
           << " dropped\n"
           << "  morphological filter " << after_morph << " kept, " << morph_dropped_entries
           << " dropped\n"
           << "  exclusion filter     " << after_exclusion << " kept, " << exclusion_dropped_entries
           << " dropped\n"
           << "  selection            " << emitted_entries << " kept, " << selection_dropped
           << " dropped\n"
           << "  keywords emitted     " << final_keywords.size();
        if (shortfall) os << " (shortfall " << shortfall << ")";
        os << "\n";
        return os.str();
    }

    void write(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        {
            std::ofstream f(dir / "forge_report.txt", std::ios::trunc);
            f << text();
            f << "drop log (" << drop_log.size() << " entries)\n";
            for (const auto& line : drop_log) f << "  " << line << "\n";
            f << "cut errors (" << cut_errors.size() << ")\n";
            for (const auto& line : cut_errors) f << "  " << line << "\n";
        }
        {
            std::ofstream f(dir / "forge_report.csv", std::ios::trunc);
            f << "keyword,samples\n";
            for (const auto& kw : final_keywords) {
                f << kw << "," << per_keyword_counts.at(kw) << "\n";
            }
        }
    }
};

/// Keeps entries with min <= duration <= max (inclusive on both ends).
inline std::vector<ManifestEntry> filter_duration(const std::vector<ManifestEntry>& entries,
                                                  double min_s, double max_s,
                                                  ForgeReport* report = nullptr) {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
        const double d = e.duration();
        if (d >= min_s && d <= max_s) {
            out.push_back(e);
        } else if (report) {
            ++report->duration_dropped;
        }
    }
    if (report) report->after_duration = out.size();
    return out;
}

/// For every pair (w, w+suffix) or (w, prefix+w) with both words present,
/// keeps exactly one of the two, chosen by the seeded rng. Words are visited
/// in sorted order so the outcome is deterministic per seed.
inline std::vector<std::string> remove_morphological_overlaps(
    std::vector<std::string> vocabulary, const std::vector<std::string>& suffixes,
    const std::vector<std::string>& prefixes, Rng& rng, ForgeReport* report = nullptr) {
    std::sort(vocabulary.begin(), vocabulary.end());
    vocabulary.erase(std::unique(vocabulary.begin(), vocabulary.end()), vocabulary.end());
    std::map<std::string, bool> alive;
    for (const auto& w : vocabulary) alive[w] = true;

    for (const auto& w : vocabulary) {
        if (!alive[w]) continue;
        auto consider = [&](const std::string& derived, const char* kind) {
            if (!alive[w]) return;
            auto it = alive.find(derived);
            if (it == alive.end() || !it->second) return;
            const bool keep_base = rng.uniform() < 0.5;
            const std::string& dropped = keep_base ? derived : w;
            (keep_base ? it->second : alive[w]) = false;
            if (report) {
                report->drop_log.push_back("morphological: dropped '" + dropped + "' (" + kind +
                                           " pair with '" + (keep_base ? w : derived) + "')");
            }
        };
        for (const auto& s : suffixes) consider(w + s, "suffix");
        for (const auto& p : prefixes) consider(p + w, "prefix");
    }

    std::vector<std::string> out;
    for (const auto& w : vocabulary) {
        if (alive[w]) out.push_back(w);
    }
    return out;
}

/// Set difference; absent exclusions are logged as no-ops.
inline std::vector<std::string> exclude_keywords(const std::vector<std::string>& vocabulary,
                                                 const std::vector<std::string>& exclusion,
                                                 ForgeReport* report = nullptr) {
    std::set<std::string> drop;
    for (const auto& w : exclusion) drop.insert(to_lower(w));
    std::set<std::string> present(vocabulary.begin(), vocabulary.end());
    if (report) {
        for (const auto& w : drop) {
            if (!present.count(w)) {
                report->drop_log.push_back("exclusion: '" + w + "' not in vocabulary (no-op)");
            }
        }
    }
    std::vector<std::string> out;
    for (const auto& w : vocabulary) {
        if (drop.count(w)) {
            if (report) report->drop_log.push_back("exclusion: dropped '" + w + "'");
        } else {
            out.push_back(w);
        }
    }
    return out;
}

using ForgeSelection = std::map<std::string, std::vector<ManifestEntry>>;

namespace forge_detail {

/// Keywords ranked by surviving sample count, ties broken lexicographically.
inline std::vector<std::pair<std::string, std::size_t>> rank_keywords(
    const std::vector<ManifestEntry>& entries) {
    std::map<std::string, std::size_t> counts;
    for (const auto& e : entries) ++counts[e.word];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return ranked;
}

inline std::map<std::string, std::vector<ManifestEntry>> group_entries(
    const std::vector<ManifestEntry>& entries) {
    std::map<std::string, std::vector<ManifestEntry>> by_word;
    for (const auto& e : entries) by_word[e.word].push_back(e);
    return by_word;
}

}  // namespace forge_detail

/// Top-k keywords with at least S samples; exactly S samples kept per
/// keyword, drawn uniformly without replacement.
inline ForgeSelection balance_topk(const std::vector<ManifestEntry>& entries, std::size_t top_k,
                                   std::size_t samples_per_keyword, Rng& rng,
                                   ForgeReport* report = nullptr) {
    if (entries.empty()) throw DataError("balance_topk: no entries to select from");
    auto ranked = forge_detail::rank_keywords(entries);
    auto by_word = forge_detail::group_entries(entries);

    ForgeSelection out;
    std::vector<std::string> chosen;
    for (const auto& [word, count] : ranked) {
        if (chosen.size() == top_k) break;
        if (count < samples_per_keyword) continue;
        auto& pool = by_word[word];
        const auto picks = rng.sample_without_replacement(pool.size(), samples_per_keyword);
        std::vector<std::size_t> sorted_picks(picks.begin(), picks.end());
        std::sort(sorted_picks.begin(), sorted_picks.end());
        auto& sel = out[word];
        for (std::size_t i : sorted_picks) sel.push_back(pool[i]);
        chosen.push_back(word);
    }
    if (chosen.empty()) {
        throw DataError("balance_topk: no keyword has " + std::to_string(samples_per_keyword) +
                        " samples");
    }
    if (report) {
        report->final_keywords = chosen;
        report->shortfall = top_k > chosen.size() ? top_k - chosen.size() : 0;
        std::size_t total = 0;
        for (const auto& [w, sel] : out) {
            report->per_keyword_counts[w] = sel.size();
            total += sel.size();
        }
        report->emitted_entries = total;
        report->selection_dropped = entries.size() - total;
    }
    return out;
}

/// Same top-k ranking but every surviving sample is retained, preserving the
/// raw frequency skew.
inline ForgeSelection emit_imbalanced(const std::vector<ManifestEntry>& entries, std::size_t top_k,
                                      ForgeReport* report = nullptr) {
    if (entries.empty()) throw DataError("emit_imbalanced: no entries to select from");
    auto ranked = forge_detail::rank_keywords(entries);
    auto by_word = forge_detail::group_entries(entries);

    ForgeSelection out;
    std::vector<std::string> chosen;
    for (const auto& [word, count] : ranked) {
        if (chosen.size() == top_k) break;
        out[word] = by_word[word];
        chosen.push_back(word);
    }
    if (report) {
        report->final_keywords = chosen;
        report->shortfall = top_k > chosen.size() ? top_k - chosen.size() : 0;
        std::size_t total = 0;
        for (const auto& [w, sel] : out) {
            report->per_keyword_counts[w] = sel.size();
            total += sel.size();
        }
        report->emitted_entries = total;
        report->selection_dropped = entries.size() - total;
    }
    return out;
}

/// Cuts each selected entry at [round(start*16000), round(end*16000)) from
/// its utterance audio and writes one WAV per clip plus the dataset index.
/// Per-entry failures are reported and skipped.
inline void cut_segments(const ForgeSelection& selection, const std::filesystem::path& audio_root,
                         const std::filesystem::path& out_root, ForgeReport* report = nullptr) {
    std::map<std::string, Waveform> cache;
    for (const auto& [word, entries] : selection) {
        std::size_t counter = 0;
        for (const auto& e : entries) {
            const std::string clip_name = e.utterance_id + "_" + std::to_string(counter++) + ".wav";
            try {
                auto it = cache.find(e.audio_path);
                if (it == cache.end()) {
                    it = cache.emplace(e.audio_path, load_wav(audio_root / e.audio_path)).first;
                }
                const Waveform& utt = it->second;
                const auto a = static_cast<std::size_t>(std::llround(e.start_s * 16000.0));
                const auto b = static_cast<std::size_t>(std::llround(e.end_s * 16000.0));
                if (b > utt.size() || a >= b) {
                    throw DataError("segment [" + std::to_string(e.start_s) + ", " +
                                    std::to_string(e.end_s) + ") outside audio of " +
                                    std::to_string(utt.seconds()) + " s");
                }
                std::vector<double> clip(utt.samples.begin() + static_cast<long>(a),
                                         utt.samples.begin() + static_cast<long>(b));
                save_wav(out_root / "auxiliary" / "train" / word / clip_name, clip);
            } catch (const std::exception& ex) {
                if (report) {
                    report->cut_errors.push_back(e.utterance_id + " (" + word + "): " + ex.what());
                } else {
                    throw;
                }
            }
        }
    }
}

/// Full pipeline: ingest -> duration filter -> morphological filter ->
/// exclusion -> balance/imbalance -> (optionally) cut audio + index.
inline ForgeReport run_forge(const std::filesystem::path& manifest_path,
                             const std::filesystem::path& audio_root,
                             const std::filesystem::path& out_root, const ForgeConfig& cfg,
                             bool metadata_only = false) {
    cfg.validate();
    ForgeReport report;
    Rng rng(mix_seed(cfg.seed, 0xF063));

    auto ingest = ingest_manifest(manifest_path);
    report.manifest_rows = ingest.entries.size() + ingest.rejected.size();
    report.rejected_rows = ingest.rejected.size();
    for (const auto& r : ingest.rejected) report.drop_log.push_back("manifest: " + r);
    report.input_entries = ingest.entries.size();

    auto entries = filter_duration(ingest.entries, cfg.min_duration_s, cfg.max_duration_s, &report);

    std::vector<std::string> vocab;
    {
        std::set<std::string> words;
        for (const auto& e : entries) words.insert(e.word);
        vocab.assign(words.begin(), words.end());
    }
    vocab = remove_morphological_overlaps(vocab, cfg.suffix_rules, cfg.prefix_rules, rng, &report);
    {
        std::set<std::string> keep(vocab.begin(), vocab.end());
        std::vector<ManifestEntry> filtered;
        for (const auto& e : entries) {
            if (keep.count(e.word)) filtered.push_back(e);
            else ++report.morph_dropped_entries;
        }
        entries = std::move(filtered);
        report.after_morph = entries.size();
    }

    vocab = exclude_keywords(vocab, cfg.exclusion_list, &report);
    {
        std::set<std::string> keep(vocab.begin(), vocab.end());
        std::vector<ManifestEntry> filtered;
        for (const auto& e : entries) {
            if (keep.count(e.word)) filtered.push_back(e);
            else ++report.exclusion_dropped_entries;
        }
        entries = std::move(filtered);
        report.after_exclusion = entries.size();
    }

    ForgeSelection selection =
        cfg.balanced ? balance_topk(entries, cfg.top_k, cfg.samples_per_keyword, rng, &report)
                     : emit_imbalanced(entries, cfg.top_k, &report);

    std::filesystem::create_directories(out_root);
    if (!metadata_only) {
        std::filesystem::remove_all(out_root / "auxiliary");
        std::filesystem::remove(out_root / "index.json");
        cut_segments(selection, audio_root, out_root, &report);
        Dataset ds = Dataset::load(out_root);
        ds.write_index();
    }
    report.write(out_root);
    return report;
}

}  // namespace pkws
