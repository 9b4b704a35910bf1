#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "pkws/dataset.hpp"
#include "pkws/dsp.hpp"
#include "pkws/errors.hpp"
#include "pkws/manifest.hpp"
#include "pkws/rng.hpp"
#include "pkws/wav.hpp"

namespace pkws {

/// Deterministic synthetic keyword corpus. Every keyword is a sequence of
/// sub-unit sounds drawn from a shared inventory; train/val/test/auxiliary
/// vocabularies are disjoint sequences over the same units, so unseen
/// keywords are recombinations of familiar material. In-domain audio passes
/// channel filter A, auxiliary audio channel filter B.
struct SynthSpec {
    std::uint64_t seed = 1;

    int unit_inventory = 16;
    int units_per_keyword_min = 3;
    int units_per_keyword_max = 5;
    double unit_ms_min = 95.0;
    double unit_ms_max = 135.0;

    int train_keywords = 15;
    int val_keywords = 10;
    int test_keywords = 10;
    int clips_per_keyword = 30;  // per in-domain keyword per split (incl. silence)

    int aux_keywords = 64;
    int aux_top_occurrences = 80;   // most frequent auxiliary keyword
    int aux_min_occurrences = 12;   // tail clamp
    double aux_zipf_exponent = 0.8;
    int morph_variant_pairs = 3;    // auxiliary "-s" variant pairs
    int contaminant_occurrences = 6;  // in-domain test words spoken in aux utterances
    int junk_occurrences = 20;        // sub-0.3 s fragments, dropped by duration filters

    double pitch_min = 0.88;
    double pitch_max = 1.14;
    double tempo_min = 0.85;
    double tempo_max = 1.18;
    double speaker_eq_db = 3.0;   // per-clip random tilt magnitude
    double onset_jitter_s = 0.15;
    double noise_floor = 3e-3;
    double gain_min = 0.7;
    double gain_max = 1.0;

    int utterance_words_min = 5;
    int utterance_words_max = 9;

    int noise_files = 4;
    double noise_seconds = 8.0;

    void validate() const {
        if (unit_inventory < 4) throw ConfigError("synth: unit_inventory must be >= 4");
        if (units_per_keyword_min < 1 || units_per_keyword_max < units_per_keyword_min) {
            throw ConfigError("synth: bad units_per_keyword range");
        }
        if (train_keywords < 1 || val_keywords < 1 || test_keywords < 1 || aux_keywords < 1) {
            throw ConfigError("synth: keyword counts must be positive");
        }
        if (clips_per_keyword < 2) throw ConfigError("synth: clips_per_keyword must be >= 2");
        if (pitch_min <= 0 || pitch_max < pitch_min) throw ConfigError("synth: bad pitch range");
    }
};

struct SynthResult {
    std::filesystem::path root;
    std::vector<std::string> train_keywords, val_keywords, test_keywords, aux_keywords;
    std::filesystem::path manifest_path;
    std::size_t manifest_rows = 0;
    std::size_t aux_clips = 0;
};

namespace synth_detail {

inline constexpr int kSampleRate = 16000;

/// Spectral template of one sub-unit sound.
struct Unit {
    double base_hz;
    std::vector<double> harmonic_amp;
    std::vector<double> harmonic_phase;
    double noise_mix;
    double duration_s;
    bool fricative = false;  // noise burst instead of harmonics (the "-s" suffix)
    std::string syllable;
};

inline std::vector<Unit> make_inventory(const SynthSpec& spec, Rng& rng) {
    static const char* kConsonants = "bdgkmnprstvz";
    static const char* kVowels = "aeiou";
    std::vector<Unit> units;
    for (int i = 0; i < spec.unit_inventory; ++i) {
        Unit u;
        const double frac = static_cast<double>(i) / std::max(1, spec.unit_inventory - 1);
        u.base_hz = 220.0 * std::pow(2400.0 / 220.0, frac) * rng.uniform(0.96, 1.04);
        const int harmonics = 4 + static_cast<int>(rng.uniform_int(3));
        const double decay = rng.uniform(0.45, 0.8);
        double amp = 1.0;
        for (int h = 0; h < harmonics; ++h) {
            u.harmonic_amp.push_back(amp * rng.uniform(0.6, 1.0));
            u.harmonic_phase.push_back(rng.uniform(0.0, 2.0 * kPi));
            amp *= decay;
        }
        u.noise_mix = rng.uniform(0.02, 0.08);
        u.duration_s = rng.uniform(spec.unit_ms_min, spec.unit_ms_max) / 1000.0;
        u.syllable = std::string(1, kConsonants[i % 12]) + std::string(1, kVowels[(i / 12 + i) % 5]);
        units.push_back(std::move(u));
    }
    return units;
}

inline Unit make_fricative_unit() {
    Unit u;
    u.base_hz = 0.0;
    u.noise_mix = 1.0;
    u.duration_s = 0.07;
    u.fricative = true;
    u.syllable = "s";
    return u;
}

/// Renders one unit at a pitch/tempo scale into `out`, starting at sample `at`.
inline void render_unit(const Unit& u, double pitch, double tempo, double gain,
                        std::vector<double>& out, std::size_t at, Rng& rng) {
    const std::size_t n = static_cast<std::size_t>(u.duration_s * tempo * kSampleRate);
    const std::size_t attack = std::min<std::size_t>(n / 6, 160);
    for (std::size_t i = 0; i < n && at + i < out.size(); ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        double env = 1.0;
        if (i < attack) env = static_cast<double>(i) / static_cast<double>(attack);
        if (n - i < attack) env = static_cast<double>(n - i) / static_cast<double>(attack);
        double v = 0.0;
        if (!u.fricative) {
            for (std::size_t h = 0; h < u.harmonic_amp.size(); ++h) {
                v += u.harmonic_amp[h] *
                     std::sin(2.0 * kPi * u.base_hz * pitch * static_cast<double>(h + 1) * t +
                              u.harmonic_phase[h]);
            }
            v *= 0.28;
        }
        v += u.noise_mix * rng.uniform(-1.0, 1.0);
        out[at + i] += gain * env * v;
    }
}

inline std::size_t keyword_samples(const std::vector<Unit>& inventory,
                                   const std::vector<int>& seq, double tempo) {
    std::size_t n = 0;
    for (int u : seq) {
        n += static_cast<std::size_t>(inventory[static_cast<std::size_t>(u)].duration_s * tempo *
                                      kSampleRate);
    }
    return n;
}

inline void render_keyword(const std::vector<Unit>& inventory, const std::vector<int>& seq,
                           double pitch, double tempo, double gain, std::vector<double>& out,
                           std::size_t at, Rng& rng) {
    std::size_t pos = at;
    for (int uidx : seq) {
        const Unit& u = inventory[static_cast<std::size_t>(uidx)];
        render_unit(u, pitch, tempo, gain, out, pos, rng);
        pos += static_cast<std::size_t>(u.duration_s * tempo * kSampleRate);
    }
}

/// Per-clip "speaker" coloration: a random broadband tilt.
inline void speaker_eq(std::vector<double>& x, double magnitude_db, Rng& rng) {
    const double lo = rng.uniform(-magnitude_db, magnitude_db);
    const double hi = rng.uniform(-magnitude_db, magnitude_db);
    Biquad::low_shelf(500.0, lo, kSampleRate).apply(x);
    Biquad::high_shelf(2500.0, hi, kSampleRate).apply(x);
}

/// Fixed band-shaping filters creating the in-domain/auxiliary channel gap.
inline void channel_filter_a(std::vector<double>& x) {
    Biquad::low_shelf(400.0, 2.0, kSampleRate).apply(x);
    Biquad::high_shelf(3600.0, -4.0, kSampleRate).apply(x);
}

inline void channel_filter_b(std::vector<double>& x) {
    Biquad::highpass(320.0, 0.707, kSampleRate).apply(x);
    Biquad::lowpass(3300.0, 0.707, kSampleRate).apply(x);
    Biquad::peaking(1700.0, 1.0, 3.0, kSampleRate).apply(x);
}

inline void clamp_unit(std::vector<double>& x) {
    for (double& v : x) {
        if (v > 1.0) v = 1.0;
        if (v < -1.0) v = -1.0;
    }
}

/// Distinct keyword sequences; distinct as multisets so bag-of-unit spectral
/// profiles differ between keywords.
inline std::vector<std::vector<int>> draw_sequences(const SynthSpec& spec, int count, Rng& rng,
                                                    std::set<std::vector<int>>& used_multisets) {
    std::vector<std::vector<int>> out;
    int guard = 0;
    while (static_cast<int>(out.size()) < count) {
        if (++guard > 100000) throw ConfigError("synth: cannot draw enough distinct keywords");
        const int len = spec.units_per_keyword_min +
                        static_cast<int>(rng.uniform_int(
                            static_cast<std::uint64_t>(spec.units_per_keyword_max -
                                                       spec.units_per_keyword_min + 1)));
        std::vector<int> seq;
        for (int i = 0; i < len; ++i) {
            int u;
            do {
                u = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.unit_inventory)));
            } while (!seq.empty() && u == seq.back());
            seq.push_back(u);
        }
        std::vector<int> key = seq;
        std::sort(key.begin(), key.end());
        if (used_multisets.insert(key).second) out.push_back(std::move(seq));
    }
    return out;
}

inline std::string keyword_name(const std::vector<Unit>& inventory, const std::vector<int>& seq) {
    std::string name;
    for (int u : seq) name += inventory[static_cast<std::size_t>(u)].syllable;
    return name;
}

/// Pink-ish noise: averaged octave rows plus a white component.
inline std::vector<double> make_noise(std::size_t n, Rng& rng) {
    constexpr int kRows = 8;
    double rows[kRows] = {0};
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (int r = 0; r < kRows; ++r) {
            if (i % (std::size_t{1} << r) == 0) rows[r] = rng.uniform(-1.0, 1.0);
        }
        double v = rng.uniform(-1.0, 1.0);
        for (int r = 0; r < kRows; ++r) v += rows[r];
        out[i] = v / (kRows + 1);
    }
    Biquad::lowpass(6000.0, 0.707, kSampleRate).apply(out);
    double peak = 0.0;
    for (double v : out) peak = std::max(peak, std::fabs(v));
    const double norm = peak > 0 ? 0.5 / peak : 1.0;
    for (double& v : out) v *= norm;
    return out;
}

}  // namespace synth_detail

/// Builds the corpus under out_root. See SynthResult for what lands where.
inline SynthResult synth_build(const SynthSpec& spec, const std::filesystem::path& out_root) {
    using namespace synth_detail;
    spec.validate();
    Rng master(mix_seed(spec.seed, 0x5EED));

    SynthResult res;
    res.root = out_root;
    std::filesystem::create_directories(out_root);
    for (const char* sub : {"in_domain", "auxiliary", "aux_utterances", "noise"}) {
        std::filesystem::remove_all(out_root / sub);
    }
    std::filesystem::remove(out_root / "index.json");
    std::filesystem::remove(out_root / "manifest.csv");

    Rng unit_rng(master.next_u64());
    std::vector<Unit> inventory = make_inventory(spec, unit_rng);
    const Unit fricative = make_fricative_unit();
    const int fricative_index = static_cast<int>(inventory.size());
    inventory.push_back(fricative);

    // --- vocabulary ------------------------------------------------------
    Rng vocab_rng(master.next_u64());
    std::set<std::vector<int>> used;
    auto train_seq = draw_sequences(spec, spec.train_keywords, vocab_rng, used);
    auto val_seq = draw_sequences(spec, spec.val_keywords, vocab_rng, used);
    auto test_seq = draw_sequences(spec, spec.test_keywords, vocab_rng, used);
    const int aux_base_count = spec.aux_keywords - spec.morph_variant_pairs;
    if (aux_base_count < spec.morph_variant_pairs) {
        throw ConfigError("synth: morph_variant_pairs too large for aux_keywords");
    }
    auto aux_seq = draw_sequences(spec, aux_base_count, vocab_rng, used);
    // morphological variants: base sequence plus a fricative tail, name + "s"
    for (int i = 0; i < spec.morph_variant_pairs; ++i) {
        std::vector<int> variant = aux_seq[static_cast<std::size_t>(i)];
        variant.push_back(fricative_index);
        aux_seq.push_back(std::move(variant));
    }

    auto names_of = [&](const std::vector<std::vector<int>>& seqs) {
        std::vector<std::string> names;
        for (const auto& s : seqs) names.push_back(keyword_name(inventory, s));
        return names;
    };
    res.train_keywords = names_of(train_seq);
    res.val_keywords = names_of(val_seq);
    res.test_keywords = names_of(test_seq);
    res.aux_keywords = names_of(aux_seq);

    // --- in-domain clips --------------------------------------------------
    auto render_clip = [&](const std::vector<int>& seq, Rng& rng, bool aux_channel) {
        std::vector<double> buf(kSampleRate, 0.0);
        const double pitch = rng.uniform(spec.pitch_min, spec.pitch_max);
        const double tempo = rng.uniform(spec.tempo_min, spec.tempo_max);
        const double gain = rng.uniform(spec.gain_min, spec.gain_max);
        const std::size_t kw = std::min(buf.size(), keyword_samples(inventory, seq, tempo));
        const std::size_t center = (buf.size() - kw) / 2;
        const long jitter =
            static_cast<long>(rng.uniform(-spec.onset_jitter_s, spec.onset_jitter_s) * kSampleRate);
        const std::size_t at = static_cast<std::size_t>(
            std::max<long>(0, std::min<long>(static_cast<long>(buf.size() - kw),
                                             static_cast<long>(center) + jitter)));
        render_keyword(inventory, seq, pitch, tempo, gain, buf, at, rng);
        for (double& v : buf) v += spec.noise_floor * rng.uniform(-1.0, 1.0);
        speaker_eq(buf, spec.speaker_eq_db, rng);
        if (aux_channel) channel_filter_b(buf);
        else channel_filter_a(buf);
        clamp_unit(buf);
        return buf;
    };

    Rng indomain_rng(master.next_u64());
    const std::pair<Split, std::vector<std::vector<int>>*> splits[] = {
        {Split::Train, &train_seq}, {Split::Val, &val_seq}, {Split::Test, &test_seq}};
    for (const auto& [split, seqs] : splits) {
        for (std::size_t k = 0; k < seqs->size(); ++k) {
            const std::string name = keyword_name(inventory, (*seqs)[k]);
            for (int c = 0; c < spec.clips_per_keyword; ++c) {
                auto buf = render_clip((*seqs)[k], indomain_rng, false);
                char file[64];
                std::snprintf(file, sizeof(file), "clip_%03d.wav", c);
                save_wav(out_root / "in_domain" / split_name(split) / name / file, buf);
            }
        }
        // silence category, present in every split
        for (int c = 0; c < spec.clips_per_keyword; ++c) {
            std::vector<double> buf(kSampleRate);
            for (double& v : buf) v = 1.3 * spec.noise_floor * indomain_rng.uniform(-1.0, 1.0);
            speaker_eq(buf, spec.speaker_eq_db, indomain_rng);
            channel_filter_a(buf);
            clamp_unit(buf);
            char file[64];
            std::snprintf(file, sizeof(file), "clip_%03d.wav", c);
            save_wav(out_root / "in_domain" / split_name(split) / kSilenceKeyword / file, buf);
        }
    }

    // --- auxiliary utterances + manifest + cut clips ----------------------
    struct Occurrence {
        std::string word;
        const std::vector<int>* seq;
        bool junk = false;
        bool contaminant = false;
    };
    Rng aux_rng(master.next_u64());
    std::vector<Occurrence> occurrences;
    for (std::size_t k = 0; k < aux_seq.size(); ++k) {
        const int occ = std::max(
            spec.aux_min_occurrences,
            static_cast<int>(std::lround(
                spec.aux_top_occurrences /
                std::pow(static_cast<double>(k + 1), spec.aux_zipf_exponent))));
        for (int i = 0; i < occ; ++i) {
            occurrences.push_back({res.aux_keywords[k], &aux_seq[k], false, false});
        }
    }
    for (int i = 0; i < spec.contaminant_occurrences; ++i) {
        const std::size_t pick = aux_rng.uniform_int(test_seq.size());
        occurrences.push_back({res.test_keywords[pick], &test_seq[pick], false, true});
    }
    static const std::vector<int> kJunkSeq = {0};
    for (int i = 0; i < spec.junk_occurrences; ++i) {
        occurrences.push_back({"uh", &kJunkSeq, true, false});
    }
    aux_rng.shuffle(occurrences);

    std::vector<ManifestEntry> manifest;
    std::size_t occ_pos = 0;
    int utt_counter = 0;
    while (occ_pos < occurrences.size()) {
        const int words = spec.utterance_words_min +
                          static_cast<int>(aux_rng.uniform_int(static_cast<std::uint64_t>(
                              spec.utterance_words_max - spec.utterance_words_min + 1)));
        const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(words),
                                                       occurrences.size() - occ_pos);
        char utt_id[32];
        std::snprintf(utt_id, sizeof(utt_id), "utt_%05d", utt_counter++);
        const std::string utt_rel = std::string("aux_utterances/") + utt_id + ".wav";

        struct Placed {
            const Occurrence* occ;
            std::size_t start, end;  // samples covering the rendered word
            double pitch, tempo, gain;
        };
        std::vector<Placed> placed;
        std::size_t cursor = static_cast<std::size_t>(0.25 * kSampleRate);
        for (std::size_t i = 0; i < take; ++i) {
            const Occurrence& occ = occurrences[occ_pos + i];
            const double pitch = aux_rng.uniform(spec.pitch_min, spec.pitch_max);
            const double tempo = aux_rng.uniform(spec.tempo_min, spec.tempo_max);
            const double gain = aux_rng.uniform(spec.gain_min, spec.gain_max);
            std::size_t len;
            if (occ.junk) {
                len = static_cast<std::size_t>(0.1 * kSampleRate);
            } else {
                len = keyword_samples(inventory, *occ.seq, tempo);
            }
            placed.push_back({&occ, cursor, cursor + len, pitch, tempo, gain});
            cursor += len + static_cast<std::size_t>(aux_rng.uniform(0.12, 0.25) * kSampleRate);
        }
        std::vector<double> buf(cursor + static_cast<std::size_t>(0.25 * kSampleRate), 0.0);
        for (const auto& p : placed) {
            if (p.occ->junk) {
                Unit u = make_fricative_unit();
                u.duration_s = 0.1;
                u.noise_mix = 0.6;
                render_unit(u, p.pitch, 1.0, p.gain, buf, p.start, aux_rng);
            } else {
                render_keyword(inventory, *p.occ->seq, p.pitch, p.tempo, p.gain, buf, p.start,
                               aux_rng);
            }
        }
        for (double& v : buf) v += spec.noise_floor * aux_rng.uniform(-1.0, 1.0);
        speaker_eq(buf, spec.speaker_eq_db, aux_rng);
        channel_filter_b(buf);
        clamp_unit(buf);
        save_wav(out_root / utt_rel, buf);

        int word_idx = 0;
        for (const auto& p : placed) {
            ManifestEntry e;
            e.utterance_id = std::string(utt_id) + "_w" + std::to_string(word_idx);
            e.audio_path = utt_rel;
            e.word = p.occ->word;
            e.start_s = std::max(0.0, static_cast<double>(p.start) / kSampleRate - 0.04);
            e.end_s = static_cast<double>(p.end) / kSampleRate + 0.06;
            manifest.push_back(e);

            if (!p.occ->junk && !p.occ->contaminant) {
                // direct auxiliary clip, cut exactly as the forge would
                const std::size_t a = static_cast<std::size_t>(std::llround(e.start_s * kSampleRate));
                const std::size_t b = std::min(buf.size(), static_cast<std::size_t>(
                                                               std::llround(e.end_s * kSampleRate)));
                std::vector<double> clip(buf.begin() + static_cast<long>(a),
                                         buf.begin() + static_cast<long>(b));
                save_wav(out_root / "auxiliary" / "train" / p.occ->word /
                             (e.utterance_id + ".wav"),
                         clip);
                ++res.aux_clips;
            }
            ++word_idx;
        }
        occ_pos += take;
    }
    res.manifest_path = out_root / "manifest.csv";
    write_manifest(res.manifest_path, manifest);
    res.manifest_rows = manifest.size();

    // --- background noise --------------------------------------------------
    Rng noise_rng(master.next_u64());
    for (int i = 0; i < spec.noise_files; ++i) {
        auto n = make_noise(static_cast<std::size_t>(spec.noise_seconds * kSampleRate), noise_rng);
        char file[32];
        std::snprintf(file, sizeof(file), "noise_%02d.wav", i);
        save_wav(out_root / "noise" / file, n);
    }

    std::filesystem::remove(out_root / "index.json");
    Dataset ds = Dataset::load(out_root);  // directory scan
    ds.write_index();
    return res;
}

/// Loads the augmentation noise bank written by synth_build.
inline std::vector<Waveform> load_noise_bank(const std::filesystem::path& root) {
    std::vector<std::filesystem::path> files;
    const auto dir = root / "noise";
    if (std::filesystem::is_directory(dir)) {
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            if (e.path().extension() == ".wav") files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<Waveform> bank;
    for (const auto& f : files) bank.push_back(load_wav(f));
    return bank;
}

}  // namespace pkws
