#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "pkws/forge.hpp"
#include "pkws/synth.hpp"
#include "test_util.hpp"

using namespace pkws;
using pkws_test::TempDir;

namespace {

ManifestEntry entry(const std::string& word, double start, double end,
                    const std::string& utt = "u0", const std::string& path = "a.wav") {
    return {utt, path, word, start, end};
}

std::vector<std::string> synth_vocab(int n, Rng& rng) {
    std::set<std::string> words;
    static const char* syl[] = {"ba", "de", "ki", "mo", "nu", "po", "ra", "su", "ta", "vo"};
    while (static_cast<int>(words.size()) < n) {
        std::string w;
        const int len = 2 + static_cast<int>(rng.uniform_int(3));
        for (int i = 0; i < len; ++i) w += syl[rng.uniform_int(10)];
        words.insert(w);
    }
    return {words.begin(), words.end()};
}

}  // namespace

TEST_CASE("duration filter boundaries are inclusive", "[forge]") {
    std::vector<ManifestEntry> entries = {
        entry("a", 0.0, 0.3),    // exactly 0.3 -> kept
        entry("b", 0.0, 0.29),   // below -> dropped
        entry("c", 0.0, 2.2),    // exactly 2.2 -> kept
        entry("d", 0.0, 2.21),   // above -> dropped
        entry("e", 0.5, 0.75),   // inside -> kept... wait 0.25 < 0.3
    };
    entries[4] = entry("e", 0.5, 1.0);
    ForgeReport report;
    auto kept = filter_duration(entries, 0.3, 2.2, &report);
    REQUIRE(kept.size() == 3);
    CHECK(kept[0].word == "a");
    CHECK(kept[1].word == "c");
    CHECK(kept[2].word == "e");
    CHECK(report.duration_dropped == 2);

    SECTION("hand-enumerated mixed list of five keeps two") {
        std::vector<ManifestEntry> five = {
            entry("p", 0.0, 0.1), entry("q", 0.0, 0.5), entry("r", 0.0, 3.0),
            entry("s", 0.0, 1.9), entry("t", 0.0, 0.05),
        };
        CHECK(filter_duration(five, 0.3, 2.2).size() == 2);
    }
}

TEST_CASE("morphological overlap removal", "[forge]") {
    SECTION("plural pair keeps exactly one") {
        for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
            Rng rng(seed);
            auto out = remove_morphological_overlaps({"play", "plays"}, {"s"}, {}, rng);
            REQUIRE(out.size() == 1);
            CHECK((out[0] == "play" || out[0] == "plays"));
        }
    }

    SECTION("negative-prefix pair keeps exactly one") {
        Rng rng(9);
        auto out = remove_morphological_overlaps({"happy", "unhappy"}, {}, {"un"}, rng);
        REQUIRE(out.size() == 1);
    }

    SECTION("unrelated words both survive") {
        Rng rng(5);
        auto out = remove_morphological_overlaps({"cat", "dog"}, {"s", "es", "ed", "d", "ing"},
                                                 {"un", "in", "non"}, rng);
        CHECK(out.size() == 2);
    }

    SECTION("deterministic per seed") {
        std::vector<std::string> vocab = {"walk", "walks", "walked", "walking", "do", "undo"};
        Rng r1(7), r2(7), r3(8);
        auto a = remove_morphological_overlaps(vocab, {"s", "ed", "ing"}, {"un"}, r1);
        auto b = remove_morphological_overlaps(vocab, {"s", "ed", "ing"}, {"un"}, r2);
        CHECK(a == b);
        auto c = remove_morphological_overlaps(vocab, {"s", "ed", "ing"}, {"un"}, r3);
        (void)c;  // may or may not differ; only determinism per seed is contractual
    }

    SECTION("no related pair survives any vocabulary") {
        const std::vector<std::string> suffixes = {"s", "es", "ed", "d", "ing"};
        const std::vector<std::string> prefixes = {"un", "in", "non"};
        Rng gen(101);
        for (int trial = 0; trial < 30; ++trial) {
            auto vocab = synth_vocab(30, gen);
            // add related forms to make pairs likely
            const std::size_t extra = vocab.size() / 3;
            for (std::size_t i = 0; i < extra; ++i) {
                if (i % 3 == 0) vocab.push_back(vocab[i] + "s");
                else if (i % 3 == 1) vocab.push_back(vocab[i] + "ing");
                else vocab.push_back("un" + vocab[i]);
            }
            Rng rng(trial);
            auto out = remove_morphological_overlaps(vocab, suffixes, prefixes, rng);
            std::set<std::string> kept(out.begin(), out.end());
            for (const auto& w : kept) {
                for (const auto& s : suffixes) {
                    REQUIRE(kept.count(w + s) == 0);
                }
                for (const auto& p : prefixes) {
                    REQUIRE(kept.count(p + w) == 0);
                }
            }
        }
    }
}

TEST_CASE("keyword exclusion", "[forge]") {
    SECTION("excluding 8 of 1000 leaves 992") {
        std::vector<std::string> vocab;
        for (int i = 0; i < 1000; ++i) vocab.push_back("w" + std::to_string(1000 + i));
        std::vector<std::string> excl(vocab.begin(), vocab.begin() + 8);
        auto out = exclude_keywords(vocab, excl);
        CHECK(out.size() == 992);
    }

    SECTION("empty exclusion list is the identity") {
        std::vector<std::string> vocab = {"a", "b", "c"};
        CHECK(exclude_keywords(vocab, {}) == vocab);
    }

    SECTION("absent word is a logged no-op") {
        ForgeReport report;
        auto out = exclude_keywords({"a", "b"}, {"zebra"}, &report);
        CHECK(out.size() == 2);
        REQUIRE_FALSE(report.drop_log.empty());
        CHECK(report.drop_log[0].find("no-op") != std::string::npos);
    }
}

TEST_CASE("balanced and imbalanced selection", "[forge]") {
    auto make_entries = [](std::map<std::string, int> counts) {
        std::vector<ManifestEntry> out;
        for (const auto& [word, n] : counts) {
            for (int i = 0; i < n; ++i) out.push_back(entry(word, i, i + 0.5));
        }
        return out;
    };

    SECTION("counts {a:5, b:3, c:1}, top 2, S=3 gives {a:3, b:3}") {
        Rng rng(1);
        auto sel = balance_topk(make_entries({{"a", 5}, {"b", 3}, {"c", 1}}), 2, 3, rng);
        REQUIRE(sel.size() == 2);
        CHECK(sel.at("a").size() == 3);
        CHECK(sel.at("b").size() == 3);
    }

    SECTION("empty input is an error") {
        Rng rng(1);
        CHECK_THROWS_AS(balance_topk({}, 2, 3, rng), DataError);
        CHECK_THROWS_AS(emit_imbalanced({}, 2), DataError);
    }

    SECTION("shortfall is reported when too few keywords qualify") {
        Rng rng(1);
        ForgeReport report;
        auto sel = balance_topk(make_entries({{"a", 5}, {"b", 2}}), 3, 4, rng, &report);
        CHECK(sel.size() == 1);
        CHECK(report.shortfall == 2);
    }

    SECTION("imbalanced keeps raw counts") {
        auto sel = emit_imbalanced(make_entries({{"a", 5}, {"b", 3}}), 2);
        CHECK(sel.at("a").size() == 5);
        CHECK(sel.at("b").size() == 3);
    }

    SECTION("keyword sets agree when every keyword has at least S samples") {
        Rng gen(44);
        for (int trial = 0; trial < 20; ++trial) {
            std::map<std::string, int> counts;
            auto vocab = synth_vocab(12, gen);
            for (const auto& w : vocab) counts[w] = 4 + static_cast<int>(gen.uniform_int(10));
            auto entries = make_entries(counts);
            Rng r1(trial);
            auto bal = balance_topk(entries, 6, 4, r1, nullptr);
            auto imb = emit_imbalanced(entries, 6);
            std::set<std::string> a, b;
            for (const auto& [w, v] : bal) a.insert(w);
            for (const auto& [w, v] : imb) b.insert(w);
            REQUIRE(a == b);
            for (const auto& [w, v] : bal) REQUIRE(v.size() == 4);
        }
    }

    SECTION("ranking ties break lexicographically") {
        ForgeReport report;
        auto sel = emit_imbalanced(make_entries({{"zz", 3}, {"aa", 3}, {"mm", 5}}), 2, &report);
        REQUIRE(report.final_keywords.size() == 2);
        CHECK(report.final_keywords[0] == "mm");
        CHECK(report.final_keywords[1] == "aa");
        (void)sel;
    }
}

TEST_CASE("segment cutting", "[forge]") {
    TempDir dir("cut");
    // one 2-second utterance at 16 kHz
    std::vector<double> utt(32000);
    for (std::size_t i = 0; i < utt.size(); ++i) {
        utt[i] = 0.4 * std::sin(2.0 * kPi * 440.0 * i / 16000.0);
    }
    save_wav(dir / "audio" / "u.wav", utt);

    SECTION("(0.5 s, 1.0 s) cuts exactly 8000 samples") {
        ForgeSelection sel;
        sel["word"] = {entry("word", 0.5, 1.0, "u1", "u.wav")};
        cut_segments(sel, dir / "audio", dir / "out", nullptr);
        Waveform clip = load_wav(dir / "out" / "auxiliary" / "train" / "word" / "u1_0.wav");
        CHECK(clip.size() == 8000);
    }

    SECTION("segments beyond the file end are logged and skipped") {
        ForgeSelection sel;
        sel["word"] = {entry("word", 1.9, 2.5, "u2", "u.wav"), entry("word", 0.0, 0.5, "u3", "u.wav")};
        ForgeReport report;
        cut_segments(sel, dir / "audio", dir / "out2", &report);
        REQUIRE(report.cut_errors.size() == 1);
        CHECK(report.cut_errors[0].find("u2") != std::string::npos);
        CHECK(std::filesystem::exists(dir / "out2" / "auxiliary" / "train" / "word" / "u3_1.wav"));
    }

    SECTION("missing audio is logged, pipeline continues") {
        ForgeSelection sel;
        sel["w"] = {entry("w", 0.0, 0.5, "u4", "missing.wav")};
        ForgeReport report;
        cut_segments(sel, dir / "audio", dir / "out3", &report);
        CHECK(report.cut_errors.size() == 1);
    }
}

TEST_CASE("forge pipeline end to end on a synthetic corpus", "[forge][pipeline]") {
    static TempDir dir("forge_e2e");
    static SynthResult corpus = [] {
        SynthSpec s;
        s.seed = 21;
        s.train_keywords = 6;
        s.val_keywords = 2;
        s.test_keywords = 4;
        s.clips_per_keyword = 6;
        s.aux_keywords = 12;
        s.aux_top_occurrences = 16;
        s.aux_min_occurrences = 6;
        s.morph_variant_pairs = 2;
        s.contaminant_occurrences = 4;
        s.junk_occurrences = 5;
        s.noise_files = 1;
        s.noise_seconds = 1.0;
        return synth_build(s, dir / "corpus");
    }();

    ForgeConfig cfg;
    cfg.top_k = 8;
    cfg.samples_per_keyword = 6;
    cfg.exclusion_list = corpus.test_keywords;
    cfg.seed = 5;

    SECTION("balanced run: conservation, exclusion, exact counts") {
        ForgeReport report =
            run_forge(corpus.manifest_path, corpus.root, dir / "balanced", cfg);

        CHECK(report.input_entries == report.after_duration + report.duration_dropped);
        CHECK(report.after_duration == report.after_morph + report.morph_dropped_entries);
        CHECK(report.after_morph == report.after_exclusion + report.exclusion_dropped_entries);
        CHECK(report.after_exclusion == report.emitted_entries + report.selection_dropped);
        CHECK(report.duration_dropped >= 5);  // the junk words

        std::set<std::string> test_kw(corpus.test_keywords.begin(), corpus.test_keywords.end());
        for (const auto& kw : report.final_keywords) {
            CHECK(test_kw.count(kw) == 0);
            CHECK(report.per_keyword_counts.at(kw) == 6);
        }

        // morphological variants: never both of (w, w+s)
        std::set<std::string> kept(report.final_keywords.begin(), report.final_keywords.end());
        for (const auto& w : kept) CHECK(kept.count(w + "s") == 0);

        Dataset ds = Dataset::load(dir / "balanced");
        ClassView view = ClassView::of(ds, Domain::Auxiliary, Split::Train);
        CHECK(view.n_classes() == report.final_keywords.size());
    }

    SECTION("re-running over its own output changes nothing") {
        run_forge(corpus.manifest_path, corpus.root, dir / "idem", cfg);
        auto snapshot = [&] {
            std::map<std::string, std::string> files;
            for (const auto& e :
                 std::filesystem::recursive_directory_iterator(dir / "idem")) {
                if (!e.is_regular_file()) continue;
                std::ifstream f(e.path(), std::ios::binary);
                files[e.path().string()] =
                    std::string((std::istreambuf_iterator<char>(f)), {});
            }
            return files;
        };
        auto before = snapshot();
        run_forge(corpus.manifest_path, corpus.root, dir / "idem", cfg);
        auto after = snapshot();
        REQUIRE(before.size() == after.size());
        for (const auto& [path, bytes] : before) {
            REQUIRE(after.at(path) == bytes);
        }
    }

    SECTION("imbalanced variant keeps the skew") {
        ForgeConfig imb = cfg;
        imb.balanced = false;
        ForgeReport report =
            run_forge(corpus.manifest_path, corpus.root, dir / "imb", imb, true);
        std::size_t mx = 0, mn = SIZE_MAX;
        for (const auto& [w, n] : report.per_keyword_counts) {
            mx = std::max(mx, n);
            mn = std::min(mn, n);
        }
        CHECK(mx > mn);  // zipf plan showed through
    }
}
