#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "pkws/dataset.hpp"
#include "pkws/episodes.hpp"
#include "pkws/features.hpp"
#include "pkws/manifest.hpp"
#include "pkws/synth.hpp"
#include "test_util.hpp"

using namespace pkws;
using pkws_test::TempDir;

namespace {

/// In-memory dataset with fake paths, for sampler statistics (audio unused).
Dataset fake_dataset(int n_classes, int clips_per_class) {
    Dataset ds;
    for (int k = 0; k < n_classes; ++k) {
        ds.keywords.push_back("kw" + std::to_string(k));
        for (int c = 0; c < clips_per_class; ++c) {
            ds.clips.push_back({"x/" + std::to_string(k) + "_" + std::to_string(c) + ".wav", k,
                                Domain::InDomain, Split::Train});
        }
    }
    return ds;
}

SynthSpec small_spec(std::uint64_t seed = 11) {
    SynthSpec s;
    s.seed = seed;
    s.train_keywords = 10;
    s.val_keywords = 4;
    s.test_keywords = 4;
    s.clips_per_keyword = 12;
    s.aux_keywords = 10;
    s.aux_top_occurrences = 18;
    s.aux_min_occurrences = 5;
    s.morph_variant_pairs = 2;
    s.contaminant_occurrences = 3;
    s.junk_occurrences = 6;
    s.noise_files = 2;
    s.noise_seconds = 2.0;
    return s;
}

}  // namespace

TEST_CASE("manifest ingestion", "[data][manifest]") {
    TempDir dir("manifest");

    SECTION("valid rows parse, words are lower-cased") {
        std::ofstream f(dir / "m.csv");
        f << "utterance_id,audio_path,word,start_s,end_s\n"
          << "u1,a.wav,The,0.10,0.55\n"
          << "u2,a.wav,cat,0.60,1.10\n"
          << "u3,b.wav,Dog,0.00,0.40\n";
        f.close();
        auto ingest = ingest_manifest(dir / "m.csv");
        REQUIRE(ingest.entries.size() == 3);
        CHECK(ingest.entries[0].word == "the");
        CHECK(ingest.entries[2].word == "dog");
        CHECK(ingest.rejected.empty());
    }

    SECTION("rows with end <= start are rejected and reported") {
        std::ofstream f(dir / "r.csv");
        f << "utterance_id,audio_path,word,start_s,end_s\n"
          << "u1,a.wav,good,0.1,0.5\n"
          << "u2,a.wav,bad,0.9,0.4\n";
        f.close();
        auto ingest = ingest_manifest(dir / "r.csv");
        CHECK(ingest.entries.size() == 1);
        REQUIRE(ingest.rejected.size() == 1);
        CHECK(ingest.rejected[0].find("line 3") != std::string::npos);
        CHECK(ingest.rejected[0].find("bad") != std::string::npos);
    }

    SECTION("malformed rows abort with the line number") {
        std::ofstream f(dir / "bad.csv");
        f << "utterance_id,audio_path,word,start_s,end_s\n"
          << "u1,a.wav,ok,0.1,0.5\n"
          << "u2,a.wav,oops,zero,0.5\n";
        f.close();
        CHECK_THROWS_WITH(ingest_manifest(dir / "bad.csv"),
                          Catch::Matchers::ContainsSubstring(":3:"));
    }

    SECTION("wrong header aborts") {
        std::ofstream f(dir / "h.csv");
        f << "id,path,word,a,b\nu1,a.wav,x,0,1\n";
        f.close();
        CHECK_THROWS_AS(ingest_manifest(dir / "h.csv"), DataError);
    }

    SECTION("write/ingest round trip") {
        std::vector<ManifestEntry> entries = {{"u1", "a.wav", "alpha", 0.25, 0.75},
                                              {"u2", "a.wav", "beta", 1.0, 1.5}};
        write_manifest(dir / "w.csv", entries);
        auto back = ingest_manifest(dir / "w.csv");
        REQUIRE(back.entries.size() == 2);
        CHECK(back.entries[0].word == "alpha");
        CHECK(back.entries[0].start_s == Catch::Approx(0.25));
    }
}

TEST_CASE("episode sampling contract", "[data][episodes]") {
    Dataset ds = fake_dataset(15, 30);
    ClassView view = ClassView::of(ds, Domain::InDomain, Split::Train);
    REQUIRE(view.n_classes() == 15);

    SECTION("paper-shaped episode: 25 supports, 50 queries, open label N") {
        Rng rng(1);
        EpisodeSpec spec{5, 5, 5, 5};
        Episode ep = sample_episode(view, spec, rng);
        REQUIRE(ep.support.size() == 25);
        REQUIRE(ep.queries.size() == 50);
        for (const auto& s : ep.support) {
            CHECK(s.label >= 0);
            CHECK(s.label < 5);
        }
        int open_queries = 0;
        for (const auto& q : ep.queries) {
            CHECK(q.label >= 0);
            CHECK(q.label <= 5);
            if (q.label == 5) ++open_queries;
        }
        CHECK(open_queries == 25);
    }

    SECTION("degenerate open-free episode") {
        Rng rng(2);
        EpisodeSpec spec{2, 0, 1, 1};
        Episode ep = sample_episode(view, spec, rng);
        CHECK(ep.support.size() == 2);
        CHECK(ep.queries.size() == 2);
        for (const auto& q : ep.queries) CHECK(q.label < 2);
    }

    SECTION("supports and queries are disjoint and open classes never support") {
        Rng rng(3);
        EpisodeSpec spec{5, 5, 3, 4};
        for (int trial = 0; trial < 10000; ++trial) {
            Episode ep = sample_episode(view, spec, rng);
            std::set<std::size_t> sup, qry;
            for (const auto& s : ep.support) sup.insert(s.clip_index);
            for (const auto& q : ep.queries) qry.insert(q.clip_index);
            REQUIRE(sup.size() == ep.support.size());
            for (std::size_t c : qry) REQUIRE(sup.count(c) == 0);
            // closed/open classes are disjoint draws
            std::set<int> chosen(ep.view_classes.begin(), ep.view_classes.end());
            REQUIRE(chosen.size() == 10);
        }
    }

    SECTION("class selection statistics are uniform") {
        Rng rng(7);
        EpisodeSpec spec{5, 5, 5, 5};
        const int trials = 10000;
        std::vector<int> in_episode(15, 0), as_closed(15, 0);
        for (int t = 0; t < trials; ++t) {
            Episode ep = sample_episode(view, spec, rng);
            for (std::size_t i = 0; i < ep.view_classes.size(); ++i) {
                ++in_episode[static_cast<std::size_t>(ep.view_classes[i])];
                if (i < 5) ++as_closed[static_cast<std::size_t>(ep.view_classes[i])];
            }
        }
        // P(selected) = 10/15, P(closed) = 5/15; 3-sigma binomial windows
        const double p_sel = 10.0 / 15.0, p_cls = 5.0 / 15.0;
        const double sd_sel = std::sqrt(trials * p_sel * (1 - p_sel));
        const double sd_cls = std::sqrt(trials * p_cls * (1 - p_cls));
        for (int k = 0; k < 15; ++k) {
            CHECK(std::fabs(in_episode[k] - trials * p_sel) <= 3.0 * sd_sel);
            CHECK(std::fabs(as_closed[k] - trials * p_cls) <= 3.0 * sd_cls);
        }
    }

    SECTION("identical rng state reproduces the episode") {
        Rng r1(42), r2(42);
        EpisodeSpec spec{5, 5, 5, 5};
        Episode a = sample_episode(view, spec, r1);
        Episode b = sample_episode(view, spec, r2);
        REQUIRE(a.support.size() == b.support.size());
        for (std::size_t i = 0; i < a.support.size(); ++i) {
            CHECK(a.support[i].clip_index == b.support[i].clip_index);
        }
    }

    SECTION("shortfalls are reported by name") {
        Dataset small = fake_dataset(6, 4);
        ClassView v = ClassView::of(small, Domain::InDomain, Split::Train);
        Rng rng(1);
        EpisodeSpec wide{5, 5, 5, 5};
        CHECK_THROWS_WITH(sample_episode(v, wide, rng),
                          Catch::Matchers::ContainsSubstring("need 10 classes"));
        EpisodeSpec deep{5, 1, 3, 4};
        CHECK_THROWS_WITH(sample_episode(v, deep, rng),
                          Catch::Matchers::ContainsSubstring("needs 7"));
        EpisodeSpec bad{1, 0, 1, 1};
        CHECK_THROWS_AS(sample_episode(v, bad, rng), ConfigError);
    }
}

TEST_CASE("auxiliary batch sampling", "[data][episodes]") {
    SECTION("batch size is honored") {
        Dataset ds = fake_dataset(8, 10);
        ClassView view = ClassView::of(ds, Domain::InDomain, Split::Train);
        Rng rng(5);
        AuxBatch b = sample_aux_batch(view, 64, rng);
        CHECK(b.clip_indices.size() == 64);
        CHECK(b.labels.size() == 64);
    }

    SECTION("single-clip dataset always returns that clip") {
        Dataset ds = fake_dataset(1, 1);
        ClassView view = ClassView::of(ds, Domain::InDomain, Split::Train);
        Rng rng(5);
        AuxBatch b = sample_aux_batch(view, 3, rng);
        for (std::size_t idx : b.clip_indices) CHECK(idx == 0);
    }

    SECTION("label histogram is uniform within 3 sigma over 100k draws") {
        const int classes = 10, per_class = 20;
        Dataset ds = fake_dataset(classes, per_class);
        ClassView view = ClassView::of(ds, Domain::InDomain, Split::Train);
        Rng rng(17);
        std::vector<int> hist(classes, 0);
        const int draws = 100000;
        for (int i = 0; i < draws / 50; ++i) {
            AuxBatch b = sample_aux_batch(view, 50, rng);
            for (int lb : b.labels) ++hist[static_cast<std::size_t>(lb)];
        }
        const double p = 1.0 / classes;
        const double sd = std::sqrt(draws * p * (1 - p));
        for (int k = 0; k < classes; ++k) {
            CHECK(std::fabs(hist[k] - draws * p) <= 3.0 * sd);
        }
    }

    SECTION("empty view is an error") {
        Dataset ds = fake_dataset(2, 3);
        ClassView empty = ClassView::of(ds, Domain::Auxiliary, Split::Train);
        Rng rng(1);
        CHECK_THROWS_AS(sample_aux_batch(empty, 8, rng), DataError);
    }
}

TEST_CASE("synthetic corpus construction", "[data][synth]") {
    static TempDir dir("synth");
    static SynthResult res = synth_build(small_spec(), dir / "corpus");
    static Dataset ds = Dataset::load(dir / "corpus");

    SECTION("split shapes and silence category") {
        CHECK(res.train_keywords.size() == 10);
        CHECK(res.val_keywords.size() == 4);
        CHECK(res.test_keywords.size() == 4);
        for (Split s : {Split::Train, Split::Val, Split::Test}) {
            auto kws = ds.keywords_of(Domain::InDomain, s);
            CHECK(std::find(kws.begin(), kws.end(), kSilenceKeyword) != kws.end());
        }
    }

    SECTION("vocabularies are pairwise disjoint") {
        auto train = ds.keywords_of(Domain::InDomain, Split::Train, false);
        auto test = ds.keywords_of(Domain::InDomain, Split::Test, false);
        auto aux = ds.keywords_of(Domain::Auxiliary, Split::Train, false);
        std::set<std::string> t(train.begin(), train.end());
        for (const auto& k : test) CHECK(t.count(k) == 0);
        std::set<std::string> te(test.begin(), test.end());
        for (const auto& k : aux) {
            CHECK(t.count(k) == 0);
            CHECK(te.count(k) == 0);
        }
    }

    SECTION("the manifest exercises duration filtering and contaminants") {
        auto ingest = ingest_manifest(res.manifest_path);
        CHECK(ingest.entries.size() == res.manifest_rows);
        int junk = 0, contaminated = 0;
        std::set<std::string> test_kw(res.test_keywords.begin(), res.test_keywords.end());
        for (const auto& e : ingest.entries) {
            if (e.word == "uh") {
                ++junk;
                CHECK(e.duration() < 0.3);
            } else {
                CHECK(e.duration() >= 0.3);
                CHECK(e.duration() <= 2.2);
            }
            if (test_kw.count(e.word)) ++contaminated;
        }
        CHECK(junk == 6);
        CHECK(contaminated == 3);
    }

    SECTION("same seed reproduces identical bytes") {
        TempDir dir2("synth2");
        SynthResult res2 = synth_build(small_spec(), dir2 / "corpus");
        auto read = [](const std::filesystem::path& p) {
            std::ifstream f(p, std::ios::binary);
            return std::string((std::istreambuf_iterator<char>(f)), {});
        };
        Dataset ds2 = Dataset::load(dir2 / "corpus");
        REQUIRE(ds.clips.size() == ds2.clips.size());
        for (std::size_t i = 0; i < ds.clips.size(); i += 37) {
            CHECK(read(dir / "corpus" / ds.clips[i].rel_path) ==
                  read(dir2 / "corpus" / ds2.clips[i].rel_path));
        }
        CHECK(read(res.manifest_path) == read(res2.manifest_path));
    }

    SECTION("a different seed changes the audio") {
        TempDir dir3("synth3");
        SynthResult res3 = synth_build(small_spec(77), dir3 / "corpus");
        std::ifstream a(dir / "corpus" / "in_domain" / "train" / res.train_keywords[0] /
                            "clip_000.wav",
                        std::ios::binary);
        std::ifstream b(dir3 / "corpus" / "in_domain" / "train" / res3.train_keywords[0] /
                            "clip_000.wav",
                        std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), {});
        std::string sb((std::istreambuf_iterator<char>(b)), {});
        CHECK(sa != sb);
    }

    SECTION("raw log-mel nearest-centroid separates 10 train keywords above 60%") {
        LogMelExtractor extract;
        ClassView view = ClassView::of(ds, Domain::InDomain, Split::Train);
        std::vector<std::vector<double>> centroids;
        std::vector<std::vector<std::vector<double>>> heldout;  // class -> clips -> mean vector
        for (const auto& cls : view.classes) {
            if (cls.name == kSilenceKeyword) continue;
            std::vector<double> centroid(40, 0.0);
            std::vector<std::vector<double>> held;
            for (std::size_t i = 0; i < cls.clip_indices.size(); ++i) {
                FeatureMap fm = extract(ds.waveform(cls.clip_indices[i]));
                std::vector<double> mean(40, 0.0);
                for (std::size_t b = 0; b < 40; ++b) {
                    for (std::size_t t = 0; t < fm.frames; ++t) mean[b] += fm.at(b, t);
                    mean[b] /= static_cast<double>(fm.frames);
                }
                if (i < cls.clip_indices.size() / 2) {
                    for (std::size_t b = 0; b < 40; ++b) centroid[b] += mean[b];
                } else {
                    held.push_back(std::move(mean));
                }
            }
            const double inv = 2.0 / static_cast<double>(cls.clip_indices.size());
            for (double& v : centroid) v *= inv;
            centroids.push_back(std::move(centroid));
            heldout.push_back(std::move(held));
        }
        REQUIRE(centroids.size() == 10);
        int correct = 0, total = 0;
        for (std::size_t k = 0; k < heldout.size(); ++k) {
            for (const auto& q : heldout[k]) {
                std::size_t best = 0;
                double best_d = 1e300;
                for (std::size_t c = 0; c < centroids.size(); ++c) {
                    double d = 0;
                    for (std::size_t b = 0; b < 40; ++b) {
                        d += (q[b] - centroids[c][b]) * (q[b] - centroids[c][b]);
                    }
                    if (d < best_d) {
                        best_d = d;
                        best = c;
                    }
                }
                correct += best == k ? 1 : 0;
                ++total;
            }
        }
        INFO("nearest-centroid accuracy " << correct << "/" << total);
        CHECK(static_cast<double>(correct) / total > 0.6);
    }

    SECTION("noise bank loads") {
        auto bank = load_noise_bank(dir / "corpus");
        REQUIRE(bank.size() == 2);
        CHECK(bank[0].size() == 32000);
    }

    SECTION("index.json round trip matches the scan") {
        Dataset scanned = [&] {
            std::filesystem::rename(dir / "corpus" / "index.json", dir / "idx.bak");
            Dataset d = Dataset::load(dir / "corpus");
            std::filesystem::rename(dir / "idx.bak", dir / "corpus" / "index.json");
            return d;
        }();
        REQUIRE(scanned.clips.size() == ds.clips.size());
        std::set<std::string> a, b;
        for (const auto& c : ds.clips) a.insert(c.rel_path);
        for (const auto& c : scanned.clips) b.insert(c.rel_path);
        CHECK(a == b);
    }
}
