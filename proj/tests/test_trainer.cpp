#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "pkws/synth.hpp"
#include "pkws/trainer.hpp"
#include "test_util.hpp"

using namespace pkws;
using pkws_test::TempDir;

namespace {

/// Small corpus + small encoder shared across the trainer tests.
struct Fixture {
    TempDir dir{"trainer"};
    Dataset ds;

    Fixture() {
        SynthSpec s;
        s.seed = 33;
        s.train_keywords = 6;
        s.val_keywords = 6;
        s.test_keywords = 6;
        s.clips_per_keyword = 8;
        s.aux_keywords = 8;
        s.aux_top_occurrences = 10;
        s.aux_min_occurrences = 4;
        s.morph_variant_pairs = 1;
        s.contaminant_occurrences = 2;
        s.junk_occurrences = 3;
        s.noise_files = 2;
        s.noise_seconds = 1.0;
        synth_build(s, dir / "corpus");
        ds = Dataset::load(dir / "corpus");
    }

    static TrainConfig config(Strategy strategy) {
        TrainConfig cfg;
        cfg.strategy = strategy;
        cfg.epochs = 2;
        cfg.episodes_per_epoch = 4;
        cfg.episode = {3, 2, 2, 3};
        cfg.aux_batch = 8;
        cfg.lambda = 1.0;
        cfg.val_episodes = 3;
        cfg.val_m_query = 2;
        cfg.val_k_shot = 2;
        cfg.pret_epochs = 1;
        cfg.encoder.channels = {2, 4};
        cfg.encoder.embed_dim = 16;
        cfg.encoder.budget_label.clear();
        cfg.encoder.budget_params = 0;
        return cfg;
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("training is deterministic per seed", "[trainer]") {
    auto& fx = fixture();
    TrainConfig cfg = Fixture::config(Strategy::Baseline);
    TrainResult a = train(cfg, fx.ds, nullptr, 7);
    TrainResult b = train(cfg, fx.ds, nullptr, 7);
    REQUIRE(a.best.tensors.size() == b.best.tensors.size());
    for (const auto& [name, t] : a.best.tensors) {
        CHECK(t.bit_equal(b.best.tensors.at(name)));
    }
    CHECK(a.best_epoch == b.best_epoch);

    TrainResult c = train(cfg, fx.ds, nullptr, 8);
    CHECK_FALSE(a.best.tensors.at("enc.conv0.w").bit_equal(c.best.tensors.at("enc.conv0.w")));
}

TEST_CASE("auxsl with lambda zero replays the baseline bit-for-bit", "[trainer]") {
    auto& fx = fixture();
    TrainConfig base_cfg = Fixture::config(Strategy::Baseline);
    TrainConfig aux_cfg = Fixture::config(Strategy::AuxSL);
    aux_cfg.lambda = 0.0;

    TrainResult base = train(base_cfg, fx.ds, nullptr, 21);
    TrainResult aux = train(aux_cfg, fx.ds, &fx.ds, 21);

    CHECK(aux.aux_clips_consumed == 0);
    for (const auto& [name, t] : base.best.tensors) {
        if (name.rfind("cls.", 0) == 0 || name.rfind("adam.m.cls", 0) == 0 ||
            name.rfind("adam.v.cls", 0) == 0) {
            continue;  // the classifier exists only on the auxsl side
        }
        INFO(name);
        REQUIRE(aux.best.tensors.count(name) == 1);
        CHECK(t.bit_equal(aux.best.tensors.at(name)));
    }
}

TEST_CASE("auxsl consumes exactly one auxiliary batch per episode", "[trainer]") {
    auto& fx = fixture();
    TrainConfig cfg = Fixture::config(Strategy::AuxSL);
    TrainResult r = train(cfg, fx.ds, &fx.ds, 3);
    CHECK(r.aux_clips_consumed ==
          static_cast<std::uint64_t>(cfg.epochs) * cfg.episodes_per_epoch * cfg.aux_batch);
    CHECK(r.last_bundle.l_sl.has_value());
    CHECK(r.last_bundle.l_total ==
          Catch::Approx(r.last_bundle.l_fsl + cfg.lambda * *r.last_bundle.l_sl).margin(1e-12));
}

TEST_CASE("strategies requiring auxiliary data refuse to run without it", "[trainer]") {
    auto& fx = fixture();
    for (Strategy s : {Strategy::AuxSL, Strategy::All, Strategy::PreT}) {
        TrainConfig cfg = Fixture::config(s);
        CHECK_THROWS_AS(train(cfg, fx.ds, nullptr, 1), ConfigError);
    }
}

TEST_CASE("all and pret strategies run end to end", "[trainer]") {
    auto& fx = fixture();

    SECTION("all pools both domains") {
        TrainConfig cfg = Fixture::config(Strategy::All);
        TrainResult r = train(cfg, fx.ds, &fx.ds, 5);
        CHECK(r.best_epoch >= 0);
        CHECK(std::isfinite(r.log.back().train_loss));
    }

    SECTION("pret pre-trains then runs the baseline recipe") {
        TrainConfig cfg = Fixture::config(Strategy::PreT);
        std::ostringstream log;
        TrainResult r = train(cfg, fx.ds, &fx.ds, 5, &log);
        CHECK(r.best_epoch >= 0);
        CHECK(log.str().find("pret stage 1") != std::string::npos);
    }
}

TEST_CASE("training log format", "[trainer]") {
    auto& fx = fixture();
    TrainConfig cfg = Fixture::config(Strategy::Baseline);
    std::ostringstream log;
    train(cfg, fx.ds, nullptr, 11, &log);
    std::istringstream in(log.str());
    std::string line;
    bool saw_header = false;
    int data_lines = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') continue;  // timestamps live only on comment lines
        if (line == "epoch,lr,train_loss,val_acc,val_auroc") {
            saw_header = true;
            continue;
        }
        ++data_lines;
        CHECK(std::count(line.begin(), line.end(), ',') == 4);
    }
    CHECK(saw_header);
    CHECK(data_lines == cfg.epochs);
}

TEST_CASE("evaluation protocol", "[trainer]") {
    auto& fx = fixture();
    TrainConfig cfg = Fixture::config(Strategy::Baseline);
    TrainResult r = train(cfg, fx.ds, nullptr, 13);

    EvalConfig ec;
    ec.n_episodes = 20;
    ec.k_shot = 2;
    ec.m_query = 3;
    ec.n_closed = 3;
    ec.n_open = 2;
    ec.seeds = {1, 2, 3};

    SECTION("fields are in range and deterministic") {
        EvalReport a = evaluate(r.best, fx.ds, ec);
        EvalReport b = evaluate(r.best, fx.ds, ec);
        CHECK(a.acc_mean >= 0.0);
        CHECK(a.acc_mean <= 1.0);
        CHECK(a.auroc_mean >= 0.0);
        CHECK(a.auroc_mean <= 1.0);
        CHECK(a.acc_mean == b.acc_mean);
        CHECK(a.auroc_mean == b.auroc_mean);
        CHECK(a.csv_row() == b.csv_row());
        CHECK(a.n_episodes == 20);
        CHECK(a.seeds.size() == 3);
    }

    SECTION("train/test keyword overlap is rejected") {
        Checkpoint tainted = r.best;
        auto test_kws = fx.ds.keywords_of(Domain::InDomain, Split::Test, false);
        tainted.metadata["train_keywords"] += ";" + test_kws.front();
        CHECK_THROWS_WITH(evaluate(tainted, fx.ds, ec),
                          Catch::Matchers::ContainsSubstring(test_kws.front()));
    }

    SECTION("the shared silence category is exempt from the overlap guard") {
        CHECK(r.best.metadata.at("train_keywords").find(kSilenceKeyword) != std::string::npos);
        CHECK_NOTHROW(evaluate(r.best, fx.ds, ec));
    }
}

TEST_CASE("compare_strategies each row and relative improvement", "[trainer]") {
    auto& fx = fixture();
    std::vector<CompareVariant> variants;
    variants.push_back({"baseline", Fixture::config(Strategy::Baseline), nullptr});

    EvalConfig ec;
    ec.n_episodes = 10;
    ec.m_query = 3;
    ec.n_closed = 3;
    ec.n_open = 2;

    SECTION("single-strategy table has one row per shot count") {
        CompareTable t = compare_strategies(variants, fx.ds, ec, {1}, {2});
        REQUIRE(t.rows.size() == 1);
        CHECK(t.rows[0].label == "baseline");
        CHECK(t.rows[0].rel_improvement_acc == 0.0);
        CHECK(t.text().find("not reproducible") != std::string::npos);
    }

    SECTION("identical run reproduces identical rows") {
        CompareTable a = compare_strategies(variants, fx.ds, ec, {1, 2}, {2});
        CompareTable b = compare_strategies(variants, fx.ds, ec, {1, 2}, {2});
        REQUIRE(a.rows.size() == b.rows.size());
        for (std::size_t i = 0; i < a.rows.size(); ++i) {
            CHECK(a.rows[i].acc_mean == b.rows[i].acc_mean);
            CHECK(a.rows[i].auroc_mean == b.rows[i].auroc_mean);
        }
    }
}
