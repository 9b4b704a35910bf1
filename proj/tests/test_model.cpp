#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "pkws/checkpoint.hpp"
#include "pkws/gradcheck.hpp"
#include "pkws/model.hpp"
#include "pkws/rng.hpp"
#include "test_util.hpp"

using namespace pkws;
using pkws_test::TempDir;

namespace {

FeatureMap random_map(std::size_t bins, std::size_t frames, Rng& rng) {
    FeatureMap fm;
    fm.bins = bins;
    fm.frames = frames;
    fm.values.resize(bins * frames);
    for (double& v : fm.values) v = rng.uniform(-1.5, 1.5);
    return fm;
}

}  // namespace

TEST_CASE("named encoder configs realize their parameter budgets", "[model]") {
    EncoderConfig tiny = EncoderConfig::named("tiny");
    EncoderConfig base = EncoderConfig::named("base");
    EncoderConfig large = EncoderConfig::named("large");

    CHECK(tiny.param_count() >= 7400);
    CHECK(tiny.param_count() <= 11000);
    CHECK(base.within_budget());
    CHECK(large.within_budget());
    CHECK(tiny.param_count() < base.param_count());
    CHECK(base.param_count() < large.param_count());

    // realized counts are a pure function of the config
    CHECK(EncoderConfig::named("tiny").param_count() == tiny.param_count());

    Model m = Model::init(tiny, 0, 3);
    CHECK(m.encoder_param_count() == tiny.param_count());

    CHECK_THROWS_AS(EncoderConfig::named("huge"), ConfigError);
}

TEST_CASE("init is deterministic with zero dummy prototype and biases", "[model]") {
    Model a = Model::init(EncoderConfig::named("micro"), 5, 42);
    Model b = Model::init(EncoderConfig::named("micro"), 5, 42);
    Model c = Model::init(EncoderConfig::named("micro"), 5, 43);

    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, value] : a.params) {
        CHECK(value.bit_equal(b.params.at(name)));
    }
    CHECK_FALSE(a.params.at("enc.conv0.w").bit_equal(c.params.at("enc.conv0.w")));

    CHECK(a.dummy().bit_equal(Array(Shape{8}, 0.0)));
    CHECK(a.params.at("enc.conv0.b").bit_equal(Array(Shape{2}, 0.0)));
    CHECK(a.params.at("cls.b").bit_equal(Array(Shape{5}, 0.0)));
}

TEST_CASE("encode shape contract and determinism", "[model]") {
    EncoderConfig cfg = EncoderConfig::named("micro");
    Model m = Model::init(cfg, 0, 7);
    Rng rng(3);

    SECTION("single map gives (1, embed_dim)") {
        Array emb = encode_batch(m, {random_map(12, 16, rng)});
        REQUIRE(emb.shape() == Shape{1, 8});
    }

    SECTION("duplicated inputs give identical embedding rows") {
        FeatureMap fm = random_map(12, 16, rng);
        Array emb = encode_batch(m, {fm, fm});
        for (std::size_t d = 0; d < 8; ++d) CHECK(emb.at(0, d) == emb.at(1, d));
    }

    SECTION("zero input stays finite") {
        FeatureMap fm;
        fm.bins = 12;
        fm.frames = 16;
        fm.values.assign(12 * 16, 0.0);
        Array emb = encode_batch(m, {fm});
        CHECK(emb.all_finite());
    }

    SECTION("wrong input shape is rejected") {
        CHECK_THROWS_AS(encode_batch(m, {random_map(12, 20, rng)}), ShapeError);
    }

    SECTION("permuting the batch permutes embeddings bit-exactly") {
        FeatureMap f1 = random_map(12, 16, rng);
        FeatureMap f2 = random_map(12, 16, rng);
        FeatureMap f3 = random_map(12, 16, rng);
        Array fwd = encode_batch(m, {f1, f2, f3});
        Array rev = encode_batch(m, {f3, f1, f2});
        for (std::size_t d = 0; d < 8; ++d) {
            CHECK(fwd.at(0, d) == rev.at(1, d));
            CHECK(fwd.at(1, d) == rev.at(2, d));
            CHECK(fwd.at(2, d) == rev.at(0, d));
        }
    }
}

TEST_CASE("classify_aux is a plain affine map", "[model]") {
    EncoderConfig cfg = EncoderConfig::named("micro");

    SECTION("zero weights and biases give zero logits") {
        Model m = Model::init(cfg, 4, 1);
        m.params.at("cls.w") = Array(Shape{8, 4}, 0.0);
        Tape tape;
        auto p = register_params(tape, m, false);
        Var emb = tape.constant(Array(Shape{2, 8}, 0.7));
        const Array& logits = tape.value(classify_aux(tape, p, emb));
        CHECK(logits.bit_equal(Array(Shape{2, 4}, 0.0)));
    }

    SECTION("identity-like weight column copies the embedding coordinate") {
        Model m = Model::init(cfg, 3, 1);
        Array w(Shape{8, 3}, 0.0);
        w.at(5, 1) = 1.0;  // logit 1 reads embedding coordinate 5
        m.params.at("cls.w") = w;
        m.params.at("cls.b") = Array(Shape{3}, 0.0);
        Array emb(Shape{1, 8});
        Rng rng(9);
        for (std::size_t i = 0; i < 8; ++i) emb[i] = rng.uniform(-2, 2);
        Tape tape;
        auto p = register_params(tape, m, false);
        const Array& logits = tape.value(classify_aux(tape, p, tape.constant(emb)));
        CHECK(logits.at(0, 1) == emb[5]);
    }

    SECTION("embedding dim mismatch is rejected") {
        Model m = Model::init(cfg, 3, 1);
        Tape tape;
        auto p = register_params(tape, m, false);
        Var emb = tape.constant(Array(Shape{2, 9}, 0.0));
        CHECK_THROWS_AS(classify_aux(tape, p, emb), ShapeError);
    }

    SECTION("cross-entropy through the classifier matches finite differences") {
        Model m = Model::init(cfg, 4, 11);
        Rng rng(5);
        Array emb(Shape{3, 8});
        for (std::size_t i = 0; i < emb.numel(); ++i) emb[i] = rng.uniform(-1, 1);
        std::vector<int> labels = {1, 3, 0};
        auto build = [&](Tape& t, const std::map<std::string, Array>& prm) {
            std::map<std::string, Var> p;
            p.emplace("cls.w", t.leaf("cls.w", prm.at("cls.w")));
            p.emplace("cls.b", t.leaf("cls.b", prm.at("cls.b")));
            return t.cross_entropy_rows(classify_aux(t, p, t.constant(emb)), labels);
        };
        auto report = finite_diff_check(
            build, {{"cls.w", m.params.at("cls.w")}, {"cls.b", m.params.at("cls.b")}}, 1e-5);
        CHECK(report.max_rel_err < 1e-4);
    }
}

TEST_CASE("checkpoint round trip is bit-exact", "[model][checkpoint]") {
    TempDir dir("ckpt");
    Model m = Model::init(EncoderConfig::named("micro"), 3, 77);

    // push through one training-style update so moments exist
    AdamState opt(0.001);
    std::map<std::string, Array> grads;
    for (const auto& [name, a] : m.params) {
        Array g(a.shape());
        Rng rng(mix_seed(1, std::hash<std::string>{}(name)));
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = rng.uniform(-0.1, 0.1);
        grads.emplace(name, std::move(g));
    }
    opt.update(m.params, grads, 0.001);

    Checkpoint ckpt = make_checkpoint(m, {{"epoch", "3"}, {"seed", "77"}}, &opt);
    save_checkpoint(dir / "m.pkwc", ckpt);
    Checkpoint loaded = load_checkpoint(dir / "m.pkwc");

    REQUIRE(loaded.tensors.size() == ckpt.tensors.size());
    for (const auto& [name, a] : ckpt.tensors) {
        CHECK(a.bit_equal(loaded.tensors.at(name)));
    }
    CHECK(loaded.metadata.at("epoch") == "3");
    CHECK(loaded.has_optimizer);
    CHECK(loaded.adam_step == 1);

    Model back = model_from_checkpoint(loaded);
    for (const auto& [name, a] : m.params) CHECK(a.bit_equal(back.params.at(name)));

    AdamState opt2 = optimizer_from_checkpoint(loaded);
    CHECK(opt2.step() == opt.step());
    for (const auto& [name, a] : opt.first_moments()) {
        CHECK(a.bit_equal(opt2.first_moments().at(name)));
    }

    SECTION("inference after save/load is bit-identical") {
        Rng rng(8);
        FeatureMap fm = random_map(12, 16, rng);
        Array e1 = encode_batch(m, {fm});
        Array e2 = encode_batch(back, {fm});
        CHECK(e1.bit_equal(e2));
    }

    SECTION("a corrupted byte trips the checksum") {
        auto corrupt = dir / "bad.pkwc";
        std::filesystem::copy_file(dir / "m.pkwc", corrupt);
        std::fstream f(corrupt, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        char c;
        f.seekg(200);
        f.get(c);
        f.seekp(200);
        f.put(static_cast<char>(c ^ 0x40));
        f.close();
        CHECK_THROWS_WITH(load_checkpoint(corrupt),
                          Catch::Matchers::ContainsSubstring("checksum"));
    }

    SECTION("version mismatch is a distinct error") {
        auto vpath = dir / "ver.pkwc";
        std::filesystem::copy_file(dir / "m.pkwc", vpath);
        std::fstream f(vpath, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        std::uint32_t v = 9;
        f.write(reinterpret_cast<char*>(&v), 4);
        f.close();
        CHECK_THROWS_WITH(load_checkpoint(vpath),
                          Catch::Matchers::ContainsSubstring("format_version"));
    }

    SECTION("truncation is a distinct error") {
        std::ifstream in(dir / "m.pkwc", std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        std::ofstream out(dir / "short.pkwc", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(dir / "short.pkwc"), IoError);
    }

    SECTION("mismatched embed_dim reports an explicit shape error") {
        Checkpoint wrong = ckpt;
        wrong.metadata["encoder"] = "channels=2,4;embed=16";
        save_checkpoint(dir / "wrong.pkwc", wrong);
        CHECK_THROWS_WITH(model_from_checkpoint(load_checkpoint(dir / "wrong.pkwc")),
                          Catch::Matchers::ContainsSubstring("shape"));
    }
}
