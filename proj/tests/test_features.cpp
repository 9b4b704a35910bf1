#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "pkws/features.hpp"
#include "pkws/rng.hpp"
#include "pkws/wav.hpp"
#include "test_util.hpp"

using namespace pkws;
using pkws_test::TempDir;

namespace {

Waveform sine(double freq_hz, double seconds, double amp = 0.5) {
    Waveform w;
    w.samples.resize(static_cast<std::size_t>(seconds * 16000));
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
        w.samples[i] = amp * std::sin(2.0 * kPi * freq_hz * static_cast<double>(i) / 16000.0);
    }
    return w;
}

/// Hand-built WAV with arbitrary channel count, for validation tests.
void write_raw_wav(const std::filesystem::path& p, std::uint16_t channels, std::uint32_t rate,
                   std::uint16_t bits, const std::vector<std::int16_t>& pcm) {
    std::ofstream f(p, std::ios::binary);
    auto u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<char*>(&v), 4); };
    auto u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<char*>(&v), 2); };
    const std::uint32_t dlen = static_cast<std::uint32_t>(pcm.size() * 2);
    f.write("RIFF", 4);
    u32(36 + dlen);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    u32(16);
    u16(1);
    u16(channels);
    u32(rate);
    u32(rate * channels * 2);
    u16(static_cast<std::uint16_t>(channels * 2));
    u16(bits);
    f.write("data", 4);
    u32(dlen);
    f.write(reinterpret_cast<const char*>(pcm.data()), dlen);
}

}  // namespace

TEST_CASE("wav round trip and validation", "[features][wav]") {
    TempDir dir("wav");

    SECTION("one second of silence loads as 16000 zeros") {
        save_wav(dir / "silence.wav", std::vector<double>(16000, 0.0));
        Waveform w = load_wav(dir / "silence.wav");
        REQUIRE(w.size() == 16000);
        for (double s : w.samples) REQUIRE(s == 0.0);
    }

    SECTION("PCM16 value 16384 scales to 0.5") {
        write_raw_wav(dir / "half.wav", 1, 16000, 16, {16384, -16384});
        Waveform w = load_wav(dir / "half.wav");
        CHECK(w.samples[0] == 0.5);
        CHECK(w.samples[1] == -0.5);
    }

    SECTION("stereo file is rejected naming the channel count") {
        write_raw_wav(dir / "stereo.wav", 2, 16000, 16, {0, 0, 0, 0});
        CHECK_THROWS_WITH(load_wav(dir / "stereo.wav"),
                          Catch::Matchers::ContainsSubstring("channels=2, expected 1"));
    }

    SECTION("wrong sample rate and bit depth are rejected") {
        write_raw_wav(dir / "rate.wav", 1, 8000, 16, {0, 0});
        CHECK_THROWS_WITH(load_wav(dir / "rate.wav"),
                          Catch::Matchers::ContainsSubstring("sample_rate=8000"));
        write_raw_wav(dir / "bits.wav", 1, 16000, 8, {0, 0});
        CHECK_THROWS_AS(load_wav(dir / "bits.wav"), DataError);
    }

    SECTION("save/load round trip preserves quantized samples") {
        Rng rng(4);
        std::vector<double> s(3000);
        for (double& v : s) v = rng.uniform(-0.9, 0.9);
        save_wav(dir / "rt.wav", s);
        Waveform w = load_wav(dir / "rt.wav");
        REQUIRE(w.size() == s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            CHECK(std::fabs(w.samples[i] - s[i]) <= 0.5 / 32768.0 + 1e-12);
        }
    }
}

TEST_CASE("logmel dimensions and silence floor", "[features]") {
    LogMelExtractor extract;

    SECTION("1.0 s input gives 98 frames x 40 bins") {
        Waveform w;
        w.samples.assign(16000, 0.01);
        FeatureMap fm = extract(w);
        CHECK(fm.frames == 98);
        CHECK(fm.bins == 40);
    }

    SECTION("zero signal hits the log floor everywhere") {
        Waveform w;
        w.samples.assign(4800, 0.0);
        FeatureMap fm = extract(w);
        const double floor_val = std::log(1e-10);
        for (double v : fm.values) CHECK(v == Catch::Approx(floor_val));
    }

    SECTION("too-short input is rejected") {
        Waveform w;
        w.samples.assign(479, 0.0);
        CHECK_THROWS_AS(extract(w), DataError);
    }

    SECTION("frame count matches the formula over random lengths") {
        Rng rng(9);
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t n = 480 + static_cast<std::size_t>(rng.uniform_int(32000 - 480 + 1));
            Waveform w;
            w.samples.assign(n, 0.005);
            FeatureMap fm = extract(w);
            CHECK(fm.frames == (n - 480) / 160 + 1);
        }
    }
}

TEST_CASE("pure tone lands in the mel bin nearest its frequency", "[features]") {
    LogMelExtractor extract;
    const double tone_hz = 1000.0;
    FeatureMap fm = extract(sine(tone_hz, 1.0));

    // oracle: recompute the filterbank centers from the mel formula
    const auto& centers = extract.filterbank().center_hz;
    std::size_t nearest = 0;
    for (std::size_t b = 1; b < centers.size(); ++b) {
        if (std::fabs(centers[b] - tone_hz) < std::fabs(centers[nearest] - tone_hz)) nearest = b;
    }

    for (std::size_t t = 0; t < fm.frames; ++t) {
        std::size_t arg = 0;
        for (std::size_t b = 1; b < fm.bins; ++b) {
            if (fm.at(b, t) > fm.at(arg, t)) arg = b;
        }
        REQUIRE(arg == nearest);
    }
}

TEST_CASE("logmel shifting input by one hop shifts frames by one", "[features]") {
    LogMelExtractor extract;
    Rng rng(21);
    Waveform w;
    w.samples.resize(16000 + 160);
    for (double& s : w.samples) s = rng.uniform(-0.5, 0.5);

    Waveform shifted;
    shifted.samples.assign(w.samples.begin() + 160, w.samples.end());
    Waveform base;
    base.samples.assign(w.samples.begin(), w.samples.end() - 160);

    FeatureMap f0 = extract(base);
    FeatureMap f1 = extract(shifted);
    REQUIRE(f0.frames == f1.frames);
    for (std::size_t b = 0; b < f0.bins; ++b) {
        for (std::size_t t = 0; t + 1 < f0.frames; ++t) {
            REQUIRE(f0.at(b, t + 1) == Catch::Approx(f1.at(b, t)).margin(1e-9));
        }
    }
}

TEST_CASE("fix_frames pads and crops around the center", "[features]") {
    LogMelExtractor extract;
    Waveform w;
    w.samples.assign(8000, 0.01);  // 48 frames
    FeatureMap fm = extract(w);
    FeatureMap padded = fix_frames(fm, 98);
    CHECK(padded.frames == 98);
    CHECK(padded.at(0, 0) == Catch::Approx(std::log(1e-10)));
    FeatureMap cropped = fix_frames(padded, 48);
    CHECK(cropped.frames == 48);

    FeatureMap same = fix_frames(fm, 48);
    CHECK(same.values == fm.values);
}

TEST_CASE("normalization gives zero mean unit variance", "[features]") {
    Rng rng(2);
    FeatureMap fm;
    fm.bins = 4;
    fm.frames = 25;
    fm.values.resize(100);
    for (double& v : fm.values) v = rng.uniform(-20.0, -2.0);
    normalize_feature_map(fm);
    double mean = 0, var = 0;
    for (double v : fm.values) mean += v;
    mean /= 100.0;
    for (double v : fm.values) var += (v - mean) * (v - mean);
    var /= 100.0;
    CHECK(mean == Catch::Approx(0.0).margin(1e-12));
    CHECK(var == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("mix_noise contract", "[features]") {
    Rng gen(31);
    Waveform wave = sine(440.0, 0.5, 0.8);
    Waveform noise = sine(97.0, 0.25, 0.9);  // shorter than wave: exercises tiling

    SECTION("apply_prob=0 returns the input bit-identically") {
        Rng rng(5);
        Waveform out = mix_noise(wave, noise, 0.0, rng);
        CHECK(out.samples == wave.samples);
    }

    SECTION("apply_prob=1 with zero max gain equals the input") {
        Rng rng(5);
        Waveform out = mix_noise(wave, noise, 1.0, rng, 0.0);
        for (std::size_t i = 0; i < wave.size(); ++i) {
            CHECK(out.samples[i] == wave.samples[i]);
        }
    }

    SECTION("rng consumption is identical whether or not noise applies") {
        Rng r1(77), r2(77);
        (void)mix_noise(wave, noise, 0.0, r1);
        (void)mix_noise(wave, noise, 1.0, r2);
        CHECK(r1.next_u64() == r2.next_u64());
    }

    SECTION("output never leaves [-1, 1]") {
        Rng rng(13);
        Waveform loud = sine(300.0, 0.3, 0.99);
        for (int i = 0; i < 20; ++i) {
            Waveform out = mix_noise(loud, noise, 1.0, rng, 0.5);
            for (double v : out.samples) {
                REQUIRE(v <= 1.0);
                REQUIRE(v >= -1.0);
            }
        }
    }

    SECTION("application frequency is binomial around apply_prob") {
        Rng rng(101);
        Waveform tiny;
        tiny.samples.assign(16, 0.5);
        Waveform n2;
        n2.samples.assign(16, 0.25);
        int applied = 0;
        for (int i = 0; i < 10000; ++i) {
            Waveform out = mix_noise(tiny, n2, 0.8, rng);
            if (out.samples != tiny.samples) ++applied;
        }
        CHECK(applied >= 8000 - 120);
        CHECK(applied <= 8000 + 120);
    }
}

TEST_CASE("feature cache round trip", "[features]") {
    TempDir dir("pkwf");
    LogMelExtractor extract;
    FeatureMap fm = extract(sine(523.0, 0.8));
    save_feature_map(dir / "x.pkwf", fm);
    FeatureMap back = load_feature_map(dir / "x.pkwf");
    CHECK(back.bins == fm.bins);
    CHECK(back.frames == fm.frames);
    CHECK(back.values == fm.values);

    SECTION("bad magic is rejected") {
        std::ofstream f(dir / "junk.pkwf", std::ios::binary);
        f.write("NOPE\x01\x00\x00\x00\x01\x00\x00\x00", 12);
        f.close();
        CHECK_THROWS_AS(load_feature_map(dir / "junk.pkwf"), IoError);
    }

    SECTION("truncated payload is rejected") {
        std::ofstream f(dir / "trunc.pkwf", std::ios::binary | std::ios::trunc);
        f.write("PKWF", 4);
        std::uint32_t v = 40, fr = 98;
        f.write(reinterpret_cast<char*>(&v), 4);
        f.write(reinterpret_cast<char*>(&fr), 4);
        double d = 1.0;
        f.write(reinterpret_cast<char*>(&d), 8);
        f.close();
        CHECK_THROWS_AS(load_feature_map(dir / "trunc.pkwf"), IoError);
    }
}
