#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "pkws/dsp.hpp"
#include "pkws/errors.hpp"
#include "pkws/rng.hpp"
#include "pkws/wav.hpp"

namespace pkws {

struct LogMelConfig {
    std::size_t window = 480;  // 30 ms at 16 kHz
    std::size_t hop = 160;     // 10 ms
    std::size_t fft_size = 512;
    std::size_t mel_bins = 40;
    double fmin = 20.0;
    double fmax = 8000.0;
    double log_floor = 1e-10;
};

/// 2-D log-mel map, bins-major: values[b * frames + t].
struct FeatureMap {
    std::size_t bins = 0;
    std::size_t frames = 0;
    std::vector<double> values;
    LogMelConfig meta;

    double& at(std::size_t b, std::size_t t) { return values[b * frames + t]; }
    double at(std::size_t b, std::size_t t) const { return values[b * frames + t]; }
};

inline std::size_t logmel_frame_count(std::size_t n_samples, const LogMelConfig& cfg) {
    if (n_samples < cfg.window) return 0;
    return (n_samples - cfg.window) / cfg.hop + 1;
}

/// Shared per-configuration state for the log-mel transform.
class LogMelExtractor {
public:
    explicit LogMelExtractor(LogMelConfig cfg = {})
        : cfg_(cfg),
          fft_(cfg.fft_size),
          window_(hann_window(cfg.window)),
          bank_(cfg.mel_bins, cfg.fft_size, 16000.0, cfg.fmin, cfg.fmax) {
        if (cfg_.fft_size < cfg_.window) throw ShapeError("logmel: fft_size smaller than window");
    }

    const LogMelConfig& config() const { return cfg_; }
    const MelFilterbank& filterbank() const { return bank_; }

    FeatureMap operator()(const Waveform& wave) const {
        if (wave.sample_rate != 16000) {
            throw DataError("logmel: sample_rate=" + std::to_string(wave.sample_rate) +
                            ", expected 16000");
        }
        const std::size_t frames = logmel_frame_count(wave.size(), cfg_);
        if (frames == 0) {
            throw DataError("logmel: input of " + std::to_string(wave.size()) +
                            " samples is shorter than one window (" + std::to_string(cfg_.window) +
                            ")");
        }
        FeatureMap fm;
        fm.bins = cfg_.mel_bins;
        fm.frames = frames;
        fm.meta = cfg_;
        fm.values.resize(fm.bins * frames);

        std::vector<double> frame_a(cfg_.window), frame_b(cfg_.window);
        std::vector<double> mag_a, mag_b, energies;
        auto emit = [&](std::size_t t, const std::vector<double>& mag) {
            bank_.apply(mag, energies);
            for (std::size_t b = 0; b < fm.bins; ++b) {
                fm.at(b, t) = std::log(std::max(energies[b], cfg_.log_floor));
            }
        };
        for (std::size_t t = 0; t < frames; t += 2) {
            const double* src_a = wave.samples.data() + t * cfg_.hop;
            for (std::size_t i = 0; i < cfg_.window; ++i) frame_a[i] = src_a[i] * window_[i];
            if (t + 1 < frames) {
                const double* src_b = wave.samples.data() + (t + 1) * cfg_.hop;
                for (std::size_t i = 0; i < cfg_.window; ++i) frame_b[i] = src_b[i] * window_[i];
                fft_.magnitude_pair(frame_a.data(), frame_b.data(), cfg_.window, mag_a, mag_b);
                emit(t, mag_a);
                emit(t + 1, mag_b);
            } else {
                fft_.magnitude(frame_a.data(), cfg_.window, mag_a);
                emit(t, mag_a);
            }
        }
        for (double v : fm.values) {
            if (!std::isfinite(v)) throw NumericError("logmel: non-finite feature value");
        }
        return fm;
    }

private:
    LogMelConfig cfg_;
    Fft fft_;
    std::vector<double> window_;
    MelFilterbank bank_;
};

/// Center crop or pad to a fixed frame count. Padded frames take the silence
/// value ln(log_floor), matching what zero samples would have produced.
inline FeatureMap fix_frames(const FeatureMap& fm, std::size_t target) {
    if (fm.frames == target) return fm;
    FeatureMap out;
    out.bins = fm.bins;
    out.frames = target;
    out.meta = fm.meta;
    const double pad_value = std::log(fm.meta.log_floor);
    out.values.assign(fm.bins * target, pad_value);
    if (fm.frames > target) {
        const std::size_t start = (fm.frames - target) / 2;
        for (std::size_t b = 0; b < fm.bins; ++b)
            for (std::size_t t = 0; t < target; ++t) out.at(b, t) = fm.at(b, t + start);
    } else {
        const std::size_t start = (target - fm.frames) / 2;
        for (std::size_t b = 0; b < fm.bins; ++b)
            for (std::size_t t = 0; t < fm.frames; ++t) out.at(b, t + start) = fm.at(b, t);
    }
    return out;
}

/// Whole-map mean/variance normalization (mean 0, var 1). A constant map
/// normalizes to all zeros.
inline void normalize_feature_map(FeatureMap& fm) {
    const std::size_t n = fm.values.size();
    double mean = 0.0;
    for (double v : fm.values) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : fm.values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + 1e-12);
    for (double& v : fm.values) v = (v - mean) * inv;
}

/// Background-noise augmentation. All random draws happen before the
/// apply/skip decision, so rng consumption is identical in both branches.
/// The noise source is tiled when shorter than the target.
inline Waveform mix_noise(const Waveform& wave, const Waveform& noise, double apply_prob,
                          Rng& rng, double max_gain = 0.1) {
    if (apply_prob < 0.0 || apply_prob > 1.0) throw ShapeError("mix_noise: apply_prob outside [0,1]");
    if (noise.samples.empty()) throw DataError("mix_noise: empty noise source");
    const double coin = rng.uniform();
    const double gain = rng.uniform(0.0, max_gain);
    const std::size_t offset = static_cast<std::size_t>(rng.uniform_int(noise.samples.size()));
    if (coin >= apply_prob) return wave;

    Waveform out = wave;
    const std::size_t nlen = noise.samples.size();
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        double v = out.samples[i] + gain * noise.samples[(offset + i) % nlen];
        if (v > 1.0) v = 1.0;
        if (v < -1.0) v = -1.0;
        out.samples[i] = v;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature cache format: "PKWF", u32 bins, u32 frames, then f64 row-major
// (little-endian throughout).
// ---------------------------------------------------------------------------

inline void save_feature_map(const std::filesystem::path& path, const FeatureMap& fm) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_feature_map: cannot open " + path.string());
    f.write("PKWF", 4);
    const std::uint32_t bins = static_cast<std::uint32_t>(fm.bins);
    const std::uint32_t frames = static_cast<std::uint32_t>(fm.frames);
    f.write(reinterpret_cast<const char*>(&bins), 4);
    f.write(reinterpret_cast<const char*>(&frames), 4);
    f.write(reinterpret_cast<const char*>(fm.values.data()),
            static_cast<std::streamsize>(fm.values.size() * sizeof(double)));
    if (!f) throw IoError("save_feature_map: short write to " + path.string());
}

inline FeatureMap load_feature_map(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_feature_map: cannot open " + path.string());
    char magic[4];
    std::uint32_t bins = 0, frames = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&bins), 4);
    f.read(reinterpret_cast<char*>(&frames), 4);
    if (!f || std::memcmp(magic, "PKWF", 4) != 0) {
        throw IoError("load_feature_map: " + path.string() + " is not a PKWF file");
    }
    FeatureMap fm;
    fm.bins = bins;
    fm.frames = frames;
    fm.values.resize(static_cast<std::size_t>(bins) * frames);
    f.read(reinterpret_cast<char*>(fm.values.data()),
           static_cast<std::streamsize>(fm.values.size() * sizeof(double)));
    if (!f) throw IoError("load_feature_map: truncated file " + path.string());
    return fm;
}

}  // namespace pkws
