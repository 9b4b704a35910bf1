#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pkws/errors.hpp"

namespace pkws {

/// Mono 16 kHz audio in [-1, 1].
struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;
    std::string source_id;

    std::size_t size() const { return samples.size(); }
    double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

/// Reads a RIFF/WAVE file and validates it is PCM16 mono 16 kHz.
/// Unknown chunks are skipped. Samples are scaled by 1/32768.
inline Waveform load_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_wav: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw IoError("load_wav: " + path.string() + " is not a RIFF/WAVE file");
    }

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t len = detail::read_u32(bytes.data() + pos + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) throw IoError("load_wav: truncated chunk in " + path.string());
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (len < 16) throw IoError("load_wav: malformed fmt chunk in " + path.string());
            format = detail::read_u16(bytes.data() + body);
            channels = detail::read_u16(bytes.data() + body + 2);
            rate = detail::read_u32(bytes.data() + body + 4);
            bits = detail::read_u16(bytes.data() + body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = len;
        }
        pos = body + len + (len & 1);  // chunks are word-aligned
    }

    if (!have_fmt || !data) throw IoError("load_wav: missing fmt/data chunk in " + path.string());
    if (format != 1) {
        throw DataError("load_wav: " + path.string() + ": format=" + std::to_string(format) +
                        ", expected 1 (PCM)");
    }
    if (channels != 1) {
        throw DataError("load_wav: " + path.string() + ": channels=" + std::to_string(channels) +
                        ", expected 1");
    }
    if (bits != 16) {
        throw DataError("load_wav: " + path.string() + ": bits=" + std::to_string(bits) +
                        ", expected 16");
    }
    if (rate != 16000) {
        throw DataError("load_wav: " + path.string() + ": sample_rate=" + std::to_string(rate) +
                        ", expected 16000");
    }

    Waveform w;
    w.sample_rate = 16000;
    w.source_id = path.string();
    const std::size_t n = data_len / 2;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int16_t v = static_cast<std::int16_t>(data[2 * i] | (data[2 * i + 1] << 8));
        w.samples[i] = static_cast<double>(v) / 32768.0;
    }
    if (w.samples.empty()) throw DataError("load_wav: " + path.string() + ": empty data chunk");
    return w;
}

/// Quantizes to PCM16 (round-to-nearest, clipped) and writes a canonical
/// 44-byte-header WAV. Deterministic byte-for-byte given the same samples.
inline void save_wav(const std::filesystem::path& path, const std::vector<double>& samples,
                     int sample_rate = 16000) {
    std::vector<unsigned char> out;
    out.reserve(44 + samples.size() * 2);
    auto put_u32 = [&](std::uint32_t v) {
        out.push_back(v & 0xff);
        out.push_back((v >> 8) & 0xff);
        out.push_back((v >> 16) & 0xff);
        out.push_back((v >> 24) & 0xff);
    };
    auto put_u16 = [&](std::uint16_t v) {
        out.push_back(v & 0xff);
        out.push_back((v >> 8) & 0xff);
    };
    auto put_tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };

    const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 2);
    put_tag("RIFF");
    put_u32(36 + data_len);
    put_tag("WAVE");
    put_tag("fmt ");
    put_u32(16);
    put_u16(1);  // PCM
    put_u16(1);  // mono
    put_u32(static_cast<std::uint32_t>(sample_rate));
    put_u32(static_cast<std::uint32_t>(sample_rate * 2));
    put_u16(2);
    put_u16(16);
    put_tag("data");
    put_u32(data_len);
    for (double s : samples) {
        double v = s * 32768.0;
        if (v > 32767.0) v = 32767.0;
        if (v < -32768.0) v = -32768.0;
        const std::int16_t q = static_cast<std::int16_t>(std::lround(v));
        put_u16(static_cast<std::uint16_t>(q));
    }

    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_wav: cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("save_wav: short write to " + path.string());
}

}  // namespace pkws
