#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pkws/array.hpp"
#include "pkws/crc32.hpp"
#include "pkws/errors.hpp"
#include "pkws/model.hpp"
#include "pkws/optim.hpp"

namespace pkws {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Serializable training snapshot: named parameter tensors, string metadata,
/// optional optimizer state. File layout ("PKWC", little-endian):
///   magic | u32 version | u32 flags | metadata kv table | tensor table |
///   [u64 adam_step, f64 beta1, beta2, eps, base_lr] | u32 crc32
struct Checkpoint {
    std::uint32_t format_version = kCheckpointVersion;
    std::map<std::string, Array> tensors;
    std::map<std::string, std::string> metadata;
    bool has_optimizer = false;
    std::uint64_t adam_step = 0;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8, adam_base_lr = 0.001;
};

namespace detail {

struct ByteWriter {
    std::vector<unsigned char> bytes;
    void raw(const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const unsigned char* p;
    std::size_t len;
    std::size_t pos = 0;
    const std::string& origin;

    void need(std::size_t n) const {
        if (pos + n > len) throw IoError("load_checkpoint: truncated file " + origin);
    }
    void raw(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p + pos, n);
        pos += n;
    }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(p + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    detail::ByteWriter w;
    w.raw("PKWC", 4);
    w.u32(ckpt.format_version);
    w.u32(ckpt.has_optimizer ? 1u : 0u);
    w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
    for (const auto& [k, v] : ckpt.metadata) {
        w.str(k);
        w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, a] : ckpt.tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(a.ndim()));
        for (std::size_t i = 0; i < a.ndim(); ++i) w.u64(a.dim(i));
        w.raw(a.data(), a.numel() * sizeof(double));
    }
    if (ckpt.has_optimizer) {
        w.u64(ckpt.adam_step);
        w.f64(ckpt.adam_beta1);
        w.f64(ckpt.adam_beta2);
        w.f64(ckpt.adam_eps);
        w.f64(ckpt.adam_base_lr);
    }
    const std::uint32_t crc = crc32(w.bytes.data(), w.bytes.size());
    w.u32(crc);

    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
    if (!f) throw IoError("save_checkpoint: short write to " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    const std::string origin = path.string();
    if (bytes.size() < 16) throw IoError("load_checkpoint: truncated file " + origin);
    if (std::memcmp(bytes.data(), "PKWC", 4) != 0) {
        throw IoError("load_checkpoint: " + origin + " is not a checkpoint file (bad magic)");
    }
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kCheckpointVersion) {
        throw IoError("load_checkpoint: " + origin + " has format_version " +
                      std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
    }
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    const std::uint32_t actual_crc = crc32(bytes.data(), bytes.size() - 4);
    if (stored_crc != actual_crc) {
        throw IoError("load_checkpoint: checksum mismatch in " + origin);
    }

    detail::ByteReader r{bytes.data(), bytes.size() - 4, 8, origin};
    Checkpoint ckpt;
    ckpt.format_version = version;
    const std::uint32_t flags = r.u32();
    ckpt.has_optimizer = (flags & 1u) != 0;
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        ckpt.metadata.emplace(std::move(k), r.str());
    }
    const std::uint32_t n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str();
        const std::uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (std::uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<std::size_t>(r.u64());
        std::vector<double> data(shape_numel(shape));
        r.raw(data.data(), data.size() * sizeof(double));
        ckpt.tensors.emplace(std::move(name), Array(std::move(shape), std::move(data)));
    }
    if (ckpt.has_optimizer) {
        ckpt.adam_step = r.u64();
        ckpt.adam_beta1 = r.f64();
        ckpt.adam_beta2 = r.f64();
        ckpt.adam_eps = r.f64();
        ckpt.adam_base_lr = r.f64();
    }
    return ckpt;
}

/// Packs a model (and optionally optimizer state) into a checkpoint.
inline Checkpoint make_checkpoint(const Model& model, std::map<std::string, std::string> metadata,
                                  const AdamState* opt = nullptr) {
    Checkpoint ckpt;
    ckpt.tensors = model.params;
    metadata["encoder"] = model.config.describe();
    metadata["encoder_label"] = model.config.budget_label;
    metadata["n_aux_classes"] = std::to_string(model.n_aux_classes);
    metadata["input_bins"] = std::to_string(model.config.input_bins);
    metadata["input_frames"] = std::to_string(model.config.input_frames);
    ckpt.metadata = std::move(metadata);
    if (opt) {
        ckpt.has_optimizer = true;
        ckpt.adam_step = opt->step();
        ckpt.adam_beta1 = opt->beta1();
        ckpt.adam_beta2 = opt->beta2();
        ckpt.adam_eps = opt->eps();
        ckpt.adam_base_lr = opt->base_lr();
        for (const auto& [name, a] : opt->first_moments()) ckpt.tensors.emplace("adam.m." + name, a);
        for (const auto& [name, a] : opt->second_moments()) ckpt.tensors.emplace("adam.v." + name, a);
    }
    return ckpt;
}

/// Rebuilds the model; every parameter tensor must exist with the shape the
/// encoder config implies.
inline Model model_from_checkpoint(const Checkpoint& ckpt) {
    auto meta = [&](const std::string& key) {
        auto it = ckpt.metadata.find(key);
        if (it == ckpt.metadata.end()) {
            throw IoError("checkpoint: missing metadata key '" + key + "'");
        }
        return it->second;
    };
    EncoderConfig cfg;
    {
        const std::string desc = meta("encoder");  // "channels=a,b,c;embed=d"
        const auto semi = desc.find(';');
        if (desc.rfind("channels=", 0) != 0 || semi == std::string::npos) {
            throw IoError("checkpoint: malformed encoder description '" + desc + "'");
        }
        cfg = EncoderConfig::parse(desc.substr(9, semi - 9) + ":" + desc.substr(semi + 7));
        cfg.budget_label = meta("encoder_label");
    }
    cfg.input_bins = std::stoul(meta("input_bins"));
    cfg.input_frames = std::stoul(meta("input_frames"));
    cfg.validate();

    Model m = Model::init(cfg, std::stoul(meta("n_aux_classes")), 0);
    for (auto& [name, value] : m.params) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw IoError("checkpoint: missing tensor '" + name + "'");
        }
        if (!it->second.same_shape(value)) {
            throw ShapeError("checkpoint: tensor '" + name + "' has shape " +
                             shape_str(it->second.shape()) + ", config wants " +
                             shape_str(value.shape()));
        }
        value = it->second;
    }
    return m;
}

/// Restores Adam moments saved alongside the model parameters.
inline AdamState optimizer_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.has_optimizer) throw IoError("checkpoint: no optimizer state stored");
    AdamState opt(ckpt.adam_base_lr, ckpt.adam_beta1, ckpt.adam_beta2, ckpt.adam_eps);
    std::map<std::string, Array> m, v;
    for (const auto& [name, a] : ckpt.tensors) {
        if (name.rfind("adam.m.", 0) == 0) m.emplace(name.substr(7), a);
        else if (name.rfind("adam.v.", 0) == 0) v.emplace(name.substr(7), a);
    }
    opt.restore(ckpt.adam_step, std::move(m), std::move(v));
    return opt;
}

}  // namespace pkws
