#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pkws/array.hpp"
#include "pkws/autograd.hpp"
#include "pkws/errors.hpp"
#include "pkws/features.hpp"
#include "pkws/rng.hpp"

namespace pkws {

/// Embedding network layout: per block conv3x3 (same padding) -> relu ->
/// avgpool2x2, then global average pooling and one linear layer to embed_dim.
struct EncoderConfig {
    std::vector<std::size_t> channels{4, 8, 16, 32};
    std::size_t embed_dim = 96;
    std::size_t input_bins = 40;
    std::size_t input_frames = 98;
    std::string budget_label;  // e.g. "tiny~9k"; empty for ad-hoc configs
    std::size_t budget_params = 0;

    std::size_t width() const { return channels.front(); }
    std::size_t blocks() const { return channels.size(); }

    std::size_t param_count() const {
        std::size_t total = 0;
        std::size_t cin = 1;
        for (std::size_t c : channels) {
            total += 9 * cin * c + c;
            cin = c;
        }
        total += cin * embed_dim + embed_dim;
        return total;
    }

    bool within_budget() const {
        if (budget_params == 0) return true;
        const double ratio = static_cast<double>(param_count()) / static_cast<double>(budget_params);
        return ratio >= 0.8 && ratio <= 1.2;
    }

    void validate() const {
        if (channels.empty() || width() < 1) throw ConfigError("encoder: width must be >= 1");
        if (embed_dim < 4) throw ConfigError("encoder: embed_dim must be >= 4");
        std::size_t h = input_bins, w = input_frames;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            h /= 2;
            w /= 2;
            if (h == 0 || w == 0) throw ConfigError("encoder: too many blocks for input size");
        }
        if (budget_params != 0 && !within_budget()) {
            throw ConfigError("encoder '" + budget_label + "': realized " +
                              std::to_string(param_count()) + " parameters is outside +-20% of " +
                              std::to_string(budget_params));
        }
    }

    std::string describe() const {
        std::ostringstream os;
        os << "channels=";
        for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
        os << ";embed=" << embed_dim;
        return os.str();
    }

    static EncoderConfig named(const std::string& name) {
        EncoderConfig c;
        if (name == "tiny") {
            c.channels = {4, 8, 16, 32};
            c.embed_dim = 96;
            c.budget_label = "tiny~9k";
            c.budget_params = 9000;
        } else if (name == "base") {
            c.channels = {6, 12, 24, 56};
            c.embed_dim = 384;
            c.budget_label = "base~40k";
            c.budget_params = 40000;
        } else if (name == "large") {
            c.channels = {8, 16, 48, 128};
            c.embed_dim = 512;
            c.budget_label = "large~150k";
            c.budget_params = 150000;
        } else if (name == "micro") {
            // test-scale encoder for gradient checks
            c.channels = {2, 4};
            c.embed_dim = 8;
            c.input_bins = 12;
            c.input_frames = 16;
            c.budget_label = "micro";
        } else {
            throw ConfigError("unknown encoder config '" + name + "' (tiny|base|large|micro)");
        }
        c.validate();
        return c;
    }

    /// "4,8,16,32:96" -> channels and embed dim.
    static EncoderConfig parse(const std::string& text) {
        EncoderConfig c;
        const auto colon = text.find(':');
        if (colon == std::string::npos) return named(text);
        c.channels.clear();
        std::istringstream chans(text.substr(0, colon));
        std::string tok;
        while (std::getline(chans, tok, ',')) c.channels.push_back(std::stoul(tok));
        c.embed_dim = std::stoul(text.substr(colon + 1));
        c.validate();
        return c;
    }
};

/// Encoder F, auxiliary classifier C, and the learnable open-set prototype,
/// kept as one flat named-parameter registry so the optimizer and checkpoints
/// see a single table. Names: enc.conv<i>.{w,b}, enc.fc.{w,b}, cls.{w,b},
/// dummy.
struct Model {
    EncoderConfig config;
    std::size_t n_aux_classes = 0;
    std::map<std::string, Array> params;

    /// Xavier-uniform weights, zero biases, zero dummy prototype.
    static Model init(EncoderConfig cfg, std::size_t n_aux_classes, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.config = cfg;
        m.n_aux_classes = n_aux_classes;
        Rng rng(mix_seed(seed, 0x1417));

        auto xavier = [&](Shape shape, std::size_t fan_in, std::size_t fan_out) {
            Array a(std::move(shape));
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(-bound, bound);
            return a;
        };

        std::size_t cin = 1;
        for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
            const std::size_t cout = cfg.channels[i];
            m.params.emplace("enc.conv" + std::to_string(i) + ".w",
                             xavier(Shape{cout, cin, 3, 3}, cin * 9, cout * 9));
            m.params.emplace("enc.conv" + std::to_string(i) + ".b", Array(Shape{cout}, 0.0));
            cin = cout;
        }
        m.params.emplace("enc.fc.w", xavier(Shape{cin, cfg.embed_dim}, cin, cfg.embed_dim));
        m.params.emplace("enc.fc.b", Array(Shape{cfg.embed_dim}, 0.0));
        if (n_aux_classes > 0) {
            m.params.emplace("cls.w", xavier(Shape{cfg.embed_dim, n_aux_classes}, cfg.embed_dim,
                                             n_aux_classes));
            m.params.emplace("cls.b", Array(Shape{n_aux_classes}, 0.0));
        }
        m.params.emplace("dummy", Array(Shape{cfg.embed_dim}, 0.0));
        return m;
    }

    const Array& dummy() const { return params.at("dummy"); }

    std::size_t encoder_param_count() const {
        std::size_t n = 0;
        for (const auto& [name, a] : params) {
            if (name.rfind("enc.", 0) == 0) n += a.numel();
        }
        return n;
    }

    std::size_t total_param_count() const {
        std::size_t n = 0;
        for (const auto& [name, a] : params) n += a.numel();
        return n;
    }
};

/// Registers every model parameter on the tape. Trainable leaves when
/// `trainable`, constants otherwise (pure inference).
inline std::map<std::string, Var> register_params(Tape& tape, const Model& m, bool trainable) {
    std::map<std::string, Var> vars;
    for (const auto& [name, value] : m.params) {
        vars.emplace(name, trainable ? tape.leaf(name, value) : tape.constant(value));
    }
    return vars;
}

/// Stacks normalized fixed-size feature maps into a [B,1,bins,frames] batch.
inline Array stack_feature_maps(const std::vector<FeatureMap>& maps) {
    if (maps.empty()) throw ShapeError("stack_feature_maps: empty batch");
    const std::size_t bins = maps.front().bins;
    const std::size_t frames = maps.front().frames;
    Array out(Shape{maps.size(), 1, bins, frames});
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].bins != bins || maps[i].frames != frames) {
            throw ShapeError("stack_feature_maps: map " + std::to_string(i) + " is " +
                             std::to_string(maps[i].bins) + "x" + std::to_string(maps[i].frames) +
                             ", expected " + std::to_string(bins) + "x" + std::to_string(frames));
        }
        std::copy(maps[i].values.begin(), maps[i].values.end(),
                  out.data() + i * bins * frames);
    }
    return out;
}

/// Embedding forward pass: [B,1,bins,frames] -> [B,embed_dim].
inline Var encode(Tape& tape, const Model& m, const std::map<std::string, Var>& p, Var batch) {
    const Array& x = tape.value(batch);
    if (x.ndim() != 4 || x.dim(1) != 1 || x.dim(2) != m.config.input_bins ||
        x.dim(3) != m.config.input_frames) {
        throw ShapeError("encode: input " + shape_str(x.shape()) + ", expected (B, 1, " +
                         std::to_string(m.config.input_bins) + ", " +
                         std::to_string(m.config.input_frames) + ")");
    }
    Var h = batch;
    for (std::size_t i = 0; i < m.config.channels.size(); ++i) {
        const std::string tag = "enc.conv" + std::to_string(i);
        h = tape.avgpool2(tape.relu(tape.conv2d(h, p.at(tag + ".w"), p.at(tag + ".b"), 1, 1)));
    }
    Var pooled = tape.global_avgpool(h);
    Var emb = tape.add_rowvec(tape.matmul(pooled, p.at("enc.fc.w")), p.at("enc.fc.b"));
    check_finite(tape.value(emb), "encode");
    return emb;
}

/// Auxiliary-word classifier: affine map, no softmax.
inline Var classify_aux(Tape& tape, const std::map<std::string, Var>& p, Var embeddings) {
    const Array& e = tape.value(embeddings);
    const Array& w = tape.value(p.at("cls.w"));
    if (e.ndim() != 2 || e.dim(1) != w.dim(0)) {
        throw ShapeError("classify_aux: embeddings " + shape_str(e.shape()) + " vs weight " +
                         shape_str(w.shape()));
    }
    return tape.add_rowvec(tape.matmul(embeddings, p.at("cls.w")), p.at("cls.b"));
}

/// Convenience inference path: normalized features in, embeddings out.
inline Array encode_batch(const Model& m, const std::vector<FeatureMap>& maps) {
    Tape tape;
    auto p = register_params(tape, m, false);
    Var emb = encode(tape, m, p, tape.constant(stack_feature_maps(maps)));
    return tape.value(emb);
}

}  // namespace pkws
