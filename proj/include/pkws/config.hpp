#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pkws/errors.hpp"

namespace pkws {

/// Plain-text key=value configuration ('#' starts a comment, blank lines
/// ignored). Consumers declare the keys they understand; leftovers are
/// reported as errors to catch typos.
class Config {
public:
    Config() = default;

    static Config parse_file(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open " + path.string());
        std::ostringstream ss;
        ss << f.rdbuf();
        Config c = parse_string(ss.str(), path.string());
        return c;
    }

    static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
        Config c;
        c.origin_ = origin;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) {
                throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                                  ": empty key");
            }
            c.values_[key] = value;
        }
        return c;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        touch(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string require_str(const std::string& key) const {
        touch(key);
        auto it = values_.find(key);
        if (it == values_.end()) {
            throw ConfigError("config: " + origin_ + ": missing required key '" + key + "'");
        }
        return it->second;
    }

    long get_int(const std::string& key, long fallback) const {
        touch(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const long v = std::stol(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: " + origin_ + ": key '" + key + "' is not an integer: '" +
                              it->second + "'");
        }
    }

    double get_double(const std::string& key, double fallback) const {
        touch(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: " + origin_ + ": key '" + key + "' is not a number: '" +
                              it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        touch(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
        if (it->second == "false" || it->second == "0" || it->second == "no") return false;
        throw ConfigError("config: " + origin_ + ": key '" + key + "' is not a boolean: '" +
                          it->second + "'");
    }

    std::vector<std::string> get_list(const std::string& key) const {
        touch(key);
        std::vector<std::string> out;
        auto it = values_.find(key);
        if (it == values_.end()) return out;
        std::istringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            tok = trim(tok);
            if (!tok.empty()) out.push_back(tok);
        }
        return out;
    }

    std::vector<std::uint64_t> get_seeds(const std::string& key,
                                         std::vector<std::uint64_t> fallback) const {
        touch(key);
        if (!values_.count(key)) return fallback;
        std::vector<std::uint64_t> out;
        for (const auto& tok : get_list(key)) {
            try {
                out.push_back(std::stoull(tok));
            } catch (const std::exception&) {
                throw ConfigError("config: " + origin_ + ": bad seed '" + tok + "' in '" + key +
                                  "'");
            }
        }
        if (out.empty()) {
            throw ConfigError("config: " + origin_ + ": key '" + key + "' lists no seeds");
        }
        return out;
    }

    /// Call after reading everything; unknown keys are configuration errors.
    void reject_unknown() const {
        for (const auto& [key, value] : values_) {
            if (!accessed_.count(key)) {
                throw ConfigError("config: " + origin_ + ": unknown key '" + key + "'");
            }
        }
    }

    /// Canonical content fingerprint for checkpoint metadata.
    std::string hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&](const std::string& s) {
            for (unsigned char c : s) {
                h ^= c;
                h *= 1099511628211ULL;
            }
        };
        for (const auto& [k, v] : values_) {
            mix(k);
            mix("=");
            mix(v);
            mix(";");
        }
        std::ostringstream os;
        os << std::hex << h;
        return os.str();
    }

    const std::string& origin() const { return origin_; }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    void touch(const std::string& key) const { accessed_.insert(key); }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> accessed_;
    std::string origin_ = "<empty>";
};

}  // namespace pkws
