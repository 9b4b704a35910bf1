#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkws/errors.hpp"
#include "pkws/wav.hpp"

namespace pkws {

enum class Domain { InDomain, Auxiliary };
enum class Split { Train, Val, Test };

inline const char* domain_name(Domain d) {
    return d == Domain::InDomain ? "in_domain" : "auxiliary";
}
inline const char* split_name(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
    }
}

inline constexpr const char* kSilenceKeyword = "_silence_";

/// One audio clip with its keyword class and provenance.
struct LabeledClip {
    std::string rel_path;  // relative to the dataset root
    int keyword_id = -1;   // index into Dataset::keywords
    Domain domain = Domain::InDomain;
    Split split = Split::Train;
};

/// On-disk layout: <root>/<domain>/<split>/<keyword>/<clip>.wav with an
/// index.json at the root. The index is the load order of record; a plain
/// sorted directory scan is the fallback for hand-built trees.
class Dataset {
public:
    std::filesystem::path root;
    std::vector<std::string> keywords;
    std::vector<LabeledClip> clips;

    static Dataset load(const std::filesystem::path& root) {
        if (std::filesystem::exists(root / "index.json")) return load_index(root);
        return scan(root);
    }

    /// Combines two trees (e.g. an in-domain corpus with a forged auxiliary
    /// set). Clip paths become absolute so one object can span both roots.
    static Dataset merge(const Dataset& a, const Dataset& b) {
        Dataset out;
        out.root = "";
        auto absorb = [&](const Dataset& src) {
            for (const auto& c : src.clips) {
                const std::string& kw = src.keywords[static_cast<std::size_t>(c.keyword_id)];
                int id = out.keyword_id(kw);
                if (id < 0) {
                    id = static_cast<int>(out.keywords.size());
                    out.keywords.push_back(kw);
                }
                out.clips.push_back(
                    {std::filesystem::absolute(src.root / c.rel_path).generic_string(), id,
                     c.domain, c.split});
            }
        };
        absorb(a);
        absorb(b);
        return out;
    }

    int keyword_id(const std::string& name) const {
        for (std::size_t i = 0; i < keywords.size(); ++i) {
            if (keywords[i] == name) return static_cast<int>(i);
        }
        return -1;
    }

    std::vector<std::string> keywords_of(Domain d, Split s, bool include_silence = true) const {
        std::vector<bool> seen(keywords.size(), false);
        for (const auto& c : clips) {
            if (c.domain == d && c.split == s) seen[static_cast<std::size_t>(c.keyword_id)] = true;
        }
        std::vector<std::string> out;
        for (std::size_t i = 0; i < keywords.size(); ++i) {
            if (seen[i] && (include_silence || keywords[i] != kSilenceKeyword)) {
                out.push_back(keywords[i]);
            }
        }
        return out;
    }

    /// Decoded waveform, cached after the first read.
    const Waveform& waveform(std::size_t clip_index) const {
        if (clip_index >= clips.size()) throw DataError("Dataset: clip index out of range");
        if (cache_.size() != clips.size()) cache_.resize(clips.size());
        auto& slot = cache_[clip_index];
        if (!slot) slot = std::make_unique<Waveform>(load_wav(root / clips[clip_index].rel_path));
        return *slot;
    }

    void write_index() const {
        nlohmann::json entries = nlohmann::json::object();
        for (const auto& c : clips) {
            const std::string key = std::string(domain_name(c.domain)) + "/" +
                                    split_name(c.split) + "/" + keywords[c.keyword_id];
            entries[key].push_back(c.rel_path);
        }
        nlohmann::json j;
        j["version"] = 1;
        j["entries"] = entries;
        std::ofstream f(root / "index.json", std::ios::trunc);
        if (!f) throw IoError("Dataset: cannot write " + (root / "index.json").string());
        f << j.dump(1) << "\n";
    }

private:
    mutable std::vector<std::unique_ptr<Waveform>> cache_;

    static bool parse_group(const std::string& key, Domain& d, Split& s, std::string& kw) {
        const auto a = key.find('/');
        const auto b = key.find('/', a + 1);
        if (a == std::string::npos || b == std::string::npos) return false;
        const std::string ds = key.substr(0, a);
        const std::string sp = key.substr(a + 1, b - a - 1);
        kw = key.substr(b + 1);
        if (ds == "in_domain") d = Domain::InDomain;
        else if (ds == "auxiliary") d = Domain::Auxiliary;
        else return false;
        if (sp == "train") s = Split::Train;
        else if (sp == "val") s = Split::Val;
        else if (sp == "test") s = Split::Test;
        else return false;
        return !kw.empty();
    }

    static Dataset load_index(const std::filesystem::path& root) {
        std::ifstream f(root / "index.json");
        nlohmann::json j;
        try {
            f >> j;
        } catch (const std::exception& e) {
            throw IoError("Dataset: malformed index.json in " + root.string() + ": " + e.what());
        }
        Dataset ds;
        ds.root = root;
        if (!j.contains("entries")) throw IoError("Dataset: index.json missing 'entries'");
        for (const auto& [key, paths] : j["entries"].items()) {
            Domain d;
            Split s;
            std::string kw;
            if (!parse_group(key, d, s, kw)) {
                throw IoError("Dataset: bad index group '" + key + "'");
            }
            int id = ds.keyword_id(kw);
            if (id < 0) {
                id = static_cast<int>(ds.keywords.size());
                ds.keywords.push_back(kw);
            }
            for (const auto& p : paths) {
                ds.clips.push_back({p.get<std::string>(), id, d, s});
            }
        }
        if (ds.clips.empty()) throw DataError("Dataset: " + root.string() + " lists no clips");
        return ds;
    }

    static Dataset scan(const std::filesystem::path& root) {
        Dataset ds;
        ds.root = root;
        if (!std::filesystem::is_directory(root)) {
            throw IoError("Dataset: " + root.string() + " is not a directory");
        }
        const std::pair<const char*, Domain> domains[] = {{"in_domain", Domain::InDomain},
                                                          {"auxiliary", Domain::Auxiliary}};
        const std::pair<const char*, Split> splits[] = {
            {"train", Split::Train}, {"val", Split::Val}, {"test", Split::Test}};
        for (const auto& [dname, dom] : domains) {
            for (const auto& [sname, split] : splits) {
                const auto dir = root / dname / sname;
                if (!std::filesystem::is_directory(dir)) continue;
                std::vector<std::filesystem::path> kw_dirs;
                for (const auto& e : std::filesystem::directory_iterator(dir)) {
                    if (e.is_directory()) kw_dirs.push_back(e.path());
                }
                std::sort(kw_dirs.begin(), kw_dirs.end());
                for (const auto& kdir : kw_dirs) {
                    const std::string kw = kdir.filename().string();
                    int id = ds.keyword_id(kw);
                    if (id < 0) {
                        id = static_cast<int>(ds.keywords.size());
                        ds.keywords.push_back(kw);
                    }
                    std::vector<std::filesystem::path> files;
                    for (const auto& e : std::filesystem::directory_iterator(kdir)) {
                        if (e.path().extension() == ".wav") files.push_back(e.path());
                    }
                    std::sort(files.begin(), files.end());
                    for (const auto& p : files) {
                        ds.clips.push_back({std::filesystem::relative(p, root).generic_string(),
                                            id, dom, split});
                    }
                }
            }
        }
        if (ds.clips.empty()) throw DataError("Dataset: no clips found under " + root.string());
        return ds;
    }
};

/// Class-indexed view over one (domain, split) slice, or a union of slices.
/// Classes are ordered by keyword name so auxiliary label indices are stable.
struct ClassView {
    const Dataset* dataset = nullptr;
    struct ClassEntry {
        std::string name;
        int keyword_id;
        std::vector<std::size_t> clip_indices;
    };
    std::vector<ClassEntry> classes;
    std::vector<std::size_t> all_clips;

    static ClassView of(const Dataset& ds, Domain d, Split s) {
        ClassView v;
        v.dataset = &ds;
        std::map<std::string, ClassEntry> by_name;
        for (std::size_t i = 0; i < ds.clips.size(); ++i) {
            const auto& c = ds.clips[i];
            if (c.domain != d || c.split != s) continue;
            auto& entry = by_name[ds.keywords[c.keyword_id]];
            entry.name = ds.keywords[c.keyword_id];
            entry.keyword_id = c.keyword_id;
            entry.clip_indices.push_back(i);
        }
        for (auto& [name, entry] : by_name) {
            v.all_clips.insert(v.all_clips.end(), entry.clip_indices.begin(),
                               entry.clip_indices.end());
            v.classes.push_back(std::move(entry));
        }
        return v;
    }

    /// Pooled class space across two views of the same dataset (ALL strategy).
    static ClassView union_of(const ClassView& a, const ClassView& b) {
        if (a.dataset != b.dataset) throw DataError("ClassView::union_of: different datasets");
        ClassView v;
        v.dataset = a.dataset;
        v.classes = a.classes;
        v.classes.insert(v.classes.end(), b.classes.begin(), b.classes.end());
        v.all_clips = a.all_clips;
        v.all_clips.insert(v.all_clips.end(), b.all_clips.begin(), b.all_clips.end());
        return v;
    }

    std::size_t n_classes() const { return classes.size(); }

    int label_of_keyword(const std::string& name) const {
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i].name == name) return static_cast<int>(i);
        }
        return -1;
    }
};

}  // namespace pkws
