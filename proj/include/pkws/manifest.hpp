#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pkws/errors.hpp"

namespace pkws {

/// One word occurrence from a forced-alignment manifest.
struct ManifestEntry {
    std::string utterance_id;
    std::string audio_path;
    std::string word;  // lower-case token
    double start_s = 0.0;
    double end_s = 0.0;

    double duration() const { return end_s - start_s; }
};

struct ManifestIngest {
    std::vector<ManifestEntry> entries;
    std::vector<std::string> rejected;  // human-readable reasons, one per bad row
};

inline std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

/// CSV with header utterance_id,audio_path,word,start_s,end_s. Fields carry
/// no quoting or embedded commas. Malformed rows abort with the line number;
/// rows with start >= end are skipped and reported.
inline ManifestIngest ingest_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("ingest_manifest: cannot open " + path.string());

    auto fail = [&](std::size_t line, const std::string& why) {
        throw DataError("ingest_manifest: " + path.string() + ":" + std::to_string(line) + ": " +
                        why);
    };

    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(f, line)) fail(1, "empty file");
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "utterance_id,audio_path,word,start_s,end_s") {
        fail(1, "unexpected header '" + line + "'");
    }

    ManifestIngest out;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) fields.push_back(tok);
        if (fields.size() != 5) {
            fail(lineno, "expected 5 fields, got " + std::to_string(fields.size()));
        }
        ManifestEntry e;
        e.utterance_id = fields[0];
        e.audio_path = fields[1];
        e.word = to_lower(fields[2]);
        try {
            std::size_t used = 0;
            e.start_s = std::stod(fields[3], &used);
            if (used != fields[3].size()) throw std::invalid_argument("");
            e.end_s = std::stod(fields[4], &used);
            if (used != fields[4].size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            fail(lineno, "unparsable time fields '" + fields[3] + "', '" + fields[4] + "'");
        }
        if (e.word.empty()) fail(lineno, "empty word");
        if (e.start_s < 0.0) fail(lineno, "negative start time");
        if (e.start_s >= e.end_s) {
            out.rejected.push_back("line " + std::to_string(lineno) + ": start " +
                                   fields[3] + " >= end " + fields[4] + " for word '" + e.word +
                                   "'");
            continue;
        }
        out.entries.push_back(std::move(e));
    }
    return out;
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<ManifestEntry>& entries) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_manifest: cannot open " + path.string());
    f << "utterance_id,audio_path,word,start_s,end_s\n";
    char buf[64];
    for (const auto& e : entries) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f", e.start_s, e.end_s);
        f << e.utterance_id << "," << e.audio_path << "," << e.word << "," << buf << "\n";
    }
}

}  // namespace pkws
