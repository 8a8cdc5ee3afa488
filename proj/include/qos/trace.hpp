#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace qos {

// One replayable syscall event. args are op-specific, see docs/trace_format.md.
struct TraceRecord {
    uint64_t t_us = 0;
    uint32_t pid = 0;
    std::string op;
    nlohmann::json args;
};

struct Trace {
    std::vector<TraceRecord> records;

    std::string to_jsonl() const;
    static Trace from_jsonl(const std::string& text); // throws on parse error
};

Trace load_trace(const std::string& path);
void save_trace(const Trace& trace, const std::string& path);

struct ImageInfo {
    std::string name;
    uint64_t size = 0;
};

struct ImageManifest {
    ImageInfo binary;
    std::vector<ImageInfo> libraries;

    std::string to_json() const;
    static ImageManifest from_json(const std::string& text);
};

ImageManifest load_manifest(const std::string& path);
void save_manifest(const ImageManifest& m, const std::string& path);

// Deterministic filler bytes for synthetic image/file content.
std::vector<uint8_t> synthetic_bytes(const std::string& tag, uint64_t size);

} // namespace qos
