#include "qos/trace.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qos {

std::string Trace::to_jsonl() const {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json j{{"t_us", r.t_us}, {"pid", r.pid}, {"op", r.op}};
        if (!r.args.is_null())
            j["args"] = r.args;
        out += j.dump();
        out += '\n';
    }
    return out;
}

Trace Trace::from_jsonl(const std::string& text) {
    Trace t;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        if (line.empty())
            continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("trace line " + std::to_string(lineno) +
                                     ": " + e.what());
        }
        TraceRecord r;
        r.t_us = j.value("t_us", 0ull);
        r.pid = j.value("pid", 0u);
        r.op = j.value("op", "");
        if (r.op.empty())
            throw std::runtime_error("trace line " + std::to_string(lineno) +
                                     ": missing op");
        r.args = j.value("args", nlohmann::json::object());
        t.records.push_back(std::move(r));
    }
    return t;
}

Trace load_trace(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        throw std::runtime_error("cannot open trace: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return Trace::from_jsonl(ss.str());
}

void save_trace(const Trace& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f)
        throw std::runtime_error("cannot write trace: " + path);
    f << trace.to_jsonl();
}

std::string ImageManifest::to_json() const {
    nlohmann::json j;
    j["binary"] = {{"name", binary.name}, {"size", binary.size}};
    j["libraries"] = nlohmann::json::array();
    for (const auto& lib : libraries)
        j["libraries"].push_back({{"name", lib.name}, {"size", lib.size}});
    return j.dump(2);
}

ImageManifest ImageManifest::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ImageManifest m;
    m.binary.name = j["binary"].value("name", "");
    m.binary.size = j["binary"].value("size", 0ull);
    for (const auto& lib : j.value("libraries", nlohmann::json::array()))
        m.libraries.push_back(
            {lib.value("name", ""), lib.value("size", 0ull)});
    return m;
}

ImageManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        throw std::runtime_error("cannot open manifest: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ImageManifest::from_json(ss.str());
}

void save_manifest(const ImageManifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f)
        throw std::runtime_error("cannot write manifest: " + path);
    f << m.to_json();
}

std::vector<uint8_t> synthetic_bytes(const std::string& tag, uint64_t size) {
    // splitmix64 over (tag hash, index); stable across platforms
    uint64_t seed = 0xcbf29ce484222325ull;
    for (char c : tag)
        seed = (seed ^ (uint8_t)c) * 0x100000001b3ull;
    std::vector<uint8_t> out(size);
    uint64_t x = seed;
    for (uint64_t i = 0; i < size; i += 8) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        z = z ^ (z >> 31);
        for (int b = 0; b < 8 && i + b < size; b++)
            out[i + b] = (uint8_t)(z >> (8 * b));
    }
    return out;
}

} // namespace qos
