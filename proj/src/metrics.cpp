#include "qos/metrics.hpp"

#include <sstream>

#include <json.hpp>

namespace qos {

MessageCategory categorize(Opcode op) {
    switch (op) {
    case Opcode::OpenReq:
    case Opcode::FileIo:
    case Opcode::WcFlush:
        return MessageCategory::FileIo;
    case Opcode::MmapFetch:
    case Opcode::ExecFetch:
        return MessageCategory::Mmap;
    case Opcode::DisplayIo:
        return MessageCategory::Display;
    case Opcode::IoEventWait:
        return MessageCategory::IoEvent;
    default:
        return MessageCategory::Control;
    }
}

void MetricsReport::record_message(Opcode op) {
    total_messages++;
    switch (categorize(op)) {
    case MessageCategory::FileIo: file_io_messages++; break;
    case MessageCategory::Mmap: mmap_messages++; break;
    case MessageCategory::Display: display_messages++; break;
    case MessageCategory::IoEvent: io_event_messages++; break;
    case MessageCategory::Control: break;
    }
}

void MetricsReport::record_latency_us(uint64_t us) {
    size_t bucket = 0;
    while ((1ull << (bucket + 1)) <= us && bucket < 40)
        bucket++;
    if (latency_buckets.size() <= bucket)
        latency_buckets.resize(bucket + 1, 0);
    latency_buckets[bucket]++;
}

std::string MetricsReport::to_json() const {
    nlohmann::json j;
    j["trace"] = trace;
    j["mode"] = mode;
    j["optimizer"] = optimizer;
    j["total_messages"] = total_messages;
    j["mmap_messages"] = mmap_messages;
    j["display_messages"] = display_messages;
    j["file_io_messages"] = file_io_messages;
    j["io_event_messages"] = io_event_messages;
    j["denied_ops"] = denied_ops;
    j["violations"] = violations;
    j["startup_messages"] = startup_messages;
    j["virtual_time_us"] = virtual_time_us;
    j["policy_kill"] = policy_kill;
    j["latency_buckets"] = latency_buckets;
    return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    MetricsReport r;
    r.trace = j.value("trace", "");
    r.mode = j.value("mode", "");
    r.optimizer = j.value("optimizer", false);
    r.total_messages = j.value("total_messages", 0ull);
    r.mmap_messages = j.value("mmap_messages", 0ull);
    r.display_messages = j.value("display_messages", 0ull);
    r.file_io_messages = j.value("file_io_messages", 0ull);
    r.io_event_messages = j.value("io_event_messages", 0ull);
    r.denied_ops = j.value("denied_ops", 0ull);
    r.violations = j.value("violations", 0ull);
    r.startup_messages = j.value("startup_messages", 0ull);
    r.virtual_time_us = j.value("virtual_time_us", 0ull);
    r.policy_kill = j.value("policy_kill", false);
    if (j.contains("latency_buckets"))
        r.latency_buckets = j["latency_buckets"].get<std::vector<uint64_t>>();
    return r;
}

namespace {

const char* kColumns[] = {
    "trace",        "mode",           "optimizer",        "total_messages",
    "mmap_messages", "display_messages", "file_io_messages", "io_event_messages",
    "denied_ops",   "violations",     "startup_messages", "virtual_time_us",
    "policy_kill",
};

std::vector<std::string> row_of(const MetricsReport& r) {
    return {r.trace,
            r.mode,
            r.optimizer ? "on" : "off",
            std::to_string(r.total_messages),
            std::to_string(r.mmap_messages),
            std::to_string(r.display_messages),
            std::to_string(r.file_io_messages),
            std::to_string(r.io_event_messages),
            std::to_string(r.denied_ops),
            std::to_string(r.violations),
            std::to_string(r.startup_messages),
            std::to_string(r.virtual_time_us),
            r.policy_kill ? "yes" : "no"};
}

} // namespace

std::string export_reports(const std::vector<MetricsReport>& reports,
                           const std::string& format) {
    if (format == "json") {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : reports)
            arr.push_back(nlohmann::json::parse(r.to_json()));
        return arr.dump(2);
    }
    const size_t ncol = sizeof(kColumns) / sizeof(kColumns[0]);
    if (format == "csv") {
        std::ostringstream out;
        for (size_t i = 0; i < ncol; i++)
            out << kColumns[i] << (i + 1 < ncol ? "," : "\n");
        for (const auto& r : reports) {
            auto row = row_of(r);
            for (size_t i = 0; i < ncol; i++)
                out << row[i] << (i + 1 < ncol ? "," : "\n");
        }
        return out.str();
    }
    if (format != "table")
        throw std::invalid_argument("unknown export format: " + format);
    // fixed-width table
    std::vector<size_t> widths(ncol);
    for (size_t i = 0; i < ncol; i++)
        widths[i] = std::string(kColumns[i]).size();
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : reports) {
        rows.push_back(row_of(r));
        for (size_t i = 0; i < ncol; i++)
            widths[i] = std::max(widths[i], rows.back()[i].size());
    }
    std::ostringstream out;
    for (size_t i = 0; i < ncol; i++) {
        out << kColumns[i]
            << std::string(widths[i] - std::string(kColumns[i]).size() + 2, ' ');
    }
    out << "\n";
    for (const auto& row : rows) {
        for (size_t i = 0; i < ncol; i++)
            out << row[i] << std::string(widths[i] - row[i].size() + 2, ' ');
        out << "\n";
    }
    return out.str();
}

uint64_t MessageAccounting::total_guest_sent() const {
    uint64_t n = 0;
    for (const auto& [op, c] : guest_sent)
        n += c;
    return n;
}

uint64_t MessageAccounting::total_gateway_received() const {
    uint64_t n = 0;
    for (const auto& [op, c] : gateway_received)
        n += c;
    return n;
}

} // namespace qos
