#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qos/channel.hpp"

namespace qos {

enum class MessageCategory : uint8_t { FileIo, Mmap, Display, IoEvent, Control };

// Category buckets for the per-run breakdown: OpenReq/FileIo/WcFlush count
// as file I/O, MmapFetch/ExecFetch as mmap, DisplayIo as display,
// IoEventWait as I/O event; everything else (launch, clone, exit, signal,
// echo and all replies) only contributes to the total.
MessageCategory categorize(Opcode op);

struct MetricsReport {
    std::string trace;
    std::string mode;      // "local" | "remote"
    bool optimizer = false;

    uint64_t total_messages = 0; // guest -> host requests/notifications
    uint64_t mmap_messages = 0;
    uint64_t display_messages = 0;
    uint64_t file_io_messages = 0;
    uint64_t io_event_messages = 0;
    uint64_t denied_ops = 0;
    uint64_t violations = 0;
    uint64_t startup_messages = 0;
    uint64_t virtual_time_us = 0;
    bool policy_kill = false;

    // round-trip latency histogram, power-of-two us buckets [1,2), [2,4)...
    std::vector<uint64_t> latency_buckets;

    void record_message(Opcode op);
    void record_latency_us(uint64_t us);

    std::string to_json() const;
    static MetricsReport from_json(const std::string& text);
};

std::string export_reports(const std::vector<MetricsReport>& reports,
                           const std::string& format); // json | csv | table

// Conservation ledger: requests sent by the guest, requests seen by the
// gateway, and replies both ways, per opcode.
struct MessageAccounting {
    std::map<uint8_t, uint64_t> guest_sent;
    std::map<uint8_t, uint64_t> gateway_received;
    uint64_t replies_sent = 0;
    uint64_t replies_received = 0;

    void count_guest_send(Opcode op) { guest_sent[(uint8_t)op]++; }
    void count_gateway_recv(Opcode op) { gateway_received[(uint8_t)op]++; }
    uint64_t total_guest_sent() const;
    uint64_t total_gateway_received() const;
};

} // namespace qos
