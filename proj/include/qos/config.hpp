#pragma once

#include <cstdint>
#include <string>

namespace qos {

struct ChannelConfig {
    uint32_t normal_slot_count = 64;
    uint32_t normal_slot_capacity = 64; // messages per ring, power of two
    uint32_t normal_payload_max = 4096; // bytes
    uint32_t big_slot_count = 8;
    uint32_t big_slot_size = 4u << 20; // bytes

    // Returns an empty string when the config is valid, else the reason.
    std::string validate() const;
};

struct RateLimitConfig {
    double rate_per_s = 0;
    double burst = 0;
};

struct GatewayConfig {
    std::string whitelist_root = "/home/user";
    RateLimitConfig file_meta{1000, 2000};
    RateLimitConfig file_data{10000, 20000};
    RateLimitConfig display{20000, 40000};
    RateLimitConfig event{20000, 40000};
    uint64_t kill_window_us = 5'000'000; // sustained-empty window before Kill
    bool drop_clipboard = false;
};

struct OptimizerConfig {
    bool write_combine = true;
    bool read_batch = true;
    uint32_t wc_byte_budget = 256u << 10;   // flush threshold
    uint64_t wc_age_budget_us = 50'000;     // virtual age before forced flush
    uint32_t wc_merge_distance = 0;         // gap allowed between merged extents
    uint32_t rb_chunk_bytes = 64u << 10;
};

struct SelectConfig {
    uint64_t initial_slice_us = 5'000;
    uint64_t min_slice_us = 1'000;
    uint64_t max_slice_us = 50'000;
    double ewma_alpha = 0.3;
    double grow_factor = 1.5;
    uint64_t poll_slice_us = 10'000; // fixed, not adaptive
};

struct QosConfig {
    ChannelConfig channel;
    GatewayConfig gateway;
    OptimizerConfig optimizer;
    SelectConfig select;
};

// Parses an INI-style file ([section] + key = value lines). Unknown keys are
// ignored so configs stay forward compatible. Throws std::runtime_error on
// unreadable files or malformed numbers.
QosConfig load_config(const std::string& path);
QosConfig parse_config(const std::string& text);

} // namespace qos
