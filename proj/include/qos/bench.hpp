#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qos/config.hpp"

namespace qos {

struct BenchConfig {
    uint32_t procs = 1;
    uint64_t duration_us = 1'000'000;
    uint32_t msg_size = 32;
    bool threaded = false; // wall clock + real threads instead of the model
    // consumer cost model: one wakeup amortized over the drained batch,
    // plus a per-message service cost
    uint64_t wake_cost_us = 16;
    uint64_t service_cost_us = 8;
};

struct BenchRow {
    uint32_t procs = 0;
    uint64_t messages = 0;       // completed request/reply cycles
    double msgs_per_s = 0;
    double mean_rtt_us = 0;
};

// Closed-loop echo benchmark over the channel: each producer keeps one
// request outstanding; the host drains every pending slot per wakeup.
BenchRow bench_channel(const BenchConfig& cfg);

std::vector<BenchRow> bench_scaling(const std::vector<uint32_t>& proc_counts,
                                    uint64_t duration_us);

std::string bench_table(const std::vector<BenchRow>& rows);

} // namespace qos
