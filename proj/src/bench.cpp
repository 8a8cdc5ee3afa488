#include "qos/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <iomanip>
#include <sstream>
#include <thread>

#include "qos/channel.hpp"
#include "qos/clock.hpp"

namespace qos {

namespace {

ChannelConfig bench_channel_config(uint32_t procs) {
    ChannelConfig cc;
    cc.normal_slot_count = std::max<uint32_t>(64, 2 * procs);
    return cc;
}

BenchRow bench_virtual(const BenchConfig& cfg) {
    ChannelRegion channel(bench_channel_config(cfg.procs));
    VirtualClock clock;
    std::vector<SlotPair> pairs;
    for (uint32_t p = 0; p < cfg.procs; p++) {
        auto a = channel.allocate_slot_pair(1, p + 1);
        pairs.push_back(a.pair);
    }

    std::vector<uint8_t> payload(cfg.msg_size > 32 ? cfg.msg_size - 32 : 0);
    BenchRow row;
    row.procs = cfg.procs;
    double rtt_sum = 0;

    std::vector<uint64_t> sent_at(cfg.procs, 0);
    while (clock.now_us() < cfg.duration_us) {
        // every producer fires its next request
        for (uint32_t p = 0; p < cfg.procs; p++) {
            MessageHeader h;
            h.opcode = (uint8_t)Opcode::Echo;
            h.app_id = 1;
            h.pid = p + 1;
            channel.send(pairs[p].to_host, h, payload);
            sent_at[p] = clock.now_us();
        }
        // one consumer wakeup drains the whole batch
        clock.sleep_us(cfg.wake_cost_us);
        for (uint32_t p = 0; p < cfg.procs; p++) {
            Message m;
            while (channel.recv(pairs[p].to_host, m) == RecvStatus::Ok) {
                clock.sleep_us(cfg.service_cost_us);
                MessageHeader rh;
                rh.opcode = (uint8_t)Opcode::Reply;
                rh.app_id = 1;
                rh.pid = p + 1;
                channel.send(pairs[p].to_guest, rh, m.payload);
            }
        }
        for (uint32_t p = 0; p < cfg.procs; p++) {
            Message m;
            while (channel.recv(pairs[p].to_guest, m) == RecvStatus::Ok) {
                rtt_sum += (double)(clock.now_us() - sent_at[p]);
                row.messages++;
            }
        }
    }

    uint64_t elapsed = clock.now_us();
    row.msgs_per_s = elapsed ? row.messages * 1e6 / (double)elapsed : 0;
    row.mean_rtt_us = row.messages ? rtt_sum / (double)row.messages : 0;
    return row;
}

BenchRow bench_threaded(const BenchConfig& cfg) {
    ChannelRegion channel(bench_channel_config(cfg.procs));
    WallClock clock;
    std::vector<SlotPair> pairs;
    std::vector<uint32_t> host_slots;
    for (uint32_t p = 0; p < cfg.procs; p++) {
        auto a = channel.allocate_slot_pair(1, p + 1);
        pairs.push_back(a.pair);
        host_slots.push_back(a.pair.to_host);
    }

    std::atomic<bool> stop{false};
    std::atomic<uint64_t> completed{0};
    std::atomic<uint64_t> rtt_total{0};
    std::vector<uint8_t> payload(cfg.msg_size > 32 ? cfg.msg_size - 32 : 0);

    std::thread host([&] {
        while (!stop.load(std::memory_order_relaxed)) {
            auto ready =
                channel.wait_any(host_slots, clock.now_us() + 1000, clock);
            for (uint32_t slot : ready) {
                Message m;
                while (channel.recv(slot, m) == RecvStatus::Ok) {
                    MessageHeader rh;
                    rh.opcode = (uint8_t)Opcode::Reply;
                    rh.app_id = m.header.app_id;
                    rh.pid = m.header.pid;
                    uint32_t back = pairs[m.header.pid - 1].to_guest;
                    channel.send_with_retry(back, rh, m.payload, clock);
                }
            }
        }
    });

    std::vector<std::thread> producers;
    for (uint32_t p = 0; p < cfg.procs; p++) {
        producers.emplace_back([&, p] {
            while (!stop.load(std::memory_order_relaxed)) {
                uint64_t t0 = clock.now_us();
                MessageHeader h;
                h.opcode = (uint8_t)Opcode::Echo;
                h.app_id = 1;
                h.pid = p + 1;
                if (channel.send_with_retry(pairs[p].to_host, h, payload,
                                            clock) != SendStatus::Ok)
                    continue;
                Message m;
                while (channel.recv(pairs[p].to_guest, m) != RecvStatus::Ok) {
                    if (stop.load(std::memory_order_relaxed))
                        return;
                    std::this_thread::yield();
                }
                completed.fetch_add(1, std::memory_order_relaxed);
                rtt_total.fetch_add(clock.now_us() - t0,
                                    std::memory_order_relaxed);
            }
        });
    }

    std::this_thread::sleep_for(std::chrono::microseconds(cfg.duration_us));
    stop.store(true);
    for (auto& t : producers)
        t.join();
    host.join();

    BenchRow row;
    row.procs = cfg.procs;
    row.messages = completed.load();
    row.msgs_per_s = row.messages * 1e6 / (double)cfg.duration_us;
    row.mean_rtt_us =
        row.messages ? (double)rtt_total.load() / (double)row.messages : 0;
    return row;
}

} // namespace

BenchRow bench_channel(const BenchConfig& cfg) {
    return cfg.threaded ? bench_threaded(cfg) : bench_virtual(cfg);
}

std::vector<BenchRow> bench_scaling(const std::vector<uint32_t>& proc_counts,
                                    uint64_t duration_us) {
    std::vector<BenchRow> rows;
    for (uint32_t n : proc_counts) {
        BenchConfig cfg;
        cfg.procs = n;
        cfg.duration_us = duration_us;
        rows.push_back(bench_channel(cfg));
    }
    return rows;
}

std::string bench_table(const std::vector<BenchRow>& rows) {
    std::ostringstream out;
    out << std::left << std::setw(7) << "procs" << std::setw(14) << "messages"
        << std::setw(14) << "msgs/s" << "mean_rtt_us\n";
    for (const auto& r : rows) {
        out << std::left << std::setw(7) << r.procs << std::setw(14)
            << r.messages << std::setw(14) << (uint64_t)r.msgs_per_s
            << r.mean_rtt_us << "\n";
    }
    return out.str();
}

} // namespace qos
