#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qos/config.hpp"
#include "qos/hostfs.hpp"

namespace qos {

// Per-path writer census shared between guest processes and the gateway.
// Optimizations stay enabled only while a path has at most one quarantine
// writer and no host-side writer. A write generation counter lets read
// caches detect staleness without a callback per cache.
class ConsistencyGuard {
public:
    // open/close of a writer; returns the enabled flag after the update
    bool writer_open(const std::string& path, Domain domain);
    bool writer_close(const std::string& path, Domain domain);
    bool enabled(const std::string& path) const;

    void bump_write_generation(const std::string& path);
    uint64_t write_generation(const std::string& path) const;

    // invoked when a path transitions enabled -> disabled
    void set_on_disable(std::function<void(const std::string&)> fn) {
        on_disable_ = std::move(fn);
    }

private:
    struct Census {
        uint32_t quarantine_writers = 0;
        uint32_t host_writers = 0;
        uint64_t generation = 0;
    };
    bool enabled_locked(const Census& c) const {
        return c.quarantine_writers <= 1 && c.host_writers == 0;
    }

    mutable std::mutex mu_;
    std::map<std::string, Census> census_;
    std::function<void(const std::string&)> on_disable_;
};

// Message-side effects the optimizer needs; implemented by the guest
// runtime (real channel traffic) and by mocks in tests.
class RemoteIo {
public:
    virtual ~RemoteIo() = default;
    // Applies the extents on the host. Returns the number of channel
    // messages used (1 for a big-slot WcFlush, more for the chunked
    // fallback), or 0 on failure.
    virtual uint32_t flush_extents(uint32_t fd,
                                   const std::vector<FsExtent>& extents) = 0;
    // Reads up to len bytes at offset; short result means EOF.
    virtual std::optional<std::vector<uint8_t>>
    fetch_chunk(uint32_t fd, uint64_t offset, uint32_t len) = 0;
};

enum class WcStatus { Disabled, Buffered, Flushed };

struct WcOutcome {
    WcStatus status = WcStatus::Disabled;
    uint32_t messages = 0; // WcFlush/fallback messages emitted by this call
};

// Per-process traffic reducer: write-combining buffers and read-batch
// caches, both keyed by guest fd. All calls happen on the owning process
// context.
class Optimizer {
public:
    Optimizer(const OptimizerConfig& cfg, ConsistencyGuard& guard,
              RemoteIo& io);

    WcOutcome wc_append(uint32_t fd, const std::string& path, uint64_t offset,
                        std::span<const uint8_t> bytes, uint64_t now_us);
    bool wc_pending(uint32_t fd) const;
    uint32_t flush_fd(uint32_t fd);
    uint32_t flush_path(const std::string& path);
    uint32_t flush_all();
    // flushes buffers whose oldest byte exceeds the age budget
    uint32_t age_tick(uint64_t now_us);

    // Returns the read result (possibly served from cache), or nullopt on
    // fetch failure. messages_out counts channel round trips this call made.
    std::optional<std::vector<uint8_t>> rb_read(uint32_t fd,
                                                const std::string& path,
                                                uint64_t offset, uint32_t len,
                                                uint32_t& messages_out);
    void invalidate_read_cache(uint32_t fd);
    void drop_fd(uint32_t fd);

    bool write_combine_enabled() const { return cfg_.write_combine; }
    bool read_batch_enabled() const { return cfg_.read_batch; }

private:
    struct WcBuffer {
        std::string path;
        std::vector<FsExtent> extents;
        uint64_t bytes = 0;
        uint64_t first_append_us = 0;
    };
    struct RbWindow {
        std::string path;
        uint64_t offset = 0;
        std::vector<uint8_t> data;
        uint64_t generation = 0;
    };

    uint32_t flush_locked(uint32_t fd, WcBuffer& buf);

    OptimizerConfig cfg_;
    ConsistencyGuard& guard_;
    RemoteIo& io_;
    std::map<uint32_t, WcBuffer> wc_;
    std::map<uint32_t, RbWindow> rb_;
};

} // namespace qos
