#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qos/channel.hpp"
#include "qos/clock.hpp"
#include "qos/config.hpp"
#include "qos/hostfs.hpp"
#include "qos/metrics.hpp"
#include "qos/optimizer.hpp"
#include "qos/security.hpp"

namespace qos {

enum class ViolationReason : uint8_t {
    BadMagic,
    BadVersion,
    BadOpcode,
    OversizePayload,
    Malformed,
    ForeignBigSlot,
    ForeignHandle,
    BadPath,
    PathEscape,
};

const char* violation_reason_name(ViolationReason r);

struct Violation {
    ViolationReason reason;
    std::string detail;
};

enum class OpClass : uint8_t { FileMeta, FileData, Display, Event };
enum class RateDecision : uint8_t { Allow, Throttle, Kill };
enum class RateStage : uint8_t { Normal, Warned, Throttled };

struct AuditEntry {
    uint64_t t_us = 0;
    uint32_t app_id = 0;
    std::string kind;
    std::string detail;
};

// Append-only notification/audit log, JSON lines on export.
class AuditLog {
public:
    void append(uint64_t t_us, uint32_t app_id, const std::string& kind,
                const std::string& detail);
    const std::vector<AuditEntry>& entries() const { return entries_; }
    std::string to_jsonl() const;

private:
    std::vector<AuditEntry> entries_;
};

struct CleanupReport {
    uint32_t handles = 0;
    uint32_t slots = 0;
    uint32_t big_slots = 0;
    std::string reason;
};

// One split-context per quarantined application: drains that app's
// guest-to-host slots, validates each message against the strict format
// (deny by default), applies rate limits, executes file/display requests
// against hostfs and replies with the request seq echoed in the reply
// payload. Any violation kills the whole application.
class SplitContext {
public:
    enum class Status : uint8_t { Running, Terminated };

    // resolves image names for ExecFetch (remote launches)
    using ImageResolver =
        std::function<std::optional<std::vector<uint8_t>>(const std::string&)>;
    // ground-truth readiness for host-side I/O event waits
    using ReadinessOracle =
        std::function<std::optional<uint64_t>(uint32_t handle)>;
    using KillCallback = std::function<void(uint32_t app_id, const std::string&)>;

    SplitContext(uint32_t app_id, ChannelRegion& channel, HostFs& fs,
                 SecurityMonitor& sm, ConsistencyGuard& guard,
                 const GatewayConfig& cfg, AuditLog& audit, Clock& clock,
                 MessageAccounting* accounting = nullptr);

    uint32_t app_id() const { return app_id_; }
    Status status() const { return status_; }
    const std::string& termination_reason() const { return term_reason_; }

    void watch(uint32_t pid, SlotPair pair);
    void unwatch(uint32_t pid);
    size_t watched_count() const { return watched_.size(); }
    std::vector<uint32_t> watched_slots() const;

    void set_image_resolver(ImageResolver r) { images_ = std::move(r); }
    void set_readiness_oracle(ReadinessOracle r) { readiness_ = std::move(r); }
    void set_kill_callback(KillCallback k) { on_kill_ = std::move(k); }

    // Checks in order: magic/version, opcode allowed, payload cap, decode,
    // big-ref ownership, handle ownership, path confinement.
    std::optional<Violation> validate_message(const Message& msg);

    // Drains every watched slot; returns messages handled. Stops (and
    // cleans up) on the first violation.
    size_t pump();
    // Blocking variant for the threaded bench: waits on all slots.
    size_t serve_until(uint64_t deadline_us);

    RateDecision rate_check(OpClass cls);
    RateStage rate_stage(OpClass cls) const;

    CleanupReport terminate(const std::string& reason);

    uint64_t violations() const { return violations_; }
    uint64_t denied_ops() const { return denied_; }
    uint64_t processed() const { return processed_; }
    const std::vector<uint8_t>* stdio_sink(uint32_t handle) const;

    // resource ledgers, for the leak audits
    size_t handle_count() const { return handles_.size(); }
    bool owns_handle(uint32_t id) const { return handles_.count(id) != 0; }
    uint32_t handle_refcount(uint32_t id) const;

    // host-side handle bookkeeping used by CloneNotify processing
    struct HostHandle {
        enum class Kind : uint8_t { File, Stdio } kind = Kind::File;
        uint64_t fs_handle = 0;
        uint32_t owner_pid = 0;
        uint32_t refcount = 1;
        bool write_mode = false;
        std::string path;
    };

private:
    struct Limiter {
        RateLimitConfig cfg;
        double tokens = 0;
        uint64_t last_refill_us = 0;
        RateStage stage = RateStage::Normal;
        std::optional<uint64_t> empty_since_us;
    };

    void process(const Message& msg, uint32_t src_slot);
    RecvStatus recv_checked(uint32_t slot, Message& msg);
    void reply_to(uint32_t pid, uint64_t echo_seq, uint32_t status,
                  uint64_t value, std::span<const uint8_t> data,
                  uint32_t big_ref = kBigRefNone);
    OpClass classify_op(const Message& msg) const;
    std::optional<std::string> confined_path(const std::string& path) const;

    void op_open(const Message& msg);
    void op_file_io(const Message& msg);
    void op_wc_flush(const Message& msg);
    void op_mmap_fetch(const Message& msg);
    void op_exec_fetch(const Message& msg);
    void op_display(const Message& msg);
    void op_io_event_wait(const Message& msg);
    void op_launch(const Message& msg);
    void op_clone(const Message& msg);
    void op_exit(const Message& msg);
    void op_echo(const Message& msg);

    void drop_handle_ref(uint32_t id);

    uint32_t app_id_;
    ChannelRegion& channel_;
    HostFs& fs_;
    SecurityMonitor& sm_;
    ConsistencyGuard& guard_;
    GatewayConfig cfg_;
    AuditLog& audit_;
    Clock& clock_;
    MessageAccounting* accounting_;

    Status status_ = Status::Running;
    std::string term_reason_;
    std::map<uint32_t, SlotPair> watched_; // pid -> pair
    std::map<uint32_t, HostHandle> handles_;
    uint32_t next_handle_ = 1;
    std::map<uint8_t, Limiter> limiters_;
    ImageResolver images_;
    ReadinessOracle readiness_;
    KillCallback on_kill_;
    std::map<uint32_t, std::vector<uint8_t>> stdio_sinks_; // handle -> bytes
    uint64_t violations_ = 0;
    uint64_t denied_ = 0;
    uint64_t processed_ = 0;
};

// One-context-per-application registry.
class GatewayManager {
public:
    GatewayManager(ChannelRegion& channel, HostFs& fs, SecurityMonitor& sm,
                   ConsistencyGuard& guard, const GatewayConfig& cfg,
                   AuditLog& audit, Clock& clock,
                   MessageAccounting* accounting = nullptr);

    SplitContext* spawn(uint32_t app_id); // nullptr when already running
    SplitContext* find(uint32_t app_id);
    void erase(uint32_t app_id);
    size_t live_count() const;

private:
    ChannelRegion& channel_;
    HostFs& fs_;
    SecurityMonitor& sm_;
    ConsistencyGuard& guard_;
    GatewayConfig cfg_;
    AuditLog& audit_;
    Clock& clock_;
    MessageAccounting* accounting_;
    std::map<uint32_t, std::unique_ptr<SplitContext>> contexts_;
};

} // namespace qos
