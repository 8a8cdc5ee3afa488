#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qos/channel.hpp"
#include "qos/clock.hpp"
#include "qos/config.hpp"
#include "qos/metrics.hpp"
#include "qos/optimizer.hpp"
#include "qos/security.hpp"
#include "qos/trace.hpp"
#include "qos/wire.hpp"

namespace qos {

enum class FileKind : uint8_t { Regular, Device, Socket, Pipe, Library };
enum class Route : uint8_t { Local, Remote };

FileKind file_kind_from_string(const std::string& s);
FileKind guess_file_kind(const std::string& path);

// Open-classification rule: devices, sockets and pipes stay in the
// quarantine; libraries follow the launch mode; regular files go to the
// host. Total function.
Route classify_open(FileKind kind, LaunchMode mode);

struct LaunchSpec {
    uint32_t app_id = 1;
    uint32_t root_pid = 1;
    std::string app_name;
    std::vector<std::string> argv;
    LaunchMode mode = LaunchMode::Local;
    std::vector<std::string> input_files;
    ImageManifest manifest;
};

struct FdEntry {
    bool remote = false;
    uint32_t host_handle = 0; // remote target
    uint64_t offset = 0;      // guest-side cursor
    std::string path;
    FileKind kind = FileKind::Regular;
    bool cloexec = false;
    bool write_mode = false;
    uint32_t refcount = 1; // share count across CLONE_FILES processes
};

struct FdTable {
    std::map<uint32_t, FdEntry> fds;
};

struct FaultRegion {
    uint32_t fd = 0;
    uint64_t len = 0;
    uint64_t file_offset = 0;
    bool local = false;
    FileKind kind = FileKind::Regular;
    std::string path;
    std::set<uint64_t> populated;                 // page-aligned offsets
    std::map<uint64_t, std::vector<uint8_t>> pages;
};

inline constexpr uint64_t kPageSize = 4096;

// Adaptive select state: EWMA over which side fired, slices clamped to
// configured bounds.
struct SelectPolicy {
    uint64_t guest_slice_us = 5000;
    uint64_t host_slice_us = 5000;
    double ewma_guest_hits = 0;
    double ewma_host_hits = 0;
};

struct ProcessCtx {
    uint32_t app_id = 0;
    uint32_t pid = 0;
    SlotPair slots;
    std::shared_ptr<FdTable> fds;
    std::map<uint32_t, FaultRegion> regions;
    SelectPolicy select_policy;
    bool alive = false;
    uint32_t parent_pid = 0;
    std::vector<uint32_t> children;
    std::unique_ptr<RemoteIo> remote_io;
    std::unique_ptr<Optimizer> optimizer;
    std::vector<uint32_t> pending_signals;
    uint64_t launch_messages = 0;
};

enum class RouteStatus : uint8_t {
    Ok,
    BadDescriptor,
    IoError,
    ProtocolError,
    Denied,
    LaunchFailed,
    NoSuchApp,
    SlotExhausted,
    Killed,
};

struct IoOutcome {
    RouteStatus status = RouteStatus::IoError;
    wire::ReplyStatus reply = wire::ReplyStatus::Ok;
    uint64_t value = 0;
    std::vector<uint8_t> data;
};

// The host half the guest runtime talks to. In the full simulator this is
// backed by the gateway; tests can substitute their own.
class HostSide {
public:
    virtual ~HostSide() = default;
    virtual void watch(uint32_t app_id, uint32_t pid, SlotPair pair) = 0;
    virtual void pump(uint32_t app_id) = 0;
    virtual void set_host_readiness(uint32_t app_id, uint32_t handle,
                                    std::optional<uint64_t> ready_at_us) = 0;
};

// Quarantine-side agent: launches split-applications, classifies and
// routes syscalls, and keeps per-process descriptor and mapping state.
class GuestRuntime {
public:
    GuestRuntime(const QosConfig& cfg, ChannelRegion& channel, Clock& clock,
                 HostSide& host);

    // guest image store (local-mode binaries/libraries)
    void add_guest_image(const std::string& name);
    bool has_guest_image(const std::string& name) const;
    void reset_guest_images();

    struct LaunchResult {
        RouteStatus status = RouteStatus::LaunchFailed;
        ProcessCtx* ctx = nullptr;
        uint64_t launch_messages = 0;
    };
    LaunchResult launch_application(const LaunchSpec& spec);

    ProcessCtx* find_process(uint32_t pid);
    std::vector<uint32_t> live_pids(uint32_t app_id) const;

    IoOutcome route_open(ProcessCtx& ctx, uint32_t fd, const std::string& path,
                         FileKind kind, uint8_t open_flags, bool cloexec);
    IoOutcome route_read(ProcessCtx& ctx, uint32_t fd, uint64_t len);
    IoOutcome route_write(ProcessCtx& ctx, uint32_t fd,
                          std::span<const uint8_t> data);
    IoOutcome route_seek(ProcessCtx& ctx, uint32_t fd, uint64_t offset);
    IoOutcome route_stat(ProcessCtx& ctx, uint32_t fd);
    IoOutcome route_close(ProcessCtx& ctx, uint32_t fd);
    IoOutcome route_display(ProcessCtx& ctx, std::span<const uint8_t> data,
                            bool clipboard);
    IoOutcome set_cloexec(ProcessCtx& ctx, uint32_t fd, bool on);

    RouteStatus map_region(ProcessCtx& ctx, uint32_t region_id, uint32_t fd,
                           uint64_t len, uint64_t file_offset);
    struct FaultResult {
        RouteStatus status = RouteStatus::IoError;
        std::vector<uint8_t> page;
        bool fetched = false; // false when served from the populated set
    };
    FaultResult handle_fault(ProcessCtx& ctx, uint32_t region_id,
                             uint64_t offset);

    struct ReadyFd {
        uint32_t fd;
        uint64_t at_us;
    };
    struct SelectResult {
        RouteStatus status = RouteStatus::Ok;
        std::vector<uint32_t> ready;
    };
    SelectResult route_select(ProcessCtx& ctx,
                              const std::vector<uint32_t>& fdset,
                              uint64_t timeout_us,
                              const std::vector<ReadyFd>& schedule);
    SelectResult route_poll(ProcessCtx& ctx,
                            const std::vector<uint32_t>& fdset,
                            uint64_t timeout_us,
                            const std::vector<ReadyFd>& schedule);

    struct CloneResult {
        RouteStatus status = RouteStatus::SlotExhausted;
        ProcessCtx* child = nullptr;
    };
    CloneResult on_clone(ProcessCtx& ctx, uint32_t child_pid, bool clone_files);
    void on_exec(ProcessCtx& ctx);
    void on_exit(ProcessCtx& ctx);
    // host -> guest signal; returns deliveries, or nullopt for NoSuchApp
    std::optional<uint32_t> deliver_signal(uint32_t app_id, uint32_t sig);
    void handle_pending_signals(ProcessCtx& ctx);
    // marks every process of the app dead without teardown traffic; used by
    // the gateway kill path
    void kill_app(uint32_t app_id);

    ConsistencyGuard& guard() { return guard_; }

    // routing consults the launch mode of the owning app
    void set_app_mode(uint32_t app_id, LaunchMode mode);
    // sizes of quarantine-local files (libraries in the guest image)
    void set_local_size(const std::string& path, uint64_t size);
    uint64_t local_size(const std::string& path) const;

    MetricsReport& metrics() { return metrics_; }
    MessageAccounting& accounting() { return accounting_; }
    void reset_metrics() { metrics_ = {}; }

    const SelectConfig& select_config() const { return cfg_.select; }

    // effective before the next launch; running processes keep their setting
    void set_optimizer_enabled(bool on) {
        cfg_.optimizer.write_combine = on;
        cfg_.optimizer.read_batch = on;
    }

private:
    friend class ProcessRemoteIo;

    std::optional<wire::Reply> roundtrip(ProcessCtx& ctx, Opcode op,
                                         std::span<const uint8_t> payload,
                                         uint32_t big_ref = kBigRefNone);
    void count_send(Opcode op);
    void kill_process(ProcessCtx& ctx);
    IoOutcome remote_read_direct(ProcessCtx& ctx, FdEntry& e, uint64_t offset,
                                 uint64_t len);
    IoOutcome remote_write_direct(ProcessCtx& ctx, FdEntry& e, uint64_t offset,
                                  std::span<const uint8_t> data);
    uint64_t fetch_image(ProcessCtx& ctx, const ImageInfo& img);
    SelectResult wait_multiplexed(ProcessCtx& ctx,
                                  const std::vector<uint32_t>& fdset,
                                  uint64_t timeout_us,
                                  const std::vector<ReadyFd>& schedule,
                                  bool adaptive);
    static std::string image_tag(const std::string& path);

    QosConfig cfg_;
    ChannelRegion& channel_;
    Clock& clock_;
    HostSide& host_;
    ConsistencyGuard guard_;
    std::map<uint32_t, std::unique_ptr<ProcessCtx>> processes_; // by pid
    std::set<std::string> guest_images_;
    std::map<uint32_t, LaunchMode> app_modes_;
    std::map<std::string, uint64_t> local_sizes_;
    MetricsReport metrics_;
    MessageAccounting accounting_;
};

} // namespace qos
