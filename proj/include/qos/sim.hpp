#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "qos/channel.hpp"
#include "qos/clock.hpp"
#include "qos/config.hpp"
#include "qos/gateway.hpp"
#include "qos/hostfs.hpp"
#include "qos/metrics.hpp"
#include "qos/runtime.hpp"
#include "qos/security.hpp"
#include "qos/trace.hpp"

namespace qos {

// Whole-system harness: quarantine runtime, channel, gateway, host
// filesystem and the execution monitor wired together over a virtual
// clock. Replays traces deterministically.
class Simulator : public HostSide {
public:
    explicit Simulator(const QosConfig& cfg,
                       ClassificationConfig classification = {});
    ~Simulator() override;

    // HostSide
    void watch(uint32_t app_id, uint32_t pid, SlotPair pair) override;
    void pump(uint32_t app_id) override;
    void set_host_readiness(uint32_t app_id, uint32_t handle,
                            std::optional<uint64_t> ready_at_us) override;

    // Replays the trace against a fresh launch of spec. Returns the metrics
    // for the run; policy_kill is set when the gateway killed the app.
    MetricsReport run_trace(const Trace& trace, const LaunchSpec& spec,
                            bool optimizer_on);

    // registers image sizes so ExecFetch/local reads serve the right bytes
    void register_manifest(const ImageManifest& manifest);

    std::optional<uint32_t> deliver_signal(uint32_t app_id, uint32_t sig);

    VirtualClock& clock() { return clock_; }
    ChannelRegion& channel() { return channel_; }
    HostFs& fs() { return fs_; }
    SecurityMonitor& security() { return sm_; }
    GuestRuntime& runtime() { return *runtime_; }
    GatewayManager& gateway() { return *gateway_; }
    AuditLog& audit() { return audit_; }
    const std::string& last_kill_reason() const { return last_kill_reason_; }

private:
    void replay_record(ProcessCtx& ctx, const TraceRecord& r);
    ImageManifest manifest_;

    QosConfig cfg_;
    VirtualClock clock_;
    ChannelRegion channel_;
    HostFs fs_;
    SecurityMonitor sm_;
    AuditLog audit_;
    std::unique_ptr<GuestRuntime> runtime_;
    std::unique_ptr<GatewayManager> gateway_;
    // app -> handle -> ready-at, ground truth for IoEventWait
    std::map<uint32_t, std::map<uint32_t, uint64_t>> readiness_;
    std::string last_kill_reason_;
    bool policy_kill_ = false;
};

} // namespace qos
