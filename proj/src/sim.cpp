#include "qos/sim.hpp"

#include <sstream>

#include <algorithm>

namespace qos {

Simulator::Simulator(const QosConfig& cfg, ClassificationConfig classification)
    : cfg_(cfg), channel_(cfg.channel), fs_(),
      sm_(fs_, std::move(classification)) {
    // the exchange root always exists on the host
    std::string prefix;
    std::istringstream root(cfg_.gateway.whitelist_root);
    std::string part;
    while (std::getline(root, part, '/')) {
        if (part.empty())
            continue;
        prefix += "/" + part;
        fs_.mkdir(prefix);
    }
    runtime_ = std::make_unique<GuestRuntime>(cfg_, channel_, clock_, *this);
    gateway_ = std::make_unique<GatewayManager>(
        channel_, fs_, sm_, runtime_->guard(), cfg_.gateway, audit_, clock_,
        &runtime_->accounting());
}

Simulator::~Simulator() = default;

void Simulator::register_manifest(const ImageManifest& manifest) {
    manifest_ = manifest;
    auto reg = [&](const ImageInfo& img) {
        if (img.name.empty())
            return;
        runtime_->set_local_size(img.name, img.size);
        runtime_->set_local_size("/lib/" + img.name, img.size);
    };
    reg(manifest.binary);
    for (const auto& lib : manifest.libraries)
        reg(lib);
}

void Simulator::watch(uint32_t app_id, uint32_t pid, SlotPair pair) {
    SplitContext* ctx = gateway_->find(app_id);
    if (!ctx) {
        ctx = gateway_->spawn(app_id);
        ctx->set_image_resolver(
            [this](const std::string& name)
                -> std::optional<std::vector<uint8_t>> {
                if (manifest_.binary.name == name)
                    return synthetic_bytes(name, manifest_.binary.size);
                for (const auto& lib : manifest_.libraries)
                    if (lib.name == name)
                        return synthetic_bytes(name, lib.size);
                return std::nullopt;
            });
        ctx->set_readiness_oracle(
            [this, app_id](uint32_t handle) -> std::optional<uint64_t> {
                auto ait = readiness_.find(app_id);
                if (ait == readiness_.end())
                    return std::nullopt;
                auto hit = ait->second.find(handle);
                if (hit == ait->second.end())
                    return std::nullopt;
                return hit->second;
            });
        ctx->set_kill_callback(
            [this](uint32_t app, const std::string& reason) {
                runtime_->kill_app(app);
                last_kill_reason_ = reason;
                policy_kill_ = true;
            });
    }
    ctx->watch(pid, pair);
}

void Simulator::pump(uint32_t app_id) {
    if (SplitContext* ctx = gateway_->find(app_id))
        ctx->pump();
}

void Simulator::set_host_readiness(uint32_t app_id, uint32_t handle,
                                   std::optional<uint64_t> ready_at_us) {
    if (ready_at_us)
        readiness_[app_id][handle] = *ready_at_us;
    else
        readiness_[app_id].erase(handle);
}

std::optional<uint32_t> Simulator::deliver_signal(uint32_t app_id,
                                                  uint32_t sig) {
    return runtime_->deliver_signal(app_id, sig);
}

namespace {

uint8_t open_flags_from_args(const nlohmann::json& args) {
    if (args.contains("flags") && args["flags"].is_number())
        return (uint8_t)args["flags"].get<uint32_t>();
    std::string s = args.value("flags", "r");
    uint8_t f = 0;
    for (char c : s) {
        if (c == 'r') f |= wire::kOpenRead;
        if (c == 'w') f |= wire::kOpenWrite;
        if (c == 'c') f |= wire::kOpenCreate;
        if (c == 't') f |= wire::kOpenTrunc;
    }
    return f;
}

} // namespace

void Simulator::replay_record(ProcessCtx& ctx, const TraceRecord& r) {
    GuestRuntime& rt = *runtime_;
    const nlohmann::json& a = r.args;

    if (r.op == "open") {
        std::string path = a.value("path", "");
        FileKind kind = a.contains("kind")
                            ? file_kind_from_string(a["kind"].get<std::string>())
                            : guess_file_kind(path);
        rt.route_open(ctx, a.value("fd", 3u), path, kind,
                      open_flags_from_args(a), a.value("cloexec", false));
    } else if (r.op == "read") {
        rt.route_read(ctx, a.value("fd", 3u), a.value("len", 0ull));
    } else if (r.op == "write") {
        uint64_t len = a.value("len", 0ull);
        std::string tag = a.value("tag", "w");
        auto data = synthetic_bytes(tag, len);
        rt.route_write(ctx, a.value("fd", 3u), data);
    } else if (r.op == "seek") {
        rt.route_seek(ctx, a.value("fd", 3u), a.value("offset", 0ull));
    } else if (r.op == "stat") {
        rt.route_stat(ctx, a.value("fd", 3u));
    } else if (r.op == "close") {
        rt.route_close(ctx, a.value("fd", 3u));
    } else if (r.op == "display") {
        auto data = synthetic_bytes("frame", a.value("len", 64ull));
        rt.route_display(ctx, data, a.value("clipboard", false));
    } else if (r.op == "mmap") {
        rt.map_region(ctx, a.value("region", 0u), a.value("fd", 3u),
                      a.value("len", 0ull), a.value("offset", 0ull));
    } else if (r.op == "fault") {
        rt.handle_fault(ctx, a.value("region", 0u), a.value("offset", 0ull));
    } else if (r.op == "select" || r.op == "poll") {
        std::vector<uint32_t> fds;
        for (const auto& fd : a.value("fds", nlohmann::json::array()))
            fds.push_back(fd.get<uint32_t>());
        std::vector<GuestRuntime::ReadyFd> schedule;
        for (const auto& s : a.value("schedule", nlohmann::json::array()))
            schedule.push_back({s.value("fd", 0u), s.value("at_us", 0ull)});
        uint64_t timeout = a.value("timeout_us", 10000ull);
        if (r.op == "select")
            rt.route_select(ctx, fds, timeout, schedule);
        else
            rt.route_poll(ctx, fds, timeout, schedule);
    } else if (r.op == "clone") {
        rt.on_clone(ctx, a.value("child", ctx.pid + 1),
                    a.value("clone_files", false));
    } else if (r.op == "exec") {
        rt.on_exec(ctx);
    } else if (r.op == "exit") {
        rt.on_exit(ctx);
    } else if (r.op == "signal") {
        rt.deliver_signal(ctx.app_id, a.value("sig", 15u));
    } else if (r.op == "sleep") {
        clock_.sleep_us(a.value("us", 0ull));
    }
    // unknown ops are skipped: traces stay forward compatible
}

MetricsReport Simulator::run_trace(const Trace& trace, const LaunchSpec& spec,
                                   bool optimizer_on) {
    runtime_->set_optimizer_enabled(optimizer_on);
    register_manifest(spec.manifest);

    MetricsReport report;
    report.mode = spec.mode == LaunchMode::Remote ? "remote" : "local";
    report.optimizer = optimizer_on;

    auto launch = runtime_->launch_application(spec);
    if (launch.status != RouteStatus::Ok) {
        report.policy_kill = policy_kill_;
        report.violations = 1;
        return report;
    }

    // stable order by timestamp; ties keep trace order
    std::vector<const TraceRecord*> order;
    order.reserve(trace.records.size());
    for (const auto& r : trace.records)
        order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const TraceRecord* x, const TraceRecord* y) {
                         return x->t_us < y->t_us;
                     });

    for (const TraceRecord* r : order) {
        if (r->t_us > clock_.now_us())
            clock_.advance_to(r->t_us);
        if (r->op == "signal") {
            runtime_->deliver_signal(spec.app_id, r->args.value("sig", 15u));
            continue;
        }
        ProcessCtx* ctx = runtime_->find_process(r->pid ? r->pid
                                                        : spec.root_pid);
        if (!ctx || !ctx->alive)
            continue;
        replay_record(*ctx, *r);
    }

    // orderly shutdown for whatever survived
    for (uint32_t pid : runtime_->live_pids(spec.app_id))
        if (ProcessCtx* ctx = runtime_->find_process(pid))
            runtime_->on_exit(*ctx);
    sm_.on_app_run_exit(spec.app_name);

    MetricsReport& m = runtime_->metrics();
    report.total_messages = m.total_messages;
    report.mmap_messages = m.mmap_messages;
    report.display_messages = m.display_messages;
    report.file_io_messages = m.file_io_messages;
    report.io_event_messages = m.io_event_messages;
    report.startup_messages = launch.launch_messages;
    report.latency_buckets = m.latency_buckets;
    report.virtual_time_us = clock_.now_us();
    if (SplitContext* ctx = gateway_->find(spec.app_id)) {
        report.violations = ctx->violations();
        report.denied_ops = ctx->denied_ops();
    }
    report.policy_kill = policy_kill_;
    return report;
}

} // namespace qos
