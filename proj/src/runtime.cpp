#include "qos/runtime.hpp"

#include <algorithm>
#include <cassert>

namespace qos {

namespace {

constexpr uint64_t kGuestHopCostUs = 2; // virtual cost per channel hop

bool is_fatal_signal(uint32_t sig) {
    return sig == 2 || sig == 9 || sig == 15; // SIGINT, SIGKILL, SIGTERM
}

} // namespace

FileKind file_kind_from_string(const std::string& s) {
    if (s == "device") return FileKind::Device;
    if (s == "socket") return FileKind::Socket;
    if (s == "pipe") return FileKind::Pipe;
    if (s == "library") return FileKind::Library;
    return FileKind::Regular;
}

FileKind guess_file_kind(const std::string& path) {
    if (path.rfind("/dev/", 0) == 0)
        return FileKind::Device;
    if (path.rfind("socket:", 0) == 0)
        return FileKind::Socket;
    if (path.rfind("pipe:", 0) == 0)
        return FileKind::Pipe;
    if (path.rfind("/lib/", 0) == 0 || path.rfind("/usr/lib/", 0) == 0 ||
        path.find(".so") != std::string::npos)
        return FileKind::Library;
    return FileKind::Regular;
}

Route classify_open(FileKind kind, LaunchMode mode) {
    switch (kind) {
    case FileKind::Device:
    case FileKind::Socket:
    case FileKind::Pipe:
        return Route::Local;
    case FileKind::Library:
        return mode == LaunchMode::Local ? Route::Local : Route::Remote;
    case FileKind::Regular:
        return Route::Remote;
    }
    return Route::Remote;
}

// Channel-backed RemoteIo for one process, used by the optimizer.
class ProcessRemoteIo final : public RemoteIo {
public:
    ProcessRemoteIo(GuestRuntime& rt, uint32_t pid) : rt_(rt), pid_(pid) {}

    uint32_t flush_extents(uint32_t fd,
                           const std::vector<FsExtent>& extents) override {
        ProcessCtx* ctx = rt_.find_process(pid_);
        if (!ctx)
            return 0;
        auto it = ctx->fds->fds.find(fd);
        if (it == ctx->fds->fds.end() || !it->second.remote)
            return 0;
        FdEntry& e = it->second;

        auto stream = wire::encode_extents(extents);
        auto big = rt_.channel_.reserve_big_slot(ctx->app_id, stream.size());
        if (big) {
            auto bytes = rt_.channel_.big_slot_bytes(*big);
            std::copy(stream.begin(), stream.end(), bytes.begin());
            wire::WcFlush p;
            p.handle = e.host_handle;
            p.extent_count = (uint32_t)extents.size();
            auto payload = p.encode();
            auto rep = rt_.roundtrip(*ctx, Opcode::WcFlush, payload, *big);
            rt_.channel_.release_big_slot(*big, ctx->app_id);
            return rep ? 1 : 0;
        }
        // big slots busy: correctness-preserving unbatched fallback
        uint32_t msgs = 0;
        for (const auto& ext : extents) {
            auto r = rt_.remote_write_direct(*ctx, e, ext.offset, ext.data);
            if (r.status != RouteStatus::Ok)
                break;
            msgs++;
        }
        return msgs;
    }

    std::optional<std::vector<uint8_t>>
    fetch_chunk(uint32_t fd, uint64_t offset, uint32_t len) override {
        ProcessCtx* ctx = rt_.find_process(pid_);
        if (!ctx)
            return std::nullopt;
        auto it = ctx->fds->fds.find(fd);
        if (it == ctx->fds->fds.end() || !it->second.remote)
            return std::nullopt;
        auto r = rt_.remote_read_direct(*ctx, it->second, offset, len);
        if (r.status != RouteStatus::Ok)
            return std::nullopt;
        return r.data;
    }

private:
    GuestRuntime& rt_;
    uint32_t pid_;
};

GuestRuntime::GuestRuntime(const QosConfig& cfg, ChannelRegion& channel,
                           Clock& clock, HostSide& host)
    : cfg_(cfg), channel_(channel), clock_(clock), host_(host) {}

void GuestRuntime::add_guest_image(const std::string& name) {
    guest_images_.insert(name);
}

bool GuestRuntime::has_guest_image(const std::string& name) const {
    return guest_images_.count(name) != 0;
}

void GuestRuntime::reset_guest_images() {
    guest_images_.clear();
}

void GuestRuntime::count_send(Opcode op) {
    metrics_.record_message(op);
    accounting_.count_guest_send(op);
}

void GuestRuntime::kill_process(ProcessCtx& ctx) {
    ctx.alive = false;
}

void GuestRuntime::kill_app(uint32_t app_id) {
    for (auto& [pid, ctx] : processes_) {
        (void)pid;
        if (ctx->app_id == app_id)
            ctx->alive = false;
    }
}

std::optional<wire::Reply> GuestRuntime::roundtrip(
    ProcessCtx& ctx, Opcode op, std::span<const uint8_t> payload,
    uint32_t big_ref) {
    if (!ctx.alive)
        return std::nullopt;
    MessageHeader h;
    h.opcode = (uint8_t)op;
    h.app_id = ctx.app_id;
    h.pid = ctx.pid;
    h.big_ref = big_ref;
    if (channel_.send_with_retry(ctx.slots.to_host, h, payload, clock_) !=
        SendStatus::Ok)
        return std::nullopt;
    count_send(op);
    uint64_t t0 = clock_.now_us();
    if (clock_.is_virtual())
        clock_.sleep_us(kGuestHopCostUs);
    host_.pump(ctx.app_id);

    Message m;
    while (channel_.recv(ctx.slots.to_guest, m) == RecvStatus::Ok) {
        if ((Opcode)m.header.opcode == Opcode::SignalNotify) {
            if (auto sn = wire::SignalNotify::decode(m.payload))
                ctx.pending_signals.push_back(sn->sig);
            continue;
        }
        if ((Opcode)m.header.opcode != Opcode::Reply)
            continue;
        auto rep = wire::Reply::decode(m.payload);
        if (!rep || rep->echo_seq != h.seq) {
            // reply/seq mismatch means the channel is compromised
            kill_process(ctx);
            return std::nullopt;
        }
        accounting_.replies_received++;
        if (clock_.is_virtual())
            clock_.sleep_us(kGuestHopCostUs);
        metrics_.record_latency_us(clock_.now_us() - t0 + 2 * kGuestHopCostUs);
        return rep;
    }
    // no reply: the gateway killed us (or dropped the message)
    return std::nullopt;
}

GuestRuntime::LaunchResult
GuestRuntime::launch_application(const LaunchSpec& spec) {
    LaunchResult result;
    if (processes_.count(spec.root_pid))
        return result;
    auto alloc = channel_.allocate_slot_pair(spec.app_id, spec.root_pid);
    if (alloc.status != AllocStatus::Ok)
        return result;
    host_.watch(spec.app_id, spec.root_pid, alloc.pair);

    auto ctx = std::make_unique<ProcessCtx>();
    ctx->app_id = spec.app_id;
    ctx->pid = spec.root_pid;
    ctx->slots = alloc.pair;
    ctx->fds = std::make_shared<FdTable>();
    ctx->alive = true;
    ctx->select_policy.guest_slice_us = cfg_.select.initial_slice_us;
    ctx->select_policy.host_slice_us = cfg_.select.initial_slice_us;
    ctx->remote_io = std::make_unique<ProcessRemoteIo>(*this, spec.root_pid);
    ctx->optimizer =
        std::make_unique<Optimizer>(cfg_.optimizer, guard_, *ctx->remote_io);
    ProcessCtx* raw = ctx.get();
    processes_[spec.root_pid] = std::move(ctx);
    app_modes_[spec.app_id] = spec.mode;

    uint64_t msgs0 = metrics_.total_messages;

    wire::LaunchReq req;
    req.app_name = spec.app_name;
    req.mode = spec.mode == LaunchMode::Remote ? 1 : 0;
    auto payload = req.encode();
    auto rep = roundtrip(*raw, Opcode::LaunchReq, payload);
    if (!rep || rep->status != wire::ReplyStatus::Ok ||
        rep->data.size() < 12) {
        channel_.free_slot_pair(spec.app_id, spec.root_pid);
        processes_.erase(spec.root_pid);
        return result;
    }
    // stdio is always host-side
    wire::Reader r(rep->data);
    const char* stdio_names[3] = {"stdio:in", "stdio:out", "stdio:err"};
    for (uint32_t fd = 0; fd < 3; fd++) {
        uint32_t id = 0;
        r.u32(id);
        FdEntry e;
        e.remote = true;
        e.host_handle = id;
        e.path = stdio_names[fd];
        e.kind = FileKind::Device;
        e.write_mode = fd > 0;
        raw->fds->fds[fd] = e;
    }

    if (spec.mode == LaunchMode::Remote) {
        // binary and every library come over the channel before the first
        // instruction runs
        fetch_image(*raw, spec.manifest.binary);
        if (!raw->alive) {
            processes_.erase(spec.root_pid);
            return result;
        }
        for (const auto& lib : spec.manifest.libraries) {
            fetch_image(*raw, lib);
            if (!raw->alive) {
                processes_.erase(spec.root_pid);
                return result;
            }
        }
    }

    raw->launch_messages = metrics_.total_messages - msgs0;
    metrics_.startup_messages = raw->launch_messages;
    result.status = RouteStatus::Ok;
    result.ctx = raw;
    result.launch_messages = raw->launch_messages;
    return result;
}

uint64_t GuestRuntime::fetch_image(ProcessCtx& ctx, const ImageInfo& img) {
    if (img.name.empty())
        return 0;
    uint64_t msgs = 0;
    auto big = channel_.reserve_big_slot(ctx.app_id, img.size);
    if (big) {
        wire::ExecFetch p;
        p.name = img.name;
        auto payload = p.encode();
        auto rep = roundtrip(ctx, Opcode::ExecFetch, payload, *big);
        channel_.release_big_slot(*big, ctx.app_id);
        if (!rep || rep->status != wire::ReplyStatus::Ok) {
            kill_process(ctx);
            return msgs;
        }
        return 1;
    }
    // chunked fallback over the normal slot
    uint32_t chunk =
        channel_.config().normal_payload_max - wire::kReplyOverhead;
    uint64_t off = 0;
    do {
        wire::ExecFetch p;
        p.name = img.name;
        p.chunk_offset = off;
        p.chunk_len = chunk;
        auto payload = p.encode();
        auto rep = roundtrip(ctx, Opcode::ExecFetch, payload);
        if (!rep || rep->status != wire::ReplyStatus::Ok) {
            kill_process(ctx);
            return msgs;
        }
        msgs++;
        off += rep->data.size();
        if (rep->data.empty() || off >= rep->value)
            break;
    } while (true);
    return msgs;
}

ProcessCtx* GuestRuntime::find_process(uint32_t pid) {
    auto it = processes_.find(pid);
    return it == processes_.end() ? nullptr : it->second.get();
}

std::vector<uint32_t> GuestRuntime::live_pids(uint32_t app_id) const {
    std::vector<uint32_t> out;
    for (const auto& [pid, ctx] : processes_)
        if (ctx->app_id == app_id && ctx->alive)
            out.push_back(pid);
    return out;
}

IoOutcome GuestRuntime::route_open(ProcessCtx& ctx, uint32_t fd,
                                   const std::string& path, FileKind kind,
                                   uint8_t open_flags, bool cloexec) {
    IoOutcome out;
    LaunchMode mode = LaunchMode::Local; // per-app mode tracked at launch
    // remote-mode processes fetch libraries from the host
    if (app_modes_.count(ctx.app_id))
        mode = app_modes_[ctx.app_id];
    Route route = classify_open(kind, mode);

    FdEntry e;
    e.path = path;
    e.kind = kind;
    e.cloexec = cloexec;
    e.write_mode = open_flags & wire::kOpenWrite;

    // Library descriptors are image-backed on both routes: never an
    // OpenReq. On the remote route their page faults fetch image chunks
    // over the channel instead of reading local bytes.
    if (route == Route::Local || kind == FileKind::Library) {
        e.remote = false;
        ctx.fds->fds[fd] = e;
        out.status = RouteStatus::Ok;
        return out;
    }

    wire::OpenReq req;
    req.flags = open_flags;
    req.path = path;
    auto payload = req.encode();
    auto rep = roundtrip(ctx, Opcode::OpenReq, payload);
    if (!rep) {
        out.status = ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
        return out;
    }
    out.reply = rep->status;
    if (rep->status != wire::ReplyStatus::Ok) {
        out.status = RouteStatus::Denied;
        return out;
    }
    e.remote = true;
    e.host_handle = (uint32_t)rep->value;
    ctx.fds->fds[fd] = e;
    out.status = RouteStatus::Ok;
    out.value = rep->value;
    return out;
}

IoOutcome GuestRuntime::remote_read_direct(ProcessCtx& ctx, FdEntry& e,
                                           uint64_t offset, uint64_t len) {
    IoOutcome out;
    uint32_t inline_cap =
        channel_.config().normal_payload_max - wire::kReplyOverhead;
    if (len > inline_cap) {
        auto big = channel_.reserve_big_slot(ctx.app_id, len);
        if (big) {
            wire::FileIo p;
            p.sub = wire::FileIoSub::Read;
            p.handle = e.host_handle;
            p.offset = offset;
            p.len = (uint32_t)len;
            auto payload = p.encode();
            auto rep = roundtrip(ctx, Opcode::FileIo, payload, *big);
            if (rep && rep->status == wire::ReplyStatus::Ok) {
                auto bytes = channel_.big_slot_bytes(*big);
                out.data.assign(bytes.begin(), bytes.begin() + rep->value);
                out.status = RouteStatus::Ok;
            } else {
                out.status =
                    ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
            }
            channel_.release_big_slot(*big, ctx.app_id);
            return out;
        }
    }
    // inline, chunked when needed
    uint64_t got = 0;
    while (got < len) {
        uint32_t n = (uint32_t)std::min<uint64_t>(len - got, inline_cap);
        wire::FileIo p;
        p.sub = wire::FileIoSub::Read;
        p.handle = e.host_handle;
        p.offset = offset + got;
        p.len = n;
        auto payload = p.encode();
        auto rep = roundtrip(ctx, Opcode::FileIo, payload);
        if (!rep || rep->status != wire::ReplyStatus::Ok) {
            out.status = ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
            return out;
        }
        out.data.insert(out.data.end(), rep->data.begin(), rep->data.end());
        got += rep->data.size();
        if (rep->data.size() < n)
            break; // EOF
    }
    out.status = RouteStatus::Ok;
    return out;
}

IoOutcome GuestRuntime::remote_write_direct(ProcessCtx& ctx, FdEntry& e,
                                            uint64_t offset,
                                            std::span<const uint8_t> data) {
    IoOutcome out;
    uint32_t inline_cap = channel_.config().normal_payload_max - 32;
    if (data.size() > inline_cap) {
        auto big = channel_.reserve_big_slot(ctx.app_id, data.size());
        if (big) {
            auto bytes = channel_.big_slot_bytes(*big);
            std::copy(data.begin(), data.end(), bytes.begin());
            wire::FileIo p;
            p.sub = wire::FileIoSub::Write;
            p.handle = e.host_handle;
            p.offset = offset;
            p.len = (uint32_t)data.size();
            auto payload = p.encode();
            auto rep = roundtrip(ctx, Opcode::FileIo, payload, *big);
            channel_.release_big_slot(*big, ctx.app_id);
            if (!rep) {
                out.status =
                    ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
                return out;
            }
            out.reply = rep->status;
            out.status = rep->status == wire::ReplyStatus::Ok
                             ? RouteStatus::Ok
                             : RouteStatus::Denied;
            out.value = rep->value;
            return out;
        }
        // chunk through the normal slot
        uint64_t done = 0;
        while (done < data.size()) {
            uint32_t n =
                (uint32_t)std::min<uint64_t>(data.size() - done, inline_cap);
            auto r = remote_write_direct(
                ctx, e, offset + done, data.subspan(done, n));
            if (r.status != RouteStatus::Ok)
                return r;
            done += n;
        }
        out.status = RouteStatus::Ok;
        out.value = data.size();
        return out;
    }
    wire::FileIo p;
    p.sub = wire::FileIoSub::Write;
    p.handle = e.host_handle;
    p.offset = offset;
    p.len = (uint32_t)data.size();
    p.data.assign(data.begin(), data.end());
    auto payload = p.encode();
    auto rep = roundtrip(ctx, Opcode::FileIo, payload);
    if (!rep) {
        out.status = ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
        return out;
    }
    out.reply = rep->status;
    out.status = rep->status == wire::ReplyStatus::Ok ? RouteStatus::Ok
                                                      : RouteStatus::Denied;
    out.value = rep->value;
    return out;
}

IoOutcome GuestRuntime::route_read(ProcessCtx& ctx, uint32_t fd, uint64_t len) {
    IoOutcome out;
    auto it = ctx.fds->fds.find(fd);
    if (it == ctx.fds->fds.end()) {
        out.status = RouteStatus::BadDescriptor;
        return out;
    }
    FdEntry& e = it->second;
    if (!e.remote) {
        // local: libraries serve deterministic image bytes, devices zeros
        if (e.kind == FileKind::Library) {
            auto img = synthetic_bytes(image_tag(e.path), local_size(e.path));
            uint64_t off = std::min<uint64_t>(e.offset, img.size());
            uint64_t n = std::min<uint64_t>(len, img.size() - off);
            out.data.assign(img.begin() + off, img.begin() + off + n);
        } else {
            out.data.assign(len, 0);
        }
        e.offset += out.data.size();
        out.status = RouteStatus::Ok;
        return out;
    }
    if (ctx.optimizer->read_batch_enabled() && e.kind == FileKind::Regular) {
        uint32_t msgs = 0;
        auto data = ctx.optimizer->rb_read(fd, e.path, e.offset, (uint32_t)len,
                                           msgs);
        if (!data) {
            out.status = ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
            return out;
        }
        out.data = std::move(*data);
        e.offset += out.data.size();
        out.status = RouteStatus::Ok;
        return out;
    }
    // unbatched remote read still flushes combined writes first
    if (ctx.optimizer->wc_pending(fd))
        ctx.optimizer->flush_fd(fd);
    out = remote_read_direct(ctx, e, e.offset, len);
    if (out.status == RouteStatus::Ok)
        e.offset += out.data.size();
    return out;
}

IoOutcome GuestRuntime::route_write(ProcessCtx& ctx, uint32_t fd,
                                    std::span<const uint8_t> data) {
    IoOutcome out;
    auto it = ctx.fds->fds.find(fd);
    if (it == ctx.fds->fds.end()) {
        out.status = RouteStatus::BadDescriptor;
        return out;
    }
    FdEntry& e = it->second;
    if (!e.remote) {
        e.offset += data.size();
        out.status = RouteStatus::Ok;
        out.value = data.size();
        return out;
    }
    if (e.kind == FileKind::Regular && ctx.optimizer->write_combine_enabled()) {
        auto wc = ctx.optimizer->wc_append(fd, e.path, e.offset, data,
                                           clock_.now_us());
        if (wc.status != WcStatus::Disabled) {
            e.offset += data.size();
            out.status = RouteStatus::Ok;
            out.value = data.size();
            return out;
        }
    }
    out = remote_write_direct(ctx, e, e.offset, data);
    if (out.status == RouteStatus::Ok)
        e.offset += data.size();
    return out;
}

IoOutcome GuestRuntime::route_seek(ProcessCtx& ctx, uint32_t fd,
                                   uint64_t offset) {
    IoOutcome out;
    auto it = ctx.fds->fds.find(fd);
    if (it == ctx.fds->fds.end()) {
        out.status = RouteStatus::BadDescriptor;
        return out;
    }
    FdEntry& e = it->second;
    e.offset = offset;
    if (e.remote && !ctx.optimizer->write_combine_enabled() &&
        !ctx.optimizer->read_batch_enabled()) {
        wire::FileIo p;
        p.sub = wire::FileIoSub::Seek;
        p.handle = e.host_handle;
        p.offset = offset;
        auto payload = p.encode();
        auto rep = roundtrip(ctx, Opcode::FileIo, payload);
        if (!rep) {
            out.status = ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
            return out;
        }
    }
    out.status = RouteStatus::Ok;
    out.value = offset;
    return out;
}

IoOutcome GuestRuntime::route_stat(ProcessCtx& ctx, uint32_t fd) {
    IoOutcome out;
    auto it = ctx.fds->fds.find(fd);
    if (it == ctx.fds->fds.end()) {
        out.status = RouteStatus::BadDescriptor;
        return out;
    }
    FdEntry& e = it->second;
    if (!e.remote) {
        out.status = RouteStatus::Ok;
        out.value = e.kind == FileKind::Library ? local_size(e.path) : 0;
        return out;
    }
    if (ctx.optimizer->wc_pending(fd))
        ctx.optimizer->flush_fd(fd); // stat must observe buffered writes
    wire::FileIo p;
    p.sub = wire::FileIoSub::Stat;
    p.handle = e.host_handle;
    auto payload = p.encode();
    auto rep = roundtrip(ctx, Opcode::FileIo, payload);
    if (!rep) {
        out.status = ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
        return out;
    }
    out.status = RouteStatus::Ok;
    out.value = rep->value;
    return out;
}

IoOutcome GuestRuntime::route_close(ProcessCtx& ctx, uint32_t fd) {
    IoOutcome out;
    auto it = ctx.fds->fds.find(fd);
    if (it == ctx.fds->fds.end()) {
        out.status = RouteStatus::BadDescriptor;
        return out;
    }
    FdEntry& e = it->second;
    if (e.remote) {
        if (ctx.optimizer->wc_pending(fd))
            ctx.optimizer->flush_fd(fd);
        ctx.optimizer->drop_fd(fd);
        wire::FileIo p;
        p.sub = wire::FileIoSub::Close;
        p.handle = e.host_handle;
        auto payload = p.encode();
        roundtrip(ctx, Opcode::FileIo, payload);
    }
    if (e.refcount > 1)
        e.refcount--;
    else
        ctx.fds->fds.erase(it);
    out.status = RouteStatus::Ok;
    return out;
}

IoOutcome GuestRuntime::route_display(ProcessCtx& ctx,
                                      std::span<const uint8_t> data,
                                      bool clipboard) {
    IoOutcome out;
    wire::DisplayIo p;
    p.clipboard = clipboard ? 1 : 0;
    p.data.assign(data.begin(), data.end());
    auto payload = p.encode();
    auto rep = roundtrip(ctx, Opcode::DisplayIo, payload);
    if (!rep) {
        out.status = ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
        return out;
    }
    out.status = RouteStatus::Ok;
    out.value = rep->value;
    return out;
}

IoOutcome GuestRuntime::set_cloexec(ProcessCtx& ctx, uint32_t fd, bool on) {
    IoOutcome out;
    auto it = ctx.fds->fds.find(fd);
    if (it == ctx.fds->fds.end()) {
        out.status = RouteStatus::BadDescriptor;
        return out;
    }
    it->second.cloexec = on;
    out.status = RouteStatus::Ok;
    return out;
}

RouteStatus GuestRuntime::map_region(ProcessCtx& ctx, uint32_t region_id,
                                     uint32_t fd, uint64_t len,
                                     uint64_t file_offset) {
    auto it = ctx.fds->fds.find(fd);
    if (it == ctx.fds->fds.end())
        return RouteStatus::BadDescriptor;
    FaultRegion r;
    r.fd = fd;
    r.len = len;
    r.file_offset = file_offset;
    r.local = !it->second.remote;
    r.kind = it->second.kind;
    r.path = it->second.path;
    ctx.regions[region_id] = std::move(r);
    return RouteStatus::Ok;
}

GuestRuntime::FaultResult GuestRuntime::handle_fault(ProcessCtx& ctx,
                                                     uint32_t region_id,
                                                     uint64_t offset) {
    FaultResult out;
    auto rit = ctx.regions.find(region_id);
    if (rit == ctx.regions.end() || offset >= rit->second.len) {
        out.status = RouteStatus::BadDescriptor;
        return out;
    }
    FaultRegion& region = rit->second;
    uint64_t page = offset & ~(kPageSize - 1);
    if (region.populated.count(page)) {
        out.status = RouteStatus::Ok;
        out.page = region.pages[page];
        return out; // no message for a repeat fault
    }

    uint64_t file_off = region.file_offset + page;
    std::vector<uint8_t> bytes;
    bool image_remote =
        region.local && region.kind == FileKind::Library &&
        app_modes_.count(ctx.app_id) &&
        app_modes_[ctx.app_id] == LaunchMode::Remote;
    if (image_remote) {
        // remote launch: the text page comes from the host image store;
        // inline replies cap below a page, so gather until full or EOF
        while (bytes.size() < kPageSize) {
            wire::ExecFetch p;
            p.name = image_tag(region.path);
            p.chunk_offset = file_off + bytes.size();
            p.chunk_len = (uint32_t)(kPageSize - bytes.size());
            auto payload = p.encode();
            auto rep = roundtrip(ctx, Opcode::ExecFetch, payload);
            if (!rep || rep->status != wire::ReplyStatus::Ok) {
                out.status =
                    ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
                return out;
            }
            out.fetched = true;
            if (rep->data.empty())
                break; // EOF
            bytes.insert(bytes.end(), rep->data.begin(), rep->data.end());
        }
    } else if (region.local) {
        auto img = synthetic_bytes(image_tag(region.path),
                                   local_size(region.path));
        if (file_off < img.size()) {
            uint64_t n = std::min<uint64_t>(kPageSize, img.size() - file_off);
            bytes.assign(img.begin() + file_off, img.begin() + file_off + n);
        }
    } else {
        auto it = ctx.fds->fds.find(region.fd);
        if (it == ctx.fds->fds.end()) {
            out.status = RouteStatus::BadDescriptor;
            return out;
        }
        auto big = channel_.reserve_big_slot(ctx.app_id, kPageSize);
        if (big) {
            wire::MmapFetch p;
            p.handle = it->second.host_handle;
            p.offset = file_off;
            p.len = (uint32_t)kPageSize;
            auto payload = p.encode();
            auto rep = roundtrip(ctx, Opcode::MmapFetch, payload, *big);
            if (rep && rep->status == wire::ReplyStatus::Ok) {
                auto slot = channel_.big_slot_bytes(*big);
                bytes.assign(slot.begin(), slot.begin() + rep->value);
            }
            channel_.release_big_slot(*big, ctx.app_id);
            if (!rep || rep->status != wire::ReplyStatus::Ok) {
                out.status =
                    ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
                return out;
            }
            out.fetched = true;
        } else {
            // inline replies cap below a page: chunk until full or EOF
            while (bytes.size() < kPageSize) {
                wire::MmapFetch p;
                p.handle = it->second.host_handle;
                p.offset = file_off + bytes.size();
                p.len = (uint32_t)(kPageSize - bytes.size());
                auto payload = p.encode();
                auto rep = roundtrip(ctx, Opcode::MmapFetch, payload);
                if (!rep || rep->status != wire::ReplyStatus::Ok) {
                    out.status =
                        ctx.alive ? RouteStatus::IoError : RouteStatus::Killed;
                    return out;
                }
                out.fetched = true;
                if (rep->data.empty())
                    break; // EOF
                bytes.insert(bytes.end(), rep->data.begin(), rep->data.end());
            }
        }
    }
    bytes.resize(kPageSize, 0); // zero-fill beyond EOF
    region.populated.insert(page);
    region.pages[page] = bytes;
    out.status = RouteStatus::Ok;
    out.page = std::move(bytes);
    return out;
}

GuestRuntime::SelectResult GuestRuntime::wait_multiplexed(
    ProcessCtx& ctx, const std::vector<uint32_t>& fdset, uint64_t timeout_us,
    const std::vector<ReadyFd>& schedule, bool adaptive) {
    SelectResult out;
    std::vector<uint32_t> local_fds, host_fds;
    for (uint32_t fd : fdset) {
        auto it = ctx.fds->fds.find(fd);
        if (it == ctx.fds->fds.end()) {
            out.status = RouteStatus::BadDescriptor;
            return out;
        }
        (it->second.remote ? host_fds : local_fds).push_back(fd);
    }

    auto ready_at = [&](uint32_t fd) -> std::optional<uint64_t> {
        std::optional<uint64_t> best;
        for (const auto& r : schedule)
            if (r.fd == fd && (!best || r.at_us < *best))
                best = r.at_us;
        return best;
    };

    // host-side ground truth, keyed by host handle
    std::vector<uint32_t> host_handles;
    for (uint32_t fd : host_fds) {
        uint32_t handle = ctx.fds->fds[fd].host_handle;
        host_handles.push_back(handle);
        host_.set_host_readiness(ctx.app_id, handle, ready_at(fd));
    }
    auto clear_readiness = [&] {
        for (uint32_t handle : host_handles)
            host_.set_host_readiness(ctx.app_id, handle, std::nullopt);
    };

    uint64_t deadline = clock_.now_us() + timeout_us;

    auto local_check = [&](uint64_t until) -> bool {
        // waits on the guest side for [now, until]; true when a local fd fired
        uint64_t best = UINT64_MAX;
        for (uint32_t fd : local_fds) {
            auto at = ready_at(fd);
            if (at && *at <= until && *at < best)
                best = *at;
        }
        if (best == UINT64_MAX) {
            if (clock_.now_us() < until)
                clock_.sleep_us(until - clock_.now_us());
            return false;
        }
        if (best > clock_.now_us())
            clock_.sleep_us(best - clock_.now_us());
        for (uint32_t fd : local_fds) {
            auto at = ready_at(fd);
            if (at && *at <= clock_.now_us())
                out.ready.push_back(fd);
        }
        return true;
    };

    auto host_wait = [&](uint64_t wait_us) -> bool {
        wire::IoEventWait p;
        p.wait_us = wait_us;
        p.handles = host_handles;
        auto payload = p.encode();
        auto rep = roundtrip(ctx, Opcode::IoEventWait, payload);
        if (!rep || rep->status != wire::ReplyStatus::Ok)
            return false;
        for (size_t i = 0; i < host_fds.size(); i++)
            if (rep->value & (1ull << i))
                out.ready.push_back(host_fds[i]);
        return !out.ready.empty();
    };

    if (host_fds.empty()) {
        local_check(deadline);
        clear_readiness();
        return out;
    }
    if (local_fds.empty()) {
        host_wait(timeout_us);
        clear_readiness();
        return out;
    }

    // mixed: juggle between the guest OS and the host
    SelectPolicy& pol = ctx.select_policy;
    const SelectConfig& sc = cfg_.select;
    while (clock_.now_us() < deadline) {
        uint64_t gslice = adaptive ? pol.guest_slice_us : sc.poll_slice_us;
        uint64_t hslice = adaptive ? pol.host_slice_us : sc.poll_slice_us;
        gslice = std::min(gslice, deadline - clock_.now_us());
        bool guest_fired = local_check(clock_.now_us() + gslice);
        bool host_fired = false;
        if (!guest_fired && clock_.now_us() < deadline) {
            hslice = std::min(hslice, deadline - clock_.now_us());
            host_fired = host_wait(hslice);
        }
        if (adaptive && (guest_fired || host_fired)) {
            double a = sc.ewma_alpha;
            pol.ewma_guest_hits =
                a * (guest_fired ? 1.0 : 0.0) + (1 - a) * pol.ewma_guest_hits;
            pol.ewma_host_hits =
                a * (host_fired ? 1.0 : 0.0) + (1 - a) * pol.ewma_host_hits;
            auto clamp = [&](double v) {
                return (uint64_t)std::clamp<double>(v, (double)sc.min_slice_us,
                                                    (double)sc.max_slice_us);
            };
            if (guest_fired) {
                pol.guest_slice_us =
                    clamp((double)pol.guest_slice_us * sc.grow_factor);
                pol.host_slice_us =
                    clamp((double)pol.host_slice_us / sc.grow_factor);
            } else {
                pol.host_slice_us =
                    clamp((double)pol.host_slice_us * sc.grow_factor);
                pol.guest_slice_us =
                    clamp((double)pol.guest_slice_us / sc.grow_factor);
            }
        }
        if (guest_fired || host_fired)
            break;
        if (!ctx.alive) {
            out.status = RouteStatus::Killed;
            break;
        }
    }
    clear_readiness();
    return out;
}

GuestRuntime::SelectResult
GuestRuntime::route_select(ProcessCtx& ctx, const std::vector<uint32_t>& fdset,
                           uint64_t timeout_us,
                           const std::vector<ReadyFd>& schedule) {
    return wait_multiplexed(ctx, fdset, timeout_us, schedule, true);
}

GuestRuntime::SelectResult
GuestRuntime::route_poll(ProcessCtx& ctx, const std::vector<uint32_t>& fdset,
                         uint64_t timeout_us,
                         const std::vector<ReadyFd>& schedule) {
    return wait_multiplexed(ctx, fdset, timeout_us, schedule, false);
}

GuestRuntime::CloneResult GuestRuntime::on_clone(ProcessCtx& ctx,
                                                 uint32_t child_pid,
                                                 bool clone_files) {
    CloneResult out;
    if (processes_.count(child_pid))
        return out;
    auto alloc = channel_.allocate_slot_pair(ctx.app_id, child_pid);
    if (alloc.status != AllocStatus::Ok)
        return out; // no partial state
    host_.watch(ctx.app_id, child_pid, alloc.pair);

    std::vector<uint32_t> remote_handles;
    std::vector<uint32_t> remote_fds;
    for (const auto& [fd, e] : ctx.fds->fds) {
        if (e.remote) {
            remote_fds.push_back(fd);
            remote_handles.push_back(e.host_handle);
        }
    }

    auto child = std::make_unique<ProcessCtx>();
    child->app_id = ctx.app_id;
    child->pid = child_pid;
    child->slots = alloc.pair;
    child->alive = true;
    child->parent_pid = ctx.pid;
    child->select_policy = ctx.select_policy;
    child->remote_io = std::make_unique<ProcessRemoteIo>(*this, child_pid);
    child->optimizer =
        std::make_unique<Optimizer>(cfg_.optimizer, guard_, *child->remote_io);

    wire::CloneNotify p;
    p.child_pid = child_pid;
    p.clone_files = clone_files ? 1 : 0;
    p.handles = remote_handles;
    auto payload = p.encode();
    // notify through the parent's slots; the child's are not wired yet
    auto rep = roundtrip(ctx, Opcode::CloneNotify, payload);
    if (!rep || rep->status != wire::ReplyStatus::Ok) {
        channel_.free_slot_pair(ctx.app_id, child_pid);
        return out;
    }

    if (clone_files) {
        child->fds = ctx.fds; // shared table
        for (auto& [fd, e] : ctx.fds->fds) {
            (void)fd;
            if (e.remote)
                e.refcount++;
        }
    } else {
        child->fds = std::make_shared<FdTable>();
        child->fds->fds = ctx.fds->fds; // deep copy
        wire::Reader r(rep->data);
        for (uint32_t fd : remote_fds) {
            uint32_t nid = 0;
            r.u32(nid);
            auto& e = child->fds->fds[fd];
            e.host_handle = nid;
            e.refcount = 1;
        }
    }

    ctx.children.push_back(child_pid);
    ProcessCtx* raw = child.get();
    processes_[child_pid] = std::move(child);
    out.status = RouteStatus::Ok;
    out.child = raw;
    return out;
}

void GuestRuntime::on_exec(ProcessCtx& ctx) {
    std::vector<uint32_t> doomed;
    for (const auto& [fd, e] : ctx.fds->fds)
        if (e.cloexec)
            doomed.push_back(fd);
    for (uint32_t fd : doomed)
        route_close(ctx, fd);
}

void GuestRuntime::on_exit(ProcessCtx& ctx) {
    if (!ctx.alive)
        return; // idempotent
    ctx.optimizer->flush_all();
    std::vector<uint32_t> fds;
    for (const auto& [fd, e] : ctx.fds->fds) {
        (void)e;
        fds.push_back(fd);
    }
    for (uint32_t fd : fds)
        route_close(ctx, fd);
    ctx.regions.clear();

    MessageHeader h;
    h.opcode = (uint8_t)Opcode::ExitNotify;
    h.app_id = ctx.app_id;
    h.pid = ctx.pid;
    if (channel_.send_with_retry(ctx.slots.to_host, h, {}, clock_) ==
        SendStatus::Ok) {
        count_send(Opcode::ExitNotify);
        host_.pump(ctx.app_id);
    }
    ctx.alive = false;
}

std::optional<uint32_t> GuestRuntime::deliver_signal(uint32_t app_id,
                                                     uint32_t sig) {
    auto pids = live_pids(app_id);
    if (pids.empty())
        return std::nullopt;
    uint32_t delivered = 0;
    for (uint32_t pid : pids) {
        ProcessCtx* ctx = find_process(pid);
        if (!ctx || !ctx->alive)
            continue;
        // host-side notification travels over the to-guest slot
        wire::SignalNotify p;
        p.sig = sig;
        auto payload = p.encode();
        MessageHeader h;
        h.opcode = (uint8_t)Opcode::SignalNotify;
        h.app_id = app_id;
        h.pid = pid;
        if (channel_.send_with_retry(ctx->slots.to_guest, h, payload,
                                     clock_) == SendStatus::Ok) {
            delivered++;
            Message m;
            while (channel_.recv(ctx->slots.to_guest, m) == RecvStatus::Ok) {
                if ((Opcode)m.header.opcode == Opcode::SignalNotify) {
                    if (auto sn = wire::SignalNotify::decode(m.payload))
                        ctx->pending_signals.push_back(sn->sig);
                }
            }
            handle_pending_signals(*ctx);
        }
    }
    return delivered;
}

void GuestRuntime::handle_pending_signals(ProcessCtx& ctx) {
    auto sigs = std::move(ctx.pending_signals);
    ctx.pending_signals.clear();
    for (uint32_t sig : sigs) {
        if (is_fatal_signal(sig) && ctx.alive)
            on_exit(ctx); // both sides run their cleanup paths
    }
}

void GuestRuntime::set_app_mode(uint32_t app_id, LaunchMode mode) {
    app_modes_[app_id] = mode;
}

uint64_t GuestRuntime::local_size(const std::string& path) const {
    auto it = local_sizes_.find(path);
    return it == local_sizes_.end() ? (64u << 10) : it->second;
}

void GuestRuntime::set_local_size(const std::string& path, uint64_t size) {
    local_sizes_[path] = size;
}

std::string GuestRuntime::image_tag(const std::string& path) {
    size_t pos = path.find_last_of('/');
    return pos == std::string::npos ? path : path.substr(pos + 1);
}

} // namespace qos
