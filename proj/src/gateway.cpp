#include "qos/gateway.hpp"

#include <algorithm>

#include <json.hpp>

#include "qos/wire.hpp"

namespace qos {

namespace {

// virtual service cost per handled message
constexpr uint64_t kServiceCostUs = 8;

} // namespace

const char* violation_reason_name(ViolationReason r) {
    switch (r) {
    case ViolationReason::BadMagic: return "BadMagic";
    case ViolationReason::BadVersion: return "BadVersion";
    case ViolationReason::BadOpcode: return "BadOpcode";
    case ViolationReason::OversizePayload: return "OversizePayload";
    case ViolationReason::Malformed: return "Malformed";
    case ViolationReason::ForeignBigSlot: return "ForeignBigSlot";
    case ViolationReason::ForeignHandle: return "ForeignHandle";
    case ViolationReason::BadPath: return "BadPath";
    case ViolationReason::PathEscape: return "PathEscape";
    }
    return "?";
}

void AuditLog::append(uint64_t t_us, uint32_t app_id, const std::string& kind,
                      const std::string& detail) {
    entries_.push_back({t_us, app_id, kind, detail});
}

std::string AuditLog::to_jsonl() const {
    std::string out;
    for (const auto& e : entries_) {
        nlohmann::json j{{"t_us", e.t_us},
                         {"app_id", e.app_id},
                         {"kind", e.kind},
                         {"detail", e.detail}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

SplitContext::SplitContext(uint32_t app_id, ChannelRegion& channel, HostFs& fs,
                           SecurityMonitor& sm, ConsistencyGuard& guard,
                           const GatewayConfig& cfg, AuditLog& audit,
                           Clock& clock, MessageAccounting* accounting)
    : app_id_(app_id), channel_(channel), fs_(fs), sm_(sm), guard_(guard),
      cfg_(cfg), audit_(audit), clock_(clock), accounting_(accounting) {
    auto init = [&](OpClass cls, const RateLimitConfig& rc) {
        Limiter l;
        l.cfg = rc;
        l.tokens = rc.burst;
        l.last_refill_us = clock_.now_us();
        limiters_[(uint8_t)cls] = l;
    };
    init(OpClass::FileMeta, cfg.file_meta);
    init(OpClass::FileData, cfg.file_data);
    init(OpClass::Display, cfg.display);
    init(OpClass::Event, cfg.event);
}

void SplitContext::watch(uint32_t pid, SlotPair pair) {
    watched_[pid] = pair;
}

void SplitContext::unwatch(uint32_t pid) {
    watched_.erase(pid);
}

std::vector<uint32_t> SplitContext::watched_slots() const {
    std::vector<uint32_t> out;
    for (const auto& [pid, pair] : watched_) {
        (void)pid;
        out.push_back(pair.to_host);
    }
    return out;
}

uint32_t SplitContext::handle_refcount(uint32_t id) const {
    auto it = handles_.find(id);
    return it == handles_.end() ? 0 : it->second.refcount;
}

const std::vector<uint8_t>* SplitContext::stdio_sink(uint32_t handle) const {
    auto it = stdio_sinks_.find(handle);
    return it == stdio_sinks_.end() ? nullptr : &it->second;
}

std::optional<std::string>
SplitContext::confined_path(const std::string& path) const {
    auto canon = canonicalize_path(path);
    if (!canon)
        return std::nullopt;
    const std::string& root = cfg_.whitelist_root;
    if (canon->size() < root.size() || canon->compare(0, root.size(), root) != 0)
        return std::nullopt;
    if (canon->size() > root.size() && (*canon)[root.size()] != '/')
        return std::nullopt;
    return canon;
}

std::optional<Violation> SplitContext::validate_message(const Message& msg) {
    const MessageHeader& h = msg.header;
    if (h.magic != kChannelMagic)
        return Violation{ViolationReason::BadMagic, "bad magic"};
    if (h.version != kChannelVersion)
        return Violation{ViolationReason::BadVersion, "bad version"};
    if (h.app_id != app_id_)
        return Violation{ViolationReason::Malformed, "app_id mismatch"};

    uint32_t cap;
    switch ((Opcode)h.opcode) {
    case Opcode::OpenReq: cap = 640; break;
    case Opcode::FileIo: cap = channel_.config().normal_payload_max; break;
    case Opcode::DisplayIo: cap = channel_.config().normal_payload_max; break;
    case Opcode::IoEventWait: cap = 1024; break;
    case Opcode::MmapFetch: cap = 16; break;
    case Opcode::ExecFetch: cap = 300; break;
    case Opcode::LaunchReq: cap = 300; break;
    case Opcode::CloneNotify: cap = 1024; break;
    case Opcode::ExitNotify: cap = 0; break;
    case Opcode::WcFlush: cap = 8; break;
    case Opcode::Echo: cap = channel_.config().normal_payload_max; break;
    default:
        // Reply/Error/SignalNotify never flow guest to host
        return Violation{ViolationReason::BadOpcode,
                         std::string("opcode ") + std::to_string(h.opcode)};
    }
    if (h.payload_len != msg.payload.size() || msg.payload.size() > cap)
        return Violation{ViolationReason::OversizePayload,
                         "payload " + std::to_string(msg.payload.size())};

    if (h.big_ref != kBigRefNone &&
        !channel_.big_slot_reserved_by(h.big_ref, app_id_))
        return Violation{ViolationReason::ForeignBigSlot,
                         "big_ref " + std::to_string(h.big_ref)};

    auto own = [&](uint32_t id) { return handles_.count(id) != 0; };

    switch ((Opcode)h.opcode) {
    case Opcode::OpenReq: {
        auto p = wire::OpenReq::decode(msg.payload);
        if (!p)
            return Violation{ViolationReason::Malformed, "OpenReq decode"};
        if (p->path.find('\0') != std::string::npos ||
            !canonicalize_path(p->path))
            return Violation{ViolationReason::BadPath, p->path};
        if (!confined_path(p->path))
            return Violation{ViolationReason::PathEscape, p->path};
        break;
    }
    case Opcode::FileIo: {
        auto p = wire::FileIo::decode(msg.payload);
        if (!p)
            return Violation{ViolationReason::Malformed, "FileIo decode"};
        if (!own(p->handle))
            return Violation{ViolationReason::ForeignHandle,
                             "handle " + std::to_string(p->handle)};
        break;
    }
    case Opcode::MmapFetch: {
        auto p = wire::MmapFetch::decode(msg.payload);
        if (!p)
            return Violation{ViolationReason::Malformed, "MmapFetch decode"};
        if (!own(p->handle))
            return Violation{ViolationReason::ForeignHandle,
                             "handle " + std::to_string(p->handle)};
        break;
    }
    case Opcode::WcFlush: {
        auto p = wire::WcFlush::decode(msg.payload);
        if (!p)
            return Violation{ViolationReason::Malformed, "WcFlush decode"};
        if (!own(p->handle))
            return Violation{ViolationReason::ForeignHandle,
                             "handle " + std::to_string(p->handle)};
        break;
    }
    case Opcode::IoEventWait: {
        auto p = wire::IoEventWait::decode(msg.payload);
        if (!p)
            return Violation{ViolationReason::Malformed, "IoEventWait decode"};
        for (uint32_t hd : p->handles)
            if (!own(hd))
                return Violation{ViolationReason::ForeignHandle,
                                 "handle " + std::to_string(hd)};
        break;
    }
    case Opcode::ExecFetch: {
        auto p = wire::ExecFetch::decode(msg.payload);
        if (!p)
            return Violation{ViolationReason::Malformed, "ExecFetch decode"};
        if (p->name.empty() || p->name.find('/') != std::string::npos ||
            p->name.find('\0') != std::string::npos)
            return Violation{ViolationReason::BadPath, p->name};
        break;
    }
    case Opcode::CloneNotify: {
        auto p = wire::CloneNotify::decode(msg.payload);
        if (!p)
            return Violation{ViolationReason::Malformed, "CloneNotify decode"};
        for (uint32_t hd : p->handles)
            if (!own(hd))
                return Violation{ViolationReason::ForeignHandle,
                                 "handle " + std::to_string(hd)};
        break;
    }
    case Opcode::LaunchReq:
        if (!wire::LaunchReq::decode(msg.payload))
            return Violation{ViolationReason::Malformed, "LaunchReq decode"};
        break;
    case Opcode::DisplayIo:
        if (!wire::DisplayIo::decode(msg.payload))
            return Violation{ViolationReason::Malformed, "DisplayIo decode"};
        break;
    default:
        break;
    }
    return std::nullopt;
}

OpClass SplitContext::classify_op(const Message& msg) const {
    switch ((Opcode)msg.header.opcode) {
    case Opcode::OpenReq:
        return OpClass::FileMeta;
    case Opcode::FileIo: {
        auto p = wire::FileIo::decode(msg.payload);
        if (p && (p->sub == wire::FileIoSub::Stat ||
                  p->sub == wire::FileIoSub::Close))
            return OpClass::FileMeta;
        return OpClass::FileData;
    }
    case Opcode::WcFlush:
    case Opcode::MmapFetch:
    case Opcode::ExecFetch:
        return OpClass::FileData;
    case Opcode::DisplayIo:
        return OpClass::Display;
    default:
        return OpClass::Event;
    }
}

RateDecision SplitContext::rate_check(OpClass cls) {
    Limiter& l = limiters_[(uint8_t)cls];
    uint64_t now = clock_.now_us();
    if (now > l.last_refill_us) {
        l.tokens = std::min(l.cfg.burst,
                            l.tokens + (double)(now - l.last_refill_us) *
                                           l.cfg.rate_per_s / 1e6);
        l.last_refill_us = now;
    }
    if (l.tokens >= 1.0) {
        l.tokens -= 1.0;
        l.empty_since_us.reset();
        return RateDecision::Allow;
    }
    if (!l.empty_since_us)
        l.empty_since_us = now;
    if (now - *l.empty_since_us >= cfg_.kill_window_us)
        return RateDecision::Kill;
    if (l.stage == RateStage::Normal) {
        l.stage = RateStage::Warned;
        audit_.append(now, app_id_, "rate_warn",
                      "op class " + std::to_string((int)cls));
    } else if (l.stage == RateStage::Warned) {
        l.stage = RateStage::Throttled;
    }
    return RateDecision::Throttle;
}

RateStage SplitContext::rate_stage(OpClass cls) const {
    auto it = limiters_.find((uint8_t)cls);
    return it == limiters_.end() ? RateStage::Normal : it->second.stage;
}

void SplitContext::reply_to(uint32_t pid, uint64_t echo_seq, uint32_t status,
                            uint64_t value, std::span<const uint8_t> data,
                            uint32_t big_ref) {
    auto it = watched_.find(pid);
    if (it == watched_.end())
        return;
    wire::Reply rep;
    rep.echo_seq = echo_seq;
    rep.status = (wire::ReplyStatus)status;
    rep.value = value;
    rep.data.assign(data.begin(), data.end());
    MessageHeader h;
    h.opcode = (uint8_t)Opcode::Reply;
    h.app_id = app_id_;
    h.pid = pid;
    h.big_ref = big_ref;
    auto payload = rep.encode();
    channel_.send_with_retry(it->second.to_guest, h, payload, clock_);
    if (accounting_)
        accounting_->replies_sent++;
}

size_t SplitContext::pump() {
    size_t handled = 0;
    bool progress = true;
    while (progress && status_ == Status::Running) {
        progress = false;
        // snapshot: processing can mutate the watch set (exits)
        auto watched = watched_;
        for (const auto& [pid, pair] : watched) {
            (void)pid;
            Message msg;
            RecvStatus rs = recv_checked(pair.to_host, msg);
            if (rs == RecvStatus::Empty)
                continue;
            if (rs == RecvStatus::Corrupt) {
                violations_++;
                audit_.append(clock_.now_us(), app_id_, "violation",
                              "transport corruption");
                terminate("transport corruption");
                return handled;
            }
            progress = true;
            handled++;
            process(msg, pair.to_host);
            if (status_ != Status::Running)
                return handled;
        }
    }
    return handled;
}

RecvStatus SplitContext::recv_checked(uint32_t slot, Message& msg) {
    return channel_.recv(slot, msg);
}

size_t SplitContext::serve_until(uint64_t deadline_us) {
    size_t handled = 0;
    while (status_ == Status::Running && clock_.now_us() < deadline_us) {
        auto slots = watched_slots();
        if (slots.empty())
            break;
        auto ready = channel_.wait_any(slots, deadline_us, clock_);
        if (ready.empty())
            break;
        handled += pump();
    }
    return handled;
}

void SplitContext::process(const Message& msg, uint32_t) {
    if (accounting_)
        accounting_->count_gateway_recv((Opcode)msg.header.opcode);
    processed_++;
    if (clock_.is_virtual())
        clock_.sleep_us(kServiceCostUs);

    if (auto v = validate_message(msg)) {
        violations_++;
        audit_.append(clock_.now_us(), app_id_, "violation",
                      std::string(violation_reason_name(v->reason)) + ": " +
                          v->detail);
        terminate(violation_reason_name(v->reason));
        return;
    }

    Opcode op = (Opcode)msg.header.opcode;
    // control opcodes are not rate limited
    if (op != Opcode::LaunchReq && op != Opcode::CloneNotify &&
        op != Opcode::ExitNotify) {
        for (;;) {
            RateDecision d = rate_check(classify_op(msg));
            if (d == RateDecision::Allow)
                break;
            if (d == RateDecision::Kill) {
                audit_.append(clock_.now_us(), app_id_, "rate_kill",
                              "sustained message flood");
                terminate("rate limit exceeded");
                return;
            }
            // Throttled: inject delay until a token is available
            clock_.sleep_us(1000);
        }
    }

    switch (op) {
    case Opcode::OpenReq: op_open(msg); break;
    case Opcode::FileIo: op_file_io(msg); break;
    case Opcode::WcFlush: op_wc_flush(msg); break;
    case Opcode::MmapFetch: op_mmap_fetch(msg); break;
    case Opcode::ExecFetch: op_exec_fetch(msg); break;
    case Opcode::DisplayIo: op_display(msg); break;
    case Opcode::IoEventWait: op_io_event_wait(msg); break;
    case Opcode::LaunchReq: op_launch(msg); break;
    case Opcode::CloneNotify: op_clone(msg); break;
    case Opcode::ExitNotify: op_exit(msg); break;
    case Opcode::Echo: op_echo(msg); break;
    default: break; // unreachable after validation
    }
}

void SplitContext::op_open(const Message& msg) {
    auto p = *wire::OpenReq::decode(msg.payload);
    auto canon = *confined_path(p.path);
    bool write = p.flags & wire::kOpenWrite;
    bool create = p.flags & wire::kOpenCreate;

    if (write) {
        if (sm_.check_guest_write_open(canon) == GuestWriteOpenDecision::DenyInUse) {
            denied_++;
            audit_.append(clock_.now_us(), app_id_, "denied",
                          "write open while host holds " + canon);
            reply_to(msg.header.pid, msg.header.seq,
                     (uint32_t)wire::ReplyStatus::DeniedInUse, 0, {});
            return;
        }
    }
    bool existed = fs_.exists(canon);
    OpenFlags flags;
    flags.read = p.flags & wire::kOpenRead;
    flags.write = write;
    flags.create = create;
    flags.trunc = p.flags & wire::kOpenTrunc;
    auto r = fs_.open(canon, flags, Domain::Quarantine);
    if (r.status != FsStatus::Ok) {
        denied_++;
        uint32_t st = r.status == FsStatus::NotFound
                          ? (uint32_t)wire::ReplyStatus::NotFound
                          : (uint32_t)wire::ReplyStatus::PermissionDenied;
        reply_to(msg.header.pid, msg.header.seq, st, 0, {});
        return;
    }
    uint32_t id = next_handle_++;
    handles_[id] = HostHandle{HostHandle::Kind::File, r.handle, msg.header.pid,
                              1, write, canon};
    if (write) {
        guard_.writer_open(canon, Domain::Quarantine);
        // the certifier learns about every write-mode open
        sm_.on_guest_write(canon, app_id_, clock_.now_us(), !existed);
    }
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             id, {});
}

void SplitContext::op_file_io(const Message& msg) {
    auto p = *wire::FileIo::decode(msg.payload);
    HostHandle& hh = handles_.at(p.handle);
    uint64_t seq = msg.header.seq;
    uint32_t pid = msg.header.pid;

    switch (p.sub) {
    case wire::FileIoSub::Read: {
        if (hh.kind == HostHandle::Kind::Stdio) {
            reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, 0, {});
            return;
        }
        if (msg.header.big_ref != kBigRefNone) {
            auto r = fs_.pread(hh.fs_handle, p.offset, p.len);
            if (r.status != FsStatus::Ok) {
                reply_to(pid, seq, (uint32_t)wire::ReplyStatus::BadHandle, 0, {});
                return;
            }
            auto big = channel_.big_slot_bytes(msg.header.big_ref);
            size_t n = std::min(r.data.size(), big.size());
            std::copy(r.data.begin(), r.data.begin() + n, big.begin());
            reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, n, {},
                     msg.header.big_ref);
            return;
        }
        uint32_t cap = channel_.config().normal_payload_max - wire::kReplyOverhead;
        uint32_t len = std::min(p.len, cap);
        auto r = fs_.pread(hh.fs_handle, p.offset, len);
        if (r.status != FsStatus::Ok) {
            reply_to(pid, seq, (uint32_t)wire::ReplyStatus::BadHandle, 0, {});
            return;
        }
        reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, r.data.size(),
                 r.data);
        return;
    }
    case wire::FileIoSub::Write: {
        std::span<const uint8_t> data;
        std::vector<uint8_t> big_copy;
        if (msg.header.big_ref != kBigRefNone) {
            auto big = channel_.big_slot_bytes(msg.header.big_ref);
            size_t n = std::min<size_t>(p.len, big.size());
            big_copy.assign(big.begin(), big.begin() + n);
            data = big_copy;
        } else {
            data = p.data;
        }
        if (hh.kind == HostHandle::Kind::Stdio) {
            auto& sink = stdio_sinks_[p.handle];
            sink.insert(sink.end(), data.begin(), data.end());
            reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, data.size(), {});
            return;
        }
        auto r = fs_.pwrite(hh.fs_handle, p.offset, data);
        if (r.status != FsStatus::Ok) {
            uint32_t st = r.status == FsStatus::ModeMismatch
                              ? (uint32_t)wire::ReplyStatus::ModeMismatch
                              : (uint32_t)wire::ReplyStatus::BadHandle;
            reply_to(pid, seq, st, 0, {});
            return;
        }
        guard_.bump_write_generation(hh.path);
        sm_.on_guest_write(hh.path, app_id_, clock_.now_us(), false);
        reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, r.value, {});
        return;
    }
    case wire::FileIoSub::Seek: {
        if (hh.kind == HostHandle::Kind::File)
            fs_.seek(hh.fs_handle, p.offset);
        reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, p.offset, {});
        return;
    }
    case wire::FileIoSub::Stat: {
        FileStat st;
        if (hh.kind == HostHandle::Kind::File &&
            fs_.fstat(hh.fs_handle, st) != FsStatus::Ok) {
            reply_to(pid, seq, (uint32_t)wire::ReplyStatus::BadHandle, 0, {});
            return;
        }
        reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, st.size, {});
        return;
    }
    case wire::FileIoSub::Close: {
        drop_handle_ref(p.handle);
        reply_to(pid, seq, (uint32_t)wire::ReplyStatus::Ok, 0, {});
        return;
    }
    }
}

void SplitContext::drop_handle_ref(uint32_t id) {
    auto it = handles_.find(id);
    if (it == handles_.end())
        return;
    if (--it->second.refcount > 0)
        return;
    if (it->second.kind == HostHandle::Kind::File) {
        fs_.close(it->second.fs_handle);
        if (it->second.write_mode)
            guard_.writer_close(it->second.path, Domain::Quarantine);
    } else {
        stdio_sinks_.erase(id);
    }
    handles_.erase(it);
}

void SplitContext::op_wc_flush(const Message& msg) {
    auto p = *wire::WcFlush::decode(msg.payload);
    HostHandle& hh = handles_.at(p.handle);
    if (msg.header.big_ref == kBigRefNone ||
        hh.kind != HostHandle::Kind::File) {
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::InternalError, 0, {});
        return;
    }
    auto big = channel_.big_slot_bytes(msg.header.big_ref);
    auto extents = wire::decode_extents(big, p.extent_count);
    if (!extents) {
        violations_++;
        audit_.append(clock_.now_us(), app_id_, "violation",
                      "WcFlush extent stream malformed");
        terminate("Malformed");
        return;
    }
    // all extents land under one hostfs mutation
    FsStatus st = fs_.apply_extents(hh.fs_handle, *extents);
    if (st != FsStatus::Ok) {
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::ModeMismatch, 0, {});
        return;
    }
    guard_.bump_write_generation(hh.path);
    sm_.on_guest_write(hh.path, app_id_, clock_.now_us(), false);
    uint64_t bytes = 0;
    for (const auto& e : *extents)
        bytes += e.data.size();
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             bytes, {});
}

void SplitContext::op_mmap_fetch(const Message& msg) {
    auto p = *wire::MmapFetch::decode(msg.payload);
    HostHandle& hh = handles_.at(p.handle);
    if (hh.kind != HostHandle::Kind::File) {
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::BadHandle, 0, {});
        return;
    }
    auto r = fs_.pread(hh.fs_handle, p.offset, p.len);
    if (r.status != FsStatus::Ok) {
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::BadHandle, 0, {});
        return;
    }
    if (msg.header.big_ref != kBigRefNone) {
        auto big = channel_.big_slot_bytes(msg.header.big_ref);
        size_t n = std::min(r.data.size(), big.size());
        std::copy(r.data.begin(), r.data.begin() + n, big.begin());
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::Ok, n, {}, msg.header.big_ref);
        return;
    }
    uint32_t cap = channel_.config().normal_payload_max - wire::kReplyOverhead;
    if (r.data.size() > cap)
        r.data.resize(cap);
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             r.data.size(), r.data);
}

void SplitContext::op_exec_fetch(const Message& msg) {
    auto p = *wire::ExecFetch::decode(msg.payload);
    std::optional<std::vector<uint8_t>> image;
    if (images_)
        image = images_(p.name);
    if (!image) {
        denied_++;
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::NotFound, 0, {});
        return;
    }
    if (msg.header.big_ref != kBigRefNone) {
        auto big = channel_.big_slot_bytes(msg.header.big_ref);
        size_t n = std::min(image->size(), big.size());
        std::copy(image->begin(), image->begin() + n, big.begin());
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::Ok, n, {}, msg.header.big_ref);
        return;
    }
    uint32_t cap = channel_.config().normal_payload_max - wire::kReplyOverhead;
    uint32_t len = std::min(p.chunk_len, cap);
    std::vector<uint8_t> chunk;
    if (p.chunk_offset < image->size()) {
        size_t n = std::min<size_t>(len, image->size() - p.chunk_offset);
        chunk.assign(image->begin() + p.chunk_offset,
                     image->begin() + p.chunk_offset + n);
    }
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             image->size(), chunk);
}

void SplitContext::op_display(const Message& msg) {
    auto p = *wire::DisplayIo::decode(msg.payload);
    if (p.clipboard && cfg_.drop_clipboard) {
        denied_++;
        audit_.append(clock_.now_us(), app_id_, "clipboard_drop",
                      std::to_string(p.data.size()) + " bytes");
        reply_to(msg.header.pid, msg.header.seq,
                 (uint32_t)wire::ReplyStatus::Ok, 0, {});
        return;
    }
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             p.data.size(), {});
}

void SplitContext::op_io_event_wait(const Message& msg) {
    auto p = *wire::IoEventWait::decode(msg.payload);
    uint64_t now = clock_.now_us();
    uint64_t ready_mask = 0;
    std::optional<uint64_t> earliest;
    if (readiness_) {
        for (size_t i = 0; i < p.handles.size(); i++) {
            auto at = readiness_(p.handles[i]);
            if (at && *at <= now + p.wait_us) {
                if (!earliest || *at < *earliest)
                    earliest = *at;
                ready_mask |= 1ull << i;
            }
        }
    }
    if (ready_mask) {
        if (earliest && *earliest > now && clock_.is_virtual())
            clock_.sleep_us(*earliest - now);
    } else if (clock_.is_virtual()) {
        clock_.sleep_us(p.wait_us);
    }
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             ready_mask, {});
}

void SplitContext::op_launch(const Message& msg) {
    // stdio of the new process lives host-side: three sink handles
    wire::Writer w;
    for (int i = 0; i < 3; i++) {
        uint32_t id = next_handle_++;
        handles_[id] = HostHandle{HostHandle::Kind::Stdio, 0, msg.header.pid,
                                  1, i > 0, {}};
        stdio_sinks_[id] = {};
        w.u32(id);
    }
    auto data = w.take();
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             0, data);
}

void SplitContext::op_clone(const Message& msg) {
    auto p = *wire::CloneNotify::decode(msg.payload);
    wire::Writer w;
    if (p.clone_files) {
        for (uint32_t id : p.handles) {
            handles_.at(id).refcount++;
            w.u32(id);
        }
    } else {
        for (uint32_t id : p.handles) {
            const HostHandle& src = handles_.at(id);
            uint32_t nid = next_handle_++;
            if (src.kind == HostHandle::Kind::Stdio) {
                handles_[nid] = HostHandle{HostHandle::Kind::Stdio, 0,
                                           p.child_pid, 1, src.write_mode, {}};
                stdio_sinks_[nid] = {};
            } else {
                OpenFlags flags;
                flags.read = true;
                flags.write = src.write_mode;
                auto r = fs_.open(src.path, flags, Domain::Quarantine);
                uint64_t off = fs_.handle_offset(src.fs_handle).value_or(0);
                fs_.seek(r.handle, off);
                handles_[nid] = HostHandle{HostHandle::Kind::File, r.handle,
                                           p.child_pid, 1, src.write_mode,
                                           src.path};
                if (src.write_mode)
                    guard_.writer_open(src.path, Domain::Quarantine);
            }
            w.u32(nid);
        }
    }
    auto data = w.take();
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             p.handles.size(), data);
}

void SplitContext::op_exit(const Message& msg) {
    uint32_t pid = msg.header.pid;
    auto it = watched_.find(pid);
    if (it != watched_.end()) {
        watched_.erase(it);
        channel_.free_slot_pair(app_id_, pid);
    }
    if (watched_.empty())
        terminate("exit");
}

void SplitContext::op_echo(const Message& msg) {
    reply_to(msg.header.pid, msg.header.seq, (uint32_t)wire::ReplyStatus::Ok,
             msg.payload.size(), msg.payload);
}

CleanupReport SplitContext::terminate(const std::string& reason) {
    CleanupReport rep;
    rep.reason = reason;
    if (status_ == Status::Terminated)
        return rep; // idempotent
    bool killed = reason != "exit";

    for (auto& [id, hh] : handles_) {
        (void)id;
        if (hh.kind == HostHandle::Kind::File) {
            fs_.close(hh.fs_handle);
            if (hh.write_mode)
                guard_.writer_close(hh.path, Domain::Quarantine);
        }
        rep.handles++;
    }
    handles_.clear();
    stdio_sinks_.clear();

    uint32_t bigs = channel_.reserved_big_slot_count();
    channel_.release_all_big_slots(app_id_);
    rep.big_slots = bigs - channel_.reserved_big_slot_count();

    for (const auto& [pid, pair] : watched_) {
        (void)pair;
        channel_.free_slot_pair(app_id_, pid);
        rep.slots += 2;
    }
    auto watched = watched_;
    watched_.clear();

    status_ = Status::Terminated;
    term_reason_ = reason;
    audit_.append(clock_.now_us(), app_id_,
                  killed ? "app_killed" : "app_exit", reason);
    if (killed && on_kill_)
        on_kill_(app_id_, reason);
    return rep;
}

GatewayManager::GatewayManager(ChannelRegion& channel, HostFs& fs,
                               SecurityMonitor& sm, ConsistencyGuard& guard,
                               const GatewayConfig& cfg, AuditLog& audit,
                               Clock& clock, MessageAccounting* accounting)
    : channel_(channel), fs_(fs), sm_(sm), guard_(guard), cfg_(cfg),
      audit_(audit), clock_(clock), accounting_(accounting) {}

SplitContext* GatewayManager::spawn(uint32_t app_id) {
    auto it = contexts_.find(app_id);
    if (it != contexts_.end() &&
        it->second->status() == SplitContext::Status::Running)
        return nullptr; // AlreadyRunning
    auto ctx = std::make_unique<SplitContext>(app_id, channel_, fs_, sm_,
                                              guard_, cfg_, audit_, clock_,
                                              accounting_);
    SplitContext* raw = ctx.get();
    contexts_[app_id] = std::move(ctx);
    return raw;
}

SplitContext* GatewayManager::find(uint32_t app_id) {
    auto it = contexts_.find(app_id);
    return it == contexts_.end() ? nullptr : it->second.get();
}

void GatewayManager::erase(uint32_t app_id) {
    contexts_.erase(app_id);
}

size_t GatewayManager::live_count() const {
    size_t n = 0;
    for (const auto& [id, ctx] : contexts_) {
        (void)id;
        if (ctx->status() == SplitContext::Status::Running)
            n++;
    }
    return n;
}

} // namespace qos
