#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qos/channel.hpp"

// Payload encodings for each opcode, little-endian, length-prefixed
// strings. Decoders are strict: truncated or oversized payloads fail, and
// the gateway treats a failed decode as a format violation.

namespace qos::wire {

class Writer {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void str(const std::string& s) {
        u16((uint16_t)s.size());
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void bytes(std::span<const uint8_t> b) {
        buf_.insert(buf_.end(), b.begin(), b.end());
    }
    std::vector<uint8_t> take() { return std::move(buf_); }

private:
    void raw(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const uint8_t> b) : buf_(b) {}
    bool u8(uint8_t& v) { return raw(&v, 1); }
    bool u16(uint16_t& v) { return raw(&v, 2); }
    bool u32(uint32_t& v) { return raw(&v, 4); }
    bool u64(uint64_t& v) { return raw(&v, 8); }
    bool str(std::string& s) {
        uint16_t n;
        if (!u16(n) || pos_ + n > buf_.size())
            return false;
        s.assign(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return true;
    }
    bool rest(std::vector<uint8_t>& out) {
        out.assign(buf_.begin() + pos_, buf_.end());
        pos_ = buf_.size();
        return true;
    }
    bool take(size_t n, std::vector<uint8_t>& out) {
        if (pos_ + n > buf_.size())
            return false;
        out.assign(buf_.begin() + pos_, buf_.begin() + pos_ + n);
        pos_ += n;
        return true;
    }
    bool done() const { return pos_ == buf_.size(); }
    size_t remaining() const { return buf_.size() - pos_; }

private:
    bool raw(void* p, size_t n) {
        if (pos_ + n > buf_.size())
            return false;
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
        return true;
    }
    std::span<const uint8_t> buf_;
    size_t pos_ = 0;
};

// open flag bits
inline constexpr uint8_t kOpenRead = 1;
inline constexpr uint8_t kOpenWrite = 2;
inline constexpr uint8_t kOpenCreate = 4;
inline constexpr uint8_t kOpenTrunc = 8;

struct OpenReq {
    uint8_t flags = 0;
    std::string path;

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u8(flags);
        w.str(path);
        return w.take();
    }
    static std::optional<OpenReq> decode(std::span<const uint8_t> b) {
        Reader r(b);
        OpenReq p;
        if (!r.u8(p.flags) || !r.str(p.path) || !r.done())
            return std::nullopt;
        return p;
    }
};

enum class FileIoSub : uint8_t { Read = 0, Write = 1, Seek = 2, Stat = 3, Close = 4 };

struct FileIo {
    FileIoSub sub = FileIoSub::Read;
    uint32_t handle = 0;
    uint64_t offset = 0;
    uint32_t len = 0;                // read length / write length
    std::vector<uint8_t> data;       // inline write data (may live in big slot)

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u8((uint8_t)sub);
        w.u32(handle);
        w.u64(offset);
        w.u32(len);
        w.bytes(data);
        return w.take();
    }
    static std::optional<FileIo> decode(std::span<const uint8_t> b) {
        Reader r(b);
        FileIo p;
        uint8_t sub;
        if (!r.u8(sub) || sub > (uint8_t)FileIoSub::Close)
            return std::nullopt;
        p.sub = (FileIoSub)sub;
        if (!r.u32(p.handle) || !r.u64(p.offset) || !r.u32(p.len))
            return std::nullopt;
        r.rest(p.data);
        if (p.sub == FileIoSub::Write && !p.data.empty() &&
            p.data.size() != p.len)
            return std::nullopt;
        return p;
    }
};

struct MmapFetch {
    uint32_t handle = 0;
    uint64_t offset = 0;
    uint32_t len = 0;

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u32(handle);
        w.u64(offset);
        w.u32(len);
        return w.take();
    }
    static std::optional<MmapFetch> decode(std::span<const uint8_t> b) {
        Reader r(b);
        MmapFetch p;
        if (!r.u32(p.handle) || !r.u64(p.offset) || !r.u32(p.len) || !r.done())
            return std::nullopt;
        return p;
    }
};

struct ExecFetch {
    std::string name;
    uint64_t chunk_offset = 0;
    uint32_t chunk_len = 0; // 0 = whole image via big slot

    std::vector<uint8_t> encode() const {
        Writer w;
        w.str(name);
        w.u64(chunk_offset);
        w.u32(chunk_len);
        return w.take();
    }
    static std::optional<ExecFetch> decode(std::span<const uint8_t> b) {
        Reader r(b);
        ExecFetch p;
        if (!r.str(p.name) || !r.u64(p.chunk_offset) || !r.u32(p.chunk_len) ||
            !r.done())
            return std::nullopt;
        return p;
    }
};

struct WcFlush {
    uint32_t handle = 0;
    uint32_t extent_count = 0; // extent stream lives in the big slot

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u32(handle);
        w.u32(extent_count);
        return w.take();
    }
    static std::optional<WcFlush> decode(std::span<const uint8_t> b) {
        Reader r(b);
        WcFlush p;
        if (!r.u32(p.handle) || !r.u32(p.extent_count) || !r.done())
            return std::nullopt;
        return p;
    }
};

struct IoEventWait {
    uint64_t wait_us = 0;
    std::vector<uint32_t> handles;

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u64(wait_us);
        w.u16((uint16_t)handles.size());
        for (uint32_t h : handles)
            w.u32(h);
        return w.take();
    }
    static std::optional<IoEventWait> decode(std::span<const uint8_t> b) {
        Reader r(b);
        IoEventWait p;
        uint16_t n;
        if (!r.u64(p.wait_us) || !r.u16(n))
            return std::nullopt;
        for (uint16_t i = 0; i < n; i++) {
            uint32_t h;
            if (!r.u32(h))
                return std::nullopt;
            p.handles.push_back(h);
        }
        if (!r.done())
            return std::nullopt;
        return p;
    }
};

struct CloneNotify {
    uint32_t child_pid = 0;
    uint8_t clone_files = 0;
    std::vector<uint32_t> handles; // shared (refcount) or duplicated

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u32(child_pid);
        w.u8(clone_files);
        w.u16((uint16_t)handles.size());
        for (uint32_t h : handles)
            w.u32(h);
        return w.take();
    }
    static std::optional<CloneNotify> decode(std::span<const uint8_t> b) {
        Reader r(b);
        CloneNotify p;
        uint16_t n;
        if (!r.u32(p.child_pid) || !r.u8(p.clone_files) || !r.u16(n))
            return std::nullopt;
        for (uint16_t i = 0; i < n; i++) {
            uint32_t h;
            if (!r.u32(h))
                return std::nullopt;
            p.handles.push_back(h);
        }
        if (!r.done())
            return std::nullopt;
        return p;
    }
};

struct LaunchReq {
    std::string app_name;
    uint8_t mode = 0; // 0 local, 1 remote

    std::vector<uint8_t> encode() const {
        Writer w;
        w.str(app_name);
        w.u8(mode);
        return w.take();
    }
    static std::optional<LaunchReq> decode(std::span<const uint8_t> b) {
        Reader r(b);
        LaunchReq p;
        if (!r.str(p.app_name) || !r.u8(p.mode) || !r.done() || p.mode > 1)
            return std::nullopt;
        return p;
    }
};

struct SignalNotify {
    uint32_t sig = 0;

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u32(sig);
        return w.take();
    }
    static std::optional<SignalNotify> decode(std::span<const uint8_t> b) {
        Reader r(b);
        SignalNotify p;
        if (!r.u32(p.sig) || !r.done())
            return std::nullopt;
        return p;
    }
};

struct DisplayIo {
    uint8_t clipboard = 0; // clipboard-tagged payloads can be policy-dropped
    std::vector<uint8_t> data;

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u8(clipboard);
        w.bytes(data);
        return w.take();
    }
    static std::optional<DisplayIo> decode(std::span<const uint8_t> b) {
        Reader r(b);
        DisplayIo p;
        if (!r.u8(p.clipboard) || p.clipboard > 1)
            return std::nullopt;
        r.rest(p.data);
        return p;
    }
};

enum class ReplyStatus : uint32_t {
    Ok = 0,
    NotFound = 1,
    PermissionDenied = 2,
    BadHandle = 3,
    ModeMismatch = 4,
    DeniedInUse = 5,
    DeniedUnverified = 6,
    DeniedUnsafe = 7,
    Throttled = 8,
    InternalError = 9,
};

struct Reply {
    uint64_t echo_seq = 0; // correlates with the request's slot seq
    ReplyStatus status = ReplyStatus::Ok;
    uint64_t value = 0; // handle id / byte count / size / ready mask
    std::vector<uint8_t> data;

    std::vector<uint8_t> encode() const {
        Writer w;
        w.u64(echo_seq);
        w.u32((uint32_t)status);
        w.u64(value);
        w.bytes(data);
        return w.take();
    }
    static std::optional<Reply> decode(std::span<const uint8_t> b) {
        Reader r(b);
        Reply p;
        uint32_t st;
        if (!r.u64(p.echo_seq) || !r.u32(st) || !r.u64(p.value))
            return std::nullopt;
        p.status = (ReplyStatus)st;
        r.rest(p.data);
        return p;
    }
};

// bytes a Reply consumes before its inline data
inline constexpr uint32_t kReplyOverhead = 20;

// Extent stream stored in a big slot: count * {u64 offset, u32 len, bytes}.
inline std::vector<uint8_t> encode_extents(const std::vector<FsExtent>& extents) {
    Writer w;
    for (const auto& e : extents) {
        w.u64(e.offset);
        w.u32((uint32_t)e.data.size());
        w.bytes(e.data);
    }
    return w.take();
}

inline std::optional<std::vector<FsExtent>>
decode_extents(std::span<const uint8_t> b, uint32_t expected_count) {
    Reader r(b);
    std::vector<FsExtent> out;
    for (uint32_t i = 0; i < expected_count; i++) {
        FsExtent e;
        uint32_t len;
        if (!r.u64(e.offset) || !r.u32(len) || !r.take(len, e.data))
            return std::nullopt;
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace qos::wire
