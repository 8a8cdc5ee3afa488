#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "qos/gateway.hpp"
#include "qos/wire.hpp"

using namespace qos;

namespace {

struct Rig {
    VirtualClock clock;
    ChannelRegion channel;
    HostFs fs;
    SecurityMonitor sm;
    ConsistencyGuard guard;
    GatewayConfig cfg;
    AuditLog audit;
    SplitContext ctx;
    SlotPair pair;

    explicit Rig(GatewayConfig gcfg = {}, uint32_t app_id = 1)
        : channel(ChannelConfig{}), sm(fs, {}), cfg(std::move(gcfg)),
          ctx(app_id, channel, fs, sm, guard, cfg, audit, clock) {
        fs.mkdir("/home");
        fs.mkdir("/home/user");
        pair = channel.allocate_slot_pair(app_id, 1).pair;
        ctx.watch(1, pair);
    }

    // guest-side request; returns the stamped seq
    uint64_t send(Opcode op, std::span<const uint8_t> payload,
                  uint32_t big_ref = kBigRefNone) {
        MessageHeader h;
        h.opcode = (uint8_t)op;
        h.app_id = 1;
        h.pid = 1;
        h.big_ref = big_ref;
        REQUIRE(channel.send(pair.to_host, h, payload) == SendStatus::Ok);
        return h.seq;
    }

    std::optional<wire::Reply> reply() {
        Message m;
        while (channel.recv(pair.to_guest, m) == RecvStatus::Ok)
            if ((Opcode)m.header.opcode == Opcode::Reply)
                return wire::Reply::decode(m.payload);
        return std::nullopt;
    }

    uint32_t open_file(const std::string& path, uint8_t flags) {
        wire::OpenReq p;
        p.flags = flags;
        p.path = path;
        auto payload = p.encode();
        uint64_t seq = send(Opcode::OpenReq, payload);
        ctx.pump();
        auto r = reply();
        REQUIRE(r);
        REQUIRE(r->echo_seq == seq);
        REQUIRE(r->status == wire::ReplyStatus::Ok);
        return (uint32_t)r->value;
    }
};

Message make_msg(Opcode op, std::span<const uint8_t> payload,
                 uint32_t app_id = 1, uint32_t big_ref = kBigRefNone) {
    Message m;
    m.header.opcode = (uint8_t)op;
    m.header.app_id = app_id;
    m.header.pid = 1;
    m.header.payload_len = (uint32_t)payload.size();
    m.header.big_ref = big_ref;
    m.payload.assign(payload.begin(), payload.end());
    return m;
}

} // namespace

TEST_CASE("validate: header checks run in deny-by-default order") {
    Rig rig;
    wire::OpenReq req;
    req.flags = wire::kOpenRead;
    req.path = "/home/user/f";
    auto payload = req.encode();

    // valid message passes
    Message m = make_msg(Opcode::OpenReq, payload);
    CHECK(!rig.ctx.validate_message(m));

    // bad magic wins over everything else
    Message bad = m;
    bad.header.magic = 0xdead;
    bad.header.version = 99;
    bad.header.opcode = 200;
    auto v = rig.ctx.validate_message(bad);
    REQUIRE(v);
    CHECK(v->reason == ViolationReason::BadMagic);

    bad = m;
    bad.header.version = 2;
    v = rig.ctx.validate_message(bad);
    REQUIRE(v);
    CHECK(v->reason == ViolationReason::BadVersion);

    // host-to-guest opcodes are forbidden inbound
    for (Opcode op : {Opcode::Reply, Opcode::Error, Opcode::SignalNotify}) {
        bad = make_msg(op, payload);
        v = rig.ctx.validate_message(bad);
        REQUIRE(v);
        CHECK(v->reason == ViolationReason::BadOpcode);
    }
    bad = make_msg((Opcode)0, payload);
    REQUIRE(rig.ctx.validate_message(bad));
    bad = make_msg((Opcode)77, payload);
    REQUIRE(rig.ctx.validate_message(bad));

    // per-opcode payload caps
    std::vector<uint8_t> fat(641, 0);
    bad = make_msg(Opcode::OpenReq, fat);
    v = rig.ctx.validate_message(bad);
    REQUIRE(v);
    CHECK(v->reason == ViolationReason::OversizePayload);

    // payload_len must match the actual payload
    bad = m;
    bad.header.payload_len += 1;
    v = rig.ctx.validate_message(bad);
    REQUIRE(v);
    CHECK(v->reason == ViolationReason::OversizePayload);

    // truncated body fails decode
    std::vector<uint8_t> trunc(payload.begin(), payload.begin() + 2);
    bad = make_msg(Opcode::OpenReq, trunc);
    v = rig.ctx.validate_message(bad);
    REQUIRE(v);
    CHECK(v->reason == ViolationReason::Malformed);
}

TEST_CASE("validate: foreign big slot and foreign handle") {
    Rig rig;
    auto big = rig.channel.reserve_big_slot(2, 64); // another app's slot
    REQUIRE(big);
    wire::OpenReq req;
    req.flags = wire::kOpenRead;
    req.path = "/home/user/f";
    auto payload = req.encode();
    Message m = make_msg(Opcode::OpenReq, payload, 1, *big);
    auto v = rig.ctx.validate_message(m);
    REQUIRE(v);
    CHECK(v->reason == ViolationReason::ForeignBigSlot);

    wire::FileIo io;
    io.sub = wire::FileIoSub::Read;
    io.handle = 12345;
    io.len = 4;
    auto iop = io.encode();
    m = make_msg(Opcode::FileIo, iop);
    v = rig.ctx.validate_message(m);
    REQUIRE(v);
    CHECK(v->reason == ViolationReason::ForeignHandle);
}

TEST_CASE("validate: path confinement matches a lexical oracle") {
    Rig rig;
    std::mt19937_64 rng(5);
    const char* parts[] = {"home", "user", "..", ".", "docs", "x", "etc"};
    for (int iter = 0; iter < 3000; iter++) {
        std::string p = rng() % 8 ? "/" : "";
        int n = 1 + (int)(rng() % 5);
        for (int i = 0; i < n; i++) {
            p += parts[rng() % 7];
            if (i + 1 < n)
                p += "/";
        }
        wire::OpenReq req;
        req.flags = wire::kOpenRead;
        req.path = p;
        auto payload = req.encode();
        Message m = make_msg(Opcode::OpenReq, payload);
        auto v = rig.ctx.validate_message(m);

        // oracle: absolute, never climbs above the root, and the normalized
        // form stays inside /home/user
        bool ok = false;
        if (!p.empty() && p[0] == '/') {
            int depth = 0;
            bool escapes = false;
            std::string seg;
            for (size_t i = 1; i <= p.size(); i++) {
                if (i == p.size() || p[i] == '/') {
                    if (seg == "..") {
                        if (--depth < 0)
                            escapes = true;
                    } else if (!seg.empty() && seg != ".") {
                        depth++;
                    }
                    seg.clear();
                } else {
                    seg += p[i];
                }
            }
            auto norm =
                std::filesystem::path(p).lexically_normal().string();
            if (norm.size() > 1 && norm.back() == '/')
                norm.pop_back();
            ok = !escapes &&
                 (norm == "/home/user" || norm.rfind("/home/user/", 0) == 0);
        }
        if (ok)
            CHECK(!v);
        else
            CHECK(v);
    }
}

TEST_CASE("open/read/write/close round trip with seq echo") {
    Rig rig;
    rig.fs.put_file("/home/user/f", std::vector<uint8_t>{10, 20, 30});
    uint32_t h = rig.open_file("/home/user/f", wire::kOpenRead);
    CHECK(rig.ctx.owns_handle(h));

    wire::FileIo io;
    io.sub = wire::FileIoSub::Read;
    io.handle = h;
    io.offset = 1;
    io.len = 2;
    auto payload = io.encode();
    uint64_t seq = rig.send(Opcode::FileIo, payload);
    rig.ctx.pump();
    auto r = rig.reply();
    REQUIRE(r);
    CHECK(r->echo_seq == seq);
    CHECK(r->data == std::vector<uint8_t>{20, 30});

    io.sub = wire::FileIoSub::Close;
    payload = io.encode();
    rig.send(Opcode::FileIo, payload);
    rig.ctx.pump();
    CHECK(rig.ctx.handle_count() == 0);
    CHECK(rig.fs.in_use("/home/user/f") == 0);
}

TEST_CASE("violation during pump kills the whole app and cleans up") {
    Rig rig;
    rig.fs.put_file("/home/user/f", {});
    rig.open_file("/home/user/f", wire::kOpenRead);
    CHECK(rig.ctx.handle_count() == 1);

    // second process of the same app
    auto pair2 = rig.channel.allocate_slot_pair(1, 2).pair;
    rig.ctx.watch(2, pair2);

    wire::OpenReq req;
    req.flags = wire::kOpenRead;
    req.path = "/etc/passwd"; // outside the exchange root
    auto payload = req.encode();
    rig.send(Opcode::OpenReq, payload);
    size_t before = rig.channel.free_slot_count();
    rig.ctx.pump();

    CHECK(rig.ctx.status() == SplitContext::Status::Terminated);
    CHECK(rig.ctx.violations() == 1);
    CHECK(rig.ctx.termination_reason() == "PathEscape");
    CHECK(rig.ctx.handle_count() == 0);
    CHECK(rig.fs.in_use("/home/user/f") == 0);
    // both processes' slot pairs returned
    CHECK(rig.channel.free_slot_count() == before + 4);

    // terminate is idempotent
    auto rep = rig.ctx.terminate("again");
    CHECK(rep.handles == 0);
    CHECK(rig.ctx.termination_reason() == "PathEscape");
}

TEST_CASE("denied open is not a violation") {
    Rig rig;
    wire::OpenReq req;
    req.flags = wire::kOpenRead;
    req.path = "/home/user/missing";
    auto payload = req.encode();
    rig.send(Opcode::OpenReq, payload);
    rig.ctx.pump();
    auto r = rig.reply();
    REQUIRE(r);
    CHECK(r->status == wire::ReplyStatus::NotFound);
    CHECK(rig.ctx.denied_ops() == 1);
    CHECK(rig.ctx.violations() == 0);
    CHECK(rig.ctx.status() == SplitContext::Status::Running);
}

TEST_CASE("clipboard payloads can be policy-dropped") {
    GatewayConfig cfg;
    cfg.drop_clipboard = true;
    Rig rig(cfg);
    wire::DisplayIo d;
    d.clipboard = 1;
    d.data = {1, 2, 3};
    auto payload = d.encode();
    rig.send(Opcode::DisplayIo, payload);
    rig.ctx.pump();
    auto r = rig.reply();
    REQUIRE(r);
    CHECK(r->value == 0); // dropped
    CHECK(rig.ctx.denied_ops() == 1);
    bool logged = false;
    for (const auto& e : rig.audit.entries())
        if (e.kind == "clipboard_drop")
            logged = true;
    CHECK(logged);
}

TEST_CASE("rate limiter matches a token bucket oracle") {
    GatewayConfig cfg;
    cfg.file_meta = {100, 10}; // tiny for the test
    Rig rig(cfg);

    // oracle state
    double tokens = 10;
    uint64_t last = rig.clock.now_us();
    std::mt19937_64 rng(9);

    for (int i = 0; i < 5000; i++) {
        // advance time irregularly
        uint64_t dt = rng() % 20000;
        rig.clock.sleep_us(dt);
        uint64_t now = rig.clock.now_us();
        tokens = std::min(10.0, tokens + (double)(now - last) * 100 / 1e6);
        last = now;
        bool allow_expected = tokens >= 1.0;
        if (allow_expected)
            tokens -= 1.0;
        auto d = rig.ctx.rate_check(OpClass::FileMeta);
        if (allow_expected)
            REQUIRE(d == RateDecision::Allow);
        else
            REQUIRE(d != RateDecision::Allow);
    }
}

TEST_CASE("sustained starvation escalates to kill after the window") {
    GatewayConfig cfg;
    cfg.file_data = {0.0001, 1}; // effectively never refills
    cfg.kill_window_us = 5'000'000;
    Rig rig(cfg);

    CHECK(rig.ctx.rate_check(OpClass::FileData) == RateDecision::Allow);
    CHECK(rig.ctx.rate_stage(OpClass::FileData) == RateStage::Normal);
    CHECK(rig.ctx.rate_check(OpClass::FileData) == RateDecision::Throttle);
    CHECK(rig.ctx.rate_stage(OpClass::FileData) == RateStage::Warned);
    CHECK(rig.ctx.rate_check(OpClass::FileData) == RateDecision::Throttle);
    CHECK(rig.ctx.rate_stage(OpClass::FileData) == RateStage::Throttled);
    rig.clock.sleep_us(4'999'000);
    CHECK(rig.ctx.rate_check(OpClass::FileData) == RateDecision::Throttle);
    rig.clock.sleep_us(2'000);
    CHECK(rig.ctx.rate_check(OpClass::FileData) == RateDecision::Kill);
}

TEST_CASE("flood through the channel ends in a rate kill") {
    GatewayConfig cfg;
    cfg.display = {0.001, 2};     // bucket drains after two ops
    cfg.kill_window_us = 100'000; // short window for the test
    Rig rig(cfg);
    wire::DisplayIo d;
    d.data = {1};
    auto payload = d.encode();
    // hammer display ops; each throttle injects delay until the window trips
    for (int i = 0; i < 20 && rig.ctx.status() == SplitContext::Status::Running;
         i++) {
        rig.send(Opcode::DisplayIo, payload);
        rig.ctx.pump();
        rig.reply();
    }
    CHECK(rig.ctx.status() == SplitContext::Status::Terminated);
    CHECK(rig.ctx.termination_reason() == "rate limit exceeded");
    bool killed_logged = false;
    for (const auto& e : rig.audit.entries())
        if (e.kind == "rate_kill")
            killed_logged = true;
    CHECK(killed_logged);
}

TEST_CASE("exit notification frees resources without a kill") {
    Rig rig;
    rig.fs.put_file("/home/user/f", {});
    rig.open_file("/home/user/f", wire::kOpenRead);
    rig.send(Opcode::ExitNotify, {});
    rig.ctx.pump();
    CHECK(rig.ctx.status() == SplitContext::Status::Terminated);
    CHECK(rig.ctx.termination_reason() == "exit");
    bool exit_logged = false;
    for (const auto& e : rig.audit.entries())
        if (e.kind == "app_exit")
            exit_logged = true;
    CHECK(exit_logged);
}

TEST_CASE("write-mode open taints the file and respects in-use") {
    Rig rig;
    rig.fs.put_file("/home/user/f", {});
    // host handle first: guest write open denied
    auto hh = rig.fs.open("/home/user/f", OpenFlags{true, false, false, false},
                          Domain::Host);
    wire::OpenReq req;
    req.flags = wire::kOpenWrite;
    req.path = "/home/user/f";
    auto payload = req.encode();
    rig.send(Opcode::OpenReq, payload);
    rig.ctx.pump();
    auto r = rig.reply();
    REQUIRE(r);
    CHECK(r->status == wire::ReplyStatus::DeniedInUse);

    rig.fs.close(hh.handle);
    rig.open_file("/home/user/f", wire::kOpenWrite);
    CHECK(rig.sm.file_state("/home/user/f") == EntityState::Unverified);
    // the write handle was registered with the consistency guard
    CHECK(!rig.guard.writer_open("/home/user/f", Domain::Quarantine));
}

TEST_CASE("spawn: one running context per app") {
    VirtualClock clock;
    ChannelRegion channel{ChannelConfig{}};
    HostFs fs;
    SecurityMonitor sm(fs, {});
    ConsistencyGuard guard;
    AuditLog audit;
    GatewayManager mgr(channel, fs, sm, guard, {}, audit, clock);
    auto* a = mgr.spawn(1);
    REQUIRE(a);
    CHECK(mgr.spawn(1) == nullptr);
    CHECK(mgr.live_count() == 1);
    a->terminate("exit");
    CHECK(mgr.live_count() == 0);
    CHECK(mgr.spawn(1) != nullptr); // relaunch after exit
}
