#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "qos/optimizer.hpp"

using namespace qos;

namespace {

// Records every host-side interaction; backs reads from a flat buffer.
struct MockIo : RemoteIo {
    std::vector<uint8_t> file;
    uint32_t flush_calls = 0;
    uint32_t fetch_calls = 0;
    std::vector<std::vector<FsExtent>> flushed;

    uint32_t flush_extents(uint32_t, const std::vector<FsExtent>& extents) override {
        flush_calls++;
        flushed.push_back(extents);
        for (const auto& e : extents) {
            if (file.size() < e.offset + e.data.size())
                file.resize(e.offset + e.data.size(), 0);
            std::copy(e.data.begin(), e.data.end(), file.begin() + e.offset);
        }
        return 1;
    }

    std::optional<std::vector<uint8_t>> fetch_chunk(uint32_t, uint64_t offset,
                                                    uint32_t len) override {
        fetch_calls++;
        std::vector<uint8_t> out;
        if (offset < file.size()) {
            size_t n = std::min<size_t>(len, file.size() - offset);
            out.assign(file.begin() + offset, file.begin() + offset + n);
        }
        return out;
    }
};

OptimizerConfig small_cfg() {
    OptimizerConfig cfg;
    cfg.wc_byte_budget = 256 << 10;
    cfg.wc_age_budget_us = 50'000;
    cfg.rb_chunk_bytes = 64 << 10;
    return cfg;
}

} // namespace

TEST_CASE("write combining: 256 sequential 1KiB writes become one flush") {
    ConsistencyGuard guard;
    MockIo io;
    Optimizer opt(small_cfg(), guard, io);

    std::vector<uint8_t> kb(1024, 5);
    uint64_t off = 0;
    for (int i = 0; i < 255; i++) {
        auto r = opt.wc_append(3, "/f", off, kb, 1000 + i);
        CHECK(r.status == WcStatus::Buffered);
        off += kb.size();
    }
    CHECK(io.flush_calls == 0);
    // the 256th write crosses the byte budget
    auto r = opt.wc_append(3, "/f", off, kb, 2000);
    CHECK(r.status == WcStatus::Flushed);
    CHECK(io.flush_calls == 1);
    REQUIRE(io.flushed[0].size() == 1); // merged into a single extent
    CHECK(io.flushed[0][0].offset == 0);
    CHECK(io.flushed[0][0].data.size() == 256 * 1024);
}

TEST_CASE("write combining: seek discontinuity splits into two flushes") {
    ConsistencyGuard guard;
    MockIo io;
    Optimizer opt(small_cfg(), guard, io);

    std::vector<uint8_t> kb(1024, 1);
    opt.wc_append(3, "/f", 0, kb, 0);
    opt.wc_append(3, "/f", 1024, kb, 0);
    // jump far ahead: the buffered run flushes first
    auto r = opt.wc_append(3, "/f", 1 << 20, kb, 0);
    CHECK(r.status == WcStatus::Flushed);
    CHECK(io.flush_calls == 1);
    opt.flush_fd(3);
    CHECK(io.flush_calls == 2);
    REQUIRE(io.flushed[0].size() == 1);
    CHECK(io.flushed[0][0].data.size() == 2048);
    CHECK(io.flushed[1][0].offset == 1 << 20);
}

TEST_CASE("write combining: age budget forces a flush") {
    ConsistencyGuard guard;
    MockIo io;
    Optimizer opt(small_cfg(), guard, io);
    std::vector<uint8_t> b(16, 2);
    opt.wc_append(3, "/f", 0, b, 1000);
    CHECK(opt.age_tick(1000 + 49'999) == 0);
    CHECK(opt.age_tick(1000 + 50'000) == 1);
    CHECK(!opt.wc_pending(3));
}

TEST_CASE("write combining: overwrite of buffered range flushes first") {
    ConsistencyGuard guard;
    MockIo io;
    Optimizer opt(small_cfg(), guard, io);
    std::vector<uint8_t> b(100, 3);
    opt.wc_append(3, "/f", 0, b, 0);
    std::vector<uint8_t> c(10, 4);
    opt.wc_append(3, "/f", 50, c, 0); // overlaps the buffered extent
    CHECK(io.flush_calls == 1);
    opt.flush_fd(3);
    // final content equals in-order application
    std::vector<uint8_t> expect(100, 3);
    std::fill(expect.begin() + 50, expect.begin() + 60, 4);
    CHECK(io.file == expect);
}

TEST_CASE("read batching: 16 sequential 4KiB reads cost one fetch") {
    ConsistencyGuard guard;
    MockIo io;
    io.file.resize(256 << 10);
    for (size_t i = 0; i < io.file.size(); i++)
        io.file[i] = (uint8_t)(i * 31);
    Optimizer opt(small_cfg(), guard, io);

    uint32_t msgs_total = 0;
    for (int i = 0; i < 16; i++) {
        uint32_t msgs = 0;
        auto r = opt.rb_read(3, "/f", (uint64_t)i * 4096, 4096, msgs);
        REQUIRE(r);
        REQUIRE(r->size() == 4096);
        for (int k = 0; k < 4096; k++)
            REQUIRE((*r)[k] == (uint8_t)((i * 4096 + k) * 31));
        msgs_total += msgs;
    }
    CHECK(msgs_total == 1);
    CHECK(io.fetch_calls == 1);
}

TEST_CASE("read batching: host write invalidates the cached window") {
    ConsistencyGuard guard;
    MockIo io;
    io.file.assign(64 << 10, 9);
    Optimizer opt(small_cfg(), guard, io);

    uint32_t msgs = 0;
    auto r = opt.rb_read(3, "/f", 0, 4096, msgs);
    REQUIRE(r);
    CHECK(io.fetch_calls == 1);

    // another writer changes the file: generation moves
    io.file.assign(64 << 10, 7);
    guard.bump_write_generation("/f");

    r = opt.rb_read(3, "/f", 4096, 4096, msgs);
    REQUIRE(r);
    CHECK(io.fetch_calls == 2); // refetched, not served stale
    CHECK((*r)[0] == 7);
}

TEST_CASE("conflict signal: second writer disables and flushes") {
    ConsistencyGuard guard;
    MockIo io;
    Optimizer opt(small_cfg(), guard, io);

    std::vector<std::string> disabled;
    guard.set_on_disable([&](const std::string& p) {
        disabled.push_back(p);
        opt.flush_path(p);
    });

    guard.writer_open("/f", Domain::Quarantine);
    std::vector<uint8_t> b(64, 1);
    CHECK(opt.wc_append(3, "/f", 0, b, 0).status == WcStatus::Buffered);

    // host-side writer appears: pending bytes reach the host immediately
    guard.writer_open("/f", Domain::Host);
    REQUIRE(disabled.size() == 1);
    CHECK(disabled[0] == "/f");
    CHECK(io.flush_calls == 1);

    // while conflicted, appends bypass the buffer
    CHECK(opt.wc_append(3, "/f", 64, b, 0).status == WcStatus::Disabled);

    // conflict clears when the host writer leaves
    guard.writer_close("/f", Domain::Host);
    CHECK(opt.wc_append(3, "/f", 64, b, 0).status == WcStatus::Buffered);
    guard.writer_close("/f", Domain::Quarantine);
}

TEST_CASE("two quarantine writers on one path also disable combining") {
    ConsistencyGuard guard;
    CHECK(guard.writer_open("/f", Domain::Quarantine));
    CHECK(!guard.writer_open("/f", Domain::Quarantine));
    CHECK(guard.writer_close("/f", Domain::Quarantine));
}

TEST_CASE("randomized optimizer transparency vs direct application") {
    std::mt19937_64 rng(77);
    for (int round = 0; round < 50; round++) {
        ConsistencyGuard guard;
        MockIo io;
        Optimizer opt(small_cfg(), guard, io);
        std::vector<uint8_t> oracle;

        uint64_t cursor = 0;
        for (int step = 0; step < 200; step++) {
            uint64_t off;
            if (rng() % 4 == 0)
                off = rng() % 100'000; // random seek
            else
                off = cursor;
            uint64_t len = 1 + rng() % 2000;
            std::vector<uint8_t> data(len);
            for (auto& b : data)
                b = (uint8_t)rng();
            opt.wc_append(3, "/f", off, data, step);
            if (oracle.size() < off + len)
                oracle.resize(off + len, 0);
            std::copy(data.begin(), data.end(), oracle.begin() + off);
            cursor = off + len;
        }
        opt.flush_all();
        // zero-extend: hostfs writes only what was touched
        if (io.file.size() < oracle.size())
            io.file.resize(oracle.size(), 0);
        REQUIRE(io.file == oracle);
    }
}
