#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qos/sim.hpp"

using namespace qos;

namespace {

QosConfig plain_cfg() {
    QosConfig cfg;
    cfg.optimizer.write_combine = false;
    cfg.optimizer.read_batch = false;
    return cfg;
}

LaunchSpec demo_spec(LaunchMode mode, std::vector<ImageInfo> libs = {}) {
    LaunchSpec spec;
    spec.app_name = "app";
    spec.mode = mode;
    spec.manifest.binary = {"app", 50'000};
    spec.manifest.libraries = std::move(libs);
    return spec;
}

struct Launched {
    Simulator sim;
    ProcessCtx* ctx = nullptr;
    GuestRuntime::LaunchResult launch;

    explicit Launched(LaunchMode mode, std::vector<ImageInfo> libs = {},
                      QosConfig cfg = plain_cfg())
        : sim(cfg) {
        auto spec = demo_spec(mode, std::move(libs));
        sim.register_manifest(spec.manifest);
        launch = sim.runtime().launch_application(spec);
        REQUIRE(launch.status == RouteStatus::Ok);
        ctx = launch.ctx;
    }

    GuestRuntime& rt() { return sim.runtime(); }
    MetricsReport& m() { return sim.runtime().metrics(); }
    SplitContext& gw() { return *sim.gateway().find(1); }
};

} // namespace

TEST_CASE("classify_open: full decision table") {
    for (LaunchMode mode : {LaunchMode::Local, LaunchMode::Remote}) {
        CHECK(classify_open(FileKind::Device, mode) == Route::Local);
        CHECK(classify_open(FileKind::Socket, mode) == Route::Local);
        CHECK(classify_open(FileKind::Pipe, mode) == Route::Local);
        CHECK(classify_open(FileKind::Regular, mode) == Route::Remote);
    }
    CHECK(classify_open(FileKind::Library, LaunchMode::Local) == Route::Local);
    CHECK(classify_open(FileKind::Library, LaunchMode::Remote) == Route::Remote);
}

TEST_CASE("guess_file_kind from path shape") {
    CHECK(guess_file_kind("/dev/tty") == FileKind::Device);
    CHECK(guess_file_kind("socket:web") == FileKind::Socket);
    CHECK(guess_file_kind("pipe:7") == FileKind::Pipe);
    CHECK(guess_file_kind("/lib/libc") == FileKind::Library);
    CHECK(guess_file_kind("/usr/lib/x.so.6") == FileKind::Library);
    CHECK(guess_file_kind("/home/user/doc.pdf") == FileKind::Regular);
}

TEST_CASE("startup messages: local is one, remote adds binary and libraries") {
    Launched local(LaunchMode::Local);
    CHECK(local.launch.launch_messages == 1); // launch request only
    auto* fd0 = &local.ctx->fds->fds;
    REQUIRE(fd0->size() == 3); // stdio wired
    CHECK(fd0->at(1).remote);

    Launched remote(LaunchMode::Remote,
                    {{"liba", 100'000}, {"libb", 100'000}, {"libc", 100'000}});
    // launch + binary + 3 libraries, each image in one big-slot transfer
    CHECK(remote.launch.launch_messages == 5);
}

TEST_CASE("open routing: local kinds carry no messages, regular files do") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", std::vector<uint8_t>{1, 2, 3});
    uint64_t before = t.m().total_messages;

    CHECK(t.rt().route_open(*t.ctx, 5, "/dev/tty", FileKind::Device, 1, false)
              .status == RouteStatus::Ok);
    CHECK(t.rt().route_open(*t.ctx, 6, "/lib/liba", FileKind::Library, 1, false)
              .status == RouteStatus::Ok);
    CHECK(t.m().total_messages == before); // nothing crossed the channel

    auto r = t.rt().route_open(*t.ctx, 7, "/home/user/f", FileKind::Regular, 1,
                               false);
    CHECK(r.status == RouteStatus::Ok);
    CHECK(t.m().total_messages == before + 1);
    CHECK(t.ctx->fds->fds.at(7).remote);

    // a miss comes back as a denial, not a kill
    r = t.rt().route_open(*t.ctx, 8, "/home/user/none", FileKind::Regular, 1,
                          false);
    CHECK(r.status == RouteStatus::Denied);
    CHECK(r.reply == wire::ReplyStatus::NotFound);
    CHECK(t.ctx->alive);
}

TEST_CASE("large remote transfers ride one big-slot message") {
    Launched t(LaunchMode::Local);
    auto blob = synthetic_bytes("blob", 1 << 20);
    t.sim.fs().put_file("/home/user/big", blob);
    t.rt().route_open(*t.ctx, 3, "/home/user/big", FileKind::Regular, 3, false);

    uint64_t before = t.m().file_io_messages;
    auto r = t.rt().route_read(*t.ctx, 3, 1 << 20);
    REQUIRE(r.status == RouteStatus::Ok);
    CHECK(r.data == blob);
    CHECK(t.m().file_io_messages == before + 1);

    // writing back a megabyte costs one message too
    auto blob2 = synthetic_bytes("blob2", 1 << 20);
    t.rt().route_seek(*t.ctx, 3, 0);
    before = t.m().file_io_messages;
    auto w = t.rt().route_write(*t.ctx, 3, blob2);
    REQUIRE(w.status == RouteStatus::Ok);
    CHECK(t.m().file_io_messages == before + 1);
    std::vector<uint8_t> back;
    REQUIRE(t.sim.fs().get_file("/home/user/big", back) == FsStatus::Ok);
    CHECK(back == blob2);
}

TEST_CASE("with big slots exhausted transfers fall back to inline chunks") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", synthetic_bytes("f", 10'000));
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 3, false);

    // grab every big slot so the runtime cannot use them
    std::vector<uint32_t> held;
    while (auto s = t.sim.channel().reserve_big_slot(1, 1))
        held.push_back(*s);
    REQUIRE(!held.empty());

    const uint32_t read_cap = 4096 - wire::kReplyOverhead;  // 4076
    uint64_t before = t.m().file_io_messages;
    auto r = t.rt().route_read(*t.ctx, 3, 10'000);
    REQUIRE(r.status == RouteStatus::Ok);
    CHECK(r.data == synthetic_bytes("f", 10'000));
    CHECK(t.m().file_io_messages == before + (10'000 + read_cap - 1) / read_cap);

    const uint32_t write_cap = 4096 - 32;
    t.rt().route_seek(*t.ctx, 3, 0);
    before = t.m().file_io_messages;
    auto data = synthetic_bytes("g", 10'000);
    REQUIRE(t.rt().route_write(*t.ctx, 3, data).status == RouteStatus::Ok);
    CHECK(t.m().file_io_messages ==
          before + (10'000 + write_cap - 1) / write_cap);
    std::vector<uint8_t> back;
    t.sim.fs().get_file("/home/user/f", back);
    CHECK(back == data);

    for (uint32_t s : held)
        t.sim.channel().release_big_slot(s, 1);
}

TEST_CASE("faults fetch each page once and serve exact file bytes") {
    Launched t(LaunchMode::Local);
    auto blob = synthetic_bytes("mapped", 3 * 4096 + 100);
    t.sim.fs().put_file("/home/user/m", blob);
    t.rt().route_open(*t.ctx, 3, "/home/user/m", FileKind::Regular, 1, false);
    REQUIRE(t.rt().map_region(*t.ctx, 1, 3, blob.size(), 0) == RouteStatus::Ok);

    uint64_t before = t.m().mmap_messages;
    // three distinct pages, touched at odd offsets
    for (uint64_t off : {0ull, 4097ull, 8192ull + 5}) {
        auto f = t.rt().handle_fault(*t.ctx, 1, off);
        REQUIRE(f.status == RouteStatus::Ok);
        CHECK(f.fetched);
        uint64_t page = off & ~4095ull;
        std::vector<uint8_t> expect(blob.begin() + page,
                                    blob.begin() +
                                        std::min<uint64_t>(page + 4096,
                                                           blob.size()));
        expect.resize(4096, 0); // zero-fill past EOF
        CHECK(f.page == expect);
    }
    CHECK(t.m().mmap_messages == before + 3);

    // repeat faults are free
    auto f = t.rt().handle_fault(*t.ctx, 1, 4100);
    CHECK(f.status == RouteStatus::Ok);
    CHECK(!f.fetched);
    CHECK(t.m().mmap_messages == before + 3);

    CHECK(t.rt().handle_fault(*t.ctx, 1, blob.size()).status ==
          RouteStatus::BadDescriptor);
}

TEST_CASE("library faults: silent when local, image fetches when remote") {
    // local launch: library pages come from the guest image, zero traffic
    {
        Launched t(LaunchMode::Local, {{"libx", 20'000}});
        t.rt().route_open(*t.ctx, 7, "/lib/libx", FileKind::Library, 1, false);
        REQUIRE(t.rt().map_region(*t.ctx, 1, 7, 20'000, 0) == RouteStatus::Ok);
        uint64_t before = t.m().total_messages;
        auto f = t.rt().handle_fault(*t.ctx, 1, 4096);
        REQUIRE(f.status == RouteStatus::Ok);
        auto img = synthetic_bytes("libx", 20'000);
        CHECK(std::equal(f.page.begin(), f.page.end(), img.begin() + 4096));
        CHECK(t.m().total_messages == before);
    }
    // remote launch: the same fault is an image-chunk fetch on the channel
    {
        Launched t(LaunchMode::Remote, {{"libx", 20'000}});
        t.rt().route_open(*t.ctx, 7, "/lib/libx", FileKind::Library, 1, false);
        REQUIRE(t.rt().map_region(*t.ctx, 1, 7, 20'000, 0) == RouteStatus::Ok);
        uint64_t before = t.m().mmap_messages;
        auto f = t.rt().handle_fault(*t.ctx, 1, 4096);
        REQUIRE(f.status == RouteStatus::Ok);
        CHECK(f.fetched);
        auto img = synthetic_bytes("libx", 20'000);
        CHECK(std::equal(f.page.begin(), f.page.end(), img.begin() + 4096));
        CHECK(t.m().mmap_messages > before);
        // the populated page is cached like any other
        uint64_t after = t.m().mmap_messages;
        CHECK(!t.rt().handle_fault(*t.ctx, 1, 4097).fetched);
        CHECK(t.m().mmap_messages == after);
    }
}

TEST_CASE("select on local descriptors never crosses the channel") {
    Launched t(LaunchMode::Local);
    t.rt().route_open(*t.ctx, 5, "/dev/input", FileKind::Device, 1, false);
    uint64_t start = t.sim.clock().now_us();
    uint64_t before = t.m().total_messages;

    auto r = t.rt().route_select(*t.ctx, {5}, 50'000, {{5, start + 7'000}});
    CHECK(r.status == RouteStatus::Ok);
    REQUIRE(r.ready == std::vector<uint32_t>{5});
    CHECK(t.sim.clock().now_us() == start + 7'000);
    CHECK(t.m().total_messages == before);

    // timeout path burns exactly the timeout
    r = t.rt().route_select(*t.ctx, {5}, 30'000, {});
    CHECK(r.ready.empty());
    CHECK(t.sim.clock().now_us() == start + 7'000 + 30'000);
    CHECK(t.m().total_messages == before);
}

TEST_CASE("select on host descriptors is one event-wait message") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", {});
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 1, false);
    uint64_t before = t.m().io_event_messages;
    uint64_t start = t.sim.clock().now_us();

    auto r = t.rt().route_select(*t.ctx, {3}, 50'000, {{3, start + 9'000}});
    CHECK(r.status == RouteStatus::Ok);
    CHECK(r.ready == std::vector<uint32_t>{3});
    CHECK(t.m().io_event_messages == before + 1);
    CHECK(t.sim.clock().now_us() >= start + 9'000);
}

TEST_CASE("adaptive select: slices track which side keeps firing") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", {});
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 1, false);
    t.rt().route_open(*t.ctx, 5, "/dev/input", FileKind::Device, 1, false);

    SelectPolicy& pol = t.ctx->select_policy;
    CHECK(pol.guest_slice_us == 5'000);
    CHECK(pol.host_slice_us == 5'000);

    // guest side keeps winning: its slice grows to the cap, the host slice
    // shrinks to the floor
    for (int i = 0; i < 12; i++) {
        uint64_t now = t.sim.clock().now_us();
        auto r = t.rt().route_select(*t.ctx, {3, 5}, 100'000,
                                     {{5, now + 1'000}});
        REQUIRE(r.ready == std::vector<uint32_t>{5});
    }
    CHECK(pol.guest_slice_us == 50'000);
    CHECK(pol.host_slice_us == 1'000);
    CHECK(pol.ewma_guest_hits > pol.ewma_host_hits);

    // now only the host side fires; the bias flips
    for (int i = 0; i < 24; i++) {
        uint64_t now = t.sim.clock().now_us();
        auto r = t.rt().route_select(*t.ctx, {3, 5}, 400'000, {{3, now}});
        REQUIRE(r.ready == std::vector<uint32_t>{3});
    }
    CHECK(pol.guest_slice_us == 1'000);
    CHECK(pol.host_slice_us == 50'000);
}

TEST_CASE("poll: fixed slices, no adaptation") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", {});
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 1, false);
    t.rt().route_open(*t.ctx, 5, "/dev/input", FileKind::Device, 1, false);

    uint64_t before = t.m().io_event_messages;
    auto r = t.rt().route_poll(*t.ctx, {3, 5}, 100'000, {});
    CHECK(r.ready.empty());
    // 10ms guest slice alternating with a 10ms host wait: five host waits
    // fit in a 100ms timeout
    CHECK(t.m().io_event_messages == before + 5);
    // and the policy state is untouched
    CHECK(t.ctx->select_policy.guest_slice_us == 5'000);
    CHECK(t.ctx->select_policy.host_slice_us == 5'000);

    // repeated polls never drift the slice like select does
    for (int i = 0; i < 5; i++) {
        uint64_t now = t.sim.clock().now_us();
        t.rt().route_poll(*t.ctx, {3, 5}, 50'000, {{5, now + 1'000}});
    }
    CHECK(t.ctx->select_policy.guest_slice_us == 5'000);
    CHECK(t.ctx->select_policy.host_slice_us == 5'000);
}

TEST_CASE("clone with shared files: one table, handles live until last close") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", std::vector<uint8_t>{1, 2, 3});
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 1, false);

    auto c = t.rt().on_clone(*t.ctx, 2, true);
    REQUIRE(c.status == RouteStatus::Ok);
    CHECK(c.child->fds == t.ctx->fds); // same table
    CHECK(t.ctx->fds->fds.at(3).refcount == 2);

    // parent close keeps the shared descriptor alive for the child
    t.rt().route_close(*t.ctx, 3);
    REQUIRE(t.ctx->fds->fds.count(3) == 1);
    auto r = t.rt().route_read(*c.child, 3, 3);
    CHECK(r.status == RouteStatus::Ok);
    CHECK(r.data == std::vector<uint8_t>{1, 2, 3});

    // last close releases the host handle (stdio handles remain)
    t.rt().route_close(*c.child, 3);
    CHECK(t.ctx->fds->fds.count(3) == 0);
    CHECK(t.gw().handle_count() == 3);
}

TEST_CASE("clone without shared files: deep copy with remapped handles") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", std::vector<uint8_t>(8, 1));
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 3, false);
    size_t handles_before = t.gw().handle_count();

    auto c = t.rt().on_clone(*t.ctx, 2, false);
    REQUIRE(c.status == RouteStatus::Ok);
    CHECK(c.child->fds != t.ctx->fds);
    CHECK(c.child->fds->fds.at(3).host_handle !=
          t.ctx->fds->fds.at(3).host_handle);
    // every remote descriptor (stdio included) gets its own host handle
    CHECK(t.gw().handle_count() == handles_before + 4);

    // the copies address the same file but keep independent cursors
    t.rt().route_seek(*t.ctx, 3, 4);
    std::vector<uint8_t> tail = {7, 7, 7, 7};
    t.rt().route_write(*t.ctx, 3, tail);
    auto r = t.rt().route_read(*c.child, 3, 8);
    CHECK(r.data == std::vector<uint8_t>{1, 1, 1, 1, 7, 7, 7, 7});

    // closing the parent's copy leaves the child's usable
    t.rt().route_close(*t.ctx, 3);
    r = t.rt().route_read(*c.child, 3, 0);
    CHECK(r.status == RouteStatus::Ok);
}

TEST_CASE("exec closes close-on-exec descriptors only") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/a", {});
    t.sim.fs().put_file("/home/user/b", {});
    t.rt().route_open(*t.ctx, 3, "/home/user/a", FileKind::Regular, 1, true);
    t.rt().route_open(*t.ctx, 4, "/home/user/b", FileKind::Regular, 1, false);
    t.rt().on_exec(*t.ctx);
    CHECK(t.ctx->fds->fds.count(3) == 0);
    CHECK(t.ctx->fds->fds.count(4) == 1);
}

TEST_CASE("exit: idempotent teardown leaves empty ledgers") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", {});
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 3, false);
    size_t free_before = t.sim.channel().free_slot_count();

    t.rt().on_exit(*t.ctx);
    CHECK(!t.ctx->alive);
    CHECK(t.gw().status() == SplitContext::Status::Terminated);
    CHECK(t.gw().termination_reason() == "exit");
    CHECK(t.gw().handle_count() == 0);
    CHECK(t.sim.fs().in_use("/home/user/f") == 0);
    CHECK(t.sim.channel().free_slot_count() == free_before + 2);
    CHECK(t.sim.channel().reserved_big_slot_count() == 0);

    uint64_t msgs = t.m().total_messages;
    t.rt().on_exit(*t.ctx); // second exit is a no-op
    CHECK(t.m().total_messages == msgs);
}

TEST_CASE("signals: delivery count, fatal defaults, unknown app") {
    Launched t(LaunchMode::Local);
    auto c = t.rt().on_clone(*t.ctx, 2, false);
    REQUIRE(c.status == RouteStatus::Ok);

    // non-fatal signal reaches both processes, nobody dies
    auto n = t.sim.deliver_signal(1, 10);
    REQUIRE(n);
    CHECK(*n == 2);
    CHECK(t.ctx->alive);
    CHECK(c.child->alive);

    // SIGKILL tears the whole app down
    n = t.sim.deliver_signal(1, 9);
    REQUIRE(n);
    CHECK(!t.ctx->alive);
    CHECK(!c.child->alive);

    CHECK(!t.sim.deliver_signal(99, 9)); // no such app
}

TEST_CASE("gateway kill propagates into the runtime and empties ledgers") {
    Launched t(LaunchMode::Local);
    t.sim.fs().put_file("/home/user/f", {});
    t.rt().route_open(*t.ctx, 3, "/home/user/f", FileKind::Regular, 3, false);
    size_t free_before = t.sim.channel().free_slot_count();

    // a confinement escape kills the app mid-call
    auto r = t.rt().route_open(*t.ctx, 4, "/etc/shadow", FileKind::Regular, 1,
                               false);
    CHECK(r.status == RouteStatus::Killed);
    CHECK(!t.ctx->alive);
    CHECK(t.gw().status() == SplitContext::Status::Terminated);
    CHECK(t.gw().termination_reason() == "PathEscape");
    CHECK(t.gw().handle_count() == 0);
    CHECK(t.sim.fs().in_use("/home/user/f") == 0);
    CHECK(t.sim.channel().free_slot_count() == free_before + 2);
    CHECK(t.sim.channel().reserved_big_slot_count() == 0);
    CHECK(t.sim.last_kill_reason() == "PathEscape");

    // every later call on the dead process fails fast, no new traffic
    uint64_t msgs = t.m().total_messages;
    CHECK(t.rt().route_read(*t.ctx, 3, 4).status != RouteStatus::Ok);
    CHECK(t.m().total_messages == msgs);
}
