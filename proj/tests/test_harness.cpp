#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qos/sim.hpp"
#include "qos/workload.hpp"

using namespace qos;

namespace {

MetricsReport run_profile(const std::string& profile, uint64_t seed,
                          LaunchMode mode, bool optimizer_on) {
    Workload w = generate_workload(profile, seed);
    w.spec.mode = mode;
    QosConfig cfg;
    Simulator sim(cfg);
    apply_fixture(sim.fs(), w);
    return sim.run_trace(w.trace, w.spec, optimizer_on);
}

} // namespace

TEST_CASE("synthetic bytes are a pure function of tag and size") {
    auto a = synthetic_bytes("x", 1000);
    auto b = synthetic_bytes("x", 1000);
    CHECK(a == b);
    CHECK(a.size() == 1000);
    CHECK(synthetic_bytes("y", 1000) != a);
    // a prefix read sees the same bytes as a longer one
    auto c = synthetic_bytes("x", 500);
    CHECK(std::equal(c.begin(), c.end(), a.begin()));
}

TEST_CASE("every profile generates and replays clean in both modes") {
    auto profiles = workload_profiles();
    CHECK(profiles.size() == 9);
    for (const auto& p : profiles) {
        CAPTURE(p);
        Workload w = generate_workload(p, 7);
        CHECK(!w.trace.records.empty());
        CHECK(!w.spec.app_name.empty());
        for (LaunchMode mode : {LaunchMode::Local, LaunchMode::Remote}) {
            auto rep = run_profile(p, 7, mode, true);
            CAPTURE(rep.mode);
            CHECK(rep.violations == 0);
            CHECK(!rep.policy_kill);
            CHECK(rep.total_messages > 0);
        }
    }
    CHECK_THROWS(generate_workload("no-such-profile", 1));
}

TEST_CASE("replays are deterministic for a fixed profile and seed") {
    for (const auto& p : {"email-search", "browser-multisite", "editor-newdoc"}) {
        auto a = run_profile(p, 42, LaunchMode::Remote, true);
        auto b = run_profile(p, 42, LaunchMode::Remote, true);
        CHECK(a.to_json() == b.to_json());
        // a different seed shifts the trace
        Workload w1 = generate_workload(p, 42);
        Workload w2 = generate_workload(p, 43);
        CHECK(w1.trace.to_jsonl() != w2.trace.to_jsonl());
    }
}

TEST_CASE("startup estimate matches the measured launch phase") {
    for (const auto& p : workload_profiles()) {
        Workload w = generate_workload(p, 3);
        for (LaunchMode mode : {LaunchMode::Local, LaunchMode::Remote}) {
            CAPTURE(p);
            w.spec.mode = mode;
            QosConfig cfg;
            Simulator sim(cfg);
            apply_fixture(sim.fs(), w);
            auto rep = sim.run_trace(w.trace, w.spec, true);
            CHECK(rep.startup_messages == estimate_startup(w.manifest, mode));
        }
    }
}

TEST_CASE("message conservation: guest sends equal gateway receipts") {
    for (const auto& p : {"email-send", "wget-bulk", "shell-interactive"}) {
        Workload w = generate_workload(p, 11);
        w.spec.mode = LaunchMode::Remote;
        QosConfig cfg;
        Simulator sim(cfg);
        apply_fixture(sim.fs(), w);
        auto rep = sim.run_trace(w.trace, w.spec, true);
        REQUIRE(rep.violations == 0);
        auto& acc = sim.runtime().accounting();
        CHECK(acc.total_guest_sent() > 0);
        CHECK(acc.total_guest_sent() == acc.total_gateway_received());
        CHECK(acc.replies_sent == acc.replies_received);
        // per-opcode conservation, not just totals
        CHECK(acc.guest_sent == acc.gateway_received);
    }
}

TEST_CASE("an empty trace still launches and exits cleanly") {
    QosConfig cfg;
    Simulator sim(cfg);
    LaunchSpec spec;
    spec.app_name = "idle";
    spec.manifest.binary = {"idle", 1000};
    auto rep = sim.run_trace(Trace{}, spec, true);
    CHECK(rep.violations == 0);
    CHECK(!rep.policy_kill);
    CHECK(rep.total_messages >= 2); // launch + exit
    CHECK(sim.gateway().find(1)->termination_reason() == "exit");
}

TEST_CASE("trace and manifest serialization round-trips") {
    Workload w = generate_workload("browser-download", 9);
    auto text = w.trace.to_jsonl();
    Trace back = Trace::from_jsonl(text);
    CHECK(back.to_jsonl() == text);
    REQUIRE(back.records.size() == w.trace.records.size());
    CHECK(back.records[0].op == w.trace.records[0].op);

    auto mtext = w.manifest.to_json();
    ImageManifest mback = ImageManifest::from_json(mtext);
    CHECK(mback.to_json() == mtext);
    CHECK(mback.binary.name == w.manifest.binary.name);

    CHECK_THROWS(Trace::from_jsonl("{not json"));
}

TEST_CASE("metrics report serialization and export formats") {
    MetricsReport r;
    r.trace = "t";
    r.mode = "remote";
    r.optimizer = true;
    r.total_messages = 10;
    r.mmap_messages = 4;
    r.file_io_messages = 3;
    r.startup_messages = 2;
    r.record_latency_us(24);
    r.record_latency_us(100);

    auto back = MetricsReport::from_json(r.to_json());
    CHECK(back.to_json() == r.to_json());
    CHECK(back.total_messages == 10);
    CHECK(back.latency_buckets == r.latency_buckets);

    std::vector<MetricsReport> reports = {r, back};
    auto js = export_reports(reports, "json");
    CHECK(js.find("\"total_messages\"") != std::string::npos);
    auto csv = export_reports(reports, "csv");
    CHECK(csv.find("total_messages") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3); // header + 2 rows
    auto table = export_reports(reports, "table");
    CHECK(table.find("remote") != std::string::npos);
    CHECK_THROWS(export_reports(reports, "xml"));
}

TEST_CASE("config parsing: sections, unknown keys, and bad values") {
    auto cfg = parse_config("# comment\n"
                            "[channel]\n"
                            "normal_slot_count = 32\n"
                            "future_knob = 9\n" // ignored, forward compatible
                            "\n"
                            "[gateway]\n"
                            "whitelist_root = /home/user/work\n"
                            "file_data_rate = 123.5\n"
                            "drop_clipboard = on\n"
                            "[select]\n"
                            "poll_slice_us = 20000\n");
    CHECK(cfg.channel.normal_slot_count == 32);
    CHECK(cfg.channel.normal_slot_capacity == 64); // untouched default
    CHECK(cfg.gateway.whitelist_root == "/home/user/work");
    CHECK(cfg.gateway.file_data.rate_per_s == 123.5);
    CHECK(cfg.gateway.drop_clipboard);
    CHECK(cfg.select.poll_slice_us == 20000);

    CHECK_THROWS(parse_config("[channel]\nnormal_slot_count = many\n"));
    CHECK_THROWS(parse_config("[gateway]\ndrop_clipboard = maybe\n"));
    CHECK_THROWS(parse_config("[channel]\nno equals sign\n"));
}

TEST_CASE("channel config validation rejects bad shapes") {
    ChannelConfig c;
    CHECK(c.validate().empty());
    c.normal_slot_capacity = 48; // not a power of two
    CHECK(!c.validate().empty());
    c = {};
    c.big_slot_size = 100; // smaller than a normal payload
    CHECK(!c.validate().empty());
}

TEST_CASE("optimizer off vs on: same final filesystem for a bulk writer") {
    std::vector<std::string> snaps;
    for (bool opt : {false, true}) {
        Workload w = generate_workload("editor-newdoc", 5);
        w.spec.mode = LaunchMode::Remote;
        QosConfig cfg;
        Simulator sim(cfg);
        apply_fixture(sim.fs(), w);
        auto rep = sim.run_trace(w.trace, w.spec, opt);
        REQUIRE(rep.violations == 0);
        snaps.push_back(sim.fs().snapshot_export());
    }
    CHECK(snaps[0] == snaps[1]);
}
