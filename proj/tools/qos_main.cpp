#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "qos/bench.hpp"
#include "qos/sim.hpp"
#include "qos/workload.hpp"

namespace {

qos::QosConfig resolve_config(const std::string& config_path) {
    if (!config_path.empty())
        return qos::load_config(config_path);
    if (const char* env = std::getenv("QOS_CONFIG"))
        return qos::load_config(env);
    return {};
}

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f)
        throw std::runtime_error("cannot write: " + path);
    f << text;
}

int cmd_run(const std::string& config_path, const std::string& trace_path,
            const std::string& manifest_path, const std::string& fixture_path,
            const std::string& mode, bool optimizer_on,
            const std::string& report_path, const std::string& app_name,
            const std::string& journal_path, const std::string& fs_path) {
    qos::QosConfig cfg = resolve_config(config_path);
    qos::Simulator sim(cfg);

    qos::Trace trace = qos::load_trace(trace_path);
    qos::LaunchSpec spec;
    spec.app_name = app_name;
    spec.mode = mode == "remote" ? qos::LaunchMode::Remote
                                 : qos::LaunchMode::Local;
    if (!manifest_path.empty()) {
        spec.manifest = qos::load_manifest(manifest_path);
        if (spec.app_name.empty())
            spec.app_name = spec.manifest.binary.name;
    }
    if (!fixture_path.empty()) {
        // import replaces the whole tree; re-create the exchange root the
        // simulator guarantees
        sim.fs().snapshot_import(slurp(fixture_path));
        std::string prefix;
        std::istringstream root(cfg.gateway.whitelist_root);
        std::string part;
        while (std::getline(root, part, '/')) {
            if (part.empty())
                continue;
            prefix += "/" + part;
            sim.fs().mkdir(prefix);
        }
    }

    auto report = sim.run_trace(trace, spec, optimizer_on);
    report.trace = trace_path;
    if (!journal_path.empty())
        spit(journal_path, sim.security().journal_export());
    if (!fs_path.empty())
        spit(fs_path, sim.fs().snapshot_export());
    if (!report_path.empty())
        spit(report_path, report.to_json() + "\n");
    else
        std::cout << report.to_json() << "\n";
    if (report.policy_kill) {
        std::cerr << "application killed: " << sim.last_kill_reason() << "\n";
        return 2;
    }
    return 0;
}

int cmd_bench(uint32_t procs, double secs, uint32_t size, bool threaded,
              bool scaling) {
    uint64_t dur = (uint64_t)(secs * 1e6);
    if (scaling) {
        auto rows = qos::bench_scaling({1, 2, 4, 8, 16, 32}, dur);
        std::cout << qos::bench_table(rows);
        return 0;
    }
    qos::BenchConfig cfg;
    cfg.procs = procs;
    cfg.duration_us = dur;
    cfg.msg_size = size;
    cfg.threaded = threaded;
    auto row = qos::bench_channel(cfg);
    std::cout << qos::bench_table({row});
    return 0;
}

int cmd_gen(const std::string& profile, uint64_t seed,
            const std::string& out_dir) {
    auto w = qos::generate_workload(profile, seed);
    std::filesystem::create_directories(out_dir);
    qos::save_trace(w.trace, out_dir + "/trace.jsonl");
    qos::save_manifest(w.manifest, out_dir + "/manifest.json");
    qos::HostFs fs;
    qos::apply_fixture(fs, w);
    spit(out_dir + "/fixture.json", fs.snapshot_export());
    std::cout << "wrote " << w.trace.records.size() << " records to "
              << out_dir << "\n";
    return 0;
}

int cmd_verdicts(const std::string& verdicts_path,
                 const std::string& journal_path,
                 const std::string& fs_path) {
    qos::HostFs fs;
    if (!fs_path.empty() && std::filesystem::exists(fs_path))
        fs.snapshot_import(slurp(fs_path));
    qos::SecurityMonitor sm(fs, {});
    if (!journal_path.empty() && std::filesystem::exists(journal_path))
        sm.journal_replay(slurp(journal_path));

    std::istringstream in(slurp(verdicts_path));
    std::string line;
    int applied = 0, rejected = 0;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        auto j = nlohmann::json::parse(line);
        std::string path = j.value("path", "");
        std::string verdict = j.value("verdict", "safe");
        auto state = verdict == "unsafe" ? qos::EntityState::Unsafe
                                         : qos::EntityState::Safe;
        auto rep = sm.reclassify_file(path, state);
        if (rep.status == qos::ReclassStatus::Ok) {
            applied++;
            std::cout << path << ": " << verdict
                      << (rep.deleted ? " (deleted)" : "") << "\n";
        } else {
            rejected++;
            std::cout << path << ": rejected ("
                      << (rep.status == qos::ReclassStatus::NotFound
                              ? "not found"
                              : "invalid transition")
                      << ")\n";
        }
    }
    if (!journal_path.empty())
        spit(journal_path, sm.journal_export());
    if (!fs_path.empty())
        spit(fs_path, fs.snapshot_export());
    std::cout << applied << " applied, " << rejected << " rejected\n";
    return 0;
}

int cmd_audit(const std::string& path, const std::string& journal_path,
              const std::string& fs_path) {
    qos::HostFs fs;
    if (!fs_path.empty() && std::filesystem::exists(fs_path))
        fs.snapshot_import(slurp(fs_path));
    qos::SecurityMonitor sm(fs, {});
    if (!journal_path.empty() && std::filesystem::exists(journal_path))
        sm.journal_replay(slurp(journal_path));
    auto g = sm.genesis(path);
    if (!g.found) {
        std::cout << path << ": no record\n";
        return 1;
    }
    std::cout << path << " (" << qos::entity_state_name(sm.file_state(path))
              << ")\n";
    for (const auto& e : g.events)
        std::cout << "  t=" << e.t_us << "us app=" << e.app_id << " "
                  << e.action << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"split-execution quarantine simulator"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "INI config file");

    // run
    auto* run = app.add_subcommand("run", "replay a trace");
    std::string trace_path, manifest_path, fixture_path, report_path,
        app_name;
    std::string mode = "remote", optimizer = "on";
    run->add_option("--trace", trace_path, "trace JSONL")->required();
    run->add_option("--manifest", manifest_path, "image manifest JSON");
    run->add_option("--fixture", fixture_path, "host filesystem snapshot");
    run->add_option("--mode", mode, "local|remote")
        ->check(CLI::IsMember({"local", "remote"}));
    run->add_option("--optimizer", optimizer, "on|off")
        ->check(CLI::IsMember({"on", "off"}));
    run->add_option("--report", report_path, "metrics output path");
    run->add_option("--app", app_name, "application name");
    std::string run_journal, run_fs;
    run->add_option("--journal", run_journal,
                    "write the monitor state journal here after the run");
    run->add_option("--fs", run_fs,
                    "write the host filesystem snapshot here after the run");

    // bench
    auto* bench = app.add_subcommand("bench", "channel echo benchmark");
    uint32_t procs = 1, size = 32;
    double secs = 1.0;
    bool threaded = false, scaling = false;
    bench->add_option("--procs", procs, "producer count");
    bench->add_option("--secs", secs, "duration seconds");
    bench->add_option("--size", size, "message size bytes");
    bench->add_flag("--threaded", threaded, "wall clock + threads");
    bench->add_flag("--scaling", scaling, "sweep 1..32 producers");

    // gen
    auto* gen = app.add_subcommand("gen", "generate a workload");
    std::string profile, out_dir = ".";
    uint64_t seed = 1;
    gen->add_option("--profile", profile, "workload profile")->required();
    gen->add_option("--seed", seed, "rng seed");
    gen->add_option("--out", out_dir, "output directory");

    // verdicts apply
    auto* verdicts = app.add_subcommand("verdicts", "certifier verdicts");
    auto* verdicts_apply =
        verdicts->add_subcommand("apply", "apply a verdict stream");
    std::string verdicts_path, journal_path, state_fs_path;
    verdicts_apply->add_option("file", verdicts_path, "verdicts JSONL")
        ->required();
    verdicts_apply->add_option("--journal", journal_path, "state journal");
    verdicts_apply->add_option("--fs", state_fs_path, "filesystem snapshot");

    // audit genesis
    auto* audit = app.add_subcommand("audit", "provenance queries");
    auto* audit_genesis =
        audit->add_subcommand("genesis", "show a file's origin chain");
    std::string audit_path;
    audit_genesis->add_option("path", audit_path, "file path")->required();
    std::string audit_journal, audit_fs;
    audit_genesis->add_option("--journal", audit_journal, "state journal");
    audit_genesis->add_option("--fs", audit_fs, "filesystem snapshot");

    // reset-guest-image
    auto* reset = app.add_subcommand("reset-guest-image",
                                     "discard the quarantine image store");
    std::string state_dir = ".qos-state";
    reset->add_option("--state", state_dir, "state directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed())
            return cmd_run(config_path, trace_path, manifest_path,
                           fixture_path, mode, optimizer == "on", report_path,
                           app_name, run_journal, run_fs);
        if (bench->parsed())
            return cmd_bench(procs, secs, size, threaded, scaling);
        if (gen->parsed())
            return cmd_gen(profile, seed, out_dir);
        if (verdicts->parsed())
            return cmd_verdicts(verdicts_path, journal_path, state_fs_path);
        if (audit->parsed())
            return cmd_audit(audit_path, audit_journal, audit_fs);
        if (reset->parsed()) {
            std::filesystem::remove(state_dir + "/guest_images.json");
            std::cout << "guest image store cleared\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
