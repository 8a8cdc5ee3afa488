#include "qos/workload.hpp"

#include <random>
#include <stdexcept>

namespace qos {

namespace {

using Rng = std::mt19937_64;

nlohmann::json j(
    std::initializer_list<std::pair<std::string, nlohmann::json>> init) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [k, v] : init)
        o[k] = v;
    return o;
}

void rec(Trace& t, uint64_t t_us, uint32_t pid, const std::string& op,
         nlohmann::json args = nlohmann::json::object()) {
    t.records.push_back({t_us, pid, op, std::move(args)});
}

ImageManifest make_manifest(const std::string& app, uint64_t binary_size,
                            uint32_t lib_count, Rng& rng) {
    ImageManifest m;
    m.binary = {app, binary_size};
    std::uniform_int_distribution<uint64_t> size(100 << 10, 2 << 20);
    for (uint32_t i = 0; i < lib_count; i++)
        m.libraries.push_back(
            {"lib" + app + std::to_string(i) + ".so", size(rng)});
    return m;
}

// mmap + fault a file already opened at fd
void mmap_faults(Trace& t, uint64_t& now, uint32_t pid, uint32_t region,
                 uint32_t fd, uint64_t len, uint32_t faults) {
    rec(t, now++, pid, "mmap",
        j({{"region", region}, {"fd", fd}, {"len", len}, {"offset", 0}}));
    for (uint32_t i = 0; i < faults; i++)
        rec(t, now++, pid, "fault",
            j({{"region", region}, {"offset", (uint64_t)i * kPageSize}}));
}

Workload email_search(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("email-search", 2 << 20, 30, rng);
    uint64_t now = 1000;
    const uint32_t pid = 1;
    Trace& t = w.trace;

    // libraries: local images in guest mode, host fetches otherwise
    uint32_t fd = 3, region = 0;
    for (size_t i = 0; i < w.manifest.libraries.size(); i++) {
        const auto& lib = w.manifest.libraries[i];
        rec(t, now++, pid, "open",
            j({{"fd", fd},
               {"path", "/lib/" + lib.name},
               {"kind", "library"},
               {"flags", (uint32_t)wire::kOpenRead}}));
        mmap_faults(t, now, pid, region, fd, lib.size,
                    (uint32_t)std::min<uint64_t>(16, lib.size / kPageSize));
        region++;
        fd++;
    }

    // the mailbox is a regular file in both modes
    rec(t, now++, pid, "open",
        j({{"fd", fd},
           {"path", "/home/user/mail.db"},
           {"flags", (uint32_t)wire::kOpenRead}}));
    mmap_faults(t, now, pid, region, fd, 12 << 10, 3);
    rec(t, now++, pid, "close", j({{"fd", fd}}));
    w.fixture.push_back({"/home/user/mail.db", 64 << 10});
    return w;
}

Workload email_send(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("email-send", 1 << 20, 12, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    std::uniform_int_distribution<uint32_t> chunk(64, 900);
    rec(t, now++, 1, "open",
        j({{"fd", 3},
           {"path", "/home/user/draft.eml"},
           {"flags",
            (uint32_t)(wire::kOpenWrite | wire::kOpenCreate)}}));
    for (int i = 0; i < 40; i++) {
        rec(t, now, 1, "write",
            j({{"fd", 3},
               {"len", chunk(rng)},
               {"tag", "mail:" + std::to_string(i)}}));
        now += 200;
    }
    rec(t, now++, 1, "close", j({{"fd", 3}}));
    for (int i = 0; i < 6; i++)
        rec(t, now += 500, 1, "display", j({{"len", 256}}));
    return w;
}

Workload browser_multisite(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("browser", 8 << 20, 40, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    std::uniform_int_distribution<uint32_t> rlen(512, 4096);
    for (int site = 0; site < 5; site++) {
        std::string cache =
            "/home/user/.cache/site" + std::to_string(site) + ".bin";
        w.fixture.push_back({cache, 256 << 10});
        uint32_t fd = 3 + site;
        rec(t, now++, 1, "open",
            j({{"fd", fd}, {"path", cache},
               {"flags", (uint32_t)wire::kOpenRead}}));
        for (int i = 0; i < 20; i++)
            rec(t, now += 100, 1, "read", j({{"fd", fd}, {"len", rlen(rng)}}));
        rec(t, now++, 1, "select",
            j({{"fds", {fd}},
               {"timeout_us", 20000},
               {"schedule", {{{"fd", fd}, {"at_us", now + 4000}}}}}));
        for (int i = 0; i < 8; i++)
            rec(t, now += 300, 1, "display", j({{"len", 2048}}));
        rec(t, now++, 1, "close", j({{"fd", fd}}));
    }
    return w;
}

Workload browser_download(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("browser", 8 << 20, 40, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    rec(t, now++, 1, "open",
        j({{"fd", 3},
           {"path", "/home/user/file.bin"},
           {"flags",
            (uint32_t)(wire::kOpenWrite | wire::kOpenCreate)}}));
    std::uniform_int_distribution<uint32_t> chunk(8 << 10, 32 << 10);
    for (int i = 0; i < 200; i++) {
        rec(t, now, 1, "write",
            j({{"fd", 3},
               {"len", chunk(rng)},
               {"tag", "dl:" + std::to_string(i)}}));
        now += 150;
        if (i % 25 == 0)
            rec(t, now++, 1, "display", j({{"len", 512}}));
    }
    rec(t, now++, 1, "close", j({{"fd", 3}}));
    return w;
}

Workload pdf_search(Rng& rng) {
    Workload w;
    // a document viewer drags in a large library set
    w.manifest = make_manifest("pdf-viewer", 4 << 20, 25, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    w.fixture.push_back({"/home/user/doc.pdf", 2 << 20});
    rec(t, now++, 1, "open",
        j({{"fd", 3},
           {"path", "/home/user/doc.pdf"},
           {"flags", (uint32_t)wire::kOpenRead}}));
    mmap_faults(t, now, 1, 0, 3, 2 << 20, 48);
    for (int i = 0; i < 10; i++)
        rec(t, now += 400, 1, "display", j({{"len", 4096}}));
    rec(t, now++, 1, "close", j({{"fd", 3}}));
    return w;
}

Workload editor_newdoc(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("editor", 3 << 20, 18, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    rec(t, now++, 1, "open",
        j({{"fd", 3},
           {"path", "/home/user/notes.txt"},
           {"flags",
            (uint32_t)(wire::kOpenWrite | wire::kOpenCreate)}}));
    std::uniform_int_distribution<uint32_t> burst(1, 12);
    for (int i = 0; i < 60; i++) {
        uint32_t n = burst(rng);
        for (uint32_t k = 0; k < n; k++)
            rec(t, now += 50, 1, "write",
                j({{"fd", 3},
                   {"len", 80},
                   {"tag", "edit:" + std::to_string(i * 16 + k)}}));
        rec(t, now += 2000, 1, "stat", j({{"fd", 3}}));
    }
    rec(t, now++, 1, "close", j({{"fd", 3}}));
    return w;
}

Workload wget_bulk(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("wget", 512 << 10, 2, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    rec(t, now++, 1, "open",
        j({{"fd", 3},
           {"path", "/home/user/download.bin"},
           {"flags",
            (uint32_t)(wire::kOpenWrite | wire::kOpenCreate)}}));
    // 64 MiB as back-to-back 4096-byte writes, the classic bulk pattern
    const uint64_t total = 64ull << 20;
    for (uint64_t off = 0; off < total; off += 4096) {
        rec(t, now, 1, "write",
            j({{"fd", 3}, {"len", 4096}, {"tag", "wget:" + std::to_string(off)}}));
        now += 5;
    }
    rec(t, now++, 1, "close", j({{"fd", 3}}));
    return w;
}

Workload scp_bulk(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("scp", 512 << 10, 3, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    w.fixture.push_back({"/home/user/payload.bin", 8 << 20});
    rec(t, now++, 1, "open",
        j({{"fd", 3},
           {"path", "/home/user/payload.bin"},
           {"flags", (uint32_t)wire::kOpenRead}}));
    for (int i = 0; i < 64; i++)
        rec(t, now += 100, 1, "read", j({{"fd", 3}, {"len", 128 << 10}}));
    rec(t, now++, 1, "close", j({{"fd", 3}}));
    return w;
}

Workload shell_interactive(Rng& rng) {
    Workload w;
    w.manifest = make_manifest("shell", 1 << 20, 6, rng);
    uint64_t now = 1000;
    Trace& t = w.trace;
    rec(t, now++, 1, "open",
        j({{"fd", 3},
           {"path", "/dev/pts/1"},
           {"kind", "device"},
           {"flags", (uint32_t)(wire::kOpenRead | wire::kOpenWrite)}}));
    rec(t, now++, 1, "open",
        j({{"fd", 4},
           {"path", "/home/user/.history"},
           {"flags",
            (uint32_t)(wire::kOpenWrite | wire::kOpenCreate)}}));
    std::uniform_int_distribution<uint32_t> gap(5000, 40000);
    for (int i = 0; i < 30; i++) {
        uint64_t ready = now + gap(rng);
        rec(t, now, 1, "poll",
            j({{"fds", {3}},
               {"timeout_us", 100000},
               {"schedule", {{{"fd", 3}, {"at_us", ready}}}}}));
        now = ready + 100;
        rec(t, now++, 1, "read", j({{"fd", 3}, {"len", 64}}));
        rec(t, now++, 1, "write",
            j({{"fd", 4}, {"len", 64}, {"tag", "hist:" + std::to_string(i)}}));
    }
    rec(t, now++, 1, "close", j({{"fd", 4}}));
    rec(t, now++, 1, "close", j({{"fd", 3}}));
    return w;
}

} // namespace

std::vector<std::string> workload_profiles() {
    return {"email-search", "email-send",  "browser-multisite",
            "browser-download", "pdf-search", "editor-newdoc",
            "wget-bulk",    "scp-bulk",    "shell-interactive"};
}

Workload generate_workload(const std::string& profile, uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    Workload w;
    if (profile == "email-search")
        w = email_search(rng);
    else if (profile == "email-send")
        w = email_send(rng);
    else if (profile == "browser-multisite")
        w = browser_multisite(rng);
    else if (profile == "browser-download")
        w = browser_download(rng);
    else if (profile == "pdf-search")
        w = pdf_search(rng);
    else if (profile == "editor-newdoc")
        w = editor_newdoc(rng);
    else if (profile == "wget-bulk")
        w = wget_bulk(rng);
    else if (profile == "scp-bulk")
        w = scp_bulk(rng);
    else if (profile == "shell-interactive")
        w = shell_interactive(rng);
    else
        throw std::invalid_argument("unknown profile: " + profile);

    w.spec.app_id = 1;
    w.spec.root_pid = 1;
    w.spec.app_name = w.manifest.binary.name;
    w.spec.manifest = w.manifest;
    for (const auto& [path, size] : w.fixture) {
        (void)size;
        w.spec.input_files.push_back(path);
    }
    return w;
}

void apply_fixture(HostFs& fs, const Workload& w) {
    for (const auto& [path, size] : w.fixture)
        fs.put_file(path, synthetic_bytes(path, size));
}

uint64_t estimate_startup(const ImageManifest& manifest, LaunchMode mode,
                          const ChannelConfig& channel) {
    if (mode == LaunchMode::Local)
        return 1;
    // one launch request, then each image: a single bulk transfer when it
    // fits a big slot, else inline chunks
    uint64_t chunk = channel.normal_payload_max - wire::kReplyOverhead;
    auto fetches = [&](uint64_t size) -> uint64_t {
        if (size <= channel.big_slot_size)
            return 1;
        return (size + chunk - 1) / chunk;
    };
    uint64_t n = 1 + fetches(manifest.binary.size);
    for (const auto& lib : manifest.libraries)
        n += fetches(lib.size);
    return n;
}

} // namespace qos
