#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "qos/hostfs.hpp"

using namespace qos;

TEST_CASE("canonicalize: rejects relative, NUL and escapes") {
    CHECK(!canonicalize_path("relative/path"));
    CHECK(!canonicalize_path(""));
    CHECK(!canonicalize_path(std::string("/a\0b", 4)));
    CHECK(!canonicalize_path("/.."));
    CHECK(!canonicalize_path("/a/../../b"));
    CHECK(canonicalize_path("/a/b/../c") == "/a/c");
    CHECK(canonicalize_path("/a//b/./c") == "/a/b/c");
    CHECK(canonicalize_path("/") == "/");
    CHECK(canonicalize_path("/a/") == "/a");
}

TEST_CASE("canonicalize agrees with std::filesystem on clean paths") {
    std::mt19937_64 rng(11);
    const char* parts[] = {"a", "b", "..", ".", "home", "user", "x"};
    for (int iter = 0; iter < 2000; iter++) {
        std::string p = "/";
        int n = 1 + (int)(rng() % 6);
        for (int i = 0; i < n; i++) {
            p += parts[rng() % 7];
            if (i + 1 < n)
                p += "/";
        }
        auto mine = canonicalize_path(p);
        auto norm = std::filesystem::path(p).lexically_normal();
        std::string ref = norm.string();
        if (ref.size() > 1 && ref.back() == '/')
            ref.pop_back();
        // independent escape detector: depth going negative means the path
        // climbs above the root
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
        if (escapes) {
            CHECK(!mine);
        } else {
            REQUIRE(mine);
            CHECK(*mine == ref);
        }
    }
}

TEST_CASE("open/read/write basics") {
    HostFs fs;
    fs.mkdir("/home");
    fs.mkdir("/home/user");

    OpenFlags wf{true, true, true, false};
    auto r = fs.open("/home/user/f.txt", wf, Domain::Host);
    REQUIRE(r.status == FsStatus::Ok);

    std::vector<uint8_t> data = {1, 2, 3, 4};
    CHECK(fs.write(r.handle, data).status == FsStatus::Ok);
    CHECK(fs.seek(r.handle, 0).status == FsStatus::Ok);
    auto rd = fs.read(r.handle, 4);
    CHECK(rd.status == FsStatus::Ok);
    CHECK(rd.data == data);
    CHECK(fs.close(r.handle) == FsStatus::Ok);

    // reopen without create
    auto r2 = fs.open("/home/user/f.txt", OpenFlags{true, false, false, false},
                      Domain::Host);
    REQUIRE(r2.status == FsStatus::Ok);
    auto rd2 = fs.pread(r2.handle, 1, 2);
    CHECK(rd2.data == std::vector<uint8_t>{2, 3});
    fs.close(r2.handle);
}

TEST_CASE("open failure modes") {
    HostFs fs;
    fs.mkdir("/d");
    CHECK(fs.open("/missing", OpenFlags{true, false, false, false},
                  Domain::Host)
              .status == FsStatus::NotFound);
    CHECK(fs.open("/d", OpenFlags{true, false, false, false}, Domain::Host)
              .status == FsStatus::IsDirectory);
    // create requires the parent directory
    CHECK(fs.open("/nodir/f", OpenFlags{true, true, true, false}, Domain::Host)
              .status == FsStatus::NotFound);
    // trunc clears content
    fs.put_file("/d/f", std::vector<uint8_t>(10, 7));
    auto r = fs.open("/d/f", OpenFlags{true, true, false, true}, Domain::Host);
    REQUIRE(r.status == FsStatus::Ok);
    FileStat st;
    CHECK(fs.fstat(r.handle, st) == FsStatus::Ok);
    CHECK(st.size == 0);
    fs.close(r.handle);
}

TEST_CASE("pwrite/pread fuzz against a flat byte-array oracle") {
    HostFs fs;
    fs.put_file("/f", {});
    auto h = fs.open("/f", OpenFlags{true, true, false, false}, Domain::Host);
    REQUIRE(h.status == FsStatus::Ok);

    std::vector<uint8_t> oracle;
    std::mt19937_64 rng(42);
    for (int iter = 0; iter < 5000; iter++) {
        uint64_t off = rng() % 8192;
        uint64_t len = 1 + rng() % 512;
        if (rng() % 2) {
            std::vector<uint8_t> data(len);
            for (auto& b : data)
                b = (uint8_t)rng();
            REQUIRE(fs.pwrite(h.handle, off, data).status == FsStatus::Ok);
            if (oracle.size() < off + len)
                oracle.resize(off + len, 0);
            std::copy(data.begin(), data.end(), oracle.begin() + off);
        } else {
            auto r = fs.pread(h.handle, off, len);
            REQUIRE(r.status == FsStatus::Ok);
            std::vector<uint8_t> expect;
            if (off < oracle.size()) {
                uint64_t n = std::min<uint64_t>(len, oracle.size() - off);
                expect.assign(oracle.begin() + off, oracle.begin() + off + n);
            }
            REQUIRE(r.data == expect);
        }
    }
    FileStat st;
    fs.fstat(h.handle, st);
    CHECK(st.size == oracle.size());
    fs.close(h.handle);
}

TEST_CASE("apply_extents is atomic and matches sequential pwrites") {
    HostFs fs1, fs2;
    fs1.put_file("/f", std::vector<uint8_t>(100, 1));
    fs2.put_file("/f", std::vector<uint8_t>(100, 1));
    auto h1 = fs1.open("/f", OpenFlags{true, true, false, false}, Domain::Host);
    auto h2 = fs2.open("/f", OpenFlags{true, true, false, false}, Domain::Host);

    std::vector<FsExtent> extents = {
        {10, {9, 9, 9}}, {50, {8, 8}}, {98, {7, 7, 7, 7}}};
    REQUIRE(fs1.apply_extents(h1.handle, extents) == FsStatus::Ok);
    for (const auto& e : extents)
        REQUIRE(fs2.pwrite(h2.handle, e.offset, e.data).status == FsStatus::Ok);

    std::vector<uint8_t> a, b;
    fs1.get_file("/f", a);
    fs2.get_file("/f", b);
    CHECK(a == b);
    CHECK(a.size() == 102);
}

TEST_CASE("read-only handle rejects writes") {
    HostFs fs;
    fs.put_file("/f", std::vector<uint8_t>(4, 0));
    auto h = fs.open("/f", OpenFlags{true, false, false, false}, Domain::Host);
    std::vector<uint8_t> d = {1};
    CHECK(fs.pwrite(h.handle, 0, d).status == FsStatus::ModeMismatch);
    CHECK(fs.apply_extents(h.handle, {{0, {1}}}) == FsStatus::ModeMismatch);
    fs.close(h.handle);
}

TEST_CASE("in_use ledger tracks handles per domain") {
    HostFs fs;
    fs.put_file("/f", {});
    CHECK(fs.in_use("/f") == 0);
    auto a = fs.open("/f", OpenFlags{true, false, false, false}, Domain::Host);
    auto b = fs.open("/f", OpenFlags{true, false, false, false},
                     Domain::Quarantine);
    auto c = fs.open("/f", OpenFlags{true, false, false, false},
                     Domain::Quarantine);
    CHECK(fs.in_use("/f") == 3);
    CHECK(fs.in_use("/f", Domain::Host) == 1);
    CHECK(fs.in_use("/f", Domain::Quarantine) == 2);
    CHECK(fs.open_handle_count(Domain::Quarantine) == 2);
    fs.close(b.handle);
    CHECK(fs.in_use("/f", Domain::Quarantine) == 1);
    fs.close(a.handle);
    fs.close(c.handle);
    CHECK(fs.in_use("/f") == 0);
}

TEST_CASE("xattrs set/get and NoAttr") {
    HostFs fs;
    fs.put_file("/f", {});
    std::string v;
    CHECK(fs.xattr_get("/f", "qos.state", v) == FsStatus::NoAttr);
    CHECK(fs.xattr_set("/f", "qos.state", "unverified") == FsStatus::Ok);
    CHECK(fs.xattr_get("/f", "qos.state", v) == FsStatus::Ok);
    CHECK(v == "unverified");
    CHECK(fs.xattr_set("/missing", "a", "b") == FsStatus::NotFound);
}

TEST_CASE("snapshot export/import roundtrip preserves bytes and xattrs") {
    HostFs fs;
    fs.mkdir("/home");
    fs.mkdir("/home/user");
    std::mt19937_64 rng(3);
    std::vector<uint8_t> blob(1000);
    for (auto& b : blob)
        b = (uint8_t)rng();
    fs.put_file("/home/user/a.bin", blob);
    fs.put_file("/home/user/b.txt", std::vector<uint8_t>{'h', 'i'});
    fs.xattr_set("/home/user/a.bin", "qos.state", "unverified");

    auto snap = fs.snapshot_export();
    HostFs fs2;
    REQUIRE(fs2.snapshot_import(snap) == FsStatus::Ok);
    std::vector<uint8_t> out;
    REQUIRE(fs2.get_file("/home/user/a.bin", out) == FsStatus::Ok);
    CHECK(out == blob);
    std::string v;
    CHECK(fs2.xattr_get("/home/user/a.bin", "qos.state", v) == FsStatus::Ok);
    CHECK(v == "unverified");
    CHECK(fs2.is_directory("/home/user"));
    // a second roundtrip is byte-stable
    CHECK(fs2.snapshot_export() == snap);
}

TEST_CASE("access log records opens, removes and xattr writes") {
    HostFs fs;
    fs.put_file("/f", {});
    fs.clear_access_log();
    fs.open("/f", OpenFlags{true, false, false, false}, Domain::Host);
    fs.xattr_set("/f", "a", "b");
    fs.remove("/f");
    auto log = fs.access_log();
    CHECK(log.size() == 3);
    for (const auto& p : log)
        CHECK(p == "/f");
}
