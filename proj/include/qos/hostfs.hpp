#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qos {

enum class Domain : uint8_t { Host, Quarantine };

enum class FsStatus {
    Ok,
    NotFound,
    Exists,
    PermissionDenied,
    BadHandle,
    ModeMismatch,
    NoAttr,
    IsDirectory,
    NotDirectory,
};

const char* fs_status_name(FsStatus s);

struct OpenFlags {
    bool read = false;
    bool write = false;
    bool create = false;
    bool trunc = false;
};

struct FileStat {
    uint64_t size = 0;
    std::map<std::string, std::string> xattrs;
};

struct FsExtent {
    uint64_t offset = 0;
    std::vector<uint8_t> data;
};

// In-memory host filesystem model: regular files and directories, per-file
// xattrs (the classification mirror), and an open-handle ledger tagged by
// domain so the in-use rule can be checked. Mechanism only; policy hooks
// live in the callers.
class HostFs {
public:
    HostFs();

    struct OpenResult {
        FsStatus status = FsStatus::NotFound;
        uint64_t handle = 0;
    };

    FsStatus mkdir(const std::string& path);
    bool exists(const std::string& path) const;
    bool is_directory(const std::string& path) const;
    FsStatus remove(const std::string& path);

    OpenResult open(const std::string& path, OpenFlags flags, Domain domain);
    FsStatus close(uint64_t handle);

    // Positional I/O; the handle also carries a cursor for sequential use.
    struct IoResult {
        FsStatus status = FsStatus::BadHandle;
        std::vector<uint8_t> data; // reads
        uint64_t value = 0;        // bytes written / new offset / size
    };
    IoResult read(uint64_t handle, uint64_t len);
    IoResult pread(uint64_t handle, uint64_t offset, uint64_t len);
    IoResult write(uint64_t handle, std::span<const uint8_t> data);
    IoResult pwrite(uint64_t handle, uint64_t offset,
                    std::span<const uint8_t> data);
    IoResult seek(uint64_t handle, uint64_t offset);
    FsStatus stat(const std::string& path, FileStat& out) const;
    FsStatus fstat(uint64_t handle, FileStat& out) const;

    // Applies all extents under one lock hold; all or nothing.
    FsStatus apply_extents(uint64_t handle, const std::vector<FsExtent>& extents);

    // Open-handle census for the in-use rule.
    uint32_t in_use(const std::string& path,
                    std::optional<Domain> domain = std::nullopt) const;
    uint32_t open_handle_count(Domain domain) const;

    FsStatus xattr_set(const std::string& path, const std::string& name,
                       const std::string& value);
    FsStatus xattr_get(const std::string& path, const std::string& name,
                       std::string& out) const;

    std::optional<std::string> handle_path(uint64_t handle) const;
    std::optional<uint64_t> handle_offset(uint64_t handle) const;

    // Whole-file helpers for fixtures and oracles.
    FsStatus put_file(const std::string& path, std::span<const uint8_t> data);
    FsStatus get_file(const std::string& path, std::vector<uint8_t>& out) const;

    // Snapshot import/export: JSON tree of {path, data(base64), xattrs}.
    std::string snapshot_export() const;
    FsStatus snapshot_import(const std::string& json_text);

    // Every path touched by open/remove/xattr mutation, in order. Used by
    // the confinement checks.
    std::vector<std::string> access_log() const;
    void clear_access_log();

    std::vector<std::string> list_files() const;

private:
    struct VNode {
        bool directory = false;
        std::vector<uint8_t> data;
        std::map<std::string, std::string> xattrs;
        bool writable = true;
    };
    struct Handle {
        std::string path;
        Domain domain = Domain::Host;
        OpenFlags flags;
        uint64_t offset = 0;
    };

    bool parent_exists(const std::string& path) const;
    IoResult pread_locked_impl(const Handle& h, uint64_t offset, uint64_t len);
    IoResult pwrite_locked_impl(const Handle& h, uint64_t offset,
                                std::span<const uint8_t> data);

    mutable std::mutex mu_;
    std::map<std::string, VNode> nodes_;
    std::map<uint64_t, Handle> handles_;
    uint64_t next_handle_ = 1;
    std::vector<std::string> access_log_;
};

// Canonicalizes a path: collapses ".", "..", duplicate separators. Returns
// nullopt when the path is relative, contains a NUL, or ".." escapes the
// root.
std::optional<std::string> canonicalize_path(const std::string& path);

} // namespace qos
