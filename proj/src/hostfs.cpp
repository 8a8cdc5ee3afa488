#include "qos/hostfs.hpp"

#include <algorithm>

#include <json.hpp>

namespace qos {

const char* fs_status_name(FsStatus s) {
    switch (s) {
    case FsStatus::Ok: return "Ok";
    case FsStatus::NotFound: return "NotFound";
    case FsStatus::Exists: return "Exists";
    case FsStatus::PermissionDenied: return "PermissionDenied";
    case FsStatus::BadHandle: return "BadHandle";
    case FsStatus::ModeMismatch: return "ModeMismatch";
    case FsStatus::NoAttr: return "NoAttr";
    case FsStatus::IsDirectory: return "IsDirectory";
    case FsStatus::NotDirectory: return "NotDirectory";
    }
    return "?";
}

std::optional<std::string> canonicalize_path(const std::string& path) {
    if (path.empty() || path[0] != '/')
        return std::nullopt;
    if (path.find('\0') != std::string::npos)
        return std::nullopt;
    std::vector<std::string> parts;
    size_t i = 1;
    while (i <= path.size()) {
        size_t j = path.find('/', i);
        if (j == std::string::npos)
            j = path.size();
        std::string part = path.substr(i, j - i);
        if (part == "..") {
            if (parts.empty())
                return std::nullopt; // escapes the root
            parts.pop_back();
        } else if (!part.empty() && part != ".") {
            parts.push_back(part);
        }
        i = j + 1;
    }
    std::string out;
    for (const auto& p : parts) {
        out += '/';
        out += p;
    }
    if (out.empty())
        out = "/";
    return out;
}

namespace {

std::string parent_of(const std::string& path) {
    size_t pos = path.find_last_of('/');
    if (pos == 0 || pos == std::string::npos)
        return "/";
    return path.substr(0, pos);
}

const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(std::span<const uint8_t> in) {
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    for (size_t i = 0; i < in.size(); i += 3) {
        uint32_t v = in[i] << 16;
        if (i + 1 < in.size()) v |= in[i + 1] << 8;
        if (i + 2 < in.size()) v |= in[i + 2];
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += i + 1 < in.size() ? kB64[(v >> 6) & 63] : '=';
        out += i + 2 < in.size() ? kB64[v & 63] : '=';
    }
    return out;
}

std::vector<uint8_t> b64_decode(const std::string& in) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<uint8_t> out;
    uint32_t buf = 0;
    int bits = 0;
    for (char c : in) {
        int v = val(c);
        if (v < 0)
            continue;
        buf = (buf << 6) | (uint32_t)v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back((uint8_t)(buf >> bits));
        }
    }
    return out;
}

} // namespace

HostFs::HostFs() {
    nodes_["/"] = VNode{true, {}, {}, true};
}

bool HostFs::parent_exists(const std::string& path) const {
    auto it = nodes_.find(parent_of(path));
    return it != nodes_.end() && it->second.directory;
}

FsStatus HostFs::mkdir(const std::string& path) {
    auto canon = canonicalize_path(path);
    if (!canon)
        return FsStatus::NotFound;
    std::lock_guard lock(mu_);
    if (nodes_.count(*canon))
        return FsStatus::Exists;
    if (!parent_exists(*canon))
        return FsStatus::NotFound;
    nodes_[*canon] = VNode{true, {}, {}, true};
    return FsStatus::Ok;
}

bool HostFs::exists(const std::string& path) const {
    auto canon = canonicalize_path(path);
    if (!canon)
        return false;
    std::lock_guard lock(mu_);
    return nodes_.count(*canon) != 0;
}

bool HostFs::is_directory(const std::string& path) const {
    auto canon = canonicalize_path(path);
    if (!canon)
        return false;
    std::lock_guard lock(mu_);
    auto it = nodes_.find(*canon);
    return it != nodes_.end() && it->second.directory;
}

FsStatus HostFs::remove(const std::string& path) {
    auto canon = canonicalize_path(path);
    if (!canon)
        return FsStatus::NotFound;
    std::lock_guard lock(mu_);
    auto it = nodes_.find(*canon);
    if (it == nodes_.end())
        return FsStatus::NotFound;
    if (it->second.directory)
        return FsStatus::IsDirectory;
    access_log_.push_back(*canon);
    nodes_.erase(it);
    return FsStatus::Ok;
}

HostFs::OpenResult HostFs::open(const std::string& path, OpenFlags flags,
                                Domain domain) {
    auto canon = canonicalize_path(path);
    if (!canon)
        return {FsStatus::NotFound, 0};
    std::lock_guard lock(mu_);
    access_log_.push_back(*canon);
    auto it = nodes_.find(*canon);
    if (it == nodes_.end()) {
        if (!flags.create)
            return {FsStatus::NotFound, 0};
        if (!parent_exists(*canon))
            return {FsStatus::NotFound, 0};
        it = nodes_.emplace(*canon, VNode{false, {}, {}, true}).first;
    } else if (it->second.directory) {
        return {FsStatus::IsDirectory, 0};
    }
    if (flags.write && !it->second.writable)
        return {FsStatus::PermissionDenied, 0};
    if (flags.write && flags.trunc)
        it->second.data.clear();
    uint64_t h = next_handle_++;
    handles_[h] = Handle{*canon, domain, flags, 0};
    return {FsStatus::Ok, h};
}

FsStatus HostFs::close(uint64_t handle) {
    std::lock_guard lock(mu_);
    return handles_.erase(handle) ? FsStatus::Ok : FsStatus::BadHandle;
}

HostFs::IoResult HostFs::read(uint64_t handle, uint64_t len) {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return {};
    IoResult r = pread_locked_impl(it->second, it->second.offset, len);
    if (r.status == FsStatus::Ok)
        it->second.offset += r.data.size();
    return r;
}

HostFs::IoResult HostFs::pread(uint64_t handle, uint64_t offset, uint64_t len) {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return {};
    return pread_locked_impl(it->second, offset, len);
}

HostFs::IoResult HostFs::pread_locked_impl(const Handle& h, uint64_t offset,
                                           uint64_t len) {
    if (!h.flags.read)
        return {FsStatus::ModeMismatch, {}, 0};
    auto nit = nodes_.find(h.path);
    if (nit == nodes_.end())
        return {FsStatus::NotFound, {}, 0};
    const auto& data = nit->second.data;
    IoResult r;
    r.status = FsStatus::Ok;
    if (offset < data.size()) {
        uint64_t n = std::min<uint64_t>(len, data.size() - offset);
        r.data.assign(data.begin() + offset, data.begin() + offset + n);
    }
    return r;
}

HostFs::IoResult HostFs::write(uint64_t handle, std::span<const uint8_t> data) {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return {};
    IoResult r = pwrite_locked_impl(it->second, it->second.offset, data);
    if (r.status == FsStatus::Ok)
        it->second.offset += data.size();
    return r;
}

HostFs::IoResult HostFs::pwrite(uint64_t handle, uint64_t offset,
                                std::span<const uint8_t> data) {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return {};
    return pwrite_locked_impl(it->second, offset, data);
}

HostFs::IoResult HostFs::pwrite_locked_impl(const Handle& h, uint64_t offset,
                                            std::span<const uint8_t> data) {
    if (!h.flags.write)
        return {FsStatus::ModeMismatch, {}, 0};
    auto nit = nodes_.find(h.path);
    if (nit == nodes_.end())
        return {FsStatus::NotFound, {}, 0};
    auto& file = nit->second.data;
    if (offset + data.size() > file.size())
        file.resize(offset + data.size());
    std::copy(data.begin(), data.end(), file.begin() + offset);
    IoResult r;
    r.status = FsStatus::Ok;
    r.value = data.size();
    return r;
}

HostFs::IoResult HostFs::seek(uint64_t handle, uint64_t offset) {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return {};
    it->second.offset = offset;
    IoResult r;
    r.status = FsStatus::Ok;
    r.value = offset;
    return r;
}

FsStatus HostFs::stat(const std::string& path, FileStat& out) const {
    auto canon = canonicalize_path(path);
    if (!canon)
        return FsStatus::NotFound;
    std::lock_guard lock(mu_);
    auto it = nodes_.find(*canon);
    if (it == nodes_.end())
        return FsStatus::NotFound;
    out.size = it->second.data.size();
    out.xattrs = it->second.xattrs;
    return FsStatus::Ok;
}

FsStatus HostFs::fstat(uint64_t handle, FileStat& out) const {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return FsStatus::BadHandle;
    auto nit = nodes_.find(it->second.path);
    if (nit == nodes_.end())
        return FsStatus::NotFound;
    out.size = nit->second.data.size();
    out.xattrs = nit->second.xattrs;
    return FsStatus::Ok;
}

FsStatus HostFs::apply_extents(uint64_t handle,
                               const std::vector<FsExtent>& extents) {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return FsStatus::BadHandle;
    if (!it->second.flags.write)
        return FsStatus::ModeMismatch;
    auto nit = nodes_.find(it->second.path);
    if (nit == nodes_.end())
        return FsStatus::NotFound;
    auto& file = nit->second.data;
    for (const auto& e : extents) {
        if (e.offset + e.data.size() > file.size())
            file.resize(e.offset + e.data.size());
        std::copy(e.data.begin(), e.data.end(), file.begin() + e.offset);
    }
    return FsStatus::Ok;
}

uint32_t HostFs::in_use(const std::string& path,
                        std::optional<Domain> domain) const {
    auto canon = canonicalize_path(path);
    if (!canon)
        return 0;
    std::lock_guard lock(mu_);
    uint32_t n = 0;
    for (const auto& [id, h] : handles_) {
        (void)id;
        if (h.path == *canon && (!domain || h.domain == *domain))
            n++;
    }
    return n;
}

uint32_t HostFs::open_handle_count(Domain domain) const {
    std::lock_guard lock(mu_);
    uint32_t n = 0;
    for (const auto& [id, h] : handles_) {
        (void)id;
        if (h.domain == domain)
            n++;
    }
    return n;
}

FsStatus HostFs::xattr_set(const std::string& path, const std::string& name,
                           const std::string& value) {
    auto canon = canonicalize_path(path);
    if (!canon)
        return FsStatus::NotFound;
    std::lock_guard lock(mu_);
    auto it = nodes_.find(*canon);
    if (it == nodes_.end())
        return FsStatus::NotFound;
    access_log_.push_back(*canon);
    it->second.xattrs[name] = value;
    return FsStatus::Ok;
}

FsStatus HostFs::xattr_get(const std::string& path, const std::string& name,
                           std::string& out) const {
    auto canon = canonicalize_path(path);
    if (!canon)
        return FsStatus::NotFound;
    std::lock_guard lock(mu_);
    auto it = nodes_.find(*canon);
    if (it == nodes_.end())
        return FsStatus::NotFound;
    auto xit = it->second.xattrs.find(name);
    if (xit == it->second.xattrs.end())
        return FsStatus::NoAttr;
    out = xit->second;
    return FsStatus::Ok;
}

std::optional<std::string> HostFs::handle_path(uint64_t handle) const {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return std::nullopt;
    return it->second.path;
}

std::optional<uint64_t> HostFs::handle_offset(uint64_t handle) const {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle);
    if (it == handles_.end())
        return std::nullopt;
    return it->second.offset;
}

FsStatus HostFs::put_file(const std::string& path,
                          std::span<const uint8_t> data) {
    auto canon = canonicalize_path(path);
    if (!canon)
        return FsStatus::NotFound;
    std::lock_guard lock(mu_);
    // create missing parent directories; fixtures use this freely
    std::string parent = parent_of(*canon);
    std::vector<std::string> missing;
    while (parent != "/" && !nodes_.count(parent)) {
        missing.push_back(parent);
        parent = parent_of(parent);
    }
    for (auto it = missing.rbegin(); it != missing.rend(); ++it)
        nodes_[*it] = VNode{true, {}, {}, true};
    auto& node = nodes_[*canon];
    node.directory = false;
    node.data.assign(data.begin(), data.end());
    return FsStatus::Ok;
}

FsStatus HostFs::get_file(const std::string& path,
                          std::vector<uint8_t>& out) const {
    auto canon = canonicalize_path(path);
    if (!canon)
        return FsStatus::NotFound;
    std::lock_guard lock(mu_);
    auto it = nodes_.find(*canon);
    if (it == nodes_.end())
        return FsStatus::NotFound;
    if (it->second.directory)
        return FsStatus::IsDirectory;
    out = it->second.data;
    return FsStatus::Ok;
}

std::string HostFs::snapshot_export() const {
    std::lock_guard lock(mu_);
    nlohmann::json tree = nlohmann::json::array();
    for (const auto& [path, node] : nodes_) {
        nlohmann::json entry;
        entry["path"] = path;
        entry["dir"] = node.directory;
        if (!node.directory)
            entry["data"] = b64_encode(node.data);
        if (!node.xattrs.empty())
            entry["xattrs"] = node.xattrs;
        tree.push_back(entry);
    }
    return tree.dump();
}

FsStatus HostFs::snapshot_import(const std::string& json_text) {
    nlohmann::json tree;
    try {
        tree = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception&) {
        return FsStatus::NotFound;
    }
    std::lock_guard lock(mu_);
    nodes_.clear();
    handles_.clear();
    nodes_["/"] = VNode{true, {}, {}, true};
    for (const auto& entry : tree) {
        std::string path = entry.value("path", "");
        auto canon = canonicalize_path(path);
        if (!canon)
            continue;
        VNode node;
        node.directory = entry.value("dir", false);
        if (!node.directory)
            node.data = b64_decode(entry.value("data", ""));
        if (entry.contains("xattrs"))
            for (auto& [k, v] : entry["xattrs"].items())
                node.xattrs[k] = v.get<std::string>();
        nodes_[*canon] = std::move(node);
    }
    return FsStatus::Ok;
}

std::vector<std::string> HostFs::access_log() const {
    std::lock_guard lock(mu_);
    return access_log_;
}

void HostFs::clear_access_log() {
    std::lock_guard lock(mu_);
    access_log_.clear();
}

std::vector<std::string> HostFs::list_files() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [path, node] : nodes_)
        if (!node.directory)
            out.push_back(path);
    return out;
}

} // namespace qos
