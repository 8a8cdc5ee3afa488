#include "qos/optimizer.hpp"

#include <algorithm>

namespace qos {

bool ConsistencyGuard::writer_open(const std::string& path, Domain domain) {
    std::function<void(const std::string&)> notify;
    bool en;
    {
        std::lock_guard lock(mu_);
        Census& c = census_[path];
        bool was = enabled_locked(c);
        if (domain == Domain::Quarantine)
            c.quarantine_writers++;
        else
            c.host_writers++;
        en = enabled_locked(c);
        if (was && !en)
            notify = on_disable_;
    }
    if (notify)
        notify(path);
    return en;
}

bool ConsistencyGuard::writer_close(const std::string& path, Domain domain) {
    std::lock_guard lock(mu_);
    Census& c = census_[path];
    if (domain == Domain::Quarantine) {
        if (c.quarantine_writers > 0)
            c.quarantine_writers--;
    } else {
        if (c.host_writers > 0)
            c.host_writers--;
    }
    return enabled_locked(c);
}

bool ConsistencyGuard::enabled(const std::string& path) const {
    std::lock_guard lock(mu_);
    auto it = census_.find(path);
    if (it == census_.end())
        return true;
    return enabled_locked(it->second);
}

void ConsistencyGuard::bump_write_generation(const std::string& path) {
    std::lock_guard lock(mu_);
    census_[path].generation++;
}

uint64_t ConsistencyGuard::write_generation(const std::string& path) const {
    std::lock_guard lock(mu_);
    auto it = census_.find(path);
    return it == census_.end() ? 0 : it->second.generation;
}

Optimizer::Optimizer(const OptimizerConfig& cfg, ConsistencyGuard& guard,
                     RemoteIo& io)
    : cfg_(cfg), guard_(guard), io_(io) {}

uint32_t Optimizer::flush_locked(uint32_t fd, WcBuffer& buf) {
    if (buf.extents.empty())
        return 0;
    uint32_t msgs = io_.flush_extents(fd, buf.extents);
    buf.extents.clear();
    buf.bytes = 0;
    return msgs;
}

WcOutcome Optimizer::wc_append(uint32_t fd, const std::string& path,
                               uint64_t offset, std::span<const uint8_t> bytes,
                               uint64_t now_us) {
    if (!cfg_.write_combine || !guard_.enabled(path))
        return {WcStatus::Disabled, 0};

    guard_.bump_write_generation(path);
    WcBuffer& buf = wc_[fd];
    buf.path = path;
    uint32_t msgs = 0;

    if (!buf.extents.empty()) {
        FsExtent& last = buf.extents.back();
        uint64_t last_end = last.offset + last.data.size();
        bool contiguous = offset == last_end ||
                          (offset > last_end &&
                           offset - last_end <= cfg_.wc_merge_distance);
        bool overlaps = false;
        for (const auto& e : buf.extents)
            if (offset < e.offset + e.data.size() &&
                offset + bytes.size() > e.offset)
                overlaps = true;
        if (overlaps || (!contiguous && offset != last_end)) {
            // seek discontinuity (or rewrite): flush what we have first
            msgs += flush_locked(fd, buf);
        }
    }

    if (!buf.extents.empty() &&
        offset == buf.extents.back().offset + buf.extents.back().data.size()) {
        auto& d = buf.extents.back().data;
        d.insert(d.end(), bytes.begin(), bytes.end());
    } else {
        if (buf.extents.empty())
            buf.first_append_us = now_us;
        buf.extents.push_back({offset, {bytes.begin(), bytes.end()}});
    }
    buf.bytes += bytes.size();

    if (buf.bytes >= cfg_.wc_byte_budget ||
        now_us - buf.first_append_us >= cfg_.wc_age_budget_us) {
        msgs += flush_locked(fd, buf);
        return {WcStatus::Flushed, msgs};
    }
    return {msgs ? WcStatus::Flushed : WcStatus::Buffered, msgs};
}

bool Optimizer::wc_pending(uint32_t fd) const {
    auto it = wc_.find(fd);
    return it != wc_.end() && !it->second.extents.empty();
}

uint32_t Optimizer::flush_fd(uint32_t fd) {
    auto it = wc_.find(fd);
    if (it == wc_.end())
        return 0;
    return flush_locked(fd, it->second);
}

uint32_t Optimizer::flush_path(const std::string& path) {
    uint32_t msgs = 0;
    for (auto& [fd, buf] : wc_)
        if (buf.path == path)
            msgs += flush_locked(fd, buf);
    for (auto& [fd, win] : rb_)
        if (win.path == path)
            win.data.clear();
    return msgs;
}

uint32_t Optimizer::flush_all() {
    uint32_t msgs = 0;
    for (auto& [fd, buf] : wc_)
        msgs += flush_locked(fd, buf);
    return msgs;
}

uint32_t Optimizer::age_tick(uint64_t now_us) {
    uint32_t msgs = 0;
    for (auto& [fd, buf] : wc_)
        if (!buf.extents.empty() &&
            now_us - buf.first_append_us >= cfg_.wc_age_budget_us)
            msgs += flush_locked(fd, buf);
    return msgs;
}

std::optional<std::vector<uint8_t>>
Optimizer::rb_read(uint32_t fd, const std::string& path, uint64_t offset,
                   uint32_t len, uint32_t& messages_out) {
    messages_out = 0;
    // pending combined writes on this fd must be visible to the read
    if (wc_pending(fd))
        messages_out += flush_fd(fd);

    if (!cfg_.read_batch || !guard_.enabled(path)) {
        auto r = io_.fetch_chunk(fd, offset, len);
        if (r)
            messages_out++;
        return r;
    }

    RbWindow& win = rb_[fd];
    uint64_t gen = guard_.write_generation(path);
    bool valid = !win.data.empty() && win.path == path &&
                 win.generation == gen && offset >= win.offset &&
                 offset + len <= win.offset + win.data.size();
    if (valid) {
        size_t start = offset - win.offset;
        return std::vector<uint8_t>(win.data.begin() + start,
                                    win.data.begin() + start + len);
    }

    uint32_t chunk = std::max<uint32_t>(len, cfg_.rb_chunk_bytes);
    auto fetched = io_.fetch_chunk(fd, offset, chunk);
    if (!fetched) {
        win.data.clear();
        return std::nullopt;
    }
    messages_out++;
    win.path = path;
    win.offset = offset;
    win.data = *fetched;
    win.generation = gen;
    size_t n = std::min<size_t>(len, fetched->size());
    return std::vector<uint8_t>(fetched->begin(), fetched->begin() + n);
}

void Optimizer::invalidate_read_cache(uint32_t fd) {
    auto it = rb_.find(fd);
    if (it != rb_.end())
        it->second.data.clear();
}

void Optimizer::drop_fd(uint32_t fd) {
    wc_.erase(fd);
    rb_.erase(fd);
}

} // namespace qos
