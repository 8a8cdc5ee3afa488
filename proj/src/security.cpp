#include "qos/security.hpp"

#include <sstream>

#include <json.hpp>

namespace qos {

const char* entity_state_name(EntityState s) {
    switch (s) {
    case EntityState::Safe: return "safe";
    case EntityState::Unsafe: return "unsafe";
    case EntityState::Unverified: return "unverified";
    }
    return "?";
}

bool glob_match(const std::string& pattern, const std::string& text) {
    size_t p = 0, t = 0, star = std::string::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() &&
            (pattern[p] == '?' || pattern[p] == text[t])) {
            p++;
            t++;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*')
        p++;
    return p == pattern.size();
}

SecurityMonitor::SecurityMonitor(HostFs& fs, ClassificationConfig cfg)
    : fs_(fs), cfg_(std::move(cfg)) {
    for (const auto& [app, st] : cfg_.app_states)
        apps_[app] = st;
}

EntityState SecurityMonitor::file_state_locked(const std::string& path) const {
    auto canon = canonicalize_path(path);
    std::string key = canon ? *canon : path;
    auto it = files_.find(key);
    if (it != files_.end())
        return it->second.state;
    for (const auto& rule : cfg_.file_rules)
        if (glob_match(rule.pattern, key))
            return rule.state;
    return cfg_.unknown_file_state;
}

void SecurityMonitor::set_file_state_locked(const std::string& path,
                                            EntityState s) {
    auto& rec = files_[path];
    rec.id = path;
    rec.state = s;
    if (fs_.exists(path))
        fs_.xattr_set(path, "qos.state", entity_state_name(s));
    nlohmann::json j{{"kind", "file_state"},
                     {"path", path},
                     {"state", entity_state_name(s)}};
    journal_.push_back(j.dump());
}

EntityState SecurityMonitor::file_state(const std::string& path) const {
    std::lock_guard lock(mu_);
    return file_state_locked(path);
}

AppState SecurityMonitor::app_state(const std::string& app) const {
    std::lock_guard lock(mu_);
    auto it = apps_.find(app);
    return it != apps_.end() ? it->second : cfg_.default_app_state;
}

LaunchDecision SecurityMonitor::classify_exec(
    const std::string& app, const std::vector<std::string>& input_files,
    bool app_in_guest_image) {
    std::lock_guard lock(mu_);
    LaunchDecision d;
    d.mode = app_in_guest_image ? LaunchMode::Local : LaunchMode::Remote;

    for (const auto& f : input_files) {
        if (file_state_locked(f) == EntityState::Unsafe) {
            d.kind = LaunchDecision::Kind::AccessDenied;
            d.denied_path = f;
            return d;
        }
    }

    auto it = apps_.find(app);
    AppState st = it != apps_.end() ? it->second : cfg_.default_app_state;
    if (st == AppState::Unsafe) {
        d.kind = LaunchDecision::Kind::Quarantine;
        d.cause = LaunchDecision::Cause::AppUnsafe;
        return d;
    }
    if (st == AppState::TempUnsafe) {
        d.kind = LaunchDecision::Kind::Quarantine;
        d.cause = LaunchDecision::Cause::TempUnsafe;
        return d;
    }
    for (const auto& f : input_files) {
        if (file_state_locked(f) == EntityState::Unverified) {
            d.kind = LaunchDecision::Kind::Quarantine;
            d.cause = LaunchDecision::Cause::InputUnverified;
            // the safe app touching unverified input is re-run quarantined
            apps_[app] = AppState::TempUnsafe;
            return d;
        }
    }
    d.kind = LaunchDecision::Kind::Native;
    return d;
}

void SecurityMonitor::on_guest_write(const std::string& path, uint32_t app_id,
                                     uint64_t t_us, bool created) {
    auto canon = canonicalize_path(path);
    std::string key = canon ? *canon : path;
    std::lock_guard lock(mu_);
    auto& rec = files_[key];
    rec.id = key;
    rec.genesis.push_back({t_us, app_id, created ? "create" : "write"});
    rec.last_writer = app_id;
    nlohmann::json j{{"kind", "genesis"},
                     {"path", key},
                     {"t_us", t_us},
                     {"app_id", app_id},
                     {"action", created ? "create" : "write"}};
    journal_.push_back(j.dump());
    if (rec.state != EntityState::Unverified)
        set_file_state_locked(key, EntityState::Unverified);
}

HostOpenDecision SecurityMonitor::check_host_open(const std::string& path,
                                                  Intent) {
    std::lock_guard lock(mu_);
    switch (file_state_locked(path)) {
    case EntityState::Unverified: return HostOpenDecision::DenyUnverified;
    case EntityState::Unsafe: return HostOpenDecision::DenyUnsafe;
    case EntityState::Safe: return HostOpenDecision::Allow;
    }
    return HostOpenDecision::DenyUnsafe;
}

GuestWriteOpenDecision
SecurityMonitor::check_guest_write_open(const std::string& path) {
    // in-use inode check: any live host-domain handle blocks the write open
    return fs_.in_use(path, Domain::Host) == 0 ? GuestWriteOpenDecision::Allow
                                               : GuestWriteOpenDecision::DenyInUse;
}

ReclassReport SecurityMonitor::reclassify_file(const std::string& path,
                                               EntityState verdict) {
    auto canon = canonicalize_path(path);
    std::string key = canon ? *canon : path;
    std::lock_guard lock(mu_);
    ReclassReport rep;
    rep.id = key;
    rep.verdict = verdict;
    auto it = files_.find(key);
    if (it == files_.end()) {
        rep.status = ReclassStatus::NotFound;
        return rep;
    }
    if (it->second.state != EntityState::Unverified) {
        rep.status = ReclassStatus::InvalidTransition;
        return rep;
    }
    rep.genesis = it->second.genesis;
    if (verdict == EntityState::Safe) {
        set_file_state_locked(key, EntityState::Safe);
    } else {
        // unsafe files are removed; the genesis chain survives in the report
        set_file_state_locked(key, EntityState::Unsafe);
        fs_.remove(key);
        rep.deleted = true;
    }
    rep.status = ReclassStatus::Ok;
    return rep;
}

ReclassStatus SecurityMonitor::reclassify_app(const std::string& app,
                                              AppState verdict) {
    std::lock_guard lock(mu_);
    auto it = apps_.find(app);
    AppState cur = it != apps_.end() ? it->second : cfg_.default_app_state;
    if (cur == verdict)
        return ReclassStatus::InvalidTransition;
    apps_[app] = verdict;
    nlohmann::json j{{"kind", "app_state"},
                     {"app", app},
                     {"state", verdict == AppState::Safe     ? "safe"
                               : verdict == AppState::Unsafe ? "unsafe"
                                                             : "temp_unsafe"}};
    journal_.push_back(j.dump());
    return ReclassStatus::Ok;
}

SecurityMonitor::GenesisResult
SecurityMonitor::genesis(const std::string& path) const {
    auto canon = canonicalize_path(path);
    std::string key = canon ? *canon : path;
    std::lock_guard lock(mu_);
    auto it = files_.find(key);
    if (it == files_.end())
        return {};
    return {true, it->second.genesis};
}

void SecurityMonitor::mark_app_temp_unsafe(const std::string& app) {
    std::lock_guard lock(mu_);
    auto it = apps_.find(app);
    AppState cur = it != apps_.end() ? it->second : cfg_.default_app_state;
    if (cur == AppState::Safe)
        apps_[app] = AppState::TempUnsafe;
}

void SecurityMonitor::on_app_run_exit(const std::string& app) {
    std::lock_guard lock(mu_);
    auto it = apps_.find(app);
    if (it != apps_.end() && it->second == AppState::TempUnsafe)
        it->second = AppState::Safe;
}

std::string SecurityMonitor::journal_export() const {
    std::lock_guard lock(mu_);
    std::string out;
    for (const auto& line : journal_) {
        out += line;
        out += '\n';
    }
    return out;
}

void SecurityMonitor::journal_replay(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::lock_guard lock(mu_);
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            continue;
        }
        std::string kind = j.value("kind", "");
        if (kind == "file_state") {
            std::string st = j.value("state", "safe");
            auto& rec = files_[j.value("path", "")];
            rec.id = j.value("path", "");
            rec.state = st == "unsafe"       ? EntityState::Unsafe
                        : st == "unverified" ? EntityState::Unverified
                                             : EntityState::Safe;
        } else if (kind == "genesis") {
            auto& rec = files_[j.value("path", "")];
            rec.id = j.value("path", "");
            rec.genesis.push_back({j.value("t_us", (uint64_t)0),
                                   j.value("app_id", (uint32_t)0),
                                   j.value("action", "")});
        } else if (kind == "app_state") {
            std::string st = j.value("state", "safe");
            apps_[j.value("app", "")] = st == "unsafe" ? AppState::Unsafe
                                        : st == "temp_unsafe"
                                            ? AppState::TempUnsafe
                                            : AppState::Safe;
        }
        journal_.push_back(line);
    }
}

} // namespace qos
