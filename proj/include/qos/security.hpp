#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "qos/hostfs.hpp"

namespace qos {

enum class EntityState : uint8_t { Safe, Unsafe, Unverified };
enum class AppState : uint8_t { Safe, Unsafe, TempUnsafe };
enum class LaunchMode : uint8_t { Local, Remote };
enum class Intent : uint8_t { Read, Write, Exec };

const char* entity_state_name(EntityState s);

struct GenesisEvent {
    uint64_t t_us = 0;
    uint32_t app_id = 0;
    std::string action; // "create" | "write"
};

struct EntityRecord {
    std::string id;
    EntityState state = EntityState::Safe;
    std::vector<GenesisEvent> genesis;
    std::optional<uint32_t> last_writer;
};

struct ClassificationRule {
    std::string pattern; // glob on file path or exact app name
    EntityState state = EntityState::Safe;
};

struct ClassificationConfig {
    std::vector<ClassificationRule> file_rules; // first match wins
    std::map<std::string, AppState> app_states;
    AppState default_app_state = AppState::Safe;
    EntityState unknown_file_state = EntityState::Safe; // paranoid: Unverified
};

struct LaunchDecision {
    enum class Kind : uint8_t { Native, Quarantine, AccessDenied };
    enum class Cause : uint8_t { None, AppUnsafe, InputUnverified, TempUnsafe };
    Kind kind = Kind::Native;
    LaunchMode mode = LaunchMode::Local;
    Cause cause = Cause::None;
    std::string denied_path; // set for AccessDenied (unsafe input)
};

enum class HostOpenDecision : uint8_t {
    Allow,
    DenyUnverified,
    DenyUnsafe,
};

enum class GuestWriteOpenDecision : uint8_t { Allow, DenyInUse };

enum class ReclassStatus : uint8_t { Ok, InvalidTransition, NotFound };

struct ReclassReport {
    ReclassStatus status = ReclassStatus::NotFound;
    std::string id;
    EntityState verdict = EntityState::Safe;
    bool deleted = false;
    std::vector<GenesisEvent> genesis;
};

// Certifier + execution-monitor policy: owns the safe/unsafe/unverified
// state machine, mirrors file state into hostfs xattrs ("qos.state"), and
// journals every transition so state survives restart.
class SecurityMonitor {
public:
    SecurityMonitor(HostFs& fs, ClassificationConfig cfg);

    LaunchDecision classify_exec(const std::string& app,
                                 const std::vector<std::string>& input_files,
                                 bool app_in_guest_image = true);

    void on_guest_write(const std::string& path, uint32_t app_id, uint64_t t_us,
                        bool created = false);

    HostOpenDecision check_host_open(const std::string& path, Intent intent);
    GuestWriteOpenDecision check_guest_write_open(const std::string& path);

    ReclassReport reclassify_file(const std::string& path, EntityState verdict);
    ReclassStatus reclassify_app(const std::string& app, AppState verdict);

    struct GenesisResult {
        bool found = false;
        std::vector<GenesisEvent> events;
    };
    GenesisResult genesis(const std::string& path) const;

    EntityState file_state(const std::string& path) const;
    AppState app_state(const std::string& app) const;
    void mark_app_temp_unsafe(const std::string& app);
    void on_app_run_exit(const std::string& app); // expires TempUnsafe

    // Journal (JSON lines), replayable at startup.
    std::string journal_export() const;
    void journal_replay(const std::string& text);

private:
    EntityState file_state_locked(const std::string& path) const;
    void set_file_state_locked(const std::string& path, EntityState s);

    HostFs& fs_;
    ClassificationConfig cfg_;
    mutable std::mutex mu_;
    std::map<std::string, EntityRecord> files_;
    std::map<std::string, AppState> apps_;
    std::vector<std::string> journal_;
};

// Shell-style glob match supporting '*' and '?'.
bool glob_match(const std::string& pattern, const std::string& text);

} // namespace qos
