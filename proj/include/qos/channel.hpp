#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "qos/clock.hpp"
#include "qos/config.hpp"

namespace qos {

inline constexpr uint32_t kChannelMagic = 0x31484351u; // "QCH1" little-endian
inline constexpr uint8_t kChannelVersion = 1;
inline constexpr uint32_t kBigRefNone = 0xffffffffu;

enum class Opcode : uint8_t {
    OpenReq = 1,
    FileIo = 2,
    DisplayIo = 3,
    IoEventWait = 4,
    MmapFetch = 5,
    ExecFetch = 6,
    LaunchReq = 7,
    CloneNotify = 8,
    ExitNotify = 9,
    SignalNotify = 10,
    WcFlush = 11,
    Reply = 12,
    Error = 13,
    Echo = 14, // bench stand-in for the throttled uname loop
};

const char* opcode_name(Opcode op);

// Fixed 32-byte wire header, little-endian. The in-memory struct is the wire
// layout (x86-64); see docs/channel_layout.md for the byte-exact description.
struct MessageHeader {
    uint32_t magic = kChannelMagic;
    uint8_t version = kChannelVersion;
    uint8_t opcode = 0;
    uint16_t reserved = 0;
    uint32_t app_id = 0;
    uint32_t pid = 0;
    uint64_t seq = 0; // stamped by send(), strictly increasing per slot
    uint32_t payload_len = 0;
    uint32_t big_ref = kBigRefNone;
};
static_assert(sizeof(MessageHeader) == 32);

struct Message {
    MessageHeader header;
    std::vector<uint8_t> payload;
};

enum class SendStatus { Ok, Full, FormatError };
enum class RecvStatus { Ok, Empty, Corrupt };

enum class SlotDirection : uint32_t { GuestToHost = 0, HostToGuest = 1 };

struct SlotPair {
    uint32_t to_host = 0;  // guest produces, host consumes
    uint32_t to_guest = 0; // host produces, guest consumes
};

enum class AllocStatus { Ok, Exhausted, AlreadyAllocated };

struct AllocResult {
    AllocStatus status = AllocStatus::Exhausted;
    SlotPair pair;
};

// One contiguous addressable byte region standing in for the ivshmem window:
// [region header | slot table | normal slot rings | big slot table | big
// slot bytes]. Rings are single-producer/single-consumer; the producer
// publishes payload then header, then advances the tail with release
// semantics, so a consumer never observes a tail advance before the cell
// contents. Slot-table and big-slot mutation goes through the host-side
// allocator lock.
class ChannelRegion {
public:
    // Throws std::invalid_argument when the config violates its invariants.
    explicit ChannelRegion(const ChannelConfig& cfg);
    ChannelRegion(const ChannelRegion&) = delete;
    ChannelRegion& operator=(const ChannelRegion&) = delete;

    const ChannelConfig& config() const { return cfg_; }

    // ---- allocation (host allocator context) ----
    AllocResult allocate_slot_pair(uint32_t app_id, uint32_t pid);
    void free_slot_pair(uint32_t app_id, uint32_t pid);
    std::optional<SlotPair> slot_pair_of(uint32_t app_id, uint32_t pid) const;
    uint32_t free_slot_count() const;
    uint32_t allocated_slot_count() const;

    // ---- message passing ----
    // Stamps hdr.seq and validates the header before enqueue.
    SendStatus send(uint32_t slot, MessageHeader& hdr,
                    std::span<const uint8_t> payload);
    // Bounded busy-retry with exponential backoff (1us start, 1ms cap) when
    // the ring is full; still returns Full after the retry budget.
    SendStatus send_with_retry(uint32_t slot, MessageHeader& hdr,
                               std::span<const uint8_t> payload, Clock& clock,
                               int max_retries = 20);
    RecvStatus recv(uint32_t slot, Message& out);
    size_t pending(uint32_t slot) const;
    bool poisoned(uint32_t slot) const;

    // ---- big slots ----
    std::optional<uint32_t> reserve_big_slot(uint32_t app_id, size_t min_size);
    void release_big_slot(uint32_t index, uint32_t app_id);
    void release_all_big_slots(uint32_t app_id);
    bool big_slot_reserved_by(uint32_t index, uint32_t app_id) const;
    uint32_t reserved_big_slot_count() const;
    std::span<uint8_t> big_slot_bytes(uint32_t index);

    // ---- multi-slot wait (host consumer) ----
    // Returns the subset of slots with pending messages, or empty at the
    // deadline. Throws std::invalid_argument on an empty slot set. Under a
    // virtual clock the wait advances the clock instead of blocking.
    std::vector<uint32_t> wait_any(const std::vector<uint32_t>& slots,
                                   uint64_t deadline_us, Clock& clock);

    // Raw region access, for layout tests.
    std::span<const uint8_t> raw() const { return {base_, region_size_}; }
    size_t region_size() const { return region_size_; }

private:
    struct SlotDesc; // lives inside the region

    SlotDesc& desc(uint32_t slot);
    const SlotDesc& desc(uint32_t slot) const;
    uint8_t* cell_ptr(uint32_t slot, uint64_t index);
    const uint8_t* cell_ptr(uint32_t slot, uint64_t index) const;

    ChannelConfig cfg_;
    size_t cell_stride_ = 0;
    size_t slot_table_off_ = 0;
    size_t rings_off_ = 0;
    size_t big_table_off_ = 0;
    size_t big_bytes_off_ = 0;
    size_t region_size_ = 0;
    std::unique_ptr<uint8_t[]> storage_;
    uint8_t* base_ = nullptr;

    mutable std::mutex alloc_mu_; // slot table + big slot state
    mutable std::mutex wait_mu_;  // doorbell stand-in
    std::condition_variable wait_cv_;
};

} // namespace qos
