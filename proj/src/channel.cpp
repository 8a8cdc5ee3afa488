#include "qos/channel.hpp"

#include <atomic>
#include <stdexcept>

namespace qos {

const char* opcode_name(Opcode op) {
    switch (op) {
    case Opcode::OpenReq: return "OpenReq";
    case Opcode::FileIo: return "FileIo";
    case Opcode::DisplayIo: return "DisplayIo";
    case Opcode::IoEventWait: return "IoEventWait";
    case Opcode::MmapFetch: return "MmapFetch";
    case Opcode::ExecFetch: return "ExecFetch";
    case Opcode::LaunchReq: return "LaunchReq";
    case Opcode::CloneNotify: return "CloneNotify";
    case Opcode::ExitNotify: return "ExitNotify";
    case Opcode::SignalNotify: return "SignalNotify";
    case Opcode::WcFlush: return "WcFlush";
    case Opcode::Reply: return "Reply";
    case Opcode::Error: return "Error";
    case Opcode::Echo: return "Echo";
    }
    return "Unknown";
}

namespace {

constexpr uint32_t kSlotFree = 0;
constexpr uint32_t kSlotAllocated = 1;
constexpr uint32_t kBigFree = 0;
constexpr uint32_t kBigReserved = 1;

constexpr size_t kRegionHeaderSize = 64;
constexpr size_t kBigDescSize = 16;

size_t align_up(size_t v, size_t a) { return (v + a - 1) & ~(a - 1); }

struct RegionHeader {
    uint32_t magic;   // "QRG1"
    uint32_t version;
    uint32_t normal_slot_count;
    uint32_t normal_slot_capacity;
    uint32_t normal_payload_max;
    uint32_t big_slot_count;
    uint32_t big_slot_size;
    uint32_t cell_stride;
    uint64_t slot_table_off;
    uint64_t rings_off;
    uint64_t big_table_off;
    uint64_t big_bytes_off;
};
static_assert(sizeof(RegionHeader) <= kRegionHeaderSize);

constexpr uint32_t kRegionMagic = 0x31475251u; // "QRG1"

struct BigDesc {
    uint32_t state;
    uint32_t app_id;
    uint64_t pad;
};
static_assert(sizeof(BigDesc) == kBigDescSize);

} // namespace

struct ChannelRegion::SlotDesc {
    uint32_t state;
    uint32_t app_id;
    uint32_t pid;
    uint32_t direction;
    uint64_t head;     // consumer cursor, accessed via atomic_ref
    uint64_t tail;     // producer cursor, accessed via atomic_ref
    uint64_t next_seq; // producer-owned
    uint32_t poisoned;
    uint32_t pad[5];
};

ChannelRegion::ChannelRegion(const ChannelConfig& cfg) : cfg_(cfg) {
    static_assert(sizeof(SlotDesc) == 64);
    std::string err = cfg.validate();
    if (!err.empty())
        throw std::invalid_argument("channel config: " + err);

    cell_stride_ = align_up(sizeof(MessageHeader) + cfg.normal_payload_max, 64);
    slot_table_off_ = kRegionHeaderSize;
    rings_off_ = slot_table_off_ + cfg.normal_slot_count * sizeof(SlotDesc);
    size_t rings_bytes =
        (size_t)cfg.normal_slot_count * cfg.normal_slot_capacity * cell_stride_;
    big_table_off_ = align_up(rings_off_ + rings_bytes, 64);
    big_bytes_off_ = align_up(big_table_off_ + cfg.big_slot_count * kBigDescSize, 64);
    region_size_ = big_bytes_off_ + (size_t)cfg.big_slot_count * cfg.big_slot_size;

    storage_ = std::make_unique<uint8_t[]>(region_size_ + 64);
    uintptr_t p = reinterpret_cast<uintptr_t>(storage_.get());
    base_ = reinterpret_cast<uint8_t*>(align_up(p, 64));
    std::memset(base_, 0, region_size_);

    auto* rh = reinterpret_cast<RegionHeader*>(base_);
    rh->magic = kRegionMagic;
    rh->version = kChannelVersion;
    rh->normal_slot_count = cfg.normal_slot_count;
    rh->normal_slot_capacity = cfg.normal_slot_capacity;
    rh->normal_payload_max = cfg.normal_payload_max;
    rh->big_slot_count = cfg.big_slot_count;
    rh->big_slot_size = cfg.big_slot_size;
    rh->cell_stride = (uint32_t)cell_stride_;
    rh->slot_table_off = slot_table_off_;
    rh->rings_off = rings_off_;
    rh->big_table_off = big_table_off_;
    rh->big_bytes_off = big_bytes_off_;
}

ChannelRegion::SlotDesc& ChannelRegion::desc(uint32_t slot) {
    return *reinterpret_cast<SlotDesc*>(base_ + slot_table_off_ +
                                        (size_t)slot * sizeof(SlotDesc));
}

const ChannelRegion::SlotDesc& ChannelRegion::desc(uint32_t slot) const {
    return *reinterpret_cast<const SlotDesc*>(base_ + slot_table_off_ +
                                              (size_t)slot * sizeof(SlotDesc));
}

uint8_t* ChannelRegion::cell_ptr(uint32_t slot, uint64_t index) {
    uint64_t wrapped = index & (cfg_.normal_slot_capacity - 1);
    return base_ + rings_off_ +
           ((size_t)slot * cfg_.normal_slot_capacity + wrapped) * cell_stride_;
}

const uint8_t* ChannelRegion::cell_ptr(uint32_t slot, uint64_t index) const {
    return const_cast<ChannelRegion*>(this)->cell_ptr(slot, index);
}

AllocResult ChannelRegion::allocate_slot_pair(uint32_t app_id, uint32_t pid) {
    std::lock_guard lock(alloc_mu_);
    for (uint32_t i = 0; i < cfg_.normal_slot_count; i++) {
        SlotDesc& d = desc(i);
        if (d.state == kSlotAllocated && d.app_id == app_id && d.pid == pid)
            return {AllocStatus::AlreadyAllocated, {}};
    }
    uint32_t found[2];
    uint32_t n = 0;
    for (uint32_t i = 0; i < cfg_.normal_slot_count && n < 2; i++) {
        if (desc(i).state == kSlotFree)
            found[n++] = i;
    }
    if (n < 2)
        return {AllocStatus::Exhausted, {}};
    for (uint32_t k = 0; k < 2; k++) {
        SlotDesc& d = desc(found[k]);
        d.state = kSlotAllocated;
        d.app_id = app_id;
        d.pid = pid;
        d.direction = k == 0 ? (uint32_t)SlotDirection::GuestToHost
                             : (uint32_t)SlotDirection::HostToGuest;
        std::atomic_ref<uint64_t>(d.head).store(0, std::memory_order_relaxed);
        std::atomic_ref<uint64_t>(d.tail).store(0, std::memory_order_relaxed);
        d.next_seq = 0;
        d.poisoned = 0;
    }
    return {AllocStatus::Ok, {found[0], found[1]}};
}

void ChannelRegion::free_slot_pair(uint32_t app_id, uint32_t pid) {
    std::lock_guard lock(alloc_mu_);
    for (uint32_t i = 0; i < cfg_.normal_slot_count; i++) {
        SlotDesc& d = desc(i);
        if (d.state == kSlotAllocated && d.app_id == app_id && d.pid == pid)
            d.state = kSlotFree;
    }
}

std::optional<SlotPair> ChannelRegion::slot_pair_of(uint32_t app_id,
                                                    uint32_t pid) const {
    std::lock_guard lock(alloc_mu_);
    SlotPair pair;
    bool to_host = false, to_guest = false;
    for (uint32_t i = 0; i < cfg_.normal_slot_count; i++) {
        const SlotDesc& d = desc(i);
        if (d.state != kSlotAllocated || d.app_id != app_id || d.pid != pid)
            continue;
        if (d.direction == (uint32_t)SlotDirection::GuestToHost) {
            pair.to_host = i;
            to_host = true;
        } else {
            pair.to_guest = i;
            to_guest = true;
        }
    }
    if (!to_host || !to_guest)
        return std::nullopt;
    return pair;
}

uint32_t ChannelRegion::free_slot_count() const {
    std::lock_guard lock(alloc_mu_);
    uint32_t n = 0;
    for (uint32_t i = 0; i < cfg_.normal_slot_count; i++)
        if (desc(i).state == kSlotFree)
            n++;
    return n;
}

uint32_t ChannelRegion::allocated_slot_count() const {
    return cfg_.normal_slot_count - free_slot_count();
}

SendStatus ChannelRegion::send(uint32_t slot, MessageHeader& hdr,
                               std::span<const uint8_t> payload) {
    if (slot >= cfg_.normal_slot_count)
        return SendStatus::FormatError;
    SlotDesc& d = desc(slot);
    if (d.state != kSlotAllocated || d.poisoned)
        return SendStatus::FormatError;
    if (hdr.magic != kChannelMagic || hdr.version != kChannelVersion)
        return SendStatus::FormatError;
    if (payload.size() > cfg_.normal_payload_max)
        return SendStatus::FormatError;
    hdr.payload_len = (uint32_t)payload.size();
    if (hdr.big_ref != kBigRefNone &&
        !big_slot_reserved_by(hdr.big_ref, hdr.app_id))
        return SendStatus::FormatError;

    std::atomic_ref<uint64_t> head_ref(d.head);
    std::atomic_ref<uint64_t> tail_ref(d.tail);
    uint64_t tail = tail_ref.load(std::memory_order_relaxed);
    uint64_t head = head_ref.load(std::memory_order_acquire);
    if (tail - head >= cfg_.normal_slot_capacity)
        return SendStatus::Full;

    hdr.seq = ++d.next_seq;
    uint8_t* cell = cell_ptr(slot, tail);
    if (!payload.empty())
        std::memcpy(cell + sizeof(MessageHeader), payload.data(), payload.size());
    std::memcpy(cell, &hdr, sizeof(MessageHeader));
    tail_ref.store(tail + 1, std::memory_order_release);

    { std::lock_guard lock(wait_mu_); }
    wait_cv_.notify_all();
    return SendStatus::Ok;
}

SendStatus ChannelRegion::send_with_retry(uint32_t slot, MessageHeader& hdr,
                                          std::span<const uint8_t> payload,
                                          Clock& clock, int max_retries) {
    uint64_t backoff_us = 1;
    for (int attempt = 0;; attempt++) {
        SendStatus s = send(slot, hdr, payload);
        if (s != SendStatus::Full || attempt >= max_retries)
            return s;
        clock.sleep_us(backoff_us);
        backoff_us = std::min<uint64_t>(backoff_us * 2, 1000);
    }
}

RecvStatus ChannelRegion::recv(uint32_t slot, Message& out) {
    if (slot >= cfg_.normal_slot_count)
        return RecvStatus::Corrupt;
    SlotDesc& d = desc(slot);
    if (d.poisoned)
        return RecvStatus::Corrupt;
    std::atomic_ref<uint64_t> head_ref(d.head);
    std::atomic_ref<uint64_t> tail_ref(d.tail);
    uint64_t head = head_ref.load(std::memory_order_relaxed);
    uint64_t tail = tail_ref.load(std::memory_order_acquire);
    if (head == tail)
        return RecvStatus::Empty;

    const uint8_t* cell = cell_ptr(slot, head);
    MessageHeader hdr;
    std::memcpy(&hdr, cell, sizeof(MessageHeader));
    if (hdr.magic != kChannelMagic || hdr.version != kChannelVersion ||
        hdr.payload_len > cfg_.normal_payload_max) {
        d.poisoned = 1;
        return RecvStatus::Corrupt;
    }
    out.header = hdr;
    out.payload.assign(cell + sizeof(MessageHeader),
                       cell + sizeof(MessageHeader) + hdr.payload_len);
    head_ref.store(head + 1, std::memory_order_release);
    return RecvStatus::Ok;
}

size_t ChannelRegion::pending(uint32_t slot) const {
    const SlotDesc& d = desc(slot);
    uint64_t tail = std::atomic_ref<const uint64_t>(d.tail)
                        .load(std::memory_order_acquire);
    uint64_t head = std::atomic_ref<const uint64_t>(d.head)
                        .load(std::memory_order_relaxed);
    return (size_t)(tail - head);
}

bool ChannelRegion::poisoned(uint32_t slot) const {
    return desc(slot).poisoned != 0;
}

std::optional<uint32_t> ChannelRegion::reserve_big_slot(uint32_t app_id,
                                                        size_t min_size) {
    if (min_size > cfg_.big_slot_size)
        return std::nullopt;
    std::lock_guard lock(alloc_mu_);
    auto* descs = reinterpret_cast<BigDesc*>(base_ + big_table_off_);
    for (uint32_t i = 0; i < cfg_.big_slot_count; i++) {
        if (descs[i].state == kBigFree) {
            descs[i].state = kBigReserved;
            descs[i].app_id = app_id;
            return i;
        }
    }
    return std::nullopt; // Busy: caller falls back to chunked transfer
}

void ChannelRegion::release_big_slot(uint32_t index, uint32_t app_id) {
    std::lock_guard lock(alloc_mu_);
    if (index >= cfg_.big_slot_count)
        return;
    auto* descs = reinterpret_cast<BigDesc*>(base_ + big_table_off_);
    if (descs[index].state == kBigReserved && descs[index].app_id == app_id)
        descs[index].state = kBigFree;
}

void ChannelRegion::release_all_big_slots(uint32_t app_id) {
    std::lock_guard lock(alloc_mu_);
    auto* descs = reinterpret_cast<BigDesc*>(base_ + big_table_off_);
    for (uint32_t i = 0; i < cfg_.big_slot_count; i++)
        if (descs[i].state == kBigReserved && descs[i].app_id == app_id)
            descs[i].state = kBigFree;
}

bool ChannelRegion::big_slot_reserved_by(uint32_t index, uint32_t app_id) const {
    std::lock_guard lock(alloc_mu_);
    if (index >= cfg_.big_slot_count)
        return false;
    auto* descs = reinterpret_cast<const BigDesc*>(base_ + big_table_off_);
    return descs[index].state == kBigReserved && descs[index].app_id == app_id;
}

uint32_t ChannelRegion::reserved_big_slot_count() const {
    std::lock_guard lock(alloc_mu_);
    auto* descs = reinterpret_cast<const BigDesc*>(base_ + big_table_off_);
    uint32_t n = 0;
    for (uint32_t i = 0; i < cfg_.big_slot_count; i++)
        if (descs[i].state == kBigReserved)
            n++;
    return n;
}

std::span<uint8_t> ChannelRegion::big_slot_bytes(uint32_t index) {
    if (index >= cfg_.big_slot_count)
        throw std::out_of_range("big slot index");
    return {base_ + big_bytes_off_ + (size_t)index * cfg_.big_slot_size,
            cfg_.big_slot_size};
}

std::vector<uint32_t> ChannelRegion::wait_any(const std::vector<uint32_t>& slots,
                                              uint64_t deadline_us,
                                              Clock& clock) {
    if (slots.empty())
        throw std::invalid_argument("wait_any: empty slot set");
    for (uint32_t s : slots)
        if (s >= cfg_.normal_slot_count)
            throw std::invalid_argument("wait_any: bad slot index");

    for (;;) {
        std::vector<uint32_t> ready;
        for (uint32_t s : slots)
            if (pending(s) > 0)
                ready.push_back(s);
        if (!ready.empty())
            return ready;
        uint64_t now = clock.now_us();
        if (now >= deadline_us)
            return {};
        if (clock.is_virtual()) {
            // Nothing can arrive while this context holds the clock.
            clock.sleep_us(deadline_us - now);
        } else {
            std::unique_lock lock(wait_mu_);
            bool any = false;
            for (uint32_t s : slots)
                if (pending(s) > 0)
                    any = true;
            if (!any)
                wait_cv_.wait_for(
                    lock, std::chrono::microseconds(deadline_us - now));
        }
    }
}

} // namespace qos
