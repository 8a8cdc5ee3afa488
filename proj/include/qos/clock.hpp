#pragma once

#include <chrono>
#include <cstdint>
#include <thread>

namespace qos {

// Time source for the whole simulator. Virtual time is the default so runs
// are deterministic; wall time is only used by the threaded bench mode.
class Clock {
public:
    virtual ~Clock() = default;
    virtual uint64_t now_us() const = 0;
    virtual void sleep_us(uint64_t us) = 0;
    virtual bool is_virtual() const = 0;
};

class VirtualClock final : public Clock {
public:
    uint64_t now_us() const override { return t_us_; }
    void sleep_us(uint64_t us) override { t_us_ += us; }
    bool is_virtual() const override { return true; }

    void advance_to(uint64_t t_us) {
        if (t_us > t_us_)
            t_us_ = t_us;
    }

private:
    uint64_t t_us_ = 0;
};

class WallClock final : public Clock {
public:
    uint64_t now_us() const override {
        auto d = std::chrono::steady_clock::now().time_since_epoch();
        return static_cast<uint64_t>(
            std::chrono::duration_cast<std::chrono::microseconds>(d).count());
    }
    void sleep_us(uint64_t us) override {
        std::this_thread::sleep_for(std::chrono::microseconds(us));
    }
    bool is_virtual() const override { return false; }
};

} // namespace qos
