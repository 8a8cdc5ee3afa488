#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qos/hostfs.hpp"
#include "qos/runtime.hpp"
#include "qos/trace.hpp"

namespace qos {

// A generated scenario: the replayable trace, the application image
// manifest, a launch spec (mode left to the caller), and the host files the
// run expects to exist.
struct Workload {
    Trace trace;
    ImageManifest manifest;
    LaunchSpec spec;
    std::vector<std::pair<std::string, uint64_t>> fixture; // path -> size
};

std::vector<std::string> workload_profiles();

// Deterministic for a given (profile, seed). Throws std::invalid_argument
// on an unknown profile.
Workload generate_workload(const std::string& profile, uint64_t seed);

void apply_fixture(HostFs& fs, const Workload& w);

// Closed-form message count for the launch phase: one launch request plus,
// for remote launches, the per-image transfer cost (one bulk message when
// the image fits a big slot, inline chunks otherwise).
uint64_t estimate_startup(const ImageManifest& manifest, LaunchMode mode,
                          const ChannelConfig& channel = {});

} // namespace qos
