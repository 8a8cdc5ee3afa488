#include "qos/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qos {

std::string ChannelConfig::validate() const {
    if (normal_slot_count == 0)
        return "normal_slot_count must be positive";
    if (normal_slot_capacity < 2 ||
        (normal_slot_capacity & (normal_slot_capacity - 1)) != 0)
        return "normal_slot_capacity must be a power of two >= 2";
    if (normal_payload_max < 64)
        return "normal_payload_max must be >= 64";
    if (big_slot_count == 0)
        return "big_slot_count must be positive";
    if (big_slot_size < normal_payload_max)
        return "big_slot_size must be >= normal_payload_max";
    return {};
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return {};
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t r = std::stoull(v, &pos);
        if (pos != v.size())
            throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::runtime_error("config: bad integer for " + key + ": " + v);
    }
}

double to_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size())
            throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::runtime_error("config: bad number for " + key + ": " + v);
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1")
        return true;
    if (v == "off" || v == "false" || v == "0")
        return false;
    throw std::runtime_error("config: bad bool for " + key + ": " + v);
}

} // namespace

QosConfig parse_config(const std::string& text) {
    QosConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';')
            continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: expected key = value: " + line);
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));

        if (section == "channel") {
            auto& c = cfg.channel;
            if (key == "normal_slot_count")
                c.normal_slot_count = (uint32_t)to_u64(key, val);
            else if (key == "normal_slot_capacity")
                c.normal_slot_capacity = (uint32_t)to_u64(key, val);
            else if (key == "normal_payload_max")
                c.normal_payload_max = (uint32_t)to_u64(key, val);
            else if (key == "big_slot_count")
                c.big_slot_count = (uint32_t)to_u64(key, val);
            else if (key == "big_slot_size")
                c.big_slot_size = (uint32_t)to_u64(key, val);
        } else if (section == "gateway") {
            auto& g = cfg.gateway;
            if (key == "whitelist_root")
                g.whitelist_root = val;
            else if (key == "file_meta_rate")
                g.file_meta.rate_per_s = to_f64(key, val);
            else if (key == "file_meta_burst")
                g.file_meta.burst = to_f64(key, val);
            else if (key == "file_data_rate")
                g.file_data.rate_per_s = to_f64(key, val);
            else if (key == "file_data_burst")
                g.file_data.burst = to_f64(key, val);
            else if (key == "display_rate")
                g.display.rate_per_s = to_f64(key, val);
            else if (key == "display_burst")
                g.display.burst = to_f64(key, val);
            else if (key == "event_rate")
                g.event.rate_per_s = to_f64(key, val);
            else if (key == "event_burst")
                g.event.burst = to_f64(key, val);
            else if (key == "kill_window_us")
                g.kill_window_us = to_u64(key, val);
            else if (key == "drop_clipboard")
                g.drop_clipboard = to_bool(key, val);
        } else if (section == "optimizer") {
            auto& o = cfg.optimizer;
            if (key == "write_combine")
                o.write_combine = to_bool(key, val);
            else if (key == "read_batch")
                o.read_batch = to_bool(key, val);
            else if (key == "wc_byte_budget")
                o.wc_byte_budget = (uint32_t)to_u64(key, val);
            else if (key == "wc_age_budget_us")
                o.wc_age_budget_us = to_u64(key, val);
            else if (key == "wc_merge_distance")
                o.wc_merge_distance = (uint32_t)to_u64(key, val);
            else if (key == "rb_chunk_bytes")
                o.rb_chunk_bytes = (uint32_t)to_u64(key, val);
        } else if (section == "select") {
            auto& s = cfg.select;
            if (key == "initial_slice_us")
                s.initial_slice_us = to_u64(key, val);
            else if (key == "min_slice_us")
                s.min_slice_us = to_u64(key, val);
            else if (key == "max_slice_us")
                s.max_slice_us = to_u64(key, val);
            else if (key == "ewma_alpha")
                s.ewma_alpha = to_f64(key, val);
            else if (key == "grow_factor")
                s.grow_factor = to_f64(key, val);
            else if (key == "poll_slice_us")
                s.poll_slice_us = to_u64(key, val);
        }
        // unknown sections/keys are ignored
    }
    std::string err = cfg.channel.validate();
    if (!err.empty())
        throw std::runtime_error("config: " + err);
    return cfg;
}

QosConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

} // namespace qos
