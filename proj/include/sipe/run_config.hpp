#pragma once

// Plain-text run configuration: one `key = value` per line, '#' starts a
// comment. Recognised keys:
//
//   epochs, batch_size, warmup_epochs, seed       non-negative integers
//   lr_backbone, lr_new, momentum, weight_decay,
//   poly_power, alpha                             reals
//   flip, ipe, gsc, bpm                           true/false
//   feature                                       semantic | hierarchical

#include <charconv>
#include <map>
#include <stdexcept>
#include <string>

#include "sipe/train.hpp"

namespace sipe {

struct RunConfig {
    TrainConfig train;
    ModelOptions model;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size()) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
    double out = 0;
    auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size()) throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
    return out;
}

inline bool parse_flag(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument(key + ": expected true or false, got '" + v + "'");
}

}  // namespace detail

inline FeatureChoice parse_feature(const std::string& v) {
    if (v == "semantic") return FeatureChoice::Semantic;
    if (v == "hierarchical") return FeatureChoice::Hierarchical;
    throw std::invalid_argument("feature: expected semantic or hierarchical, got '" + v + "'");
}

/// Apply one setting; throws std::invalid_argument on unknown keys or bad values.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
    using namespace detail;
    TrainConfig& t = rc.train;
    ModelOptions& m = rc.model;
    if (key == "epochs") t.epochs = parse_count(key, value);
    else if (key == "batch_size") t.batch_size = parse_count(key, value);
    else if (key == "warmup_epochs") t.warmup_epochs = parse_count(key, value);
    else if (key == "seed") t.seed = parse_count(key, value);
    else if (key == "lr_backbone") t.lr_backbone = parse_real(key, value);
    else if (key == "lr_new") t.lr_new = parse_real(key, value);
    else if (key == "momentum") t.momentum = parse_real(key, value);
    else if (key == "weight_decay") t.weight_decay = parse_real(key, value);
    else if (key == "poly_power") t.poly_power = parse_real(key, value);
    else if (key == "alpha") m.alpha = parse_real(key, value);
    else if (key == "flip") t.flip = parse_flag(key, value);
    else if (key == "ipe") m.use_ipe = parse_flag(key, value);
    else if (key == "gsc") m.use_gsc = parse_flag(key, value);
    else if (key == "bpm") m.background_prototype = parse_flag(key, value);
    else if (key == "feature") m.feature = parse_feature(value);
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

/// Parse config text onto `rc`; `source` names the file in error messages.
inline void parse_run_config(RunConfig& rc, const std::string& text, const std::string& source) {
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        try {
            apply_setting(rc, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

/// Inverse of parse_run_config for every key, in a fixed order.
inline std::map<std::string, std::string> describe(const RunConfig& rc) {
    auto real = [](double v) {
        char buf[32];
        auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, end);
    };
    auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
    const TrainConfig& t = rc.train;
    const ModelOptions& m = rc.model;
    return {{"epochs", std::to_string(t.epochs)},
            {"batch_size", std::to_string(t.batch_size)},
            {"warmup_epochs", std::to_string(t.warmup_epochs)},
            {"seed", std::to_string(t.seed)},
            {"lr_backbone", real(t.lr_backbone)},
            {"lr_new", real(t.lr_new)},
            {"momentum", real(t.momentum)},
            {"weight_decay", real(t.weight_decay)},
            {"poly_power", real(t.poly_power)},
            {"alpha", real(m.alpha)},
            {"flip", flag(t.flip)},
            {"ipe", flag(m.use_ipe)},
            {"gsc", flag(m.use_gsc)},
            {"bpm", flag(m.background_prototype)},
            {"feature", to_string(m.feature)}};
}

}  // namespace sipe
