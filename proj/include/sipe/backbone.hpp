#pragma once

// Four-stage convolutional feature extractor with a hierarchical side branch.
//
//   stage s:  3x3 conv (+bias) -> ReLU, strides (1, 2, 2, 2) by default
//   F_s    :  stage-4 output
//   F_h    :  concat_s resize(1x1 lateral_s(stage s), grid of F_s)

#include <array>
#include <fstream>
#include <map>

#include "sipe/autodiff.hpp"
#include "sipe/rng.hpp"

namespace sipe {

struct BackboneConfig {
    std::size_t in_channels = 3;
    std::array<std::size_t, 4> widths{16, 32, 64, 128};
    std::array<std::size_t, 4> strides{1, 2, 2, 2};
    std::size_t lateral_width = 16;
    std::size_t num_classes = 5;

    std::size_t total_stride() const { return strides[0] * strides[1] * strides[2] * strides[3]; }
    std::size_t semantic_channels() const { return widths[3]; }
    std::size_t hierarchical_channels() const { return 4 * lateral_width; }

    void validate() const {
        if (in_channels == 0 || lateral_width == 0 || num_classes == 0)
            throw std::invalid_argument("BackboneConfig: channel counts must be positive");
        for (std::size_t i = 0; i < 4; ++i) {
            if (widths[i] == 0) throw std::invalid_argument("BackboneConfig: stage widths must be positive");
            if (strides[i] != 1 && strides[i] != 2) throw std::invalid_argument("BackboneConfig: strides must be 1 or 2");
        }
    }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Named parameter tensors in a fixed order:
/// stage{1..4}.weight, stage{1..4}.bias, lateral{1..4}.weight, classifier.weight.
struct BackboneParams {
    BackboneConfig config;
    std::array<Tensor, 4> stage_weight;
    std::array<Tensor, 4> stage_bias;
    std::array<Tensor, 4> lateral_weight;
    Tensor classifier;  // [K, C_s], no bias

    static std::vector<std::string> names() {
        std::vector<std::string> n;
        for (int i = 1; i <= 4; ++i) n.push_back("stage" + std::to_string(i) + ".weight");
        for (int i = 1; i <= 4; ++i) n.push_back("stage" + std::to_string(i) + ".bias");
        for (int i = 1; i <= 4; ++i) n.push_back("lateral" + std::to_string(i) + ".weight");
        n.push_back("classifier.weight");
        return n;
    }

    std::vector<const Tensor*> tensors() const {
        std::vector<const Tensor*> t;
        for (auto& w : stage_weight) t.push_back(&w);
        for (auto& b : stage_bias) t.push_back(&b);
        for (auto& l : lateral_weight) t.push_back(&l);
        t.push_back(&classifier);
        return t;
    }

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> t;
        for (auto& w : stage_weight) t.push_back(&w);
        for (auto& b : stage_bias) t.push_back(&b);
        for (auto& l : lateral_weight) t.push_back(&l);
        t.push_back(&classifier);
        return t;
    }

    /// True for layers that do not exist in a plain classification network
    /// (lateral projections and the classifier); they get the larger rate.
    static bool is_new_layer(std::size_t index) { return index >= 8; }

    friend bool operator==(const BackboneParams& a, const BackboneParams& b) {
        if (!(a.config == b.config)) return false;
        auto ta = a.tensors();
        auto tb = b.tensors();
        for (std::size_t i = 0; i < ta.size(); ++i)
            if (!(*ta[i] == *tb[i])) return false;
        return true;
    }
};

/// Kaiming-style uniform bound for a layer with the given fan-in.
inline double kaiming_uniform_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

inline BackboneParams init_backbone(std::uint64_t seed, const BackboneConfig& config) {
    config.validate();
    SplitMix64 rng(seed);
    auto uniform_tensor = [&](Shape shape, std::size_t fan_in) {
        Tensor t(std::move(shape));
        const double bound = kaiming_uniform_bound(fan_in);
        for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
        return t;
    };
    BackboneParams p;
    p.config = config;
    std::size_t in = config.in_channels;
    for (std::size_t s = 0; s < 4; ++s) {
        p.stage_weight[s] = uniform_tensor({config.widths[s], in, 3, 3}, in * 9);
        p.stage_bias[s] = Tensor({config.widths[s]}, 0.0);
        in = config.widths[s];
    }
    for (std::size_t s = 0; s < 4; ++s)
        p.lateral_weight[s] = uniform_tensor({config.lateral_width, config.widths[s], 1, 1}, config.widths[s]);
    p.classifier = uniform_tensor({config.num_classes, config.semantic_channels()}, config.semantic_channels());
    return p;
}

/// Parameters placed on a tape, in BackboneParams::names() order.
struct BackboneVars {
    BackboneConfig config;
    std::vector<Var> all;

    Var stage_weight(std::size_t s) const { return all[s]; }
    Var stage_bias(std::size_t s) const { return all[4 + s]; }
    Var lateral_weight(std::size_t s) const { return all[8 + s]; }
    Var classifier() const { return all[12]; }
};

inline BackboneVars place(Tape& tape, const BackboneParams& params, bool track) {
    BackboneVars v{params.config, {}};
    for (const Tensor* t : params.tensors()) v.all.push_back(track ? tape.leaf(*t) : tape.constant(*t));
    return v;
}

struct FeatureBundle {
    Var semantic;      // F_s [C_s, H, W]
    Var hierarchical;  // F_h [4 * lateral, H, W]
};

inline FeatureBundle forward(const Var& image, const BackboneVars& params) {
    const BackboneConfig& cfg = params.config;
    const Shape& s = image.shape();
    if (s.size() != 3 || s[0] != cfg.in_channels) {
        throw std::invalid_argument("backbone: image must be [" + std::to_string(cfg.in_channels) + ",H,W], got " +
                                    shape_str(s));
    }
    const std::size_t stride = cfg.total_stride();
    if (s[1] == 0 || s[2] == 0 || s[1] % stride != 0 || s[2] % stride != 0) {
        throw std::invalid_argument("backbone: input " + shape_str(s) + " not divisible by total stride " +
                                    std::to_string(stride));
    }
    std::array<Var, 4> stages;
    Var x = image;
    for (std::size_t i = 0; i < 4; ++i) {
        x = relu(conv2d(x, params.stage_weight(i), params.stage_bias(i), cfg.strides[i], 1));
        stages[i] = x;
    }
    const std::size_t H = x.shape()[1], W = x.shape()[2];
    std::vector<Var> laterals;
    for (std::size_t i = 0; i < 4; ++i)
        laterals.push_back(resize_bilinear(conv2d(stages[i], params.lateral_weight(i), 1, 0), H, W));
    return {stages[3], concat(laterals)};
}

// ---------------------------------------------------------------------------
// Checkpoints: a text manifest followed by one TNSR record per parameter.
//
//   SIPE-CHECKPOINT 1
//   in_channels 3
//   widths 16 32 64 128
//   strides 1 2 2 2
//   lateral 16
//   classes 5
//   meta <key> <value>        (zero or more)
//   params 13
//   <name>                    (one line per parameter, fixed order)
//   end
//   <TNSR records>

struct Checkpoint {
    BackboneParams params;
    std::map<std::string, std::string> meta;
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    const BackboneConfig& c = ck.params.config;
    os << "SIPE-CHECKPOINT 1\n";
    os << "in_channels " << c.in_channels << "\n";
    os << "widths " << c.widths[0] << ' ' << c.widths[1] << ' ' << c.widths[2] << ' ' << c.widths[3] << "\n";
    os << "strides " << c.strides[0] << ' ' << c.strides[1] << ' ' << c.strides[2] << ' ' << c.strides[3] << "\n";
    os << "lateral " << c.lateral_width << "\n";
    os << "classes " << c.num_classes << "\n";
    for (const auto& [k, v] : ck.meta) os << "meta " << k << ' ' << v << "\n";
    auto names = BackboneParams::names();
    os << "params " << names.size() << "\n";
    for (const auto& n : names) os << n << "\n";
    os << "end\n";
    for (const Tensor* t : ck.params.tensors()) write_tnsr(os, *t);
    if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& source = "checkpoint") {
    auto fail = [&](const std::string& msg) -> std::runtime_error {
        return std::runtime_error(source + ": " + msg + " (byte " + std::to_string(static_cast<long long>(is.tellg())) + ")");
    };
    std::string line;
    if (!std::getline(is, line) || line != "SIPE-CHECKPOINT 1") throw fail("missing checkpoint header");
    Checkpoint ck;
    BackboneConfig& c = ck.params.config;
    std::vector<std::string> names;
    while (std::getline(is, line)) {
        if (line == "end") break;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "in_channels") ls >> c.in_channels;
        else if (key == "widths") ls >> c.widths[0] >> c.widths[1] >> c.widths[2] >> c.widths[3];
        else if (key == "strides") ls >> c.strides[0] >> c.strides[1] >> c.strides[2] >> c.strides[3];
        else if (key == "lateral") ls >> c.lateral_width;
        else if (key == "classes") ls >> c.num_classes;
        else if (key == "meta") {
            std::string k, v;
            ls >> k;
            std::getline(ls >> std::ws, v);
            ck.meta[k] = v;
        } else if (key == "params") {
            std::size_t n = 0;
            ls >> n;
            for (std::size_t i = 0; i < n; ++i) {
                if (!std::getline(is, line)) throw fail("truncated parameter manifest");
                names.push_back(line);
            }
            continue;
        } else {
            throw fail("unknown manifest key '" + key + "'");
        }
        if (ls.fail()) throw fail("malformed manifest line '" + line + "'");
    }
    if (line != "end") throw fail("manifest not terminated");
    if (names != BackboneParams::names()) throw fail("parameter manifest does not match the expected layout");
    c.validate();
    BackboneParams reference = init_backbone(0, c);
    auto slots = ck.params.tensors();
    auto shapes = reference.tensors();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        *slots[i] = read_tnsr(is);
        if (slots[i]->shape() != shapes[i]->shape()) {
            throw fail("parameter " + names[i] + " has shape " + shape_str(slots[i]->shape()) + ", expected " +
                       shape_str(shapes[i]->shape()));
        }
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    return read_checkpoint(in, path);
}

}  // namespace sipe
