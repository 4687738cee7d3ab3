#pragma once

// Synthetic multi-label shapes dataset.
//
// Each 64x64 image holds 1-3 shapes of distinct classes
// (1 circle, 2 square, 3 triangle, 4 cross, 5 ring) over a two-tone noise
// background. A shape is painted in its class hue (jittered by up to 0.05)
// except for a small disc-shaped sub-part carrying a class-specific striped
// marker texture. Every random draw comes from SplitMix64 seeded with
// mix(seed) XOR index, so a sample depends only on (seed, index).

#include <array>
#include <charconv>
#include <cstdio>
#include <numbers>
#include <optional>

#include "sipe/image_io.hpp"
#include "sipe/rng.hpp"
#include "sipe/tensor.hpp"

namespace sipe {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Per-pixel class indices, row-major.
struct LabelImage {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;

    LabelImage() = default;
    LabelImage(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w, fill) {}

    std::uint8_t operator()(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    std::uint8_t& operator()(std::size_t y, std::size_t x) { return pixels[y * width + x]; }

    friend bool operator==(const LabelImage&, const LabelImage&) = default;
};

/// Nearest-neighbour resize of a label image (integer scale factors exact).
inline LabelImage upsample_nearest(const LabelImage& in, std::size_t H, std::size_t W) {
    LabelImage out(H, W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) out(y, x) = in(y * in.height / H, x * in.width / W);
    return out;
}

struct Sample {
    std::string name;
    Tensor image;  // [3,H,W] in [0,1], multiples of 1/255
    Tensor labels;  // multi-hot [K]
    std::optional<LabelImage> mask;
};

struct DatasetSpec {
    std::size_t num_classes = 5;
    std::size_t size = 64;
    std::size_t min_label_pixels = 16;
};

namespace detail {

struct Rgb {
    double r, g, b;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    double hh = h * 6.0;
    int i = static_cast<int>(hh) % 6;
    double f = hh - std::floor(hh);
    double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

inline double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

/// Shape membership of point (dx, dy) relative to the centre, radius r.
inline bool inside_shape(std::size_t cls, double dx, double dy, double r) {
    switch (cls) {
        case 1: return dx * dx + dy * dy <= r * r;
        case 2: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
        case 3: {
            // upward triangle with apex at -r and base at +0.8r
            double top = -r, bottom = 0.8 * r;
            if (dy < top || dy > bottom) return false;
            double half = (dy - top) / (bottom - top) * r;
            return std::abs(dx) <= half;
        }
        case 4: return (std::abs(dx) <= 0.33 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.33 * r && std::abs(dx) <= r);
        case 5: {
            double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.45 * 0.45 * r * r;
        }
        default: return false;
    }
}

}  // namespace detail

inline Sample generate_sample(std::uint64_t seed, std::size_t index, const DatasetSpec& spec = {}) {
    const std::size_t N = spec.size, K = spec.num_classes;
    SplitMix64 rng(SplitMix64::mix(seed) ^ static_cast<std::uint64_t>(index));
    Sample s;
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu", index);
    s.name = name;

    // background: two desaturated tones on a 4x4-cell random pattern
    double bg_hue = rng.uniform();
    double bg_val = rng.uniform(0.35, 0.65);
    detail::Rgb tone_a = detail::hsv_to_rgb(bg_hue, rng.uniform(0.0, 0.2), bg_val);
    detail::Rgb tone_b = detail::hsv_to_rgb(bg_hue + rng.uniform(-0.1, 0.1), rng.uniform(0.0, 0.2),
                                            bg_val + rng.uniform(-0.2, 0.2));
    std::vector<detail::Rgb> rgb(N * N);
    const std::size_t cells = (N + 3) / 4;
    std::vector<bool> cell_tone(cells * cells);
    for (std::size_t i = 0; i < cell_tone.size(); ++i) cell_tone[i] = rng.uniform() < 0.5;
    for (std::size_t y = 0; y < N; ++y)
        for (std::size_t x = 0; x < N; ++x) {
            detail::Rgb base = cell_tone[(y / 4) * cells + x / 4] ? tone_a : tone_b;
            double n = rng.uniform(-0.04, 0.04);
            rgb[y * N + x] = {base.r + n, base.g + n, base.b + n};
        }

    LabelImage mask(N, N, 0);
    const std::size_t count = 1 + rng.below(3);
    std::vector<std::size_t> classes;
    while (classes.size() < std::min(count, K)) {
        std::size_t c = 1 + rng.below(K);
        if (std::find(classes.begin(), classes.end(), c) == classes.end()) classes.push_back(c);
    }
    std::vector<std::array<double, 3>> placed;  // cx, cy, r
    for (std::size_t cls : classes) {
        const double r = rng.uniform(13.0, 19.0);
        double cx = 0, cy = 0;
        // rejection-sample a centre that keeps shapes mostly apart
        for (int attempt = 0; attempt < 64; ++attempt) {
            cx = rng.uniform(r, static_cast<double>(N) - 1 - r);
            cy = rng.uniform(r, static_cast<double>(N) - 1 - r);
            bool clear = true;
            for (const auto& q : placed)
                if (std::hypot(cx - q[0], cy - q[1]) < 0.8 * (r + q[2])) clear = false;
            if (clear) break;
        }
        placed.push_back({cx, cy, r});
        const double hue = static_cast<double>(cls - 1) / static_cast<double>(K) + rng.uniform(-0.05, 0.05);
        const detail::Rgb body = detail::hsv_to_rgb(hue, 0.4, rng.uniform(0.6, 0.8));
        const detail::Rgb vivid = detail::hsv_to_rgb(hue, 1.0, 1.0);
        // discriminative part: disc of radius ~0.4r around a point inside the shape
        double px = cx, py = cy;
        for (int attempt = 0; attempt < 32; ++attempt) {
            double ang = rng.uniform(0.0, 2 * std::numbers::pi);
            double dist = rng.uniform(0.35, 0.6) * r;
            double qx = std::cos(ang) * dist, qy = std::sin(ang) * dist;
            if (detail::inside_shape(cls, qx, qy, r)) {
                px = cx + qx;
                py = cy + qy;
                break;
            }
        }
        const double part_r = 0.45 * r;
        const double stripe_angle = static_cast<double>(cls - 1) * std::numbers::pi / static_cast<double>(K);
        const double ca = std::cos(stripe_angle), sa = std::sin(stripe_angle);
        for (std::size_t y = 0; y < N; ++y)
            for (std::size_t x = 0; x < N; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                if (!detail::inside_shape(cls, dx, dy, r)) continue;
                mask(y, x) = static_cast<std::uint8_t>(cls);
                const double ex = static_cast<double>(x) - px, ey = static_cast<double>(y) - py;
                detail::Rgb c = body;
                if (ex * ex + ey * ey <= part_r * part_r) {
                    double phase = static_cast<double>(x) * ca + static_cast<double>(y) * sa;
                    bool bright = std::fmod(std::abs(phase), 4.0) < 2.0;
                    c = bright ? vivid : detail::Rgb{vivid.r * 0.15, vivid.g * 0.15, vivid.b * 0.15};
                }
                double n = rng.uniform(-0.03, 0.03);
                rgb[y * N + x] = {c.r + n, c.g + n, c.b + n};
            }
    }

    s.image = Tensor({3, N, N});
    for (std::size_t i = 0; i < N * N; ++i) {
        s.image[i] = detail::quantize(rgb[i].r);
        s.image[N * N + i] = detail::quantize(rgb[i].g);
        s.image[2 * N * N + i] = detail::quantize(rgb[i].b);
    }
    s.labels = Tensor({K});
    for (std::size_t k = 1; k <= K; ++k) {
        auto n = static_cast<std::size_t>(std::count(mask.pixels.begin(), mask.pixels.end(), static_cast<std::uint8_t>(k)));
        s.labels[k - 1] = n >= spec.min_label_pixels ? 1.0 : 0.0;
    }
    s.mask = std::move(mask);
    return s;
}

inline std::vector<Sample> generate_dataset(std::size_t n, std::uint64_t seed, const DatasetSpec& spec = {}) {
    if (n == 0) throw std::invalid_argument("generate_dataset: n must be at least 1");
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(seed, i, spec));
    return out;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/labels.csv ("file,labels" header, one row per image
// with the multi-hot label as a decimal bitmask, bit k-1 = class k), and per
// sample <name>.ppm (image) and <name>.pgm (ground-truth mask, optional).

/// Network input: pixel values centred on 0.5 and scaled by 4, applied
/// before every forward pass in training and inference.
inline constexpr double kInputMean = 0.5;
inline constexpr double kInputScale = 4.0;

inline Tensor standardize_image(const Tensor& image) {
    Tensor out = image;
    for (auto& v : out.mutable_data()) v = (v - kInputMean) * kInputScale;
    return out;
}

inline std::uint64_t labels_to_bitmask(const Tensor& y) {
    std::uint64_t bits = 0;
    for (std::size_t k = 0; k < y.size(); ++k)
        if (y[k] > 0.5) bits |= std::uint64_t{1} << k;
    return bits;
}

inline Tensor bitmask_to_labels(std::uint64_t bits, std::size_t K) {
    Tensor y({K});
    for (std::size_t k = 0; k < K; ++k) y[k] = (bits >> k) & 1u ? 1.0 : 0.0;
    return y;
}

/// Accepts decimal or 0b-prefixed binary.
inline std::uint64_t parse_bitmask(std::string_view text) {
    int base = 10;
    if (text.size() > 2 && text[0] == '0' && (text[1] == 'b' || text[1] == 'B')) {
        text.remove_prefix(2);
        base = 2;
    }
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v, base);
    if (ec != std::errc() || ptr != text.data() + text.size()) throw std::invalid_argument("bad label bitmask '" + std::string(text) + "'");
    return v;
}

inline RasterImage image_to_raster(const Tensor& image) {
    const std::size_t H = image.shape()[1], W = image.shape()[2];
    RasterImage r{W, H, 3, std::vector<std::uint8_t>(W * H * 3)};
    for (std::size_t i = 0; i < W * H; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            r.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(image[c * W * H + i], 0.0, 1.0) * 255.0));
    return r;
}

inline Tensor raster_to_image(const RasterImage& r) {
    Tensor t({3, r.height, r.width});
    const std::size_t P = r.width * r.height;
    for (std::size_t i = 0; i < P; ++i)
        for (std::size_t c = 0; c < 3; ++c) t[c * P + i] = r.pixels[i * 3 + c] / 255.0;
    return t;
}

inline RasterImage labels_to_raster(const LabelImage& m) { return {m.width, m.height, 1, m.pixels}; }

inline LabelImage raster_to_labels(const RasterImage& r) {
    LabelImage m(r.height, r.width);
    m.pixels = r.pixels;
    return m;
}

inline void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
    std::filesystem::create_directories(dir);
    std::string csv = "file,labels\n";
    for (const Sample& s : samples) {
        write_pnm(dir / (s.name + ".ppm"), image_to_raster(s.image));
        if (s.mask) write_pnm(dir / (s.name + ".pgm"), labels_to_raster(*s.mask));
        csv += s.name + ".ppm," + std::to_string(labels_to_bitmask(s.labels)) + "\n";
    }
    write_file_atomic(dir / "labels.csv", csv);
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& dir, std::size_t num_classes = 5) {
    const auto csv_path = dir / "labels.csv";
    std::istringstream csv(read_file(csv_path));
    std::string line;
    std::size_t offset = 0;
    if (!std::getline(csv, line) || line != "file,labels") {
        throw std::runtime_error(csv_path.string() + ": expected header 'file,labels' at byte 0");
    }
    offset += line.size() + 1;
    std::vector<Sample> out;
    while (std::getline(csv, line)) {
        const std::size_t line_offset = offset;
        offset += line.size() + 1;
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw std::runtime_error(csv_path.string() + ": malformed row at byte " + std::to_string(line_offset));
        }
        std::string file = line.substr(0, comma);
        Sample s;
        try {
            s.labels = bitmask_to_labels(parse_bitmask(line.substr(comma + 1)), num_classes);
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(csv_path.string() + ": " + e.what() + " at byte " + std::to_string(line_offset + comma + 1));
        }
        s.name = std::filesystem::path(file).stem().string();
        s.image = raster_to_image(read_pnm(dir / file));
        auto mask_path = dir / (s.name + ".pgm");
        if (std::filesystem::exists(mask_path)) {
            RasterImage m = read_pnm(mask_path);
            if (m.channels != 1 || m.width != s.image.shape()[2] || m.height != s.image.shape()[1]) {
                throw std::runtime_error(mask_path.string() + ": mask does not match image size at byte 0");
            }
            s.mask = raster_to_labels(m);
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw std::runtime_error(csv_path.string() + ": no samples");
    return out;
}

}  // namespace sipe
