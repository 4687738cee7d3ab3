#pragma once

// Structure-aware seed locating. Each pixel's correlation structure (its
// rectified cosine similarity to every other pixel of the semantic feature)
// is compared with every candidate localization map through a soft IoU; the
// pixel is seeded with the best-matching class.

#include <cstdint>

#include "sipe/cam.hpp"

namespace sipe {

inline constexpr double kNormEpsilon = 1e-12;

/// One-hot [K+1,H,W] class assignment plus the per-pixel class index.
struct SeedMask {
    Tensor onehot;
    std::vector<std::uint8_t> labels;
    std::size_t height = 0, width = 0;

    std::size_t num_channels() const { return onehot.shape()[0]; }
    std::size_t count(std::size_t cls) const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(cls)));
    }
};

/// Rectified cosine, clamped to [0,1]; zero when either norm is below eps.
inline double rectified_cosine(double dot, double norm_a, double norm_b) {
    if (norm_a <= kNormEpsilon || norm_b <= kNormEpsilon) return 0.0;
    double c = dot / (norm_a * norm_b);
    return c > 1.0 ? 1.0 : (c > 0.0 ? c : 0.0);
}

namespace detail {

inline std::vector<double> pixel_norms(const Tensor& features) {
    const std::size_t C = features.shape()[0], P = features.shape()[1] * features.shape()[2];
    std::vector<double> norms(P);
    for (std::size_t j = 0; j < P; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < C; ++c) acc += features[c * P + j] * features[c * P + j];
        norms[j] = std::sqrt(acc);
    }
    return norms;
}

inline void structure_row(const Tensor& features, const std::vector<double>& norms, std::size_t i,
                          std::span<double> out) {
    const std::size_t C = features.shape()[0], P = norms.size();
    for (std::size_t j = 0; j < P; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += features[c * P + i] * features[c * P + j];
        out[j] = rectified_cosine(dot, norms[i], norms[j]);
    }
}

}  // namespace detail

/// S^i: correlation of pixel `i` (row-major index) with every pixel.
inline Tensor structure_map(std::size_t pixel, const Tensor& semantic) {
    if (semantic.rank() != 3) throw std::invalid_argument("structure_map: expected [C,H,W], got " + shape_str(semantic.shape()));
    const std::size_t H = semantic.shape()[1], W = semantic.shape()[2];
    if (pixel >= H * W) throw std::out_of_range("structure_map: pixel index out of range");
    Tensor out({H, W});
    detail::structure_row(semantic, detail::pixel_norms(semantic), pixel, out.mutable_data());
    return out;
}

/// Soft IoU  sum(M S) / sum(M + S - M S); 0 when the denominator is 0.
inline double structure_similarity(std::span<const double> structure, std::span<const double> map) {
    if (structure.size() != map.size()) throw std::invalid_argument("structure_similarity: size mismatch");
    double num = 0, den = 0;
    for (std::size_t j = 0; j < map.size(); ++j) {
        const double m = map[j], s = structure[j];
        if (!(m >= 0.0 && m <= 1.0) || !(s >= 0.0 && s <= 1.0)) {
            throw std::domain_error("structure_similarity: value outside [0,1] at pixel " + std::to_string(j));
        }
        num += m * s;
        den += m + s - m * s;
    }
    return den > 0 ? num / den : 0.0;
}

inline double structure_similarity(const Tensor& structure, const Tensor& map) {
    return structure_similarity(structure.data(), map.data());
}

inline std::vector<std::size_t> present_channels(const Tensor& y) {
    std::vector<std::size_t> channels{0};
    for (std::size_t k = 0; k < y.size(); ++k)
        if (y[k] > 0.5) channels.push_back(k + 1);
    return channels;
}

/// Seed every pixel with argmax over {background} ∪ {present classes} of the
/// structure similarity; ties go to the lower channel index.
inline SeedMask locate(const Tensor& semantic, const Tensor& maps, const Tensor& y) {
    if (semantic.rank() != 3 || maps.rank() != 3) throw std::invalid_argument("locate: expected rank-3 inputs");
    const std::size_t H = semantic.shape()[1], W = semantic.shape()[2], P = H * W;
    if (maps.shape()[1] != H || maps.shape()[2] != W) {
        throw std::invalid_argument("locate: map grid " + shape_str(maps.shape()) + " differs from feature grid " +
                                    shape_str(semantic.shape()));
    }
    const std::size_t channels = maps.shape()[0];
    if (y.size() + 1 != channels) throw std::invalid_argument("locate: label size does not match map channels");
    auto candidates = present_channels(y);
    if (candidates.size() < 2) throw std::invalid_argument("locate: image has no foreground label");

    SeedMask seeds{Tensor({channels, H, W}), std::vector<std::uint8_t>(P, 0), H, W};
    auto norms = detail::pixel_norms(semantic);
    std::vector<double> row(P);
    for (std::size_t i = 0; i < P; ++i) {
        detail::structure_row(semantic, norms, i, row);
        std::size_t best = candidates[0];
        double best_score = -1;
        for (std::size_t k : candidates) {
            double score = structure_similarity(row, maps.data().subspan(k * P, P));
            if (score > best_score) {
                best_score = score;
                best = k;
            }
        }
        seeds.labels[i] = static_cast<std::uint8_t>(best);
        seeds.onehot[best * P + i] = 1.0;
    }
    return seeds;
}

inline SeedMask locate(const Tensor& semantic, const LocMaps& maps, const Tensor& y) {
    if (maps.kind != MapKind::GeneralCam) throw std::invalid_argument("locate: seeds are matched against general CAMs");
    return locate(semantic, maps.maps.value(), y);
}

/// Seed mask from a label image over the same grid.
inline SeedMask seeds_from_labels(std::vector<std::uint8_t> labels, std::size_t channels, std::size_t H,
                                  std::size_t W) {
    SeedMask s{Tensor({channels, H, W}), std::move(labels), H, W};
    for (std::size_t i = 0; i < H * W; ++i) {
        if (s.labels[i] >= channels) throw std::out_of_range("seeds_from_labels: class index out of range");
        s.onehot[s.labels[i] * H * W + i] = 1.0;
    }
    return s;
}

}  // namespace sipe
