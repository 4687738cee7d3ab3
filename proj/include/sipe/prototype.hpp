#pragma once

#include <ostream>

#include "sipe/seed.hpp"

namespace sipe {

enum class FeatureChoice { Semantic, Hierarchical };

inline const char* to_string(FeatureChoice f) { return f == FeatureChoice::Semantic ? "semantic" : "hierarchical"; }

/// Per-image class centroids [K+1, C]. Rows of classes absent from the
/// image are zero and flagged invalid.
struct Prototypes {
    Var vectors;
    std::vector<bool> valid;
    std::vector<bool> fallback;  // seed region was empty; argmax pixel used

    std::size_t num_channels() const { return valid.size(); }
};

/// Masked mean of `features` [C,H,W] over each class's seed pixels. A present
/// class without seed pixels takes the feature at the first argmax of its
/// channel in `fallback_maps` [K+1,H,W]; without fallback maps it is left
/// invalid. Seeds are constants: gradient reaches `features` only.
inline Prototypes extract_prototypes(Var features, const SeedMask& seeds, const Tensor& y,
                                     const Tensor* fallback_maps = nullptr) {
    const Shape& fs = features.shape();
    if (fs.size() != 3) throw std::invalid_argument("extract_prototypes: expected [C,H,W], got " + shape_str(fs));
    const std::size_t C = fs[0], H = fs[1], W = fs[2], P = H * W;
    if (seeds.height != H || seeds.width != W) throw std::invalid_argument("extract_prototypes: seed grid mismatch");
    const std::size_t channels = seeds.num_channels();
    if (y.size() + 1 != channels) throw std::invalid_argument("extract_prototypes: label size mismatch");
    if (fallback_maps && fallback_maps->shape() != Shape{channels, H, W}) {
        throw std::invalid_argument("extract_prototypes: fallback maps shape " + shape_str(fallback_maps->shape()));
    }

    Prototypes out;
    out.valid.assign(channels, false);
    out.fallback.assign(channels, false);
    Tensor weights({channels, P});
    Tensor counts({channels, C}, 1.0);
    for (std::size_t k = 0; k < channels; ++k) {
        if (k > 0 && y[k - 1] <= 0.5) continue;
        std::size_t n = 0;
        for (std::size_t j = 0; j < P; ++j) {
            if (seeds.labels[j] == k) {
                weights[k * P + j] = 1.0;
                ++n;
            }
        }
        if (n == 0) {
            if (!fallback_maps) continue;
            auto channel = fallback_maps->data().subspan(k * P, P);
            std::size_t arg = static_cast<std::size_t>(std::max_element(channel.begin(), channel.end()) - channel.begin());
            weights[k * P + arg] = 1.0;
            n = 1;
            out.fallback[k] = true;
        }
        out.valid[k] = true;
        for (std::size_t c = 0; c < C; ++c) counts[k * C + c] = static_cast<double>(n);
    }
    Tape& tape = *features.tape();
    Var sums = matmul(tape.constant(std::move(weights)), reshape(features, {C, P}), false, true);
    out.vectors = div(sums, tape.constant(std::move(counts)));
    return out;
}

namespace detail {

// min(ReLU(cos(F(j), P_k)), 1) for every valid prototype row; invalid rows
// are zero. Returns [K+1, H*W].
inline Var prototype_activations(Var features, const Prototypes& protos, const char* who) {
    const Shape& fs = features.shape();
    if (fs.size() != 3) throw std::invalid_argument(std::string(who) + ": expected [C,H,W], got " + shape_str(fs));
    const std::size_t C = fs[0], P = fs[1] * fs[2];
    const std::size_t K1 = protos.num_channels();
    if (protos.vectors.shape() != Shape{K1, C}) {
        throw std::invalid_argument(std::string(who) + ": prototypes " + shape_str(protos.vectors.shape()) +
                                    " for features " + shape_str(fs));
    }
    Tape& tape = *features.tape();
    Var unit_protos = l2_normalize(protos.vectors, 1, kNormEpsilon);
    Var unit_pixels = l2_normalize(reshape(features, {C, P}), 0, kNormEpsilon);
    Var act = minimum(relu(matmul(unit_protos, unit_pixels)), 1.0);
    Tensor mask({K1, P});
    for (std::size_t k = 0; k < K1; ++k)
        if (protos.valid[k])
            for (std::size_t j = 0; j < P; ++j) mask[k * P + j] = 1.0;
    return mul(act, tape.constant(std::move(mask)));
}

inline std::vector<std::size_t> foreground_rows(std::size_t channels) {
    std::vector<std::size_t> rows;
    for (std::size_t k = 1; k < channels; ++k) rows.push_back(k);
    return rows;
}

}  // namespace detail

/// Image-specific CAM: rectified cosine between each pixel feature and each
/// valid prototype. With `background_prototype` off the background channel
/// is instead estimated from the foreground channels as alpha * (1 - max).
inline LocMaps iscam(Var features, const Prototypes& protos, bool background_prototype = true,
                     double alpha = kBackgroundAttenuation) {
    const Shape& fs = features.shape();
    Var act = detail::prototype_activations(features, protos, "iscam");
    const std::size_t K1 = protos.num_channels();
    act = reshape(act, {K1, fs[1], fs[2]});
    if (background_prototype) return {act, MapKind::ImageSpecific};
    Var fg = select_rows(act, detail::foreground_rows(K1));
    return assemble(background_map(fg, alpha), fg, MapKind::ImageSpecific);
}

/// IS-CAM whose foreground channels come from `features` and whose
/// background channel comes from `background_features` with the background
/// row of `background_protos`. Both feature maps share one grid.
inline LocMaps iscam(Var features, const Prototypes& protos, Var background_features,
                     const Prototypes& background_protos) {
    const Shape& fs = features.shape();
    const Shape& bs = background_features.shape();
    if (bs.size() != 3 || fs.size() != 3 || bs[1] != fs[1] || bs[2] != fs[2]) {
        throw std::invalid_argument("iscam: feature grids " + shape_str(fs) + " and " + shape_str(bs) + " differ");
    }
    if (protos.num_channels() != background_protos.num_channels()) {
        throw std::invalid_argument("iscam: prototype channel counts differ");
    }
    const std::size_t K1 = protos.num_channels();
    Var fg = select_rows(detail::prototype_activations(features, protos, "iscam"), detail::foreground_rows(K1));
    Var bg = select_rows(detail::prototype_activations(background_features, background_protos, "iscam"), {0});
    return {reshape(concat({bg, fg}), {K1, fs[1], fs[2]}), MapKind::ImageSpecific};
}

/// Text sidecar for a prototype export: one "channel valid fallback" line each.
inline void write_prototype_flags(std::ostream& os, const Prototypes& p) {
    os << "channel valid fallback\n";
    for (std::size_t k = 0; k < p.num_channels(); ++k) os << k << ' ' << p.valid[k] << ' ' << p.fallback[k] << "\n";
}

}  // namespace sipe
