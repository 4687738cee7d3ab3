#pragma once

#include "sipe/autodiff.hpp"

namespace sipe {

inline constexpr double kCamEpsilon = 1e-5;
inline constexpr double kBackgroundAttenuation = 0.5;

enum class MapKind { GeneralCam, ImageSpecific };

inline const char* to_string(MapKind k) { return k == MapKind::GeneralCam ? "general-CAM" : "IS-CAM"; }

/// Localization maps [K+1, H, W]: channel 0 is background, channel k is
/// foreground class k (1-based, dataset order).
struct LocMaps {
    Var maps;
    MapKind kind = MapKind::GeneralCam;

    std::size_t num_classes() const { return maps.shape()[0] - 1; }
};

/// Class scores θ_k · F_s(j) for every pixel, before any rectification.
inline Var class_scores(Var semantic, Var classifier) {
    const Shape& fs = semantic.shape();
    const Shape& th = classifier.shape();
    if (fs.size() != 3 || th.size() != 2 || th[1] != fs[0]) {
        throw std::invalid_argument("class_scores: classifier " + shape_str(th) + " incompatible with features " +
                                    shape_str(fs));
    }
    Var flat = reshape(semantic, {fs[0], fs[1] * fs[2]});
    return reshape(matmul(classifier, flat), {th[0], fs[1], fs[2]});
}

inline Var raw_cam(Var semantic, Var classifier) { return relu(class_scores(semantic, classifier)); }

/// Per-channel division by max(channel max, eps). The divisor is a
/// stop-gradient quantity.
inline Var normalize_cam(Var raw, double eps = kCamEpsilon) {
    const Shape& s = raw.shape();
    if (s.size() != 3) throw std::invalid_argument("normalize_cam: expected [K,H,W], got " + shape_str(s));
    Var peak = reshape(max(raw, {1, 2}), {s[0], 1, 1});
    Var divisor = maximum(raw.tape()->detach(expand(peak, s)), eps);
    return div(raw, divisor);
}

/// M_b = alpha * (1 - max_k M_k), shape [1,H,W].
inline Var background_map(Var foreground, double alpha = kBackgroundAttenuation) {
    const Shape& s = foreground.shape();
    if (s.size() != 3) throw std::invalid_argument("background_map: expected [K,H,W], got " + shape_str(s));
    if (s[0] == 0) throw std::invalid_argument("background_map: no foreground channels");
    Var peak = reshape(max(foreground, {0}), {1, s[1], s[2]});
    return add(mul(peak, -alpha), alpha);
}

/// Image-level logits: spatial mean of the unrectified class scores.
inline Var cam_logits(Var scores) {
    if (scores.shape().size() != 3) throw std::invalid_argument("cam_logits: expected [K,H,W]");
    return mean(scores, {1, 2});
}

/// Zero the channels of classes absent from the multi-hot label `y`.
inline Var mask_channels(Var maps, const Tensor& y) {
    const Shape& s = maps.shape();
    if (y.size() != s[0]) {
        throw std::invalid_argument("mask_channels: label of size " + std::to_string(y.size()) + " for " +
                                    shape_str(s));
    }
    Var m = maps.tape()->constant(y.reshaped({s[0], 1, 1}));
    return mul(maps, expand(m, s));
}

inline LocMaps assemble(Var background, Var foreground, MapKind kind = MapKind::GeneralCam) {
    return {concat({background, foreground}), kind};
}

struct CamOutput {
    Var scores;  // [K,H,W]
    Var logits;  // [K]
    LocMaps maps;
};

/// Full general-CAM stack for one image: normalized foreground maps of the
/// labelled classes (absent classes zeroed) plus the attenuated background.
inline CamOutput general_cam(Var semantic, Var classifier, const Tensor& y, double alpha = kBackgroundAttenuation) {
    Var scores = class_scores(semantic, classifier);
    Var fg = mask_channels(normalize_cam(relu(scores)), y);
    return {scores, cam_logits(scores), assemble(background_map(fg, alpha), fg)};
}

}  // namespace sipe
