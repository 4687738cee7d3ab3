#pragma once

// Central-difference verification of the analytic gradient of L_total.

#include "sipe/train.hpp"

namespace sipe {

struct GradCheckGroup {
    std::string name;
    double rel_error = 0;  // |a - n|_2 / max(|a|_2 + |n|_2, 1e-300)
    double max_abs_error = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double loss = 0;

    double max_rel_error() const {
        double m = 0;
        for (const auto& g : groups) m = std::max(m, g.rel_error);
        return m;
    }
};

/// Compare analytic gradients against (f(p+h) - f(p-h)) / 2h for every
/// parameter entry. Stop-gradient quantities (CAM normalizers, seeds) are
/// frozen at their unperturbed values for the perturbed evaluations, so both
/// sides differentiate the same function. `tamper` may edit the analytic
/// gradients before comparison (negative controls).
inline GradCheckReport gradient_check(const BackboneParams& params, const Tensor& image, const Tensor& y,
                                      const ModelOptions& opt, double step = 1e-5,
                                      const std::function<void(std::vector<Tensor>&)>& tamper = {}) {
    LossBreakdown base = total_loss(params, image, y, opt, true);
    if (tamper) tamper(base.grads);
    GradCheckReport report;
    report.loss = base.total;
    auto names = BackboneParams::names();
    BackboneParams probe = params;
    auto slots = probe.tensors();
    for (std::size_t p = 0; p < slots.size(); ++p) {
        Tensor& t = *slots[p];
        double diff2 = 0, a2 = 0, n2 = 0, max_abs = 0;
        for (std::size_t e = 0; e < t.size(); ++e) {
            const double orig = t[e];
            t[e] = orig + step;
            double fp = total_loss(probe, image, y, opt, false, &base.stops).total;
            t[e] = orig - step;
            double fm = total_loss(probe, image, y, opt, false, &base.stops).total;
            t[e] = orig;
            double numeric = (fp - fm) / (2 * step);
            double analytic = base.grads[p][e];
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            max_abs = std::max(max_abs, std::abs(analytic - numeric));
        }
        double denom = std::max(std::sqrt(a2) + std::sqrt(n2), 1e-300);
        report.groups.push_back({names[p], std::sqrt(diff2) / denom, max_abs});
    }
    return report;
}

/// Small model used by the gradient check: 8x8 input, two classes, stage
/// strides (1,2,1,1) so the feature grid is 4x4.
inline BackboneConfig toy_backbone_config() {
    BackboneConfig c;
    c.widths = {4, 4, 6, 8};
    c.strides = {1, 2, 1, 1};
    c.lateral_width = 2;
    c.num_classes = 2;
    return c;
}

struct ToyProblem {
    BackboneParams params;
    Tensor image;
    Tensor labels;
};

inline ToyProblem make_toy_problem(std::uint64_t seed) {
    ToyProblem t;
    t.params = init_backbone(seed, toy_backbone_config());
    SplitMix64 rng(SplitMix64::mix(seed) ^ 0x70F);
    // random biases keep ReLU kinks away from exact zero crossings
    for (auto& b : t.params.stage_bias)
        for (auto& v : b.mutable_data()) v = rng.uniform(-0.1, 0.1);
    t.image = Tensor({3, 8, 8});
    for (auto& v : t.image.mutable_data()) v = rng.uniform();
    t.labels = Tensor({2});
    std::uint64_t pattern = 1 + rng.below(3);  // 01, 10 or 11
    t.labels[0] = pattern & 1u ? 1.0 : 0.0;
    t.labels[1] = pattern & 2u ? 1.0 : 0.0;
    return t;
}

}  // namespace sipe
