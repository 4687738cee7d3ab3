#pragma once

// Training objective (multi-label classification + general/specific map
// consistency) and the momentum-SGD loop with poly learning-rate decay.

#include <functional>

#include "sipe/backbone.hpp"
#include "sipe/dataset.hpp"
#include "sipe/parallel.hpp"
#include "sipe/prototype.hpp"

namespace sipe {

struct ModelOptions {
    bool use_ipe = true;  // build image-specific maps
    bool use_gsc = true;  // add the consistency term while training
    FeatureChoice feature = FeatureChoice::Hierarchical;
    bool background_prototype = true;
    double alpha = kBackgroundAttenuation;

    bool trains_consistency() const { return use_ipe && use_gsc; }
};

/// Everything computed for one image on one tape.
struct ImageAnalysis {
    FeatureBundle features;
    CamOutput cam;
    std::optional<SeedMask> seeds;
    std::optional<Prototypes> prototypes;
    std::optional<Prototypes> background_prototypes;  // semantic feature with BPM only
    std::optional<LocMaps> specific;
};

/// Forward pass -> general CAM -> (seeds -> prototypes -> IS-CAM). Seeds
/// are computed from stop-gradient copies of F_s and the CAM stack.
inline ImageAnalysis analyze(const BackboneVars& params, Var image, const Tensor& y, const ModelOptions& opt,
                             bool with_specific) {
    Tape& tape = *image.tape();
    ImageAnalysis a;
    a.features = forward(image, params);
    a.cam = general_cam(a.features.semantic, params.classifier(), y, opt.alpha);
    if (!with_specific) return a;
    Tensor semantic = tape.detach(a.features.semantic).value();
    Tensor cam = tape.detach(a.cam.maps.maps).value();
    a.seeds = locate(semantic, cam, y);
    if (opt.feature == FeatureChoice::Hierarchical) {
        a.prototypes = extract_prototypes(a.features.hierarchical, *a.seeds, y, &cam);
        a.specific = iscam(a.features.hierarchical, *a.prototypes, opt.background_prototype, opt.alpha);
        return a;
    }
    a.prototypes = extract_prototypes(a.features.semantic, *a.seeds, y, &cam);
    if (!opt.background_prototype) {
        a.specific = iscam(a.features.semantic, *a.prototypes, false, opt.alpha);
        return a;
    }
    // the background prototype always lives on the hierarchical feature
    a.background_prototypes = extract_prototypes(a.features.hierarchical, *a.seeds, y, &cam);
    a.specific = iscam(a.features.semantic, *a.prototypes, a.features.hierarchical, *a.background_prototypes);
    return a;
}

/// Mean over classes of -[y log σ(x) + (1-y) log(1-σ(x))], evaluated as
/// softplus(x) - y x.
inline Var cls_loss(Var logits, const Tensor& y) {
    if (logits.shape() != Shape{y.size()}) {
        throw std::invalid_argument("cls_loss: logits " + shape_str(logits.shape()) + " vs labels " + shape_str(y.shape()));
    }
    Tape& tape = *logits.tape();
    return mean(sub(softplus(logits), mul(logits, tape.constant(y))));
}

/// Mean absolute difference between the two stacks over the background and
/// present-class channels.
inline Var gsc_loss(const LocMaps& general, const LocMaps& specific, const Tensor& y) {
    if (general.kind == specific.kind) {
        throw std::invalid_argument(std::string("gsc_loss: both stacks are ") + to_string(general.kind));
    }
    if (general.maps.shape() != specific.maps.shape()) {
        throw std::invalid_argument("gsc_loss: shape mismatch " + shape_str(general.maps.shape()) + " vs " +
                                    shape_str(specific.maps.shape()));
    }
    if (y.size() + 1 != general.maps.shape()[0]) throw std::invalid_argument("gsc_loss: label size mismatch");
    auto channels = present_channels(y);
    return mean(abs(sub(select_rows(general.maps, channels), select_rows(specific.maps, channels))));
}

struct LossBreakdown {
    double cls = 0, gsc = 0, total = 0;
    std::vector<Tensor> grads;  // BackboneParams::names() order; empty unless requested
    std::vector<Tensor> stops;  // stop-gradient values, for replay
};

/// L_total = L_cls (+ L_gsc when the options train consistency) for one image.
/// `replay` freezes the stop-gradient quantities to previously logged values.
inline LossBreakdown total_loss(const BackboneParams& params, const Tensor& image, const Tensor& y,
                                const ModelOptions& opt, bool want_grads = true,
                                const std::vector<Tensor>* replay = nullptr) {
    Tape tape;
    if (replay) tape.replay(*replay);
    BackboneVars vars = place(tape, params, want_grads);
    const bool consistency = opt.trains_consistency();
    ImageAnalysis a = analyze(vars, tape.constant(image), y, opt, consistency);
    Var cls = cls_loss(a.cam.logits, y);
    Var total = cls;
    LossBreakdown out;
    out.cls = cls.value().item();
    if (consistency) {
        Var gsc = gsc_loss(a.cam.maps, *a.specific, y);
        out.gsc = gsc.value().item();
        total = add(cls, gsc);
    }
    out.total = total.value().item();
    if (want_grads) out.grads = tape.grad(total, vars.all);
    out.stops = tape.stops();
    return out;
}

// ---------------------------------------------------------------------------
// Optimisation

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    double lr_backbone = 0.05;
    double lr_new = 0.5;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double poly_power = 0.9;
    std::size_t warmup_epochs = 3;  // leading epochs trained on L_cls alone
    std::uint64_t seed = 0;
    bool flip = true;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!(lr_backbone > 0) || !(lr_new > 0)) throw std::invalid_argument("TrainConfig: learning rates must be > 0");
        if (!(poly_power > 0)) throw std::invalid_argument("TrainConfig: poly_power must be > 0");
        if (momentum < 0 || weight_decay < 0) throw std::invalid_argument("TrainConfig: momentum and weight_decay must be >= 0");
        if (warmup_epochs > epochs) throw std::invalid_argument("TrainConfig: warmup_epochs must not exceed epochs");
    }
};

struct OptimState {
    std::vector<Tensor> velocity;
    std::size_t step = 0;
};

/// base * (1 - t/T)^power, reaching 0 at t = T.
inline double poly_lr(double base, std::size_t t, std::size_t total, double power) {
    if (total == 0 || t >= total) return 0.0;
    return base * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total), power);
}

/// v <- momentum v + (g + wd p);  p <- p - lr v
inline void sgd_update(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
                       double weight_decay) {
    if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
        throw std::invalid_argument("sgd_update: shape mismatch " + shape_str(param.shape()) + " / " +
                                    shape_str(grad.shape()) + " / " + shape_str(velocity.shape()));
    }
    auto p = param.mutable_data();
    auto v = velocity.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum * v[i] + (grad[i] + weight_decay * p[i]);
        p[i] -= lr * v[i];
    }
}

/// One optimizer step at schedule position state.step of `total_steps`.
inline void sgd_step(BackboneParams& params, const std::vector<Tensor>& grads, OptimState& state,
                     const TrainConfig& cfg, std::size_t total_steps) {
    auto slots = params.tensors();
    if (grads.size() != slots.size()) throw std::invalid_argument("sgd_step: gradient count mismatch");
    if (state.velocity.empty())
        for (Tensor* t : slots) state.velocity.emplace_back(t->shape(), 0.0);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const double base = BackboneParams::is_new_layer(i) ? cfg.lr_new : cfg.lr_backbone;
        sgd_update(*slots[i], grads[i], state.velocity[i], poly_lr(base, state.step, total_steps, cfg.poly_power),
                   cfg.momentum, cfg.weight_decay);
    }
    ++state.step;
}

inline Tensor flip_horizontal(const Tensor& image) {
    const std::size_t C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
    Tensor out(image.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = image[(c * H + y) * W + (W - 1 - x)];
    return out;
}

struct StepRecord {
    std::size_t step = 0;
    double lr = 0, cls = 0, gsc = 0, total = 0;
};

/// "step, lr, L_cls, L_gsc, L_total"
inline std::string format_step(const StepRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu, %.9g, %.9g, %.9g, %.9g", r.step, r.lr, r.cls, r.gsc, r.total);
    return buf;
}

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(std::size_t epoch, const BackboneParams&)> on_epoch;
};

/// Train from a seeded initialisation. Batches are reduced in sample order,
/// so the result does not depend on the worker count.
inline BackboneParams train(const std::vector<Sample>& data, const BackboneConfig& model, const TrainConfig& cfg,
                            const ModelOptions& opt, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    BackboneParams params = init_backbone(cfg.seed, model);
    SplitMix64 rng(SplitMix64::mix(cfg.seed ^ 0x5EEDF00DULL));
    const std::size_t n = data.size();
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = per_epoch * cfg.epochs;
    OptimState state;
    std::vector<std::size_t> order(n);
    ModelOptions warmup = opt;
    warmup.use_gsc = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const ModelOptions& active = epoch < cfg.warmup_epochs ? warmup : opt;
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
            std::vector<bool> flips(hi - lo);
            for (std::size_t i = 0; i < flips.size(); ++i) flips[i] = cfg.flip && rng.uniform() < 0.5;
            std::vector<LossBreakdown> results(hi - lo);
            parallel_for(hi - lo, [&](std::size_t i) {
                const Sample& s = data[order[lo + i]];
                const Tensor input = standardize_image(flips[i] ? flip_horizontal(s.image) : s.image);
                results[i] = total_loss(params, input, s.labels, active);
            });
            const double scale = 1.0 / static_cast<double>(hi - lo);
            std::vector<Tensor> grads = results[0].grads;
            for (std::size_t i = 1; i < results.size(); ++i)
                for (std::size_t p = 0; p < grads.size(); ++p) {
                    auto dst = grads[p].mutable_data();
                    for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += results[i].grads[p][e];
                }
            for (auto& g : grads)
                for (auto& v : g.mutable_data()) v *= scale;
            StepRecord rec;
            rec.step = state.step;
            rec.lr = poly_lr(cfg.lr_backbone, state.step, total_steps, cfg.poly_power);
            for (const auto& r : results) {
                rec.cls += r.cls * scale;
                rec.gsc += r.gsc * scale;
                rec.total += r.total * scale;
            }
            sgd_step(params, grads, state, cfg, total_steps);
            if (hooks.on_step) hooks.on_step(rec);
        }
        if (hooks.on_epoch) hooks.on_epoch(epoch + 1, params);
    }
    return params;
}

}  // namespace sipe
