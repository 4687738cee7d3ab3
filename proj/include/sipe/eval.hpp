#pragma once

// Pseudo labels from localization maps and mIoU scoring.

#include <optional>

#include "sipe/cam.hpp"
#include "sipe/dataset.hpp"

namespace sipe {

namespace detail {

inline void check_stack(const Tensor& maps, const Tensor& y, const char* who) {
    if (maps.rank() != 3) throw std::invalid_argument(std::string(who) + ": expected [K+1,H,W], got " + shape_str(maps.shape()));
    if (maps.shape()[0] != y.size() + 1) {
        throw std::invalid_argument(std::string(who) + ": " + std::to_string(maps.shape()[0]) + " channels for " +
                                    std::to_string(y.size()) + " classes");
    }
}

}  // namespace detail

/// Per-pixel argmax over the background channel and the present classes;
/// ties go to the lower channel.
inline LabelImage pseudo_labels(const Tensor& maps, const Tensor& y) {
    detail::check_stack(maps, y, "pseudo_labels");
    const std::size_t H = maps.shape()[1], W = maps.shape()[2], P = H * W;
    std::vector<std::size_t> channels{0};
    for (std::size_t k = 0; k < y.size(); ++k)
        if (y[k] > 0.5) channels.push_back(k + 1);
    LabelImage out(H, W);
    for (std::size_t j = 0; j < P; ++j) {
        std::size_t best = 0;
        double best_v = maps[j];
        for (std::size_t k : channels) {
            if (maps[k * P + j] > best_v) {
                best_v = maps[k * P + j];
                best = k;
            }
        }
        out.pixels[j] = static_cast<std::uint8_t>(best);
    }
    return out;
}

inline LabelImage pseudo_labels(const LocMaps& maps, const Tensor& y) { return pseudo_labels(maps.maps.value(), y); }

/// Background where every present foreground channel is below tau, else the
/// foreground argmax. The background channel of `maps` is ignored.
inline LabelImage threshold_labels(const Tensor& maps, double tau, const Tensor& y) {
    detail::check_stack(maps, y, "threshold_labels");
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("threshold_labels: tau must lie in (0,1)");
    const std::size_t H = maps.shape()[1], W = maps.shape()[2], P = H * W;
    LabelImage out(H, W);
    for (std::size_t j = 0; j < P; ++j) {
        std::size_t best = 0;
        double best_v = -1;
        for (std::size_t k = 1; k <= y.size(); ++k) {
            if (y[k - 1] <= 0.5) continue;
            if (maps[k * P + j] > best_v) {
                best_v = maps[k * P + j];
                best = k;
            }
        }
        out.pixels[j] = best_v >= tau ? static_cast<std::uint8_t>(best) : 0;
    }
    return out;
}

struct MiouResult {
    std::vector<std::optional<double>> per_class;  // nullopt: class absent from gt and prediction
    double mean = 0;
};

/// Rows are ground truth, columns prediction. Ground-truth pixels equal to
/// kIgnoreLabel are skipped.
class ConfusionMatrix {
   public:
    explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

    std::size_t classes() const { return classes_; }
    std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }

    std::uint64_t total() const {
        return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
    }

    void add(const LabelImage& pred, const LabelImage& gt) {
        if (pred.height != gt.height || pred.width != gt.width) {
            throw std::invalid_argument("ConfusionMatrix::add: prediction " + std::to_string(pred.height) + "x" +
                                        std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) +
                                        "x" + std::to_string(gt.width));
        }
        for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
            const std::uint8_t g = gt.pixels[i];
            if (g == kIgnoreLabel) continue;
            const std::uint8_t p = pred.pixels[i];
            if (g >= classes_ || p >= classes_) throw std::out_of_range("ConfusionMatrix::add: label out of range");
            ++counts_[g * classes_ + p];
        }
    }

    void merge(const ConfusionMatrix& other) {
        if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    }

    /// IoU_c = TP / (TP + FP + FN); classes never seen in either image are
    /// left out of the mean.
    MiouResult finalize() const {
        MiouResult r;
        r.per_class.resize(classes_);
        double acc = 0;
        std::size_t seen = 0;
        for (std::size_t c = 0; c < classes_; ++c) {
            std::uint64_t tp = (*this)(c, c), fp = 0, fn = 0;
            for (std::size_t o = 0; o < classes_; ++o) {
                if (o == c) continue;
                fp += (*this)(o, c);
                fn += (*this)(c, o);
            }
            const std::uint64_t denom = tp + fp + fn;
            if (denom == 0) continue;
            r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
            acc += *r.per_class[c];
            ++seen;
        }
        r.mean = seen ? acc / static_cast<double>(seen) : 0.0;
        return r;
    }

   private:
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;
};

inline MiouResult miou(const std::vector<LabelImage>& preds, const std::vector<LabelImage>& gts, std::size_t classes) {
    if (preds.size() != gts.size()) throw std::invalid_argument("miou: prediction/ground-truth count mismatch");
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i]);
    return cm.finalize();
}

}  // namespace sipe
