#pragma once

// Ablation harness: trains (or loads) one model per training variant and
// seed, then scores general CAMs, IS-CAMs and seed masks on an evaluation
// split.
//
//   table4/{cam,ipe,ipe_gsc}/{threshold,estimated}
//   table5/{sem,hier}_{nobpm,bpm}/{threshold,estimated}
//   fig8/{structure,argmax,best_threshold}
//
// "estimated" labels take the argmax including the background channel;
// "threshold" labels use the dataset-wide best tau of the sweep.

#include <iomanip>
#include <limits>
#include <map>

#include "sipe/eval.hpp"
#include "sipe/train.hpp"

namespace sipe {

struct TrainingVariant {
    std::string name;
    ModelOptions options;
};

/// Distinct trainings needed by the harness. The CAM and +IPE rows share
/// the classification-only model; +IPE+GSC is the hierarchical + BPM model.
inline std::vector<TrainingVariant> training_variants() {
    std::vector<TrainingVariant> v;
    ModelOptions cls_only;
    cls_only.use_gsc = false;
    v.push_back({"cls_only", cls_only});
    for (auto feature : {FeatureChoice::Semantic, FeatureChoice::Hierarchical})
        for (bool bpm : {false, true}) {
            ModelOptions o;
            o.feature = feature;
            o.background_prototype = bpm;
            v.push_back({std::string(feature == FeatureChoice::Semantic ? "sem" : "hier") + (bpm ? "_bpm" : "_nobpm"), o});
        }
    return v;
}

inline std::vector<double> default_taus() {
    std::vector<double> t;
    for (int i = 1; i <= 19; ++i) t.push_back(0.05 * i);
    return t;
}

/// Maps for one evaluation image (raw pixels; standardized here), on the feature grid.
struct ImageMaps {
    Tensor cam;     // general CAM stack [K+1,h,w]
    Tensor iscam;   // image-specific stack [K+1,h,w]
    SeedMask seeds;
};

inline ImageMaps infer_maps(const BackboneParams& params, const Tensor& image, const Tensor& y,
                            const ModelOptions& opt) {
    Tape tape;
    BackboneVars vars = place(tape, params, false);
    ImageAnalysis a = analyze(vars, tape.constant(standardize_image(image)), y, opt, true);
    return {a.cam.maps.maps.value(), a.specific->maps.value(), *a.seeds};
}

struct ScoredLabels {
    MiouResult result;
    double tau = std::numeric_limits<double>::quiet_NaN();
};

/// Score a set of [K+1,h,w] stacks against full-resolution ground truth.
/// Maps are bilinearly upsampled before labelling.
class MapScorer {
   public:
    MapScorer(const std::vector<Sample>& eval, std::vector<Tensor> maps) : eval_(eval) {
        if (maps.size() != eval.size()) throw std::invalid_argument("MapScorer: one stack per image required");
        for (std::size_t i = 0; i < maps.size(); ++i) {
            if (!eval[i].mask) throw std::invalid_argument("MapScorer: sample " + eval[i].name + " has no mask");
            upsampled_.push_back(resize_bilinear(maps[i], eval[i].mask->height, eval[i].mask->width));
        }
        classes_ = eval.empty() ? 1 : eval[0].labels.size() + 1;
    }

    ScoredLabels estimated() const {
        ConfusionMatrix cm(classes_);
        for (std::size_t i = 0; i < eval_.size(); ++i) cm.add(pseudo_labels(upsampled_[i], eval_[i].labels), *eval_[i].mask);
        return {cm.finalize()};
    }

    ScoredLabels threshold(double tau) const {
        ConfusionMatrix cm(classes_);
        for (std::size_t i = 0; i < eval_.size(); ++i)
            cm.add(threshold_labels(upsampled_[i], tau, eval_[i].labels), *eval_[i].mask);
        return {cm.finalize(), tau};
    }

    ScoredLabels best_threshold(const std::vector<double>& taus) const {
        ScoredLabels best;
        best.result.mean = -1;
        for (double t : taus) {
            ScoredLabels s = threshold(t);
            if (s.result.mean > best.result.mean) best = s;
        }
        return best;
    }

   private:
    const std::vector<Sample>& eval_;
    std::vector<Tensor> upsampled_;
    std::size_t classes_ = 1;
};

/// Seed-level comparison on the feature grid, labels upsampled by nearest
/// neighbour to the ground-truth size.
inline MiouResult score_label_grids(const std::vector<Sample>& eval, const std::vector<LabelImage>& grids) {
    ConfusionMatrix cm(eval[0].labels.size() + 1);
    for (std::size_t i = 0; i < eval.size(); ++i)
        cm.add(upsample_nearest(grids[i], eval[i].mask->height, eval[i].mask->width), *eval[i].mask);
    return cm.finalize();
}

struct ReportRow {
    std::string config;
    std::string run;  // "seed=<n>" or "mean"
    MiouResult result;
    double tau = std::numeric_limits<double>::quiet_NaN();

    std::string key() const { return config + "@" + run; }
};

struct AblationReport {
    std::vector<ReportRow> rows;

    const ReportRow& find(const std::string& config, const std::string& run) const {
        for (const auto& r : rows)
            if (r.config == config && r.run == run) return r;
        throw std::out_of_range("report has no row " + config + "@" + run);
    }
    double mean_miou(const std::string& config) const { return find(config, "mean").result.mean; }
};

/// `config@run,miou,iou_0;iou_1;...` with '-' for classes excluded from the mean.
inline std::string format_report_line(const ReportRow& r) {
    std::ostringstream os;
    os << std::setprecision(17) << r.key() << ',' << r.result.mean << ',';
    for (std::size_t c = 0; c < r.result.per_class.size(); ++c) {
        if (c) os << ';';
        if (r.result.per_class[c]) os << *r.result.per_class[c];
        else os << '-';
    }
    return os.str();
}

inline ReportRow parse_report_line(const std::string& line) {
    auto c1 = line.find(','), c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) throw std::invalid_argument("report line: expected 3 fields");
    ReportRow r;
    std::string key = line.substr(0, c1);
    auto at = key.rfind('@');
    if (at == std::string::npos) throw std::invalid_argument("report line: config lacks '@run'");
    r.config = key.substr(0, at);
    r.run = key.substr(at + 1);
    r.result.mean = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    std::stringstream rest(line.substr(c2 + 1));
    std::string item;
    while (std::getline(rest, item, ';')) {
        if (item == "-") r.result.per_class.emplace_back();
        else r.result.per_class.emplace_back(std::stod(item));
    }
    return r;
}

/// Per-config average over runs: mean of the mIoUs; per class, the mean of
/// the runs in which the class was scored.
inline MiouResult average_results(const std::vector<MiouResult>& runs) {
    MiouResult out;
    if (runs.empty()) return out;
    const std::size_t C = runs[0].per_class.size();
    out.per_class.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        double acc = 0;
        std::size_t n = 0;
        for (const auto& r : runs)
            if (r.per_class[c]) {
                acc += *r.per_class[c];
                ++n;
            }
        if (n) out.per_class[c] = acc / static_cast<double>(n);
    }
    for (const auto& r : runs) out.mean += r.mean;
    out.mean /= static_cast<double>(runs.size());
    return out;
}

struct AblationSettings {
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::vector<double> taus = default_taus();
};

/// Provides trained parameters for (variant, seed); throws when unavailable.
using ModelSource = std::function<BackboneParams(const TrainingVariant&, std::uint64_t seed)>;

inline const TrainingVariant& variant_named(const std::string& name) {
    static const std::vector<TrainingVariant> all = training_variants();
    for (const auto& v : all)
        if (v.name == name) return v;
    throw std::out_of_range("unknown training variant " + name);
}

inline AblationReport run_ablation(const std::vector<Sample>& eval, const AblationSettings& settings,
                                   const ModelSource& source) {
    if (eval.empty()) throw std::invalid_argument("run_ablation: empty evaluation set");
    AblationReport report;
    std::map<std::string, std::vector<MiouResult>> per_config;
    std::vector<std::string> order;
    auto push = [&](const std::string& config, const std::string& run, const ScoredLabels& s) {
        report.rows.push_back({config, run, s.result, s.tau});
        if (!per_config.count(config)) order.push_back(config);
        per_config[config].push_back(s.result);
    };

    for (std::uint64_t seed : settings.seeds) {
        const std::string run = "seed=" + std::to_string(seed);
        for (const TrainingVariant& variant : training_variants()) {
            BackboneParams params = source(variant, seed);
            std::vector<ImageMaps> maps(eval.size());
            parallel_for(eval.size(), [&](std::size_t i) {
                maps[i] = infer_maps(params, eval[i].image, eval[i].labels, variant.options);
            });
            std::vector<Tensor> cams, iscams;
            for (auto& m : maps) {
                cams.push_back(m.cam);
                iscams.push_back(m.iscam);
            }
            MapScorer specific(eval, iscams);
            if (variant.name == "cls_only") {
                MapScorer general(eval, cams);
                push("table4/cam/threshold", run, general.best_threshold(settings.taus));
                push("table4/cam/estimated", run, general.estimated());
                push("table4/ipe/threshold", run, specific.best_threshold(settings.taus));
                push("table4/ipe/estimated", run, specific.estimated());
                continue;
            }
            ScoredLabels thr = specific.best_threshold(settings.taus);
            ScoredLabels est = specific.estimated();
            push("table5/" + variant.name + "/threshold", run, thr);
            push("table5/" + variant.name + "/estimated", run, est);
            if (variant.name != "hier_bpm") continue;
            push("table4/ipe_gsc/threshold", run, thr);
            push("table4/ipe_gsc/estimated", run, est);

            std::vector<LabelImage> structure, argmax;
            for (std::size_t i = 0; i < eval.size(); ++i) {
                structure.push_back(LabelImage(maps[i].seeds.height, maps[i].seeds.width));
                structure.back().pixels = maps[i].seeds.labels;
                argmax.push_back(pseudo_labels(maps[i].cam, eval[i].labels));
            }
            push("fig8/structure", run, {score_label_grids(eval, structure)});
            push("fig8/argmax", run, {score_label_grids(eval, argmax)});
            ScoredLabels best;
            best.result.mean = -1;
            for (double tau : settings.taus) {
                std::vector<LabelImage> grids;
                for (std::size_t i = 0; i < eval.size(); ++i) grids.push_back(threshold_labels(maps[i].cam, tau, eval[i].labels));
                ScoredLabels s{score_label_grids(eval, grids), tau};
                if (s.result.mean > best.result.mean) best = s;
            }
            push("fig8/best_threshold", run, best);
        }
    }
    for (const auto& config : order) report.rows.push_back({config, "mean", average_results(per_config[config])});
    return report;
}

inline std::string format_report(const AblationReport& report) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    auto pct = [&](const std::string& config) { return 100.0 * report.mean_miou(config); };
    os << "Main components (mean mIoU %, pseudo labels from localization maps)\n";
    os << "  " << std::left << std::setw(14) << "config" << std::right << std::setw(11) << "threshold" << std::setw(11)
       << "estimated" << "\n";
    const std::pair<const char*, const char*> t4[] = {{"CAM", "cam"}, {"+IPE", "ipe"}, {"+IPE+GSC", "ipe_gsc"}};
    for (auto [label, key] : t4) {
        std::string base = std::string("table4/") + key;
        os << "  " << std::left << std::setw(14) << label << std::right << std::setw(11) << pct(base + "/threshold")
           << std::setw(11) << pct(base + "/estimated") << "\n";
    }
    os << "\nFeature x background prototype (mean mIoU %)\n";
    os << "  " << std::left << std::setw(14) << "feature" << std::right << std::setw(13) << "w/o BPM thr" << std::setw(13)
       << "w/o BPM est" << std::setw(13) << "w/ BPM thr" << std::setw(13) << "w/ BPM est" << "\n";
    for (const char* f : {"sem", "hier"}) {
        os << "  " << std::left << std::setw(14) << (std::string(f) == "sem" ? "semantic" : "hierarchical") << std::right;
        for (const char* b : {"nobpm", "bpm"})
            for (const char* m : {"threshold", "estimated"})
                os << std::setw(13) << pct(std::string("table5/") + f + "_" + b + "/" + m);
        os << "\n";
    }
    os << "\nSeed generation (mean mIoU %)\n";
    for (const char* s : {"structure", "argmax", "best_threshold"})
        os << "  " << std::left << std::setw(16) << s << std::right << std::setw(9) << pct(std::string("fig8/") + s) << "\n";
    os << "\n# config@run,miou,per-class-ious\n";
    for (const auto& r : report.rows) os << format_report_line(r) << "\n";
    return os.str();
}

}  // namespace sipe
