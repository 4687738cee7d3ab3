// sipe: dataset generation, training, inference, evaluation, ablation and
// gradient checking. Exit codes: 0 ok, 1 verification failed, 2 usage or I/O.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "sipe/sipe.hpp"

namespace fs = std::filesystem;
using namespace sipe;

namespace {

constexpr int kOk = 0, kVerifyFailed = 1, kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string checkpoint_bytes(const Checkpoint& ck) {
    std::ostringstream os;
    write_checkpoint(os, ck);
    return os.str();
}

std::string tnsr_bytes(const Tensor& t) {
    std::ostringstream os;
    write_tnsr(os, t);
    return os.str();
}

RasterImage gray(const Tensor& channel_maps, std::size_t k) {
    const std::size_t H = channel_maps.shape()[1], W = channel_maps.shape()[2];
    RasterImage r{W, H, 1, std::vector<std::uint8_t>(H * W)};
    for (std::size_t j = 0; j < H * W; ++j)
        r.pixels[j] = static_cast<std::uint8_t>(std::lround(std::clamp(channel_maps[k * H * W + j], 0.0, 1.0) * 255.0));
    return r;
}

RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    if (!path.empty()) parse_run_config(rc, read_file(path), path);
    return rc;
}

ModelOptions model_from_meta(const Checkpoint& ck) {
    RunConfig rc;
    for (const auto& [k, v] : ck.meta)
        if (k == "ipe" || k == "gsc" || k == "bpm" || k == "feature" || k == "alpha") apply_setting(rc, k, v);
    return rc.model;
}

/// Train and write `out` (final), `out.epoch<N>` and `out.log`.
BackboneParams train_to(const std::vector<Sample>& data, const RunConfig& rc, const fs::path& out) {
    if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
    std::string log;
    TrainHooks hooks;
    auto meta = describe(rc);
    hooks.on_step = [&](const StepRecord& r) { log += format_step(r) + "\n"; };
    hooks.on_epoch = [&](std::size_t epoch, const BackboneParams& p) {
        meta["epoch"] = std::to_string(epoch);
        write_file_atomic(out.string() + ".epoch" + std::to_string(epoch), checkpoint_bytes({p, meta}));
        std::cerr << "epoch " << epoch << "/" << rc.train.epochs << "\n";
    };
    BackboneParams p = train(data, BackboneConfig{}, rc.train, rc.model, hooks);
    write_file_atomic(out.string() + ".log", log);
    write_file_atomic(out, checkpoint_bytes({p, meta}));
    return p;
}

int cmd_gen(const std::string& out, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw UsageError("gen: --n must be at least 1");
    save_dataset(out, generate_dataset(n, seed));
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return kOk;
}

int cmd_train(const std::string& data_dir, const std::string& out, const std::string& config,
              const std::vector<std::string>& overrides) {
    RunConfig rc = load_run_config(config);
    for (const auto& o : overrides) {
        auto eq = o.find('=');
        apply_setting(rc, o.substr(0, eq), o.substr(eq + 1));
    }
    rc.train.validate();
    auto data = load_dataset(data_dir);
    train_to(data, rc, out);
    std::cout << "wrote " << out << "\n";
    return kOk;
}

int cmd_infer(const std::string& ckpt_path, const std::string& data_dir, const fs::path& out, const std::string& which) {
    if (!fs::exists(ckpt_path)) throw std::runtime_error("checkpoint not found: " + ckpt_path);
    Checkpoint ck = load_checkpoint(ckpt_path);
    ModelOptions opt = model_from_meta(ck);
    auto data = load_dataset(data_dir);
    if (data[0].labels.size() != ck.params.config.num_classes) {
        throw std::runtime_error(ckpt_path + ": checkpoint has " + std::to_string(ck.params.config.num_classes) +
                                 " classes, data has " + std::to_string(data[0].labels.size()));
    }
    fs::create_directories(out);
    parallel_for(data.size(), [&](std::size_t i) {
        const Sample& s = data[i];
        Tape tape;
        BackboneVars vars = place(tape, ck.params, false);
        ImageAnalysis a = analyze(vars, tape.constant(standardize_image(s.image)), s.labels, opt, true);
        const Tensor& maps = which == "cam" ? a.cam.maps.maps.value() : a.specific->maps.value();
        const std::size_t H = s.image.shape()[1], W = s.image.shape()[2];
        const Tensor full = resize_bilinear(maps, H, W);
        const fs::path base = out / s.name;
        write_file_atomic(base.string() + ".maps.tnsr", tnsr_bytes(maps));
        for (std::size_t k = 0; k < maps.shape()[0]; ++k)
            write_pnm(base.string() + ".map" + std::to_string(k) + ".pgm", gray(full, k));
        LabelImage seeds(a.seeds->height, a.seeds->width);
        seeds.pixels = a.seeds->labels;
        write_pnm(base.string() + ".seeds.pgm", labels_to_raster(upsample_nearest(seeds, H, W)));
        write_pnm(base.string() + ".pgm", labels_to_raster(pseudo_labels(full, s.labels)));
        const Prototypes& protos = *a.prototypes;
        write_file_atomic(base.string() + ".protos.tnsr", tnsr_bytes(protos.vectors.value()));
        std::ostringstream flags;
        write_prototype_flags(flags, protos);
        write_file_atomic(base.string() + ".protos.txt", flags.str());
    });
    std::cout << "wrote " << data.size() << " predictions to " << out.string() << "\n";
    return kOk;
}

int cmd_eval(const fs::path& pred, const fs::path& gt, std::size_t num_classes) {
    std::vector<fs::path> names;
    for (const auto& e : fs::directory_iterator(gt)) {
        const auto& p = e.path();
        // ground-truth masks are <name>.pgm with no inner suffix
        if (p.extension() == ".pgm" && p.stem().extension().empty()) names.push_back(p.filename());
    }
    if (names.empty()) throw std::runtime_error(gt.string() + ": no ground-truth masks");
    std::sort(names.begin(), names.end());
    ConfusionMatrix cm(num_classes + 1);
    for (const auto& n : names) {
        if (!fs::exists(pred / n)) throw std::runtime_error("unpaired ground truth " + (gt / n).string() + ": no " + (pred / n).string());
        RasterImage p = read_pnm(pred / n), g = read_pnm(gt / n);
        if (p.channels != 1 || g.channels != 1) throw std::runtime_error(n.string() + ": masks must be grayscale");
        cm.add(raster_to_labels(p), raster_to_labels(g));
    }
    MiouResult r = cm.finalize();
    std::cout << std::fixed << std::setprecision(4);
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        std::cout << "class " << c << "  ";
        if (r.per_class[c]) std::cout << *r.per_class[c] << "\n";
        else std::cout << "-\n";
    }
    std::cout << "mIoU " << r.mean << "  (" << names.size() << " images)\n";
    return kOk;
}

int cmd_ablate(const fs::path& data_dir, const fs::path& out, const std::string& config,
               const std::vector<std::uint64_t>& seeds) {
    RunConfig base = load_run_config(config);
    auto train_set = load_dataset(data_dir / "train");
    auto eval_set = load_dataset(data_dir / "eval");
    const fs::path models = out.string() + ".models";
    AblationSettings settings;
    settings.seeds = seeds;
    AblationReport report = run_ablation(eval_set, settings, [&](const TrainingVariant& v, std::uint64_t seed) {
        RunConfig rc = base;
        rc.model = v.options;
        rc.model.alpha = base.model.alpha;
        rc.train.seed = seed;
        std::cerr << "training " << v.name << " seed " << seed << "\n";
        return train_to(train_set, rc, models / (v.name + ".seed" + std::to_string(seed) + ".ckpt"));
    });
    std::string text = format_report(report) + "\n";
    for (const auto& row : report.rows) text += format_report_line(row) + "\n";
    write_file_atomic(out, text);
    std::cout << format_report(report);
    return kOk;
}

int cmd_gradcheck(std::uint64_t seed, bool inject_fault) {
    ToyProblem toy = make_toy_problem(seed);
    std::function<void(std::vector<Tensor>&)> tamper;
    if (inject_fault)
        tamper = [](std::vector<Tensor>& g) {
            for (auto& v : g.back().mutable_data()) v = -v;
        };
    GradCheckReport r = gradient_check(toy.params, toy.image, toy.labels, ModelOptions{}, 1e-5, tamper);
    std::cout << std::scientific << std::setprecision(3);
    for (const auto& g : r.groups) std::cout << std::left << std::setw(18) << g.name << " rel " << g.rel_error << "\n";
    const bool ok = r.max_rel_error() < 1e-4;
    std::cout << "max relative error " << r.max_rel_error() << (ok ? "  PASS" : "  FAIL") << "\n";
    return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Seed-structure image-specific prototype pipeline on synthetic shapes"};
    app.require_subcommand(1);

    std::string out, data, config, ckpt, maps = "iscam", pred, gt, feature;
    std::size_t n = 0, classes = 5;
    std::uint64_t seed = 0;
    bool no_gsc = false, no_ipe = false, no_bpm = false, inject = false;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

    auto* gen = app.add_subcommand("gen", "write a synthetic dataset");
    gen->add_option("--out", out, "output directory")->required();
    gen->add_option("--n", n, "number of samples")->required();
    gen->add_option("--seed", seed, "generator seed");

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--out", out, "checkpoint path")->required();
    tr->add_option("--config", config, "key = value config file");
    tr->add_flag("--no-gsc", no_gsc, "drop the consistency loss");
    tr->add_flag("--no-ipe", no_ipe, "no image-specific maps (implies --no-gsc)");
    tr->add_option("--feature", feature, "prototype feature")->check(CLI::IsMember({"semantic", "hierarchical"}));
    tr->add_flag("--no-bpm", no_bpm, "no background prototype");

    auto* inf = app.add_subcommand("infer", "write maps, seeds, prototypes and pseudo labels");
    inf->add_option("--ckpt", ckpt, "checkpoint")->required();
    inf->add_option("--data", data, "dataset directory")->required();
    inf->add_option("--out", out, "output directory")->required();
    inf->add_option("--maps", maps, "maps used for pseudo labels")->check(CLI::IsMember({"cam", "iscam"}));

    auto* ev = app.add_subcommand("eval", "mIoU of predicted masks");
    ev->add_option("--pred", pred, "directory of predicted <name>.pgm")->required();
    ev->add_option("--gt", gt, "directory of ground-truth <name>.pgm")->required();
    ev->add_option("--classes", classes, "foreground classes");

    auto* ab = app.add_subcommand("ablate", "train every configuration and write the comparison report");
    ab->add_option("--data", data, "directory with train/ and eval/ datasets")->required();
    ab->add_option("--out", out, "report path")->required();
    ab->add_option("--config", config, "key = value config file");
    ab->add_option("--seeds", seeds, "training seeds")->delimiter(',');

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training gradient");
    gc->add_option("--seed", seed, "toy problem seed");
    gc->add_flag("--inject-fault", inject, "negate one analytic gradient (negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) return cmd_gen(out, n, seed);
        if (*tr) {
            std::vector<std::string> overrides;
            if (no_ipe) overrides.push_back("ipe=false");
            if (no_gsc || no_ipe) overrides.push_back("gsc=false");
            if (!feature.empty()) overrides.push_back("feature=" + feature);
            if (no_bpm) overrides.push_back("bpm=false");
            return cmd_train(data, out, config, overrides);
        }
        if (*inf) return cmd_infer(ckpt, data, out, maps);
        if (*ev) return cmd_eval(pred, gt, classes);
        if (*ab) return cmd_ablate(data, out, config, seeds);
        if (*gc) return cmd_gradcheck(seed, inject);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
