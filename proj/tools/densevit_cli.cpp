// Command-line pipeline: dataset synthesis, density-mask artifacts, training,
// evaluation, inference, and gradient checking.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "densevit/gradcheck.hpp"
#include "densevit/run_config.hpp"

namespace fs = std::filesystem;
using namespace densevit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

RunConfig load_run_config(const GlobalArgs& g) {
    RunConfig rc = default_run_config();
    if (!g.config_path.empty()) {
        std::ifstream is(g.config_path);
        detail::check(is.good(), "cannot open config '" + g.config_path + "'");
        rc = run_config_from_json(nlohmann::json::parse(is));
    }
    if (g.seed.has_value()) {
        rc.synth.seed = *g.seed;
        rc.train.seed = *g.seed;
    }
    if (!g.out_dir.empty()) rc.out_dir = g.out_dir;
    return rc;
}

void echo_config(const RunConfig& rc) {
    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / "config.json");
    detail::check(os.good(), "cannot write effective config under '" + rc.out_dir + "'");
    os << to_json(rc).dump(2) << "\n";
}

std::string scene_annotation_line_path(const fs::path& dir, const std::string& id) {
    return (dir / (id + ".txt")).string();
}

// Scenes for training/eval: from a manifest when given, synthesized otherwise.
std::pair<std::vector<Scene>, std::vector<Scene>> load_dataset(const RunConfig& rc) {
    if (rc.manifest.empty()) return synth_dataset(rc.synth, rc.train_scenes, rc.val_scenes);
    DatasetManifest m = read_manifest(rc.manifest);
    std::vector<Scene> train, val;
    for (const auto& e : m.images) {
        Scene s = load_scene(e);
        const bool in_train = std::find(m.train.begin(), m.train.end(), e.id) != m.train.end();
        const bool in_val = std::find(m.val.begin(), m.val.end(), e.id) != m.val.end();
        if (in_train) train.push_back(s);
        if (in_val) val.push_back(std::move(s));
    }
    return {std::move(train), std::move(val)};
}

int cmd_synth(const RunConfig& rc, std::size_t count, std::optional<std::size_t> train_count) {
    const fs::path out(rc.out_dir);
    fs::create_directories(out / "images");
    fs::create_directories(out / "annotations");
    const std::size_t n_train = train_count.value_or(count - std::min(count, count / 5));

    DatasetManifest manifest;
    for (std::size_t i = 0; i < count; ++i) {
        Scene s = synth_scene(rc.synth, i);
        const std::string img_path = (out / "images" / (s.id + ".pgm")).string();
        const std::string ann_path = scene_annotation_line_path(out / "annotations", s.id);
        write_pgm(img_path, s.image);
        write_annotations(ann_path, s.id, s.boxes);
        manifest.images.push_back({s.id, img_path, ann_path});
        (i < n_train ? manifest.train : manifest.val).push_back(s.id);
    }
    write_manifest((out / "manifest.json").string(), manifest);
    echo_config(rc);
    std::printf("wrote %zu scenes (%zu train / %zu val) under %s\n", count, manifest.train.size(),
                manifest.val.size(), rc.out_dir.c_str());
    return kExitOk;
}

int cmd_mask(const RunConfig& rc) {
    detail::check(!rc.manifest.empty(), "mask: --manifest is required");
    DatasetManifest m = read_manifest(rc.manifest);
    const fs::path out(rc.out_dir);
    fs::create_directories(out / "masks");
    for (const auto& e : m.images) {
        Scene s = load_scene(e);
        const std::size_t h = s.image.dim(1), w = s.image.dim(2);
        DensityMap coarse = coarse_density_map(s.boxes, h, w);
        Tensor coarse_t({h, w}, coarse.values);
        // heatmap: clip to [0,1] then scale by 255
        write_pgm((out / "masks" / (e.id + "_coarse.pgm")).string(),
                  reshape(clip(coarse_t, 0.0, 1.0), {1, h, w}));
        write_tnsr((out / "masks" / (e.id + "_coarse.tnsr")).string(), coarse_t);
        auto pooled = pool_mask_to_tokens(coarse, rc.model.patch);
        write_tnsr((out / "masks" / (e.id + "_tokens.tnsr")).string(),
                   Tensor({h / rc.model.patch, w / rc.model.patch}, pooled));
    }
    echo_config(rc);
    std::printf("wrote density maps for %zu images under %s/masks\n", m.images.size(),
                rc.out_dir.c_str());
    return kExitOk;
}

int cmd_train(RunConfig rc) {
    auto [train_scenes, val_scenes] = load_dataset(rc);
    detail::check(!train_scenes.empty(), "train: no training scenes");
    echo_config(rc);
    const fs::path out(rc.out_dir);

    Model model(rc.model, rc.train.seed);
    OptimState st = rc.optim;
    st.init(model.params());

    std::ofstream log(out / "train_log.csv");
    log << "iter,lr,total,objectness,box_reg,focus_aux\n";
    std::ofstream evlog(out / "eval_log.csv");
    evlog << "iter,mAP,recall\n";
    char buf[256];

    TrainResult res = train_model(
        model, st, train_scenes, val_scenes, rc.train,
        [&](const TrainLogRow& r) {
            std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                          static_cast<long long>(r.iter), r.lr, r.total, r.objectness, r.box_reg,
                          r.focus_aux);
            log << buf;
        },
        [&](const EvalLogRow& e) {
            std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g\n", static_cast<long long>(e.iter),
                          e.map, e.recall);
            evlog << buf;
            std::printf("iter %lld: mAP=%.4f recall=%.4f\n", static_cast<long long>(e.iter),
                        e.map, e.recall);
            std::fflush(stdout);
        });

    const std::string ckpt = (out / "checkpoint.bin").string();
    nlohmann::json extra = {{"iters_run", res.log.size()},
                            {"aborted_on_nan", res.aborted_on_nan}};
    model.save(ckpt, extra);
    if (res.aborted_on_nan) {
        std::fprintf(stderr, "non-finite loss: aborted, last-good checkpoint written to %s\n",
                     ckpt.c_str());
        return kExitNumeric;
    }

    nlohmann::json metrics;
    if (!val_scenes.empty()) {
        EvalResult ev = evaluate_model(model, val_scenes, rc.train.score_thresh, rc.train.nms_iou);
        metrics["mAP"] = ev.map.value_or(0.0);
        metrics["recall"] = ev.recall;
    }
    metrics["final_loss"] = res.log.empty() ? 0.0 : res.log.back().total;
    std::ofstream ms(out / "metrics.json");
    ms << metrics.dump(2) << "\n";
    std::printf("checkpoint: %s\n", ckpt.c_str());
    return kExitOk;
}

Model load_model_from_checkpoint(const std::string& ckpt_path,
                                 const std::optional<ModelConfig>& expect) {
    // peek at the stored config, then build and load
    std::ifstream is(ckpt_path, std::ios::binary);
    detail::check(is.good(), "cannot open checkpoint '" + ckpt_path + "'");
    std::uint64_t hlen = 0;
    {
        unsigned char b[8];
        is.read(reinterpret_cast<char*>(b), 8);
        detail::check(is.good(), "corrupt checkpoint '" + ckpt_path + "'");
        for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    }
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);
    ModelConfig stored = model_config_from_json(header.at("meta").at("model_config"));
    if (expect.has_value())
        detail::check(to_json(*expect) == to_json(stored),
                      "checkpoint/model-config mismatch: '" + ckpt_path +
                          "' stores a different architecture than the supplied config");
    Model model(stored, 0);
    model.load(ckpt_path);
    return model;
}

int cmd_eval(const RunConfig& rc, const std::string& ckpt, bool config_given) {
    detail::check(!ckpt.empty(), "eval: --checkpoint is required");
    Model model = load_model_from_checkpoint(
        ckpt, config_given ? std::optional<ModelConfig>(rc.model) : std::nullopt);
    auto [train_scenes, val_scenes] = load_dataset(rc);
    const std::vector<Scene>& scenes = val_scenes.empty() ? train_scenes : val_scenes;
    detail::check(!scenes.empty(), "eval: no scenes to evaluate");
    EvalResult ev = evaluate_model(model, scenes, rc.train.score_thresh, rc.train.nms_iou);

    nlohmann::json per_class = nlohmann::json::object();
    ClassTable classes;
    for (const auto& [cls, ap] : ev.per_class_ap) per_class[classes.name_of(cls)] = ap;
    nlohmann::json report = {{"mAP", ev.map.value_or(0.0)},
                             {"recall", ev.recall},
                             {"per_class", per_class},
                             {"images", scenes.size()},
                             {"total_gts", ev.total_gts}};
    std::cout << report.dump(2) << "\n";
    return kExitOk;
}

int cmd_infer(const RunConfig& rc, const std::string& ckpt, const std::string& image_path) {
    detail::check(!ckpt.empty(), "infer: --checkpoint is required");
    Model model = load_model_from_checkpoint(ckpt, std::nullopt);

    std::vector<Scene> scenes;
    if (!image_path.empty()) {
        Scene s;
        s.id = fs::path(image_path).stem().string();
        s.image = read_pgm(image_path);
        scenes.push_back(std::move(s));
    } else {
        detail::check(!rc.manifest.empty(), "infer: need --image or --manifest");
        DatasetManifest m = read_manifest(rc.manifest);
        for (const auto& e : m.images) scenes.push_back(load_scene(e));
    }

    fs::create_directories(rc.out_dir);
    const std::string det_path = (fs::path(rc.out_dir) / "detections.txt").string();
    std::ofstream os(det_path);
    char buf[256];
    std::size_t total = 0;
    for (const Scene& s : scenes) {
        std::vector<const Scene*> one = {&s};
        auto dets = model.infer(batch_images(one), rc.train.score_thresh, rc.train.nms_iou);
        for (const Detection& d : dets[0]) {
            std::snprintf(buf, sizeof(buf), "%s %.6f %.6f %.6f %.6f %.6f %.6f %d\n", s.id.c_str(),
                          d.box.cx, d.box.cy, d.box.w, d.box.h, d.box.theta, *d.box.score,
                          d.box.class_id);
            os << buf;
            ++total;
        }
    }
    std::printf("%zu detections -> %s\n", total, det_path.c_str());
    return kExitOk;
}

// Central-difference check with an optional deliberate corruption of one
// analytic gradient (negative-control hook).
double checked_max_rel_err(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           bool corrupt, std::uint64_t seed) {
    GradCheckOptions opt;
    opt.seed = seed;
    if (!corrupt) return grad_check(f, params, opt);
    for (Tensor& p : params) p.zero_grad();
    Tensor loss = f();
    backward(loss);
    Tensor& victim = params.front();
    auto grads = victim.grad();
    grads[0] += 1.0; // corrupted analytic gradient
    const double eps = opt.eps;
    auto& vals = victim.mutable_values();
    const double saved = vals[0];
    vals[0] = saved + eps;
    const double fp = f().item();
    vals[0] = saved - eps;
    const double fm = f().item();
    vals[0] = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    return std::abs(grads[0] - numeric) / std::max({1.0, std::abs(grads[0]), std::abs(numeric)});
}

int cmd_gradcheck(const RunConfig& rc, bool corrupt) {
    const std::uint64_t seed = rc.train.seed;
    Rng rng(seed);
    struct Entry {
        std::string name;
        double err;
    };
    std::vector<Entry> entries;
    auto run_entry = [&](const std::string& name, const std::function<Tensor()>& f,
                   std::vector<Tensor> ps, bool corrupt_here = false) {
        entries.push_back({name, checked_max_rel_err(f, std::move(ps), corrupt_here, seed)});
    };

    // per-module composites
    {
        Tensor a = Tensor::randn({3, 4}, rng);
        a.set_requires_grad(true);
        Tensor b = Tensor::randn({3, 4}, rng);
        b.set_requires_grad(true);
        run_entry("elementwise", [&] { return sum(mul(gelu(a), add(exp(mul_scalar(b, 0.2)), a))); },
            {a, b});
        Tensor m1 = Tensor::randn({3, 4}, rng);
        m1.set_requires_grad(true);
        Tensor m2 = Tensor::randn({4, 5}, rng);
        m2.set_requires_grad(true);
        run_entry("linear_algebra",
            [&] { return sum(mul(matmul(m1, m2), matmul(m1, m2))); }, {m1, m2});
        Tensor g = Tensor::ones({4});
        g.set_requires_grad(true);
        Tensor be = Tensor::zeros({4});
        be.set_requires_grad(true);
        run_entry("normalization",
            [&] { return sum(mul(softmax(layer_norm(a, g, be), 1), log_softmax(a, 1))); },
            {a, g, be});
        Tensor img = Tensor::randn({1, 2, 6, 6}, rng);
        img.set_requires_grad(true);
        Tensor ker = Tensor::randn({3, 2, 3, 3}, rng, 0.4);
        ker.set_requires_grad(true);
        Tensor kb = Tensor::zeros({3});
        kb.set_requires_grad(true);
        run_entry("conv_pool",
            [&] {
                Tensor c = conv2d(img, ker, kb, 2, 1);
                return sum(mul(avg_pool2d(c, 3, 3), avg_pool2d(c, 3, 3)));
            },
            {img, ker, kb});
    }

    // tiny full model, per-stage and end-to-end
    ModelConfig tiny;
    tiny.image_h = tiny.image_w = 16;
    tiny.patch = 8;
    tiny.embed_dim = 8;
    tiny.depth = 2;
    tiny.heads = 2;
    tiny.defm_layers = {1};
    Model model(tiny, seed);

    SynthConfig sc;
    sc.image_size = 16;
    sc.num_clusters = {1, 1};
    sc.targets_per_cluster = {1, 2};
    sc.extent = {4.0, 7.0};
    sc.min_spacing = 5.0;
    sc.seed = seed;
    Scene scene = synth_scene(sc, 1);
    detail::check(!scene.boxes.empty(), "gradcheck scene has no targets");
    std::vector<const Scene*> ptrs = {&scene};
    Tensor images = batch_images(ptrs);
    std::vector<std::vector<RotatedBox>> gts = {scene.boxes};

    {
        Tensor x = Tensor::randn({1, 1, 16, 16}, rng, 0.5);
        x.set_requires_grad(true);
        run_entry("cnn_stage",
            [&] {
                PyramidFeatures f = model.encoder().cnn().forward(x);
                return mean(mul(f.level(0), f.level(0)));
            },
            {x});
        Tensor z = Tensor::randn({1, 4, 8}, rng, 0.5);
        z.set_requires_grad(true);
        run_entry("attention_block",
            [&] {
                Tensor out = model.encoder().attention_block(z, 0);
                return sum(mul(out, out));
            },
            {z});
        std::vector<DensityMap> coarse = {coarse_density_map(scene.boxes, 16, 16)};
        run_entry("refine_and_defm",
            [&] {
                Encoder::Output out =
                    model.encoder().forward_with_density(images, coarse, Mode::training);
                Tensor probs = out.focus_probs[0];
                return add(sum(mul(out.tokens, out.tokens)), sum(mul(probs, probs)));
            },
            {model.params().find("defm.stage0.mlp.w1")->tensor,
             model.params().find("defm.stage0.pre_ln.gamma")->tensor,
             model.params().find("refiner.level0.train.weight")->tensor,
             model.params().find("cnn.stage1.conv1.weight")->tensor});
        run_entry("detection_loss",
            [&] {
                Model::ForwardResult fr = model.forward(images, gts, Mode::training);
                return model.loss(fr, gts).total;
            },
            {model.params().find("head.box.weight")->tensor,
             model.params().find("head.obj.weight")->tensor});
    }

    std::vector<Tensor> all_params;
    for (const Param& p : model.params().list()) all_params.push_back(p.tensor);
    run_entry("end_to_end",
        [&] {
            Model::ForwardResult fr = model.forward(images, gts, Mode::training);
            return model.loss(fr, gts).total;
        },
        all_params, corrupt);

    bool ok = true;
    for (const Entry& e : entries) {
        const bool pass = e.err < 1e-4;
        ok = ok && pass;
        std::printf("%-16s max_rel_err=%.3e %s\n", e.name.c_str(), e.err,
                    pass ? "pass" : "FAIL");
    }
    std::printf("gradcheck: %zu modules, %s\n", entries.size(), ok ? "all pass" : "FAILURES");
    return ok ? kExitOk : kExitNumeric;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"density-gated vision transformer for dense rotated-box detection"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON run configuration");
    std::uint64_t seed_val = 0;
    auto* seed_opt = app.add_option("--seed", seed_val, "override all seeds");
    app.add_option("--out", g.out_dir, "output directory");

    auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
    std::size_t count = 250;
    std::optional<std::size_t> train_count;
    synth->add_option("--count", count, "number of scenes");
    std::size_t train_count_val = 0;
    auto* tc_opt = synth->add_option("--train-count", train_count_val,
                                     "scenes assigned to the train split (default 4/5)");

    auto* mask = app.add_subcommand("mask", "write density-map artifacts");
    std::string manifest_path;
    mask->add_option("--manifest", manifest_path, "dataset manifest");

    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--manifest", manifest_path, "dataset manifest (synthesizes when absent)");
    std::int64_t iters_override = -1;
    train->add_option("--iters", iters_override, "override training iterations");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ckpt_path;
    eval->add_option("--checkpoint", ckpt_path, "model checkpoint");
    eval->add_option("--manifest", manifest_path, "dataset manifest (synthesizes when absent)");

    auto* infer = app.add_subcommand("infer", "run inference and export detections");
    std::string image_path;
    infer->add_option("--checkpoint", ckpt_path, "model checkpoint");
    infer->add_option("--image", image_path, "single PGM image");
    infer->add_option("--manifest", manifest_path, "dataset manifest");

    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient report");
    bool corrupt = false;
    gradcheck_cmd->add_flag("--corrupt", corrupt, "")->group(""); // hidden negative control

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e); // prints help text or the parse error
        return code == 0 ? kExitOk : kExitUsage;
    }
    if (seed_opt->count() > 0) g.seed = seed_val;
    if (tc_opt->count() > 0) train_count = train_count_val;

    try {
        RunConfig rc = load_run_config(g);
        if (!manifest_path.empty()) rc.manifest = manifest_path;
        if (iters_override >= 0) rc.train.iters = iters_override;
        if (synth->parsed()) return cmd_synth(rc, count, train_count);
        if (mask->parsed()) return cmd_mask(rc);
        if (train->parsed()) return cmd_train(rc);
        if (eval->parsed()) return cmd_eval(rc, ckpt_path, !g.config_path.empty());
        if (infer->parsed()) return cmd_infer(rc, ckpt_path, image_path);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(rc, corrupt);
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
}
