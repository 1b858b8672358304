#pragma once

#include <string>

#include <json.hpp>

#include "densevit/model.hpp"

namespace densevit {

// Everything one run needs: architecture, optimizer, data synthesis, loop
// controls, output paths. The defaults are the desk-scale 64x64 setup.
struct RunConfig {
    ModelConfig model;
    OptimState optim;
    SynthConfig synth;
    TrainConfig train;
    std::size_t train_scenes = 200;
    std::size_t val_scenes = 50;
    std::string out_dir = "out";
    std::string checkpoint;
    std::string manifest;
};

inline RunConfig default_run_config() {
    RunConfig rc;
    rc.model.image_h = rc.model.image_w = 64;
    rc.model.patch = 8;
    rc.model.embed_dim = 64;
    rc.model.depth = 4;
    rc.model.heads = 4;
    rc.model.defm_layers = {1, 2};
    return rc;
}

inline nlohmann::json to_json(const OptimState& o) {
    return {{"lr_base", o.lr_base},           {"betas", {o.beta1, o.beta2}},
            {"weight_decay", o.weight_decay}, {"lr_min", o.lr_min},
            {"warmup_iters", o.warmup_iters}, {"clip_norm", o.clip_norm},
            {"eps", o.eps}};
}

inline void optim_from_json(const nlohmann::json& j, OptimState& o) {
    o.lr_base = j.value("lr_base", o.lr_base);
    if (j.contains("betas")) {
        o.beta1 = j["betas"].at(0).get<double>();
        o.beta2 = j["betas"].at(1).get<double>();
    }
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.lr_min = j.value("lr_min", o.lr_min);
    o.warmup_iters = j.value("warmup_iters", o.warmup_iters);
    o.clip_norm = j.value("clip_norm", o.clip_norm);
    o.eps = j.value("eps", o.eps);
}

inline nlohmann::json to_json(const SynthConfig& s) {
    return {{"image_size", s.image_size},
            {"num_clusters", {s.num_clusters[0], s.num_clusters[1]}},
            {"targets_per_cluster", {s.targets_per_cluster[0], s.targets_per_cluster[1]}},
            {"extent", {s.extent[0], s.extent[1]}},
            {"min_spacing", s.min_spacing},
            {"speckle_looks", s.speckle_looks},
            {"clutter_blobs", s.clutter_blobs},
            {"seed", s.seed}};
}

inline void synth_from_json(const nlohmann::json& j, SynthConfig& s) {
    s.image_size = j.value("image_size", s.image_size);
    if (j.contains("num_clusters")) {
        s.num_clusters[0] = j["num_clusters"].at(0).get<std::size_t>();
        s.num_clusters[1] = j["num_clusters"].at(1).get<std::size_t>();
    }
    if (j.contains("targets_per_cluster")) {
        s.targets_per_cluster[0] = j["targets_per_cluster"].at(0).get<std::size_t>();
        s.targets_per_cluster[1] = j["targets_per_cluster"].at(1).get<std::size_t>();
    }
    if (j.contains("extent")) {
        s.extent[0] = j["extent"].at(0).get<double>();
        s.extent[1] = j["extent"].at(1).get<double>();
    }
    s.min_spacing = j.value("min_spacing", s.min_spacing);
    s.speckle_looks = j.value("speckle_looks", s.speckle_looks);
    s.clutter_blobs = j.value("clutter_blobs", s.clutter_blobs);
    s.seed = j.value("seed", s.seed);
}

inline nlohmann::json to_json(const TrainConfig& t) {
    return {{"iters", t.iters},
            {"batch_size", t.batch_size},
            {"eval_every", t.eval_every},
            {"score_thresh", t.score_thresh},
            {"nms_iou", t.nms_iou},
            {"lambda_focus", t.lambda_focus},
            {"augment_flips", t.augment_flips},
            {"seed", t.seed}};
}

inline void train_from_json(const nlohmann::json& j, TrainConfig& t) {
    t.iters = j.value("iters", t.iters);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.eval_every = j.value("eval_every", t.eval_every);
    t.score_thresh = j.value("score_thresh", t.score_thresh);
    t.nms_iou = j.value("nms_iou", t.nms_iou);
    t.lambda_focus = j.value("lambda_focus", t.lambda_focus);
    t.augment_flips = j.value("augment_flips", t.augment_flips);
    t.seed = j.value("seed", t.seed);
}

inline nlohmann::json to_json(const RunConfig& rc) {
    return {{"model", to_json(rc.model)},
            {"optim", to_json(rc.optim)},
            {"synth", to_json(rc.synth)},
            {"train", to_json(rc.train)},
            {"data", {{"train_scenes", rc.train_scenes}, {"val_scenes", rc.val_scenes}}},
            {"paths",
             {{"out_dir", rc.out_dir}, {"checkpoint", rc.checkpoint}, {"manifest", rc.manifest}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig rc = default_run_config();
    if (j.contains("model")) rc.model = model_config_from_json(j["model"]);
    if (j.contains("optim")) optim_from_json(j["optim"], rc.optim);
    if (j.contains("synth")) synth_from_json(j["synth"], rc.synth);
    if (j.contains("train")) {
        train_from_json(j["train"], rc.train);
        // keep_ratio may be given alongside the loop controls
        if (j["train"].contains("keep_ratio"))
            rc.model.keep_ratio = j["train"]["keep_ratio"].get<double>();
    }
    if (j.contains("data")) {
        rc.train_scenes = j["data"].value("train_scenes", rc.train_scenes);
        rc.val_scenes = j["data"].value("val_scenes", rc.val_scenes);
    }
    if (j.contains("paths")) {
        rc.out_dir = j["paths"].value("out_dir", rc.out_dir);
        rc.checkpoint = j["paths"].value("checkpoint", rc.checkpoint);
        rc.manifest = j["paths"].value("manifest", rc.manifest);
    }
    return rc;
}

// Deterministic toy dataset: train scenes are indices [0, n_train), val
// scenes follow at [n_train, n_train + n_val).
inline std::pair<std::vector<Scene>, std::vector<Scene>> synth_dataset(const SynthConfig& cfg,
                                                                       std::size_t n_train,
                                                                       std::size_t n_val) {
    std::vector<Scene> train, val;
    for (std::size_t i = 0; i < n_train; ++i) train.push_back(synth_scene(cfg, i));
    for (std::size_t i = 0; i < n_val; ++i) val.push_back(synth_scene(cfg, n_train + i));
    return {std::move(train), std::move(val)};
}

} // namespace densevit
