#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "densevit/data.hpp"
#include "densevit/density.hpp"
#include "densevit/detect.hpp"
#include "densevit/optim.hpp"
#include "densevit/tensor_io.hpp"
#include "densevit/vit.hpp"

namespace densevit {

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"image_h", c.image_h},   {"image_w", c.image_w},
            {"patch", c.patch},       {"embed_dim", c.embed_dim},
            {"depth", c.depth},       {"heads", c.heads},
            {"defm_layers", c.defm_layers}, {"mlp_ratio", c.mlp_ratio},
            {"keep_ratio", c.keep_ratio},   {"hard_gating", c.hard_gating}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_h = j.value("image_h", c.image_h);
    c.image_w = j.value("image_w", c.image_w);
    c.patch = j.value("patch", c.patch);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    if (j.contains("defm_layers")) c.defm_layers = j["defm_layers"].get<std::vector<std::size_t>>();
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.keep_ratio = j.value("keep_ratio", c.keep_ratio);
    c.hard_gating = j.value("hard_gating", c.hard_gating);
    return c;
}

// Stacks scene images into a (B,1,H,W) batch tensor.
inline Tensor batch_images(const std::vector<const Scene*>& scenes) {
    detail::check(!scenes.empty(), "batch_images: empty batch");
    const std::size_t h = scenes[0]->image.dim(1), w = scenes[0]->image.dim(2);
    std::vector<double> data;
    data.reserve(scenes.size() * h * w);
    for (const Scene* s : scenes) {
        detail::check(s->image.dim(1) == h && s->image.dim(2) == w,
                      "batch_images: mixed image extents");
        data.insert(data.end(), s->image.values().begin(), s->image.values().end());
    }
    return Tensor({scenes.size(), 1, h, w}, std::move(data));
}

// Full detector: CNN branch + density masks + fusion-gated ViT encoder +
// anchor-free rotated-box head, with all parameters in one registry.
class Model {
public:
    explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed ^ 0x5eed0001u);
        encoder_ = Encoder(params_, cfg_, rng);
        head_ = DetectionHead(params_, cfg_.embed_dim, rng);
    }

    struct ForwardResult {
        Encoder::Output enc;
        Tensor fused;
        HeadOutput head;
    };

    // Training consumes per-image ground truth to build the coarse density
    // maps; inference never reads it.
    ForwardResult forward(const Tensor& images,
                          const std::vector<std::vector<RotatedBox>>& gts, Mode mode) const {
        ForwardResult r;
        if (mode == Mode::training) {
            detail::check(gts.size() == images.dim(0),
                          "forward: need ground truth for every image in training mode");
            std::vector<DensityMap> coarse;
            for (const auto& boxes : gts)
                coarse.push_back(coarse_density_map(boxes, cfg_.image_h, cfg_.image_w));
            r.enc = encoder_.forward_with_density(images, coarse, Mode::training);
        } else {
            r.enc = encoder_.forward_with_density(images, {}, Mode::inferring);
        }
        r.fused = encoder_.fuse_final(r.enc.tokens, r.enc.pyramid.level(cfg_.fuse_level()));
        r.head = head_.forward(r.fused);
        return r;
    }

    LossBreakdown loss(const ForwardResult& fr, const std::vector<std::vector<RotatedBox>>& gts,
                       double lambda = 0.5) const {
        return detection_loss(fr.head, gts, fr.enc.focus_logits, fr.enc.refined_masks,
                              cfg_.patch, lambda);
    }

    std::vector<std::vector<Detection>> infer(const Tensor& images, double score_thresh,
                                              double nms_iou) const {
        ForwardResult r = forward(images, {}, Mode::inferring);
        return decode_detections(r.head, cfg_.patch, score_thresh, nms_iou);
    }

    const ModelConfig& config() const { return cfg_; }
    const Encoder& encoder() const { return encoder_; }
    const DetectionHead& head() const { return head_; }
    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }

    void save(const std::string& path, const nlohmann::json& extra = {}) const {
        nlohmann::json meta;
        meta["model_config"] = to_json(cfg_);
        if (!extra.is_null() && !extra.empty()) meta["extra"] = extra;
        save_checkpoint(path, params_, meta);
    }

    // Loads weights; the stored model config must match this model's.
    nlohmann::json load(const std::string& path) {
        nlohmann::json meta = load_checkpoint(path, params_);
        detail::check(meta.contains("model_config") && meta["model_config"] == to_json(cfg_),
                      "checkpoint/model-config mismatch: '" + path +
                          "' was written for a different architecture");
        return meta;
    }

private:
    ModelConfig cfg_;
    ParamRegistry params_;
    Encoder encoder_;
    DetectionHead head_;
};

// Runs GT-free inference over a scene list and scores it against the
// ground truth.
inline EvalResult evaluate_model(const Model& model, const std::vector<Scene>& scenes,
                                 double score_thresh, double nms_iou, double iou_thresh = 0.5,
                                 std::size_t batch_size = 8) {
    std::vector<std::vector<RotatedBox>> dets_all, gts_all;
    for (std::size_t start = 0; start < scenes.size(); start += batch_size) {
        const std::size_t end = std::min(scenes.size(), start + batch_size);
        std::vector<const Scene*> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(&scenes[i]);
        auto det_batches = model.infer(batch_images(batch), score_thresh, nms_iou);
        for (std::size_t i = 0; i < det_batches.size(); ++i) {
            std::vector<RotatedBox> dets;
            for (const Detection& d : det_batches[i]) dets.push_back(d.box);
            dets_all.push_back(std::move(dets));
            gts_all.push_back(scenes[start + i].boxes);
        }
    }
    return evaluate_detections(dets_all, gts_all, iou_thresh);
}

struct TrainConfig {
    std::int64_t iters = 2000;
    std::size_t batch_size = 4;
    std::int64_t eval_every = 500;
    double score_thresh = 0.3;
    double nms_iou = 0.3;
    double lambda_focus = 0.5;
    bool augment_flips = true;
    std::uint64_t seed = 42;
};

struct TrainLogRow {
    std::int64_t iter;
    double lr, total, objectness, box_reg, focus_aux;
};

struct EvalLogRow {
    std::int64_t iter;
    double map, recall;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    std::vector<EvalLogRow> evals;
    bool aborted_on_nan = false;
};

// Single-threaded deterministic training loop: batch -> density maps ->
// CNN/ViT with fusion stages -> head -> loss -> backward -> clipped AdamW.
// On a non-finite loss the last known-good parameters are restored and the
// loop stops.
inline TrainResult train_model(Model& model, OptimState& state,
                               const std::vector<Scene>& train_scenes,
                               const std::vector<Scene>& val_scenes, const TrainConfig& tc,
                               const std::function<void(const TrainLogRow&)>& on_log = {},
                               const std::function<void(const EvalLogRow&)>& on_eval = {}) {
    detail::check(!train_scenes.empty(), "train_model: no training scenes");
    detail::check(tc.batch_size >= 1, "train_model: batch_size must be positive");
    if (state.first_moment.empty()) state.init(model.params());
    state.total_iters = tc.iters;

    Rng rng(tc.seed ^ 0x7aa1defull);
    std::vector<std::size_t> order(train_scenes.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size(); // forces a shuffle on first use

    std::vector<std::vector<double>> last_good;
    auto snapshot = [&] {
        last_good.clear();
        for (const Param& p : model.params().list()) last_good.push_back(p.tensor.values());
    };
    auto restore = [&] {
        for (std::size_t i = 0; i < last_good.size(); ++i)
            model.params()[i].tensor.mutable_values() = last_good[i];
    };
    snapshot();

    TrainResult result;
    for (std::int64_t iter = 1; iter <= tc.iters; ++iter) {
        std::vector<Scene> batch;
        for (std::size_t k = 0; k < tc.batch_size; ++k) {
            if (cursor >= order.size()) {
                for (std::size_t i = order.size(); i-- > 1;)
                    std::swap(order[i], order[rng.uniform_int(0, static_cast<std::int64_t>(i))]);
                cursor = 0;
            }
            Scene s = train_scenes[order[cursor++]];
            if (tc.augment_flips) {
                if (rng.uniform() < 0.5) s = hflip(s);
                if (rng.uniform() < 0.5) s = vflip(s);
            }
            batch.push_back(std::move(s));
        }
        std::vector<const Scene*> ptrs;
        std::vector<std::vector<RotatedBox>> gts;
        for (const Scene& s : batch) {
            ptrs.push_back(&s);
            gts.push_back(s.boxes);
        }

        Model::ForwardResult fr = model.forward(batch_images(ptrs), gts, Mode::training);
        LossBreakdown loss = model.loss(fr, gts, tc.lambda_focus);
        const double total = loss.total.item();
        if (!std::isfinite(total)) {
            restore();
            result.aborted_on_nan = true;
            return result;
        }

        model.params().zero_grad();
        backward(loss.total);
        const double lr = lr_schedule(iter, state);
        adamw_step(model.params(), state, lr);

        TrainLogRow row{iter, lr, total, loss.objectness, loss.box_reg, loss.focus_aux};
        result.log.push_back(row);
        if (on_log) on_log(row);

        if (tc.eval_every > 0 && (iter % tc.eval_every == 0 || iter == tc.iters) &&
            !val_scenes.empty()) {
            EvalResult ev = evaluate_model(model, val_scenes, tc.score_thresh, tc.nms_iou);
            EvalLogRow erow{iter, ev.map.value_or(0.0), ev.recall};
            result.evals.push_back(erow);
            if (on_eval) on_eval(erow);
            snapshot();
        }
    }
    return result;
}

} // namespace densevit
