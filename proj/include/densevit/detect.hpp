#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "densevit/geometry.hpp"
#include "densevit/params.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

struct Detection {
    RotatedBox box;        // score always set
    std::size_t grid_cell; // originating cell, row-major
};

struct HeadOutput {
    Tensor obj_logits; // (B,1,gh,gw)
    Tensor box_raw;    // (B,5,gh,gw): dx, dy, log w, log h, raw angle
};

struct LossBreakdown {
    Tensor total;            // scalar, on the tape
    double objectness = 0.0;
    double box_reg = 0.0;
    double focus_aux = 0.0;
    double lambda = 0.5;
};

// Box decode relative to its grid cell:
//   center = (cell + sigmoid(offset)) * P, extents = P * exp(log-extents),
//   theta = (pi/2) * tanh(raw).
inline RotatedBox decode_box(const double raw[5], std::size_t row, std::size_t col,
                             std::size_t patch, int class_id = 0,
                             std::optional<double> score = std::nullopt) {
    const double p = static_cast<double>(patch);
    auto sig = [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    };
    return make_box((static_cast<double>(col) + sig(raw[0])) * p,
                    (static_cast<double>(row) + sig(raw[1])) * p, p * std::exp(raw[2]),
                    p * std::exp(raw[3]), M_PI_2 * std::tanh(raw[4]), class_id, score);
}

// Inverse transform for ground truth whose center lies in cell (row, col).
inline std::array<double, 5> encode_box(const RotatedBox& b, std::size_t row, std::size_t col,
                                        std::size_t patch) {
    const double p = static_cast<double>(patch);
    auto logit = [](double v) {
        const double c = std::clamp(v, 1e-9, 1.0 - 1e-9);
        return std::log(c / (1.0 - c));
    };
    const double fx = b.cx / p - static_cast<double>(col);
    const double fy = b.cy / p - static_cast<double>(row);
    const double t = std::clamp(b.theta / M_PI_2, -1.0 + 1e-12, 1.0 - 1e-12);
    return {logit(fx), logit(fy), std::log(b.w / p), std::log(b.h / p), std::atanh(t)};
}

// Anchor-free single-level head: two 1x1 conv branches over the fused map.
class DetectionHead {
public:
    DetectionHead() = default;

    DetectionHead(ParamRegistry& reg, std::size_t channels, Rng& rng) {
        Tensor ow = detail::he_uniform({1, channels, 1, 1}, channels, rng);
        for (double& v : ow.mutable_values()) v *= 0.1;
        obj_w_ = reg.add("head.obj.weight", ow);
        obj_b_ = reg.add("head.obj.bias", Tensor::zeros({1}));
        Tensor bw = detail::he_uniform({5, channels, 1, 1}, channels, rng);
        for (double& v : bw.mutable_values()) v *= 0.1;
        box_w_ = reg.add("head.box.weight", bw);
        box_b_ = reg.add("head.box.bias", Tensor::zeros({5}));
    }

    HeadOutput forward(const Tensor& fused) const {
        detail::check(fused.rank() == 4, "head_forward: fused map must be (B,D,gh,gw)");
        return HeadOutput{conv2d(fused, obj_w_, obj_b_, 1, 0),
                          conv2d(fused, box_w_, box_b_, 1, 0)};
    }

private:
    Tensor obj_w_, obj_b_, box_w_, box_b_;
};

// One ground-truth box per cell (the cell containing its center); on
// collision the largest-area box wins, ties to the lower index.
inline std::vector<std::optional<std::size_t>> assign_targets(
    const std::vector<RotatedBox>& gts, std::size_t grid_h, std::size_t grid_w,
    std::size_t patch) {
    std::vector<std::optional<std::size_t>> cell_gt(grid_h * grid_w);
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        const RotatedBox& g = gts[gi];
        const long col = static_cast<long>(std::floor(g.cx / static_cast<double>(patch)));
        const long row = static_cast<long>(std::floor(g.cy / static_cast<double>(patch)));
        if (row < 0 || col < 0 || row >= static_cast<long>(grid_h) ||
            col >= static_cast<long>(grid_w))
            continue;
        auto& slot = cell_gt[static_cast<std::size_t>(row) * grid_w + static_cast<std::size_t>(col)];
        if (!slot.has_value() || gts[*slot].area() < g.area()) slot = gi;
    }
    return cell_gt;
}

// Objectness BCE over all cells, smooth-L1 box regression at positive cells
// (angle through its sin/cos pair), and the focusing-probability
// cross-entropy against refined masks binarized at 0.5.
inline LossBreakdown detection_loss(const HeadOutput& pred,
                                    const std::vector<std::vector<RotatedBox>>& gts,
                                    const std::vector<Tensor>& focus_logits,
                                    const std::vector<Tensor>& refined_masks, std::size_t patch,
                                    double lambda = 0.5) {
    const std::size_t b = pred.obj_logits.dim(0);
    const std::size_t gh = pred.obj_logits.dim(2), gw = pred.obj_logits.dim(3);
    detail::check(gts.size() == b, "detection_loss: need one ground-truth list per image");
    detail::check(focus_logits.size() == refined_masks.size(),
                  "detection_loss: focusing logits and masks must pair up");
    const std::size_t cells = gh * gw;

    std::vector<double> obj_target(b * cells, 0.0);
    std::vector<double> pos(b * cells, 0.0);
    std::vector<double> enc(b * 4 * cells, 0.0);
    std::vector<double> tsin(b * cells, 0.0), tcos(b * cells, 0.0);
    std::size_t npos = 0;
    for (std::size_t bi = 0; bi < b; ++bi) {
        auto assignment = assign_targets(gts[bi], gh, gw, patch);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            if (!assignment[cell].has_value()) continue;
            const RotatedBox& g = gts[bi][*assignment[cell]];
            obj_target[bi * cells + cell] = 1.0;
            pos[bi * cells + cell] = 1.0;
            const auto e = encode_box(g, cell / gw, cell % gw, patch);
            for (std::size_t c = 0; c < 4; ++c) enc[(bi * 4 + c) * cells + cell] = e[c];
            tsin[bi * cells + cell] = std::sin(g.theta);
            tcos[bi * cells + cell] = std::cos(g.theta);
            ++npos;
        }
    }

    // objectness: mean BCE-with-logits = mean(softplus(x) - x*t)
    Tensor target({b, 1, gh, gw}, std::move(obj_target));
    Tensor obj_loss = mean(sub(softplus(pred.obj_logits), mul(pred.obj_logits, target)));

    Tensor box_loss = Tensor::scalar(0.0);
    if (npos > 0) {
        Tensor posmask({b, 1, gh, gw}, std::move(pos));
        Tensor enc_t({b, 4, cells}, std::move(enc));
        Tensor raw4 = reshape(narrow(pred.box_raw, 1, 0, 4), {b, 4, cells});
        Tensor terms = sum_axis(smooth_l1(raw4, enc_t), 1, true); // (b,1,cells)
        Tensor theta = mul_scalar(tanh(narrow(pred.box_raw, 1, 4, 1)), M_PI_2);
        Tensor ang = add(smooth_l1(sin(theta), Tensor({b, 1, gh, gw}, std::move(tsin))),
                         smooth_l1(cos(theta), Tensor({b, 1, gh, gw}, std::move(tcos))));
        Tensor per_cell = add(reshape(terms, {b, 1, gh, gw}), ang);
        // mean over the six component terms and over positives
        box_loss = mul_scalar(sum(mul(per_cell, posmask)), 1.0 / (6.0 * static_cast<double>(npos)));
    }

    Tensor focus_loss = Tensor::scalar(0.0);
    if (!focus_logits.empty()) {
        for (std::size_t s = 0; s < focus_logits.size(); ++s) {
            const Tensor& logits = focus_logits[s];
            const std::size_t n = logits.dim(1);
            std::vector<double> keep(b * n, 0.0), drop(b * n, 0.0);
            const auto& mv = refined_masks[s].values();
            detail::check(mv.size() == b * n,
                          "detection_loss: refined mask does not match the token grid");
            for (std::size_t i = 0; i < b * n; ++i)
                (mv[i] > 0.5 ? keep[i] : drop[i]) = 1.0;
            Tensor lsm = log_softmax(logits, 2);
            Tensor l0 = reshape(narrow(lsm, 2, 0, 1), {b, n});
            Tensor l1 = reshape(narrow(lsm, 2, 1, 1), {b, n});
            Tensor ce = neg(mean(add(mul(Tensor({b, n}, std::move(keep)), l0),
                                     mul(Tensor({b, n}, std::move(drop)), l1))));
            focus_loss = add(focus_loss, ce);
        }
        focus_loss = mul_scalar(focus_loss, 1.0 / static_cast<double>(focus_logits.size()));
    }

    LossBreakdown out;
    out.lambda = lambda;
    out.total = add(add(obj_loss, box_loss), mul_scalar(focus_loss, lambda));
    out.objectness = obj_loss.item();
    out.box_reg = box_loss.item();
    out.focus_aux = focus_loss.item();
    return out;
}

// Threshold the objectness, decode the boxes, suppress duplicates.
inline std::vector<std::vector<Detection>> decode_detections(const HeadOutput& pred,
                                                             std::size_t patch,
                                                             double score_thresh,
                                                             double nms_iou) {
    detail::check(score_thresh > 0.0 && score_thresh < 1.0,
                  "decode_detections: score_thresh must lie in (0,1)");
    const std::size_t b = pred.obj_logits.dim(0);
    const std::size_t gh = pred.obj_logits.dim(2), gw = pred.obj_logits.dim(3);
    const std::size_t cells = gh * gw;
    std::vector<std::vector<Detection>> out(b);
    for (std::size_t bi = 0; bi < b; ++bi) {
        std::vector<Detection> cands;
        std::vector<RotatedBox> boxes;
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double logit = pred.obj_logits.values()[bi * cells + cell];
            const double prob = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                                             : std::exp(logit) / (1.0 + std::exp(logit));
            if (prob <= score_thresh) continue;
            double raw[5];
            for (std::size_t c = 0; c < 5; ++c)
                raw[c] = pred.box_raw.values()[(bi * 5 + c) * cells + cell];
            RotatedBox box = decode_box(raw, cell / gw, cell % gw, patch, 0, prob);
            cands.push_back(Detection{box, cell});
            boxes.push_back(box);
        }
        for (std::size_t k : rotated_nms(boxes, nms_iou)) out[bi].push_back(cands[k]);
    }
    return out;
}

struct EvalResult {
    std::map<int, double> per_class_ap; // classes with at least one ground truth
    std::optional<double> map;          // mean over defined per-class APs
    double recall = 0.0;                // matched / total ground truths
    std::size_t total_gts = 0;
    std::size_t matched_gts = 0;
};

// Greedy score-descending matching (highest-IoU unmatched ground truth at
// IoU >= thresh) and area under the precision-recall curve with all-points
// interpolation, per class.
inline EvalResult evaluate_detections(const std::vector<std::vector<RotatedBox>>& dets_per_image,
                                      const std::vector<std::vector<RotatedBox>>& gts_per_image,
                                      double iou_thresh = 0.5) {
    detail::check(dets_per_image.size() == gts_per_image.size(),
                  "evaluate_detections: image count mismatch");
    std::map<int, std::size_t> gt_count;
    for (const auto& gts : gts_per_image)
        for (const RotatedBox& g : gts) ++gt_count[g.class_id];

    EvalResult res;
    for (const auto& [cls, n_gt] : gt_count) res.total_gts += n_gt;

    for (const auto& [cls, n_gt] : gt_count) {
        struct Cand {
            double score;
            std::size_t img;
            std::size_t idx;
        };
        std::vector<Cand> cands;
        for (std::size_t i = 0; i < dets_per_image.size(); ++i)
            for (std::size_t j = 0; j < dets_per_image[i].size(); ++j)
                if (dets_per_image[i][j].class_id == cls) {
                    detail::check(dets_per_image[i][j].score.has_value(),
                                  "evaluate_detections: unscored detection");
                    cands.push_back({*dets_per_image[i][j].score, i, j});
                }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.score > b.score; });

        std::vector<std::vector<bool>> used(gts_per_image.size());
        for (std::size_t i = 0; i < gts_per_image.size(); ++i)
            used[i].assign(gts_per_image[i].size(), false);

        std::vector<bool> is_tp(cands.size(), false);
        std::size_t matched = 0;
        for (std::size_t ci = 0; ci < cands.size(); ++ci) {
            const auto& det = dets_per_image[cands[ci].img][cands[ci].idx];
            const auto& gts = gts_per_image[cands[ci].img];
            double best_iou = 0.0;
            std::size_t best = gts.size();
            for (std::size_t gi = 0; gi < gts.size(); ++gi) {
                if (gts[gi].class_id != cls || used[cands[ci].img][gi]) continue;
                const double iou = rotated_iou(det, gts[gi]);
                if (iou >= iou_thresh && iou > best_iou) {
                    best_iou = iou;
                    best = gi;
                }
            }
            if (best < gts.size()) {
                used[cands[ci].img][best] = true;
                is_tp[ci] = true;
                ++matched;
            }
        }
        res.matched_gts += matched;

        // PR curve over detection prefixes, then all-points interpolation
        std::vector<double> precision(cands.size()), rec(cands.size());
        std::size_t tp = 0;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            tp += is_tp[i];
            precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
            rec[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
        }
        double ap = 0.0, pmax = 0.0, prev_r = 0.0;
        std::vector<double> interp(precision);
        for (std::size_t i = precision.size(); i-- > 0;) {
            pmax = std::max(pmax, precision[i]);
            interp[i] = pmax;
        }
        for (std::size_t i = 0; i < precision.size(); ++i) {
            ap += (rec[i] - prev_r) * interp[i];
            prev_r = rec[i];
        }
        res.per_class_ap[cls] = ap;
    }

    if (!res.per_class_ap.empty()) {
        double s = 0.0;
        for (const auto& [cls, ap] : res.per_class_ap) s += ap;
        res.map = s / static_cast<double>(res.per_class_ap.size());
    }
    res.recall = res.total_gts == 0
                     ? 0.0
                     : static_cast<double>(res.matched_gts) / static_cast<double>(res.total_gts);
    return res;
}

// Single-class, single-image AP; absent when there is no ground truth.
inline std::optional<double> average_precision(const std::vector<RotatedBox>& dets,
                                               const std::vector<RotatedBox>& gts,
                                               double iou_thresh = 0.5) {
    if (gts.empty()) return std::nullopt;
    EvalResult r = evaluate_detections({dets}, {gts}, iou_thresh);
    return r.map;
}

} // namespace densevit
