#pragma once

#include <vector>

#include "stealth/detector.hpp"
#include "stealth/params.hpp"
#include "stealth/scene.hpp"
#include "stealth/tensor.hpp"

namespace stealth {

// Anchor whose decoded box overlaps a ground-truth box (IoU > 0.1); the
// attack objective sums over exactly these anchors. Matching is computed
// from output values and carries no gradient.
struct MatchedAnchor {
    int anchor = 0;
    int gy = 0;
    int gx = 0;
    int gt_index = 0;  // best-overlap ground-truth box
    double iou = 0.0;
};

std::vector<MatchedAnchor> match_anchors(const DetectorConfig& cfg,
                                         const DetectorOutput& out,
                                         const std::vector<Box>& gt_boxes);

// Sum over matched anchors of
//   lambda1 * cls(target class) + lambda2 * obj + lambda3 * IoU(decoded, gt)
// where the IoU term is differentiable through the position head. Minimizing
// drives class score, objectness, and localization down at the targets.
// Throws if gt_boxes is empty. No matched anchors yields a constant zero.
Tensor adversarial_loss(const DetectorConfig& cfg, const DetectorOutput& out,
                        const std::vector<Box>& gt_boxes,
                        const AdvLossWeights& weights);

// Mean objectness over matched anchors (plain value, 0 when none match).
double mean_matched_objectness(const DetectorConfig& cfg,
                               const DetectorOutput& out,
                               const std::vector<Box>& gt_boxes);

// Per-cell score map [G,G]: max over anchors of the chosen confidence
// family; the or/and variants are the elementwise max/min of the two maps.
// Pure values, detached from any tape.
Tensor score_map(const DetectorOutput& out, MaskStrategy strategy);

// Threshold paired with each strategy: the obj and cls families keep their
// own thresholds; the or-combined map gates at the looser (min) and the
// and-combined map at the stricter (max) of the two.
double mask_threshold(const MaskConfig& cfg);

// Gate (keep score where score > th, else 0), then nearest-neighbor resize
// from [G,G] to [feat_h, feat_w]. Detached values.
Tensor build_mask(const Tensor& score, double th, int feat_h, int feat_w);

// Masked feature-imitation loss: with M = |mask_t - mask_s| the loss is the
// sum over spatial locations of the channel-L2 norm of (feat_tch - feat_stu)
// scaled by M. Gradient flows to feat_stu only; the teacher features and
// both masks are treated as constants.
Tensor distillation_loss(const Tensor& feat_tch, const Tensor& feat_stu,
                         const Tensor& mask_t, const Tensor& mask_s);

// l_adv + beta * l_distill
Tensor total_loss(const Tensor& l_adv, const Tensor& l_distill, double beta);

}  // namespace stealth
