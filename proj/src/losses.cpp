#include "stealth/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stealth {

namespace {

constexpr int kTargetClass = 0;
constexpr double kMatchIou = 0.1;

void check_output_shapes(const DetectorConfig& cfg, const DetectorOutput& out) {
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    if (out.obj.shape() != std::vector<int>{A, G, G} ||
        out.cls.shape() != std::vector<int>{A * K, G, G} ||
        out.pos.shape() != std::vector<int>{A * 4, G, G})
        throw std::invalid_argument("detector output does not match config");
}

}  // namespace

std::vector<MatchedAnchor> match_anchors(const DetectorConfig& cfg,
                                         const DetectorOutput& out,
                                         const std::vector<Box>& gt_boxes) {
    check_output_shapes(cfg, out);
    if (gt_boxes.empty())
        throw std::invalid_argument("anchor matching needs ground-truth boxes");
    const int G = cfg.grid, A = cfg.anchors;
    const size_t gg = (size_t)G * G;
    const auto& pos = out.pos.values();

    std::vector<MatchedAnchor> matched;
    for (int a = 0; a < A; ++a)
        for (int gy = 0; gy < G; ++gy)
            for (int gx = 0; gx < G; ++gx) {
                const size_t cell = (size_t)gy * G + gx;
                const Box d = decode_box(cfg, a, gy, gx,
                                         pos[(size_t)(a * 4 + 0) * gg + cell],
                                         pos[(size_t)(a * 4 + 1) * gg + cell],
                                         pos[(size_t)(a * 4 + 2) * gg + cell],
                                         pos[(size_t)(a * 4 + 3) * gg + cell]);
                int best_gt = 0;
                double best_iou = -1.0;
                for (size_t g = 0; g < gt_boxes.size(); ++g) {
                    const double iou = box_iou(d, gt_boxes[g]);
                    if (iou > best_iou) {
                        best_iou = iou;
                        best_gt = (int)g;
                    }
                }
                if (best_iou > kMatchIou)
                    matched.push_back({a, gy, gx, best_gt, best_iou});
            }
    return matched;
}

Tensor adversarial_loss(const DetectorConfig& cfg, const DetectorOutput& out,
                        const std::vector<Box>& gt_boxes,
                        const AdvLossWeights& weights) {
    if (weights.lambda1 < 0 || weights.lambda2 < 0 || weights.lambda3 < 0 ||
        (weights.lambda1 == 0 && weights.lambda2 == 0 && weights.lambda3 == 0))
        throw std::invalid_argument(
            "attack loss weights must be >= 0 and not all zero");
    const auto matched = match_anchors(cfg, out, gt_boxes);

    const int G = cfg.grid, K = cfg.classes;
    const size_t gg = (size_t)G * G;
    const double S = cfg.input_size;
    const double cell_px = S / cfg.grid;

    Tensor loss = Tensor::scalar(0.0);
    for (const MatchedAnchor& m : matched) {
        const size_t cell = (size_t)m.gy * G + m.gx;
        if (weights.lambda1 > 0) {
            const Tensor c = gather_scalar(
                out.cls, (size_t)(m.anchor * K + kTargetClass) * gg + cell);
            loss = add(loss, scale(c, weights.lambda1));
        }
        if (weights.lambda2 > 0) {
            const Tensor o =
                gather_scalar(out.obj, (size_t)m.anchor * gg + cell);
            loss = add(loss, scale(o, weights.lambda2));
        }
        if (weights.lambda3 > 0) {
            const Tensor tx = gather_scalar(
                out.pos, (size_t)(m.anchor * 4 + 0) * gg + cell);
            const Tensor ty = gather_scalar(
                out.pos, (size_t)(m.anchor * 4 + 1) * gg + cell);
            const Tensor tw = gather_scalar(
                out.pos, (size_t)(m.anchor * 4 + 2) * gg + cell);
            const Tensor th = gather_scalar(
                out.pos, (size_t)(m.anchor * 4 + 3) * gg + cell);
            const Tensor cx = add(scale(sigmoid(tx), cell_px), m.gx * cell_px);
            const Tensor cy = add(scale(sigmoid(ty), cell_px), m.gy * cell_px);
            const Tensor w =
                scale(sigmoid(tw), 2.0 * anchor_prior_w(cfg, m.anchor) * S);
            const Tensor h =
                scale(sigmoid(th), 2.0 * anchor_prior_h(cfg, m.anchor) * S);
            const Tensor x1 = maximum(sub(cx, mul(w, 0.5)), 0.0);
            const Tensor y1 = maximum(sub(cy, mul(h, 0.5)), 0.0);
            const Tensor x2 = minimum(add(cx, mul(w, 0.5)), S);
            const Tensor y2 = minimum(add(cy, mul(h, 0.5)), S);
            const Box& g = gt_boxes[(size_t)m.gt_index];
            const Tensor iw = relu(sub(minimum(x2, g.x2), maximum(x1, g.x1)));
            const Tensor ih = relu(sub(minimum(y2, g.y2), maximum(y1, g.y1)));
            const Tensor inter = mul(iw, ih);
            const Tensor area = mul(sub(x2, x1), sub(y2, y1));
            const Tensor uni =
                sub(add(area, g.width() * g.height()), inter);
            loss = add(loss, scale(div(inter, uni), weights.lambda3));
        }
    }
    return loss;
}

double mean_matched_objectness(const DetectorConfig& cfg,
                               const DetectorOutput& out,
                               const std::vector<Box>& gt_boxes) {
    const auto matched = match_anchors(cfg, out, gt_boxes);
    if (matched.empty()) return 0.0;
    const int G = cfg.grid;
    const size_t gg = (size_t)G * G;
    const auto& obj = out.obj.values();
    double sum = 0.0;
    for (const MatchedAnchor& m : matched)
        sum += obj[(size_t)m.anchor * gg + (size_t)m.gy * G + m.gx];
    return sum / (double)matched.size();
}

Tensor score_map(const DetectorOutput& out, MaskStrategy strategy) {
    const auto& oshape = out.obj.shape();
    const auto& cshape = out.cls.shape();
    if (oshape.size() != 3 || cshape.size() != 3 || oshape[1] != cshape[1] ||
        oshape[2] != cshape[2] || cshape[0] % oshape[0] != 0)
        throw std::invalid_argument("malformed detector output");
    const int A = oshape[0], G = oshape[1], K = cshape[0] / A;
    const size_t gg = (size_t)G * G;
    const auto& obj = out.obj.values();
    const auto& cls = out.cls.values();

    std::vector<double> omap(gg, 0.0), cmap(gg, 0.0);
    for (size_t cell = 0; cell < gg; ++cell) {
        for (int a = 0; a < A; ++a) {
            omap[cell] = std::max(omap[cell], obj[(size_t)a * gg + cell]);
            for (int k = 0; k < K; ++k)
                cmap[cell] =
                    std::max(cmap[cell], cls[(size_t)(a * K + k) * gg + cell]);
        }
    }
    std::vector<double> s(gg);
    switch (strategy) {
        case MaskStrategy::obj_conf: s = omap; break;
        case MaskStrategy::cls_max_conf: s = cmap; break;
        case MaskStrategy::obj_or_cls:
            for (size_t i = 0; i < gg; ++i) s[i] = std::max(omap[i], cmap[i]);
            break;
        case MaskStrategy::obj_and_cls:
            for (size_t i = 0; i < gg; ++i) s[i] = std::min(omap[i], cmap[i]);
            break;
    }
    return Tensor::constant({G, G}, std::move(s));
}

double mask_threshold(const MaskConfig& cfg) {
    switch (cfg.strategy) {
        case MaskStrategy::obj_conf: return cfg.th_obj;
        case MaskStrategy::cls_max_conf: return cfg.th_cls;
        case MaskStrategy::obj_or_cls: return std::min(cfg.th_obj, cfg.th_cls);
        case MaskStrategy::obj_and_cls: return std::max(cfg.th_obj, cfg.th_cls);
    }
    throw std::logic_error("unreachable mask strategy");
}

Tensor build_mask(const Tensor& score, double th, int feat_h, int feat_w) {
    if (th <= 0 || th >= 1)
        throw std::invalid_argument("mask threshold must be in (0, 1)");
    const auto& shape = score.shape();
    if (shape.size() != 2)
        throw std::invalid_argument("score map must be 2-d, got " +
                                    shape_str(shape));
    if (feat_h < 1 || feat_w < 1)
        throw std::invalid_argument("mask target size must be positive");
    const int H = shape[0], W = shape[1];
    const auto& s = score.values();
    std::vector<double> m((size_t)feat_h * feat_w);
    for (int y = 0; y < feat_h; ++y) {
        const int sy = y * H / feat_h;
        for (int x = 0; x < feat_w; ++x) {
            const int sx = x * W / feat_w;
            const double v = s[(size_t)sy * W + sx];
            m[(size_t)y * feat_w + x] = v > th ? v : 0.0;
        }
    }
    return Tensor::constant({feat_h, feat_w}, std::move(m));
}

Tensor distillation_loss(const Tensor& feat_tch, const Tensor& feat_stu,
                         const Tensor& mask_t, const Tensor& mask_s) {
    const auto& shape = feat_stu.shape();
    if (feat_tch.shape() != shape)
        throw std::invalid_argument("feature shapes differ: " +
                                    shape_str(feat_tch.shape()) + " vs " +
                                    shape_str(shape));
    if (shape.size() != 3)
        throw std::invalid_argument("features must be [C,H,W]");
    const std::vector<int> spatial{shape[1], shape[2]};
    if (mask_t.shape() != spatial || mask_s.shape() != spatial)
        throw std::invalid_argument("mask shape does not match feature grid");

    // region weights |mask_t - mask_s|, plain values
    const auto& mt = mask_t.values();
    const auto& ms = mask_s.values();
    std::vector<double> m(mt.size());
    for (size_t i = 0; i < m.size(); ++i) m[i] = std::abs(mt[i] - ms[i]);

    const Tensor diff =
        sub(Tensor::constant(shape, feat_tch.values()), feat_stu);
    const Tensor weighted = mul_spatial(diff, Tensor::constant(spatial, m));
    return reduce_sum(reduce_l2norm(weighted, {0}));
}

Tensor total_loss(const Tensor& l_adv, const Tensor& l_distill, double beta) {
    if (beta < 0) throw std::invalid_argument("beta must be >= 0");
    return add(l_adv, scale(l_distill, beta));
}

}  // namespace stealth
