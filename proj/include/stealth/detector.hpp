#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stealth/params.hpp"
#include "stealth/scene.hpp"
#include "stealth/tensor.hpp"

namespace stealth {

// Single-stage anchor-grid detector: four 3x3 conv+relu stages (the first
// three stride 2, so grid = input_size / 8), a feature tap on the last
// stage's output, and 1x1 conv heads for box offsets, class scores, and
// objectness.
struct DetectorWeights {
    DetectorConfig config;
    std::vector<double> flat;  // all tensors concatenated, manifest order

    bool operator==(const DetectorWeights&) const = default;

    // Ordered (name, shape) rows; offsets into `flat` follow this order.
    static std::vector<std::pair<std::string, std::vector<int>>> manifest(
        const DetectorConfig& cfg);

    static DetectorWeights init(const DetectorConfig& cfg, std::uint64_t seed);

    // Text shape manifest followed by raw little-endian doubles; versioned.
    void save(const std::string& path) const;
    static DetectorWeights load(const std::string& path);
};

struct DetectorOutput {
    Tensor pos;         // [A*4, G, G] raw offsets (tx, ty, tw, th per anchor)
    Tensor cls;         // [A*K, G, G] class scores after sigmoid
    Tensor obj;         // [A, G, G] objectness after sigmoid
    Tensor feat;        // [C4, G, G] last-stage feature tap, the heads' input
    Tensor cls_logits;  // pre-sigmoid heads, for training losses
    Tensor obj_logits;
};

struct Detection {
    Box box;
    int class_id = 0;
    double score = 0;
};

// Anchor prior sizes as fractions of the input side.
double anchor_prior_w(const DetectorConfig& cfg, int anchor);
double anchor_prior_h(const DetectorConfig& cfg, int anchor);

// Weights enter the graph as constants: gradients flow to the image only.
DetectorOutput forward(const Tensor& image, const DetectorWeights& weights);

// Weights enter as tape variables (returned in manifest order): gradients
// flow to the weights.  The image is a constant.
struct DetectorGraph {
    DetectorOutput out;
    std::vector<Tensor> params;
};
DetectorGraph forward_trainable(Tape& tape, const std::vector<double>& image,
                                const DetectorWeights& weights);

// Box center from cell + sigmoid offset; size bounded by twice the prior.
Box decode_box(const DetectorConfig& cfg, int anchor, int gy, int gx,
               double tx, double ty, double tw, double th);

double box_iou(const Box& a, const Box& b);

// score = obj * max class score; greedy per-class NMS; sorted by score.
std::vector<Detection> decode(const DetectorConfig& cfg,
                              const DetectorOutput& out,
                              double conf_threshold, double nms_iou);

// BCE objectness/class heads + squared offsets on assigned anchors,
// mini-batches of 8, seed-shuffled each epoch.  Aborts on non-finite loss.
DetectorWeights train_toy(const std::vector<Scene>& dataset, int epochs,
                          double learning_rate, std::uint64_t seed,
                          const DetectorConfig& cfg);

// Fraction of ground-truth boxes of `class_filter` (-1 = all classes)
// matched by a decoded detection of the same class at IoU >= 0.5.
double measure_recall(const DetectorWeights& weights,
                      const std::vector<Scene>& scenes, double conf_threshold,
                      double nms_iou, int class_filter = 0);

}  // namespace stealth
