#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stealth/colorspace.hpp"
#include "stealth/detector.hpp"
#include "stealth/patchgen.hpp"
#include "stealth/scene.hpp"

namespace stealth {

// Whole-image structural similarity with the standard stabilizers.
struct SsimParams {
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 255.0;  // 8-bit luminance

    double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
    double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

// Planar [3,H,W] values in [0,1] to BT.601 luminance in [0, 255].
std::vector<double> luminance(const std::vector<double>& pixels, int height,
                              int width);

// Global-statistics SSIM over two equal-length grayscale buffers
// (population moments over the whole image). Exactly 1 when x == y;
// always within [-1, 1].
double ssim(const std::vector<double>& x, const std::vector<double>& y,
            const SsimParams& params = {});

// Color overload: converts both to luminance first. Sizes must match.
double ssim(const RenderedPatch& x, const RenderedPatch& y,
            const SsimParams& params = {});

struct AsrResult {
    int total_frames = 0;
    int attacked_frames = 0;
    double asr = 0.0;  // attacked_frames / total_frames
};

// A frame counts as attacked iff the patched frame decodes to no class-0
// detection at or above conf_threshold overlapping a class-0 box at
// IoU >= 0.5. Compositing runs with every augmentation disabled, so the
// result is deterministic.
AsrResult attack_success_rate(const std::vector<Scene>& scenes,
                              const RenderedPatch& patch,
                              const DetectorWeights& weights,
                              double conf_threshold, double nms_iou,
                              double patch_scale);

// Mean over scenes of the matched-anchor objectness on the patched frame,
// under the same deterministic compositing as attack_success_rate.
double mean_patched_objectness(const std::vector<Scene>& scenes,
                               const RenderedPatch& patch,
                               const DetectorWeights& weights,
                               double patch_scale);

struct CurvePoint {
    int epoch = 0;
    double mean_obj = 0.0;
};

// Averages the mean_obj column of a per-step loss CSV over blocks of
// steps_per_epoch rows (the final block may be shorter). Malformed input
// fails with the offending line number.
std::vector<CurvePoint> confidence_curve(const std::string& loss_csv,
                                         int steps_per_epoch);

// "epoch,mean_obj" header plus one row per point.
std::string curve_to_csv(const std::vector<CurvePoint>& curve);

// Nearest-LAB palette color per pixel; input values in [0,1], planar.
RenderedPatch quantize_to_palette(const std::vector<double>& pixels,
                                  int height, int width,
                                  const Palette& palette);

}  // namespace stealth
