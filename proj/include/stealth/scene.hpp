#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stealth/image.hpp"
#include "stealth/params.hpp"
#include "stealth/patchgen.hpp"
#include "stealth/rng.hpp"
#include "stealth/tensor.hpp"

namespace stealth {

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int class_id = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    bool operator==(const Box&) const = default;
};

// Class 0 is the attack target.
struct Scene {
    std::vector<double> image;  // [3,S,S] planar, values in [0,1]
    int size = 0;
    std::vector<Box> boxes;
    std::uint64_t background_seed = 0;  // re-renders the target-free background
};

// Textured gradient background with shape clutter, 1-3 dark figure targets
// (class 0), and up to 2 block distractors (class 1).  Deterministic per seed.
Scene synthesize_scene(std::uint64_t seed, const SceneGenConfig& cfg);

// The same background the scene was drawn on, without targets or
// distractors; the environment-color source for palette extraction.
Image render_background(std::uint64_t seed, const SceneGenConfig& cfg);

// One sampled augmentation per target box plus whole-image noise.
struct PatchDraw {
    int side = 0;        // composite square side in pixels
    double cx = 0, cy = 0;  // box center on the scene
    double angle = 0;    // radians
    double contrast = 1;
    double brightness = 0;
};

struct EotDraws {
    std::vector<PatchDraw> per_box;   // one per class-0 box, in box order
    std::vector<double> noise;        // [3,S,S], empty when noise_std == 0
};

// Sampling order per box: angle, contrast, brightness; then image noise.
EotDraws sample_patch_draws(const Scene& scene, const EotConfig& eot, Rng& rng);

// Composites the patch onto every target box under the given draws:
// bilinear scale to side x side, rotate (out-of-patch area transparent),
// contrast/brightness on patch pixels only, then noise and clamp to [0,1].
// Differentiable with respect to patch ([3,Hp,Wp], square).
Tensor apply_patch_with_draws(const Scene& scene, const Tensor& patch,
                              const EotDraws& draws);

Tensor apply_patch(const Scene& scene, const Tensor& patch,
                   const EotConfig& eot, Rng& rng);

// Evaluation path: no tape, hard-rendered patch, returns pixel values.
std::vector<double> apply_patch_values(const Scene& scene,
                                       const RenderedPatch& patch,
                                       const EotConfig& eot, Rng& rng);

// EOT with every augmentation switched off (identity contrast, zero
// brightness/noise/rotation); scaling to patch_scale still applies.
EotConfig eot_disabled(double patch_scale);

// One "class x1 y1 x2 y2" line per box.
std::string annotations_to_text(const std::vector<Box>& boxes);
std::vector<Box> annotations_from_text(const std::string& text);
void save_annotations(const std::vector<Box>& boxes, const std::string& path);
std::vector<Box> load_annotations(const std::string& path);

}  // namespace stealth
