#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stealth {

// Per-composite augmentation ranges; rotation is sampled in [-deg, +deg].
struct EotConfig {
    double contrast_lo = 0.8;
    double contrast_hi = 1.2;
    double brightness_lo = -0.1;
    double brightness_hi = 0.1;
    double noise_std = 0.01;
    double rotation_deg = 20.0;
    double patch_scale = 0.25;  // patch side relative to the target box side
};

struct AdvLossWeights {
    double lambda1 = 1.0;  // class-score term
    double lambda2 = 1.0;  // objectness term
    double lambda3 = 0.5;  // box-overlap term
};

enum class MaskStrategy { obj_conf, cls_max_conf, obj_or_cls, obj_and_cls };

MaskStrategy mask_strategy_from_string(const std::string& name);
std::string mask_strategy_to_string(MaskStrategy s);

struct MaskConfig {
    MaskStrategy strategy = MaskStrategy::cls_max_conf;
    double th_cls = 0.25;
    double th_obj = 0.1;
};

struct DetectorConfig {
    int input_size = 64;  // square side, divisible by grid
    int grid = 8;
    int anchors = 2;
    int classes = 2;  // class 0 is the attack target
    std::vector<int> channels = {8, 16, 24, 24};
};

struct SceneGenConfig {
    int size = 64;
    int targets_min = 1;
    int targets_max = 3;
};

struct RunConfig {
    int epochs = 300;
    int batch_size = 8;
    double learning_rate = 0.01;
    std::uint64_t seed = 0;
    EotConfig eot;
    AdvLossWeights adv;
    MaskConfig mask;
    double beta = 1.0;
    double omega = 0.3;
    int patch_size = 16;
    std::string teacher_init = "uniform";  // or "gray"
    std::string palette_file;
};

}  // namespace stealth
