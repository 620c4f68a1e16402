#pragma once

#include <cstdint>
#include <string>

#include "stealth/params.hpp"

namespace stealth {

// Flat key=value run configuration.  Every key has a default; unknown keys
// are rejected; parse(serialize(c)) reproduces c bit-exactly.
struct Config {
    std::uint64_t seed = 0;

    int train_epochs = 300;
    int train_batch_size = 8;
    double teacher_lr = 0.03;
    double student_lr = 0.01;
    double beta = 1.0;
    double omega = 0.3;
    int patch_size = 16;
    std::string teacher_init = "uniform";  // or "gray"

    int palette_size = 8;
    std::string palette_file;

    double eot_contrast_lo = 0.8;
    double eot_contrast_hi = 1.2;
    double eot_brightness_lo = -0.1;
    double eot_brightness_hi = 0.1;
    double eot_noise_std = 0.01;
    double eot_rotation_deg = 20.0;
    double eot_patch_scale = 0.25;

    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double lambda3 = 0.5;

    std::string mask_strategy = "cls_max_conf";
    double mask_th_cls = 0.25;
    double mask_th_obj = 0.1;

    int det_input_size = 64;
    int det_grid = 8;
    int det_anchors = 2;
    int det_classes = 2;
    std::string det_channels = "8,16,24,24";
    int det_epochs = 50;
    double det_lr = 0.01;

    int data_scenes = 200;
    int data_holdout = 50;
    int data_targets_min = 1;
    int data_targets_max = 3;

    double eval_conf_threshold = 0.5;
    double eval_nms_iou = 0.5;

    bool operator==(const Config&) const = default;

    // Starts from defaults, applies the file, validates.  Errors carry the
    // offending line number or key name.
    static Config parse(const std::string& text);
    std::string serialize() const;
    void validate() const;

    // Typed views consumed by the pipeline modules.
    EotConfig eot() const;
    AdvLossWeights adv_weights() const;
    MaskConfig mask() const;
    DetectorConfig detector() const;
    SceneGenConfig scene_gen() const;
    RunConfig teacher_run() const;
    RunConfig student_run() const;
};

Config load_config(const std::string& path);
void save_config(const Config& cfg, const std::string& path);

}  // namespace stealth
