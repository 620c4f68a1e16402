#include "stealth/metrics.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

#include "stealth/losses.hpp"
#include "stealth/rng.hpp"
#include "stealth/tensor.hpp"

namespace stealth {

namespace {

std::vector<Box> target_boxes(const Scene& scene) {
    std::vector<Box> out;
    for (const Box& b : scene.boxes)
        if (b.class_id == 0) out.push_back(b);
    return out;
}

// Deterministic patched frame: every augmentation off, scale preserved.
DetectorOutput patched_forward(const Scene& scene, const RenderedPatch& patch,
                               const DetectorWeights& weights,
                               double patch_scale) {
    const EotConfig off = eot_disabled(patch_scale);
    Rng rng(0);  // consulted only for degenerate zero-width draws
    const std::vector<double> pixels =
        apply_patch_values(scene, patch, off, rng);
    const int s = scene.size;
    return forward(Tensor::constant({3, s, s}, pixels), weights);
}

}  // namespace

std::vector<double> luminance(const std::vector<double>& pixels, int height,
                              int width) {
    const std::size_t hw = (std::size_t)height * (std::size_t)width;
    if (height < 1 || width < 1 || pixels.size() != 3 * hw)
        throw std::invalid_argument("luminance: pixel buffer does not match " +
                                    std::to_string(height) + "x" +
                                    std::to_string(width));
    std::vector<double> y(hw);
    for (std::size_t i = 0; i < hw; ++i)
        y[i] = 255.0 * (0.299 * pixels[i] + 0.587 * pixels[hw + i] +
                        0.114 * pixels[2 * hw + i]);
    return y;
}

double ssim(const std::vector<double>& x, const std::vector<double>& y,
            const SsimParams& params) {
    if (x.size() != y.size())
        throw std::invalid_argument("ssim: image sizes differ");
    if (x.empty()) throw std::invalid_argument("ssim: empty image");
    const double c1 = params.c1(), c2 = params.c2();
    if (c1 <= 0 || c2 <= 0)
        throw std::invalid_argument("ssim: stabilizers must be positive");
    const double n = (double)x.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double vx = 0, vy = 0, cov = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    // both factors are written as symmetric sums so identical inputs give
    // numerator == denominator and the ratio is exactly 1
    const double num = (mx * my + mx * my + c1) * (cov + cov + c2);
    const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
    return num / den;
}

double ssim(const RenderedPatch& x, const RenderedPatch& y,
            const SsimParams& params) {
    if (x.height != y.height || x.width != y.width)
        throw std::invalid_argument("ssim: image sizes differ");
    return ssim(luminance(x.data, x.height, x.width),
                luminance(y.data, y.height, y.width), params);
}

AsrResult attack_success_rate(const std::vector<Scene>& scenes,
                              const RenderedPatch& patch,
                              const DetectorWeights& weights,
                              double conf_threshold, double nms_iou,
                              double patch_scale) {
    if (scenes.empty()) throw std::invalid_argument("no frames to evaluate");
    AsrResult r;
    r.total_frames = (int)scenes.size();
    for (const Scene& scene : scenes) {
        const auto out = patched_forward(scene, patch, weights, patch_scale);
        const auto dets = decode(weights.config, out, conf_threshold, nms_iou);
        const auto gts = target_boxes(scene);
        bool attacked = true;
        for (const Detection& d : dets) {
            if (d.class_id != 0) continue;
            for (const Box& gt : gts)
                if (box_iou(d.box, gt) >= 0.5) attacked = false;
        }
        if (attacked) ++r.attacked_frames;
    }
    r.asr = (double)r.attacked_frames / (double)r.total_frames;
    return r;
}

double mean_patched_objectness(const std::vector<Scene>& scenes,
                               const RenderedPatch& patch,
                               const DetectorWeights& weights,
                               double patch_scale) {
    if (scenes.empty()) throw std::invalid_argument("no frames to evaluate");
    double sum = 0;
    for (const Scene& scene : scenes) {
        const auto out = patched_forward(scene, patch, weights, patch_scale);
        sum += mean_matched_objectness(weights.config, out,
                                       target_boxes(scene));
    }
    return sum / (double)scenes.size();
}

std::vector<CurvePoint> confidence_curve(const std::string& loss_csv,
                                         int steps_per_epoch) {
    if (steps_per_epoch < 1)
        throw std::invalid_argument("steps per epoch must be >= 1");
    std::istringstream in(loss_csv);
    std::string line;
    int lineno = 1;
    auto fail = [&](const std::string& what) {
        throw std::runtime_error("loss csv line " + std::to_string(lineno) +
                                 ": " + what);
    };
    if (!std::getline(in, line) ||
        line != "step,l_adv,l_distill,l_total,mean_obj")
        fail("bad header");

    std::vector<CurvePoint> curve;
    double block_sum = 0;
    int block_rows = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) fail("empty row");
        std::size_t pos = 0;
        for (int f = 0; f < 4; ++f) {
            pos = line.find(',', pos);
            if (pos == std::string::npos) fail("expected 5 fields");
            ++pos;
        }
        errno = 0;
        char* end = nullptr;
        const double v = std::strtod(line.c_str() + pos, &end);
        if (end == line.c_str() + pos || *end != '\0' || errno == ERANGE)
            fail("bad mean_obj value");
        block_sum += v;
        ++block_rows;
        if (block_rows == steps_per_epoch) {
            curve.push_back({(int)curve.size(), block_sum / block_rows});
            block_sum = 0;
            block_rows = 0;
        }
    }
    if (block_rows > 0)
        curve.push_back({(int)curve.size(), block_sum / block_rows});
    return curve;
}

std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
    std::string out = "epoch,mean_obj\n";
    char buf[64];
    for (const CurvePoint& p : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g\n", p.epoch, p.mean_obj);
        out += buf;
    }
    return out;
}

RenderedPatch quantize_to_palette(const std::vector<double>& pixels,
                                  int height, int width,
                                  const Palette& palette) {
    if (palette.size() < 1) throw std::invalid_argument("palette is empty");
    const std::size_t hw = (std::size_t)height * (std::size_t)width;
    if (height < 1 || width < 1 || pixels.size() != 3 * hw)
        throw std::invalid_argument("quantize: pixel buffer does not match " +
                                    std::to_string(height) + "x" +
                                    std::to_string(width));
    RenderedPatch out;
    out.height = height;
    out.width = width;
    out.data.resize(3 * hw);
    for (std::size_t i = 0; i < hw; ++i) {
        Rgb8 rgb;
        for (int c = 0; c < 3; ++c)
            rgb[(std::size_t)c] = (uint8_t)std::lround(
                std::clamp(pixels[(std::size_t)c * hw + i], 0.0, 1.0) * 255.0);
        const Rgb8 q = palette.colors[(std::size_t)nearest_palette_index(
            palette, rgb)];
        for (int c = 0; c < 3; ++c)
            out.data[(std::size_t)c * hw + i] = q[(std::size_t)c] / 255.0;
    }
    return out;
}

}  // namespace stealth
