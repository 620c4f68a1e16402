#pragma once

#include <cstdint>
#include <vector>

#include "stealth/colorspace.hpp"
#include "stealth/rng.hpp"
#include "stealth/tensor.hpp"

namespace stealth {

// Per-pixel color-probability logits over the palette.  Values persist
// across optimization steps; rendering builds tape nodes from them.
struct PatchParams {
    std::vector<double> logits;  // [m, H, W] planar
    double omega = 0.3;
    Palette palette;
    int height = 0;
    int width = 0;

    int colors() const { return palette.size(); }

    // Logits i.i.d. Normal(0, 0.1): near-uniform color mix at the start.
    static PatchParams init(const Palette& palette, int height, int width,
                            double omega, std::uint64_t seed);
};

// Planar [3, H, W] pixel values in [0,1].
struct RenderedPatch {
    std::vector<double> data;
    int height = 0;
    int width = 0;
};

// Standard Gumbel(0,1) draws g = -log(-log(u)), u in (0,1); length m*h*w.
std::vector<double> sample_gumbel(int m, int height, int width, Rng& rng);

// softmax((logits + g) / omega) over the color axis.  logits [m,H,W].
Tensor soft_weights(const Tensor& logits, double omega,
                    const std::vector<double>& gumbel);

// out[c] = sum_i weights[i] * palette_i[c]; palette channels scaled to [0,1].
Tensor palette_mix(const Tensor& weights, const Palette& palette);

// Differentiable render: convex combination of palette colors under
// Gumbel-perturbed softmax weights.  Fresh noise per call.
Tensor render_soft(const Tensor& logits, const Palette& palette, double omega,
                   Rng& rng);
// Same, with caller-supplied (frozen) noise.
Tensor render_soft_with_noise(const Tensor& logits, const Palette& palette,
                              double omega, const std::vector<double>& gumbel);

// argmax over logits per pixel; ties break to the lowest palette index.
RenderedPatch render_hard(const PatchParams& params);

struct AnnealSchedule {
    enum class Kind { constant, linear, exponential };
    Kind kind = Kind::constant;
    double start = 0.3;
    double end = 0.3;      // linear target
    int steps = 1;         // linear duration
    double half_life = 10; // exponential decay
};

// Temperature for the given step; results <= 0 clamp to 1e-3 with a warning.
double anneal_temperature(const AnnealSchedule& schedule, int step);

}  // namespace stealth
