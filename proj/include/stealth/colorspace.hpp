#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace stealth {

using Rgb8 = std::array<uint8_t, 3>;

struct LabColor {
    double L = 0.0;  // lightness, [0, 100] for in-gamut sRGB
    double a = 0.0;
    double b = 0.0;
};

// Pixels harvested from an environment image; clustering input.
struct EnvironmentSample {
    std::vector<Rgb8> pixels;
};

// Ordered cluster centers, quantized back to sRGB.
struct Palette {
    std::vector<Rgb8> colors;

    int size() const { return static_cast<int>(colors.size()); }
};

// D65 white point, standard sRGB gamma + XYZ matrices.
LabColor srgb_to_lab(Rgb8 rgb);

// Inverse conversion; out-of-gamut values clamp to [0,255] before quantization.
Rgb8 lab_to_srgb(const LabColor& lab);

// Lloyd's algorithm with k-means++ init, run in LAB space on up to 1e5
// (seed-subsampled) pixels.  Deterministic for fixed (env, m, seed).
// Empty clusters re-seed from the point farthest from its current center.
// m must be in [1, 64]; env must hold at least m pixels.
Palette extract_palette(const EnvironmentSample& env, int m, uint64_t seed,
                        int max_iters = 100);

// Sum of squared LAB distances from each pixel to its nearest palette color.
double palette_objective(const EnvironmentSample& env, const Palette& palette);

// Index of the palette color nearest to rgb in LAB distance (ties: lowest index).
int nearest_palette_index(const Palette& palette, Rgb8 rgb);

// Text form: one "#RRGGBB" line per color.
std::string palette_to_text(const Palette& palette);
Palette palette_from_text(const std::string& text);

}  // namespace stealth
