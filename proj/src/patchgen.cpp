#include "stealth/patchgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace stealth {

PatchParams PatchParams::init(const Palette& palette, int height, int width,
                              double omega, std::uint64_t seed) {
    if (palette.colors.empty()) throw std::invalid_argument("palette is empty");
    if (height < 1 || width < 1)
        throw std::invalid_argument("patch dimensions must be positive");
    if (omega <= 0) throw std::invalid_argument("omega must be > 0");
    PatchParams p;
    p.palette = palette;
    p.height = height;
    p.width = width;
    p.omega = omega;
    Rng rng(derive_seed(seed, 0x7061746368ULL));  // patch-init stream
    p.logits.resize(static_cast<size_t>(palette.size()) * height * width);
    for (double& v : p.logits) v = rng.normal(0.0, 0.1);
    return p;
}

std::vector<double> sample_gumbel(int m, int height, int width, Rng& rng) {
    std::vector<double> g(static_cast<size_t>(m) * height * width);
    for (double& v : g) v = rng.gumbel();
    return g;
}

Tensor soft_weights(const Tensor& logits, double omega,
                    const std::vector<double>& gumbel) {
    if (omega <= 0) throw std::invalid_argument("omega must be > 0");
    const auto& s = logits.shape();
    if (s.size() != 3)
        throw std::invalid_argument("soft_weights: logits must be [m,H,W], got " +
                                    shape_str(s));
    if (gumbel.size() != logits.numel())
        throw std::invalid_argument("soft_weights: noise length mismatch");
    const Tensor g = Tensor::constant(s, gumbel);
    return softmax(scale(add(logits, g), 1.0 / omega), 0);
}

Tensor palette_mix(const Tensor& weights, const Palette& palette) {
    const auto& s = weights.shape();
    const int m = palette.size();
    if (s.size() != 3 || s[0] != m)
        throw std::invalid_argument(
            "palette_mix: weights must be [m,H,W] with m = palette size, got " +
            shape_str(s));
    const size_t hw = static_cast<size_t>(s[1]) * s[2];
    std::vector<double> colors(static_cast<size_t>(m) * 3);
    for (int i = 0; i < m; ++i)
        for (int c = 0; c < 3; ++c)
            colors[static_cast<size_t>(i) * 3 + c] =
                palette.colors[static_cast<size_t>(i)][static_cast<size_t>(c)] / 255.0;

    std::vector<double> out(3 * hw, 0.0);
    for (int i = 0; i < m; ++i)
        for (int c = 0; c < 3; ++c) {
            const double col = colors[static_cast<size_t>(i) * 3 + c];
            for (size_t p = 0; p < hw; ++p)
                out[static_cast<size_t>(c) * hw + p] +=
                    weights.values()[static_cast<size_t>(i) * hw + p] * col;
        }

    Tensor result = detail::make_result({3, s[1], s[2]}, std::move(out), {&weights});
    if (result.requires_grad()) {
        result.impl->tape->record(
            [wi = weights.impl, ri = result.impl, colors, m, hw]() {
                if (!wi->requires_grad) return;
                for (int i = 0; i < m; ++i)
                    for (int c = 0; c < 3; ++c) {
                        const double col = colors[static_cast<size_t>(i) * 3 + c];
                        for (size_t p = 0; p < hw; ++p)
                            wi->grad[static_cast<size_t>(i) * hw + p] +=
                                ri->grad[static_cast<size_t>(c) * hw + p] * col;
                    }
            });
    }
    return result;
}

Tensor render_soft(const Tensor& logits, const Palette& palette, double omega,
                   Rng& rng) {
    const auto& s = logits.shape();
    if (s.size() != 3)
        throw std::invalid_argument("render_soft: logits must be [m,H,W]");
    const std::vector<double> g = sample_gumbel(s[0], s[1], s[2], rng);
    return render_soft_with_noise(logits, palette, omega, g);
}

Tensor render_soft_with_noise(const Tensor& logits, const Palette& palette,
                              double omega, const std::vector<double>& gumbel) {
    return palette_mix(soft_weights(logits, omega, gumbel), palette);
}

RenderedPatch render_hard(const PatchParams& params) {
    const int m = params.colors();
    const size_t hw = static_cast<size_t>(params.height) * params.width;
    if (params.logits.size() != static_cast<size_t>(m) * hw)
        throw std::invalid_argument("render_hard: logits do not match patch shape");
    RenderedPatch out;
    out.height = params.height;
    out.width = params.width;
    out.data.resize(3 * hw);
    for (size_t p = 0; p < hw; ++p) {
        int best = 0;
        double bv = params.logits[p];
        for (int i = 1; i < m; ++i) {
            const double v = params.logits[static_cast<size_t>(i) * hw + p];
            if (v > bv) {  // strict: ties keep the lowest index
                bv = v;
                best = i;
            }
        }
        for (int c = 0; c < 3; ++c)
            out.data[static_cast<size_t>(c) * hw + p] =
                params.palette.colors[static_cast<size_t>(best)]
                                     [static_cast<size_t>(c)] / 255.0;
    }
    return out;
}

double anneal_temperature(const AnnealSchedule& schedule, int step) {
    if (step < 0) throw std::invalid_argument("step must be >= 0");
    double omega = schedule.start;
    switch (schedule.kind) {
        case AnnealSchedule::Kind::constant:
            break;
        case AnnealSchedule::Kind::linear: {
            if (schedule.steps < 1)
                throw std::invalid_argument("linear schedule needs steps >= 1");
            const double t =
                std::min(step, schedule.steps) / static_cast<double>(schedule.steps);
            omega = schedule.start + (schedule.end - schedule.start) * t;
            break;
        }
        case AnnealSchedule::Kind::exponential: {
            if (schedule.half_life <= 0)
                throw std::invalid_argument("exponential schedule needs half_life > 0");
            omega = schedule.start * std::pow(2.0, -step / schedule.half_life);
            break;
        }
    }
    if (omega <= 0.0) {
        std::fprintf(stderr,
                     "warning: annealed temperature %g clamped to 1e-3\n", omega);
        omega = 1e-3;
    }
    return omega;
}

}  // namespace stealth
