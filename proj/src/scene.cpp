#include "stealth/scene.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stealth {

namespace {

constexpr std::uint64_t kBgTag = 0x6267u;   // background stream
constexpr std::uint64_t kFgTag = 0x6667u;   // figure stream

using Color = std::array<double, 3>;

void put(std::vector<double>& img, int S, int x, int y, const Color& c) {
    if (x < 0 || y < 0 || x >= S || y >= S) return;
    const size_t hw = static_cast<size_t>(S) * S;
    const size_t i = static_cast<size_t>(y) * S + x;
    img[i] = c[0];
    img[hw + i] = c[1];
    img[2 * hw + i] = c[2];
}

void fill_rect(std::vector<double>& img, int S, double x1, double y1, double x2,
               double y2, const Color& c) {
    const int ax = std::max(0, (int)std::floor(x1));
    const int ay = std::max(0, (int)std::floor(y1));
    const int bx = std::min(S - 1, (int)std::ceil(x2) - 1);
    const int by = std::min(S - 1, (int)std::ceil(y2) - 1);
    for (int y = ay; y <= by; ++y)
        for (int x = ax; x <= bx; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            if (px >= x1 && px <= x2 && py >= y1 && py <= y2) put(img, S, x, y, c);
        }
}

void fill_ellipse(std::vector<double>& img, int S, double cx, double cy,
                  double rx, double ry, const Color& c) {
    const int ax = std::max(0, (int)std::floor(cx - rx));
    const int ay = std::max(0, (int)std::floor(cy - ry));
    const int bx = std::min(S - 1, (int)std::ceil(cx + rx));
    const int by = std::min(S - 1, (int)std::ceil(cy + ry));
    for (int y = ay; y <= by; ++y)
        for (int x = ax; x <= bx; ++x) {
            const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) put(img, S, x, y, c);
        }
}

// Gradient plus clutter shapes drawn from the same muted color family.
std::vector<double> paint_background(std::uint64_t seed, int S) {
    Rng rng(derive_seed(seed, kBgTag));
    Color c0, c1;
    for (int c = 0; c < 3; ++c) c0[(size_t)c] = rng.uniform(0.45, 0.85);
    for (int c = 0; c < 3; ++c) c1[(size_t)c] = rng.uniform(0.45, 0.85);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const double dx = std::cos(phi), dy = std::sin(phi);
    const double lo = std::min(0.0, dx) + std::min(0.0, dy);
    const double hi = std::max(0.0, dx) + std::max(0.0, dy);
    const double span = hi - lo > 1e-12 ? hi - lo : 1.0;

    std::vector<double> img(3 * (size_t)S * S);
    const size_t hw = (size_t)S * S;
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const double t =
                ((dx * x + dy * y) / std::max(1, S - 1) - lo) / span;
            const size_t i = (size_t)y * S + x;
            for (int c = 0; c < 3; ++c)
                img[(size_t)c * hw + i] =
                    c0[(size_t)c] + (c1[(size_t)c] - c0[(size_t)c]) * t;
        }

    const int n_clutter = rng.uniform_int(3, 6);
    for (int k = 0; k < n_clutter; ++k) {
        Color c;
        const double mix = rng.uniform();
        for (int ch = 0; ch < 3; ++ch)
            c[(size_t)ch] = std::clamp(
                c0[(size_t)ch] + (c1[(size_t)ch] - c0[(size_t)ch]) * mix +
                    rng.uniform(-0.06, 0.06),
                0.0, 1.0);
        const double cx = rng.uniform(0.0, (double)S);
        const double cy = rng.uniform(0.0, (double)S);
        const double rx = rng.uniform(0.04, 0.14) * S;
        const double ry = rng.uniform(0.04, 0.14) * S;
        if (rng.uniform() < 0.5)
            fill_rect(img, S, cx - rx, cy - ry, cx + rx, cy + ry, c);
        else
            fill_ellipse(img, S, cx, cy, rx, ry, c);
    }
    return img;
}

// Head circle, torso, and two legs spanning exactly the recorded box.
void paint_figure(std::vector<double>& img, int S, const Box& b, const Color& c) {
    const double w = b.width(), h = b.height();
    const double cx = (b.x1 + b.x2) / 2.0;
    fill_ellipse(img, S, cx, b.y1 + 0.13 * h, 0.13 * h, 0.13 * h, c);
    fill_rect(img, S, b.x1, b.y1 + 0.24 * h, b.x2, b.y1 + 0.60 * h, c);
    fill_rect(img, S, b.x1, b.y1 + 0.60 * h, cx - 0.1 * w, b.y2, c);
    fill_rect(img, S, cx + 0.1 * w, b.y1 + 0.60 * h, b.x2, b.y2, c);
}

void quantize_to_8bit(std::vector<double>& img) {
    for (double& v : img)
        v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace

Image render_background(std::uint64_t seed, const SceneGenConfig& cfg) {
    std::vector<double> img = paint_background(seed, cfg.size);
    return planar_to_image(img, cfg.size, cfg.size);
}

Scene synthesize_scene(std::uint64_t seed, const SceneGenConfig& cfg) {
    if (cfg.size < 8) throw std::invalid_argument("scene size must be >= 8");
    if (cfg.targets_min < 1 || cfg.targets_max < cfg.targets_min)
        throw std::invalid_argument("invalid target count range");
    const int S = cfg.size;

    Scene scene;
    scene.size = S;
    scene.background_seed = seed;
    scene.image = paint_background(seed, S);

    Rng rng(derive_seed(seed, kFgTag));

    // Block distractors (class 1): saturated color, bright center stripe.
    const int n_distract = rng.uniform_int(0, 2);
    for (int k = 0; k < n_distract; ++k) {
        const double h = rng.uniform(0.15, 0.28) * S;
        const double w = h * rng.uniform(0.8, 1.3);
        const double cx = rng.uniform(w / 2 + 1, S - w / 2 - 1);
        const double cy = rng.uniform(h / 2 + 1, S - h / 2 - 1);
        Color c;
        const int hot = rng.uniform_int(0, 2);
        for (int ch = 0; ch < 3; ++ch)
            c[(size_t)ch] = ch == hot ? rng.uniform(0.70, 0.95)
                                      : rng.uniform(0.25, 0.45);
        Box b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, 1};
        fill_rect(scene.image, S, b.x1, b.y1, b.x2, b.y2, c);
        Color stripe = c;
        for (double& v : stripe) v = std::clamp(v * 1.3, 0.0, 1.0);
        fill_rect(scene.image, S, b.x1, cy - h / 10, b.x2, cy + h / 10, stripe);
        scene.boxes.push_back(b);
    }

    // Dark figure targets (class 0), kept apart when possible.
    const int n_targets = rng.uniform_int(cfg.targets_min, cfg.targets_max);
    std::vector<std::array<double, 2>> centers;
    for (int k = 0; k < n_targets; ++k) {
        const double h = rng.uniform(0.45, 0.72) * S;
        const double w = h * rng.uniform(0.34, 0.46);
        double cx = 0, cy = 0;
        for (int attempt = 0; attempt < 30; ++attempt) {
            cx = rng.uniform(w / 2 + 1, S - w / 2 - 1);
            cy = rng.uniform(h / 2 + 1, S - h / 2 - 1);
            bool ok = true;
            for (const auto& p : centers) {
                const double d = std::hypot(cx - p[0], cy - p[1]);
                ok = ok && d >= 0.22 * S;
            }
            if (ok) break;
        }
        centers.push_back({cx, cy});
        Color c;
        for (int ch = 0; ch < 3; ++ch) c[(size_t)ch] = rng.uniform(0.02, 0.12);
        Box b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, 0};
        paint_figure(scene.image, S, b, c);
        scene.boxes.push_back(b);
    }

    quantize_to_8bit(scene.image);
    return scene;
}

EotConfig eot_disabled(double patch_scale) {
    EotConfig e;
    e.contrast_lo = e.contrast_hi = 1.0;
    e.brightness_lo = e.brightness_hi = 0.0;
    e.noise_std = 0.0;
    e.rotation_deg = 0.0;
    e.patch_scale = patch_scale;
    return e;
}

EotDraws sample_patch_draws(const Scene& scene, const EotConfig& eot, Rng& rng) {
    if (eot.patch_scale <= 0 || eot.patch_scale > 1)
        throw std::invalid_argument("patch_scale must be in (0, 1]");
    EotDraws draws;
    for (const Box& b : scene.boxes) {
        if (b.class_id != 0) continue;
        const double longer = std::max(b.width(), b.height());
        const int side = (int)std::lround(eot.patch_scale * longer);
        if (side < 2)
            throw std::invalid_argument(
                "patch scales below 2x2 pixels on a target box (side " +
                std::to_string(side) + ")");
        PatchDraw d;
        d.side = side;
        d.cx = (b.x1 + b.x2) / 2.0;
        d.cy = (b.y1 + b.y2) / 2.0;
        const double deg = eot.rotation_deg;
        d.angle = rng.uniform(-deg, deg) * M_PI / 180.0;
        d.contrast = rng.uniform(eot.contrast_lo, eot.contrast_hi);
        d.brightness = rng.uniform(eot.brightness_lo, eot.brightness_hi);
        draws.per_box.push_back(d);
    }
    if (draws.per_box.empty())
        throw std::invalid_argument("scene has no target-class box");
    if (eot.noise_std > 0) {
        draws.noise.resize(scene.image.size());
        for (double& v : draws.noise) v = rng.normal(0.0, eot.noise_std);
    }
    return draws;
}

Tensor apply_patch_with_draws(const Scene& scene, const Tensor& patch,
                              const EotDraws& draws) {
    const auto& ps = patch.shape();
    if (ps.size() != 3 || ps[0] != 3 || ps[1] != ps[2])
        throw std::invalid_argument("patch must be a square [3,N,N] tensor, got " +
                                    shape_str(ps));
    const int N = ps[1];
    const int S = scene.size;
    const size_t hw = (size_t)S * S;
    if (scene.image.size() != 3 * hw)
        throw std::invalid_argument("scene image does not match its size");

    // Last write wins where composited boxes overlap.
    struct SrcMap {
        int x0, y0;
        double fx, fy, contrast, brightness;
    };
    std::vector<int> owner(hw, -1);
    std::vector<SrcMap> map(hw);
    for (size_t bi = 0; bi < draws.per_box.size(); ++bi) {
        const PatchDraw& d = draws.per_box[bi];
        if (d.side < 2) throw std::invalid_argument("draw side below 2");
        const int x_start = (int)std::lround(d.cx - d.side / 2.0);
        const int y_start = (int)std::lround(d.cy - d.side / 2.0);
        const double half = (d.side - 1) / 2.0;
        const double cosb = std::cos(d.angle), sinb = std::sin(d.angle);
        const double to_patch = (double)(N - 1) / (double)(d.side - 1);
        for (int oy = 0; oy < d.side; ++oy)
            for (int ox = 0; ox < d.side; ++ox) {
                const int tx = x_start + ox, ty = y_start + oy;
                if (tx < 0 || ty < 0 || tx >= S || ty >= S) continue;
                const double u = ox - half, v = oy - half;
                const double ur = cosb * u + sinb * v;
                const double vr = -sinb * u + cosb * v;
                double sx = (ur + half) * to_patch;
                double sy = (vr + half) * to_patch;
                // Rounding from the rotation must not flip edge pixels to
                // transparent; snap near-boundary coordinates inward.
                constexpr double eps = 1e-9;
                if (sx < -eps || sx > N - 1 + eps || sy < -eps ||
                    sy > N - 1 + eps)
                    continue;
                sx = std::clamp(sx, 0.0, (double)(N - 1));
                sy = std::clamp(sy, 0.0, (double)(N - 1));
                SrcMap m;
                m.x0 = std::min((int)std::floor(sx), N - 2);
                m.y0 = std::min((int)std::floor(sy), N - 2);
                m.fx = sx - m.x0;
                m.fy = sy - m.y0;
                m.contrast = d.contrast;
                m.brightness = d.brightness;
                const size_t pix = (size_t)ty * S + tx;
                owner[pix] = (int)bi;
                map[pix] = m;
            }
    }

    std::vector<double> out = scene.image;
    const size_t pn = (size_t)N * N;
    std::vector<size_t> covered;
    for (size_t pix = 0; pix < hw; ++pix) {
        if (owner[pix] < 0) continue;
        covered.push_back(pix);
        const SrcMap& m = map[pix];
        const size_t s00 = (size_t)m.y0 * N + m.x0;
        for (int c = 0; c < 3; ++c) {
            const double* p = patch.values().data() + (size_t)c * pn;
            const double val = (1 - m.fx) * (1 - m.fy) * p[s00] +
                               m.fx * (1 - m.fy) * p[s00 + 1] +
                               (1 - m.fx) * m.fy * p[s00 + N] +
                               m.fx * m.fy * p[s00 + N + 1];
            out[(size_t)c * hw + pix] = m.contrast * val + m.brightness;
        }
    }

    Tensor comp = detail::make_result({3, S, S}, std::move(out), {&patch});
    if (comp.requires_grad()) {
        std::vector<SrcMap> cmap;
        cmap.reserve(covered.size());
        for (size_t pix : covered) cmap.push_back(map[pix]);
        comp.impl->tape->record([pi = patch.impl, ci = comp.impl,
                                 covered = std::move(covered),
                                 cmap = std::move(cmap), hw, pn, N]() {
            if (!pi->requires_grad) return;
            for (size_t k = 0; k < covered.size(); ++k) {
                const size_t pix = covered[k];
                const SrcMap& m = cmap[k];
                const size_t s00 = (size_t)m.y0 * N + m.x0;
                for (int c = 0; c < 3; ++c) {
                    const double g =
                        ci->grad[(size_t)c * hw + pix] * m.contrast;
                    double* gp = pi->grad.data() + (size_t)c * pn;
                    gp[s00] += g * (1 - m.fx) * (1 - m.fy);
                    gp[s00 + 1] += g * m.fx * (1 - m.fy);
                    gp[s00 + N] += g * (1 - m.fx) * m.fy;
                    gp[s00 + N + 1] += g * m.fx * m.fy;
                }
            }
        });
    }

    if (!draws.noise.empty()) {
        if (draws.noise.size() != 3 * hw)
            throw std::invalid_argument("noise buffer does not match scene");
        comp = add(comp, Tensor::constant({3, S, S}, draws.noise));
    }
    return clamp01(comp);
}

Tensor apply_patch(const Scene& scene, const Tensor& patch, const EotConfig& eot,
                   Rng& rng) {
    return apply_patch_with_draws(scene, patch, sample_patch_draws(scene, eot, rng));
}

std::vector<double> apply_patch_values(const Scene& scene,
                                       const RenderedPatch& patch,
                                       const EotConfig& eot, Rng& rng) {
    if (patch.height != patch.width)
        throw std::invalid_argument("patch must be square");
    const Tensor p =
        Tensor::constant({3, patch.height, patch.width}, patch.data);
    return apply_patch(scene, p, eot, rng).values();
}

std::string annotations_to_text(const std::vector<Box>& boxes) {
    std::string out;
    char buf[160];
    for (const Box& b : boxes) {
        std::snprintf(buf, sizeof(buf), "%d %.17g %.17g %.17g %.17g\n",
                      b.class_id, b.x1, b.y1, b.x2, b.y2);
        out += buf;
    }
    return out;
}

std::vector<Box> annotations_from_text(const std::string& text) {
    std::vector<Box> boxes;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ls(line);
        Box b;
        if (!(ls >> b.class_id >> b.x1 >> b.y1 >> b.x2 >> b.y2))
            throw std::runtime_error("annotation line " + std::to_string(lineno) +
                                     ": expected 'class x1 y1 x2 y2'");
        std::string extra;
        if (ls >> extra)
            throw std::runtime_error("annotation line " + std::to_string(lineno) +
                                     ": trailing data");
        if (b.class_id < 0 || b.x1 >= b.x2 || b.y1 >= b.y2)
            throw std::runtime_error("annotation line " + std::to_string(lineno) +
                                     ": degenerate box");
        boxes.push_back(b);
    }
    return boxes;
}

void save_annotations(const std::vector<Box>& boxes, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open annotation file for write: " + path);
    out << annotations_to_text(boxes);
    if (!out) throw std::runtime_error("short write to annotation file: " + path);
}

std::vector<Box> load_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open annotation file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    try {
        return annotations_from_text(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

}  // namespace stealth
