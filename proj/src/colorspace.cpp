#include "stealth/colorspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "stealth/rng.hpp"

namespace stealth {

namespace {

// sRGB <-> XYZ (D65) per IEC 61966-2-1.
constexpr double kWhiteX = 0.95047;
constexpr double kWhiteY = 1.00000;
constexpr double kWhiteZ = 1.08883;

double srgb_decode(double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double srgb_encode(double c) {
    return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

double lab_f(double t) {
    constexpr double delta = 6.0 / 29.0;
    constexpr double delta3 = delta * delta * delta;
    return t > delta3 ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0;
}

double lab_f_inv(double t) {
    constexpr double delta = 6.0 / 29.0;
    return t > delta ? t * t * t : 3.0 * delta * delta * (t - 4.0 / 29.0);
}

struct LabPoint {
    double L, a, b;
};

double dist2(const LabPoint& p, const LabPoint& q) {
    const double dL = p.L - q.L;
    const double da = p.a - q.a;
    const double db = p.b - q.b;
    return dL * dL + da * da + db * db;
}

LabPoint to_point(const LabColor& c) { return {c.L, c.a, c.b}; }

// One k-means++ / Lloyd run.  Returns centers and the final objective.
// Asserts the objective never increases between assignment passes.
double kmeans_run(const std::vector<LabPoint>& pts, int m, Rng& rng,
                  int max_iters, std::vector<LabPoint>& centers) {
    const size_t n = pts.size();
    centers.clear();
    centers.reserve(static_cast<size_t>(m));

    // k-means++ seeding: first center uniform, then D^2-weighted.
    centers.push_back(pts[rng.uniform_index(n)]);
    std::vector<double> d2(n);
    for (int k = 1; k < m; ++k) {
        double total = 0.0;
        for (size_t j = 0; j < n; ++j) {
            double best = dist2(pts[j], centers[0]);
            for (size_t c = 1; c < centers.size(); ++c)
                best = std::min(best, dist2(pts[j], centers[c]));
            d2[j] = best;
            total += best;
        }
        size_t pick = 0;
        if (total > 0.0) {
            const double r = rng.uniform() * total;
            double cum = 0.0;
            pick = n - 1;
            for (size_t j = 0; j < n; ++j) {
                cum += d2[j];
                if (cum > r && d2[j] > 0.0) {
                    pick = j;
                    break;
                }
            }
        } else {
            pick = rng.uniform_index(n);  // all points coincide with centers
        }
        centers.push_back(pts[pick]);
    }

    std::vector<int> assign(n, -1);
    double prev_obj = std::numeric_limits<double>::infinity();
    double obj = prev_obj;
    for (int iter = 0; iter < max_iters; ++iter) {
        // Assignment: nearest center, ties to the lowest index.
        bool changed = false;
        obj = 0.0;
        for (size_t j = 0; j < n; ++j) {
            int best = 0;
            double bd = dist2(pts[j], centers[0]);
            for (int c = 1; c < m; ++c) {
                const double d = dist2(pts[j], centers[static_cast<size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[j] != best) {
                assign[j] = best;
                changed = true;
            }
            obj += bd;
        }
        if (obj > prev_obj + 1e-9 * (1.0 + prev_obj))
            throw std::logic_error("clustering objective increased");
        prev_obj = obj;
        if (!changed && iter > 0) break;

        // Update: cluster means; empty clusters re-seed from the farthest point.
        std::vector<LabPoint> sum(static_cast<size_t>(m), {0.0, 0.0, 0.0});
        std::vector<size_t> count(static_cast<size_t>(m), 0);
        for (size_t j = 0; j < n; ++j) {
            const auto c = static_cast<size_t>(assign[j]);
            sum[c].L += pts[j].L;
            sum[c].a += pts[j].a;
            sum[c].b += pts[j].b;
            ++count[c];
        }
        std::vector<char> used(n, 0);
        for (int c = 0; c < m; ++c) {
            const auto cs = static_cast<size_t>(c);
            if (count[cs] > 0) {
                const double inv = 1.0 / static_cast<double>(count[cs]);
                centers[cs] = {sum[cs].L * inv, sum[cs].a * inv, sum[cs].b * inv};
            } else {
                size_t far = 0;
                double fd = -1.0;
                for (size_t j = 0; j < n; ++j) {
                    if (used[j]) continue;
                    const double d =
                        dist2(pts[j], centers[static_cast<size_t>(assign[j])]);
                    if (d > fd) {
                        fd = d;
                        far = j;
                    }
                }
                centers[cs] = pts[far];
                used[far] = 1;
            }
        }
    }

    // Final pass so every point maps to its nearest center even when the
    // iteration cap cut the loop after an update step.
    obj = 0.0;
    for (size_t j = 0; j < n; ++j) {
        double bd = dist2(pts[j], centers[0]);
        for (int c = 1; c < m; ++c)
            bd = std::min(bd, dist2(pts[j], centers[static_cast<size_t>(c)]));
        obj += bd;
    }
    return obj;
}

}  // namespace

LabColor srgb_to_lab(Rgb8 rgb) {
    const double r = srgb_decode(rgb[0] / 255.0);
    const double g = srgb_decode(rgb[1] / 255.0);
    const double b = srgb_decode(rgb[2] / 255.0);
    const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    const double fx = lab_f(x / kWhiteX);
    const double fy = lab_f(y / kWhiteY);
    const double fz = lab_f(z / kWhiteZ);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

Rgb8 lab_to_srgb(const LabColor& lab) {
    const double fy = (lab.L + 16.0) / 116.0;
    const double fx = fy + lab.a / 500.0;
    const double fz = fy - lab.b / 200.0;
    const double x = kWhiteX * lab_f_inv(fx);
    const double y = kWhiteY * lab_f_inv(fy);
    const double z = kWhiteZ * lab_f_inv(fz);
    const double rl = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    const double gl = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    const double bl = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
    auto quant = [](double lin) {
        const double enc = std::clamp(srgb_encode(lin), 0.0, 1.0);
        return static_cast<uint8_t>(std::lround(enc * 255.0));
    };
    return {quant(rl), quant(gl), quant(bl)};
}

Palette extract_palette(const EnvironmentSample& env, int m, uint64_t seed,
                        int max_iters) {
    if (m < 1 || m > 64)
        throw std::invalid_argument("palette size must be in [1, 64]");
    if (env.pixels.size() < static_cast<size_t>(m))
        throw std::invalid_argument(
            "environment sample has fewer pixels than requested colors");
    if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");

    Rng rng(derive_seed(seed, 0x70616c65747465ULL));  // "palette" stream

    // Bound runtime on large environments: uniform subsample without
    // replacement via partial Fisher-Yates.
    constexpr size_t kMaxPixels = 100000;
    std::vector<Rgb8> sampled;
    const std::vector<Rgb8>* src = &env.pixels;
    if (env.pixels.size() > kMaxPixels) {
        std::vector<size_t> idx(env.pixels.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        for (size_t i = 0; i < kMaxPixels; ++i) {
            const size_t j = i + rng.uniform_index(idx.size() - i);
            std::swap(idx[i], idx[j]);
        }
        sampled.reserve(kMaxPixels);
        for (size_t i = 0; i < kMaxPixels; ++i)
            sampled.push_back(env.pixels[idx[i]]);
        src = &sampled;
    }

    std::vector<LabPoint> pts;
    pts.reserve(src->size());
    for (const auto& p : *src) pts.push_back(to_point(srgb_to_lab(p)));

    // Best of a handful of seeded restarts; single-run k-means++ can land in
    // a poor local minimum on small samples.
    constexpr int kRestarts = 8;
    std::vector<LabPoint> best_centers;
    double best_obj = std::numeric_limits<double>::infinity();
    for (int r = 0; r < kRestarts; ++r) {
        Rng run_rng(derive_seed(seed, 0x6b6d65616e73ULL, static_cast<uint64_t>(r)));
        std::vector<LabPoint> centers;
        const double obj = kmeans_run(pts, m, run_rng, max_iters, centers);
        if (obj < best_obj) {
            best_obj = obj;
            best_centers = std::move(centers);
        }
    }

    Palette out;
    out.colors.reserve(static_cast<size_t>(m));
    for (const auto& c : best_centers)
        out.colors.push_back(lab_to_srgb({c.L, c.a, c.b}));
    return out;
}

double palette_objective(const EnvironmentSample& env, const Palette& palette) {
    if (palette.colors.empty())
        throw std::invalid_argument("palette is empty");
    std::vector<LabPoint> centers;
    centers.reserve(palette.colors.size());
    for (const auto& c : palette.colors) centers.push_back(to_point(srgb_to_lab(c)));
    double obj = 0.0;
    for (const auto& px : env.pixels) {
        const LabPoint p = to_point(srgb_to_lab(px));
        double bd = dist2(p, centers[0]);
        for (size_t c = 1; c < centers.size(); ++c)
            bd = std::min(bd, dist2(p, centers[c]));
        obj += bd;
    }
    return obj;
}

int nearest_palette_index(const Palette& palette, Rgb8 rgb) {
    if (palette.colors.empty())
        throw std::invalid_argument("palette is empty");
    const LabPoint p = to_point(srgb_to_lab(rgb));
    int best = 0;
    double bd = dist2(p, to_point(srgb_to_lab(palette.colors[0])));
    for (int c = 1; c < palette.size(); ++c) {
        const double d =
            dist2(p, to_point(srgb_to_lab(palette.colors[static_cast<size_t>(c)])));
        if (d < bd) {
            bd = d;
            best = c;
        }
    }
    return best;
}

std::string palette_to_text(const Palette& palette) {
    std::string out;
    char buf[16];
    for (const auto& c : palette.colors) {
        std::snprintf(buf, sizeof(buf), "#%02X%02X%02X\n", c[0], c[1], c[2]);
        out += buf;
    }
    return out;
}

Palette palette_from_text(const std::string& text) {
    Palette out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto hexval = [](char ch) -> int {
        if (ch >= '0' && ch <= '9') return ch - '0';
        if (ch >= 'a' && ch <= 'f') return ch - 'a' + 10;
        if (ch >= 'A' && ch <= 'F') return ch - 'A' + 10;
        return -1;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.size() != 7 || line[0] != '#')
            throw std::runtime_error("palette line " + std::to_string(lineno) +
                                     ": expected #RRGGBB");
        uint8_t ch[3];
        for (int i = 0; i < 3; ++i) {
            const int hi = hexval(line[1 + 2 * static_cast<size_t>(i)]);
            const int lo = hexval(line[2 + 2 * static_cast<size_t>(i)]);
            if (hi < 0 || lo < 0)
                throw std::runtime_error("palette line " + std::to_string(lineno) +
                                         ": invalid hex digit");
            ch[i] = static_cast<uint8_t>(hi * 16 + lo);
        }
        out.colors.push_back({ch[0], ch[1], ch[2]});
    }
    if (out.colors.empty())
        throw std::runtime_error("palette file contains no colors");
    return out;
}

}  // namespace stealth
