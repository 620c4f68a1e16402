#include "stealth/scene.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "doctest.h"
#include "testutil.hpp"

using namespace stealth;

namespace {

// Flat mid-gray scene with one target box; isolates compositing behavior.
Scene flat_scene(int S, Box box) {
    Scene s;
    s.size = S;
    s.image.assign(3 * (size_t)S * S, 0.5);
    s.boxes.push_back(box);
    return s;
}

}  // namespace

TEST_CASE("scene synthesis is deterministic per seed") {
    SceneGenConfig cfg;
    const Scene a = synthesize_scene(42, cfg);
    const Scene b = synthesize_scene(42, cfg);
    CHECK(a.image == b.image);
    CHECK(a.boxes == b.boxes);
    const Scene c = synthesize_scene(43, cfg);
    CHECK(a.image != c.image);
}

TEST_CASE("scene boxes are in bounds with the requested target count") {
    SceneGenConfig cfg;
    cfg.targets_min = 1;
    cfg.targets_max = 1;
    for (uint64_t seed = 0; seed < 30; ++seed) {
        const Scene s = synthesize_scene(seed, cfg);
        int targets = 0;
        for (const Box& b : s.boxes) {
            CHECK(b.x1 >= 0);
            CHECK(b.y1 >= 0);
            CHECK(b.x2 <= cfg.size);
            CHECK(b.y2 <= cfg.size);
            CHECK(b.x1 < b.x2);
            CHECK(b.y1 < b.y2);
            targets += b.class_id == 0;
        }
        CHECK(targets == 1);
    }
}

TEST_CASE("scene pixels are 8-bit representable, in [0,1]") {
    const Scene s = synthesize_scene(7, SceneGenConfig{});
    for (double v : s.image) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == std::lround(v * 255.0) / 255.0);
    }
}

TEST_CASE("background re-render matches the scene's untouched pixels") {
    SceneGenConfig cfg;
    const Scene s = synthesize_scene(11, cfg);
    const Image bg = render_background(s.background_seed, cfg);
    const std::vector<double> bgp = image_to_planar(bg);
    // Corner pixel (0,0) lies outside every box in this seeded scene.
    bool corner_in_box = false;
    for (const Box& b : s.boxes)
        corner_in_box = corner_in_box || (b.x1 <= 1 && b.y1 <= 1);
    REQUIRE(!corner_in_box);
    const size_t hw = (size_t)cfg.size * cfg.size;
    for (int c = 0; c < 3; ++c)
        CHECK(s.image[(size_t)c * hw] == bgp[(size_t)c * hw]);
}

TEST_CASE("identity transforms composite the patch pixels exactly") {
    // Box longer side 16, patch_scale 0.25 -> side 4 == patch size: 1:1 map.
    const Scene s = flat_scene(32, {8, 8, 24, 24, 0});
    const EotConfig eot = eot_disabled(0.25);
    Rng rng(5);
    const EotDraws draws = sample_patch_draws(s, eot, rng);
    REQUIRE(draws.per_box.size() == 1);
    CHECK(draws.per_box[0].side == 4);
    CHECK(draws.per_box[0].contrast == 1.0);
    CHECK(draws.per_box[0].brightness == 0.0);
    CHECK(draws.per_box[0].angle == 0.0);
    CHECK(draws.noise.empty());

    Tape tape;
    std::vector<double> pv(3 * 16);
    for (size_t i = 0; i < pv.size(); ++i) pv[i] = (double)(i + 1) / 64.0;
    const Tensor patch = tape.variable({3, 4, 4}, pv);
    const Tensor out = apply_patch_with_draws(s, patch, draws);

    const int x0 = 14, y0 = 14;  // lround(16 - 4/2)
    const size_t hw = 32 * 32, pn = 16;
    for (int c = 0; c < 3; ++c)
        for (int oy = 0; oy < 4; ++oy)
            for (int ox = 0; ox < 4; ++ox)
                CHECK(out.values()[(size_t)c * hw + (size_t)(y0 + oy) * 32 + x0 + ox] ==
                      pv[(size_t)c * pn + (size_t)oy * 4 + ox]);
    // Everything outside the 4x4 footprint is untouched.
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                if (x >= x0 && x < x0 + 4 && y >= y0 && y < y0 + 4) continue;
                CHECK(out.values()[(size_t)c * hw + (size_t)y * 32 + x] == 0.5);
            }
}

TEST_CASE("180-degree rotation point-reflects the patch") {
    const Scene s = flat_scene(16, {4, 4, 12, 12, 0});
    EotDraws draws;
    PatchDraw d;
    d.side = 2;
    d.cx = 8;
    d.cy = 8;
    d.angle = M_PI;
    d.contrast = 1.0;
    d.brightness = 0.0;
    draws.per_box.push_back(d);

    Tape tape;
    const std::vector<double> pv = {0.1, 0.2, 0.3, 0.4,
                                    0.5, 0.6, 0.7, 0.8,
                                    0.15, 0.25, 0.35, 0.45};
    const Tensor patch = tape.variable({3, 2, 2}, pv);
    const Tensor out = apply_patch_with_draws(s, patch, draws);

    const int x0 = 7, y0 = 7;
    const size_t hw = 256, pn = 4;
    for (int c = 0; c < 3; ++c)
        for (int oy = 0; oy < 2; ++oy)
            for (int ox = 0; ox < 2; ++ox)
                CHECK(out.values()[(size_t)c * hw + (size_t)(y0 + oy) * 16 + x0 + ox] ==
                      doctest::Approx(pv[(size_t)c * pn + (size_t)(1 - oy) * 2 +
                                         (1 - ox)])
                          .epsilon(1e-12));
}

TEST_CASE("rotated patch leaves out-of-patch corners transparent") {
    // 45-degree rotation: the rotated square's corners fall outside the
    // patch, so corner pixels of the footprint keep the background.
    const Scene s = flat_scene(64, {8, 8, 56, 56, 0});
    EotDraws draws;
    PatchDraw d;
    d.side = 24;
    d.cx = 32;
    d.cy = 32;
    d.angle = M_PI / 4.0;
    d.contrast = 1.0;
    draws.per_box.push_back(d);

    Tape tape;
    const Tensor patch = tape.variable({3, 8, 8}, std::vector<double>(192, 0.9));
    const Tensor out = apply_patch_with_draws(s, patch, draws);
    const size_t hw = 64 * 64;
    const int x0 = 20, y0 = 20;
    // Footprint corner stays background; footprint center becomes patch.
    CHECK(out.values()[(size_t)y0 * 64 + x0] == 0.5);
    CHECK(out.values()[(size_t)32 * 64 + 32] == doctest::Approx(0.9).epsilon(1e-12));
    // Full image remains in range.
    for (double v : out.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    (void)hw;
}

TEST_CASE("contrast and brightness apply to patch pixels only") {
    const Scene s = flat_scene(32, {8, 8, 24, 24, 0});
    EotDraws draws;
    PatchDraw d;
    d.side = 4;
    d.cx = 16;
    d.cy = 16;
    d.contrast = 1.2;
    d.brightness = -0.1;
    draws.per_box.push_back(d);

    Tape tape;
    const Tensor patch = tape.variable({3, 4, 4}, std::vector<double>(48, 0.5));
    const Tensor out = apply_patch_with_draws(s, patch, draws);
    const size_t hw = 32 * 32;
    CHECK(out.values()[(size_t)14 * 32 + 14] ==
          doctest::Approx(1.2 * 0.5 - 0.1).epsilon(1e-12));
    CHECK(out.values()[0] == 0.5);  // background unchanged
    (void)hw;
}

TEST_CASE("noise-free compositing is deterministic; noise respects bounds") {
    SceneGenConfig cfg;
    const Scene s = synthesize_scene(3, cfg);
    EotConfig eot;  // defaults include noise
    eot.noise_std = 0.5;
    Rng rng_a(77), rng_b(77);
    Tape ta, tb;
    const Tensor pa = ta.variable({3, 6, 6}, std::vector<double>(108, 0.4));
    const Tensor pb = tb.variable({3, 6, 6}, std::vector<double>(108, 0.4));
    const Tensor oa = apply_patch(s, pa, eot, rng_a);
    const Tensor ob = apply_patch(s, pb, eot, rng_b);
    CHECK(oa.values() == ob.values());
    for (double v : oa.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("patch sides below 2 pixels are rejected") {
    const Scene s = flat_scene(32, {10, 10, 20, 20, 0});  // longer side 10
    EotConfig eot = eot_disabled(0.1);                    // side rounds to 1
    Rng rng(1);
    CHECK_THROWS_AS(sample_patch_draws(s, eot, rng), std::invalid_argument);
}

TEST_CASE("scene without target boxes is rejected") {
    Scene s = flat_scene(32, {8, 8, 24, 24, 1});  // distractor only
    Rng rng(1);
    CHECK_THROWS_AS(sample_patch_draws(s, EotConfig{}, rng),
                    std::invalid_argument);
}

TEST_CASE("compositing gradients match finite differences, frozen draws") {
    SceneGenConfig cfg;
    cfg.size = 32;
    const Scene s = synthesize_scene(12, cfg);
    EotConfig eot;
    eot.noise_std = 0.0;  // keep outputs off the clamp boundary
    Rng rng(9);
    const EotDraws draws = sample_patch_draws(s, eot, rng);

    Rng pr(21);
    std::vector<double> pv(3 * 5 * 5);
    for (double& v : pv) v = pr.uniform(0.3, 0.7);
    testutil::gradcheck(
        [&](const std::vector<Tensor>& v) {
            return reduce_mean(apply_patch_with_draws(s, v[0], draws));
        },
        {{{3, 5, 5}, pv}});
}

TEST_CASE("overlapping boxes: the last write owns the gradient") {
    Scene s = flat_scene(32, {8, 8, 24, 24, 0});
    s.boxes.push_back({9, 9, 25, 25, 0});  // overlaps the first box
    EotConfig eot = eot_disabled(0.5);     // side 8 patches overlap
    Rng rng(4);
    const EotDraws draws = sample_patch_draws(s, eot, rng);
    REQUIRE(draws.per_box.size() == 2);

    Rng pr(33);
    std::vector<double> pv(3 * 4 * 4);
    for (double& v : pv) v = pr.uniform(0.3, 0.7);
    testutil::gradcheck(
        [&](const std::vector<Tensor>& v) {
            return reduce_mean(apply_patch_with_draws(s, v[0], draws));
        },
        {{{3, 4, 4}, pv}});
}

TEST_CASE("annotations round-trip and reject malformed lines") {
    std::vector<Box> boxes = {{1.5, 2.25, 30.125, 40.5, 0},
                              {0, 0, 64, 64, 1}};
    const std::string text = annotations_to_text(boxes);
    CHECK(annotations_from_text(text) == boxes);

    const std::string path = "/tmp/stealth_test_boxes.txt";
    save_annotations(boxes, path);
    CHECK(load_annotations(path) == boxes);
    std::remove(path.c_str());

    CHECK_THROWS_WITH_AS(annotations_from_text("0 1 2 3\n"),
                         doctest::Contains("line 1"), std::runtime_error);
    CHECK_THROWS_WITH_AS(annotations_from_text("0 1 2 3 4\n0 5 5 4 9\n"),
                         doctest::Contains("line 2"), std::runtime_error);
    CHECK_THROWS_AS(annotations_from_text("0 1 2 3 4 5\n"), std::runtime_error);
}
