#include "stealth/detector.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "stealth/params.hpp"
#include "stealth/rng.hpp"
#include "stealth/scene.hpp"
#include "stealth/tensor.hpp"

using namespace stealth;

namespace {

DetectorConfig tiny_config() {
    DetectorConfig cfg;
    cfg.input_size = 32;
    cfg.grid = 4;
    cfg.anchors = 2;
    cfg.classes = 2;
    cfg.channels = {4, 6, 8, 8};
    return cfg;
}

std::vector<Scene> tiny_scenes(int count, std::uint64_t seed0) {
    SceneGenConfig sg;
    sg.size = 32;
    sg.targets_min = 1;
    sg.targets_max = 2;
    std::vector<Scene> out;
    for (int i = 0; i < count; ++i)
        out.push_back(synthesize_scene(seed0 + (std::uint64_t)i, sg));
    return out;
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Scalar objective engaging every head, computed from output values.
double head_sum(const DetectorOutput& o) {
    double s = 0.0;
    for (double v : o.obj.values()) s += v;
    for (double v : o.cls.values()) s += v;
    for (double v : o.pos.values()) s += v * v;
    for (double v : o.feat.values()) s += 0.1 * v;
    return s;
}

Tensor head_sum_tensor(const DetectorOutput& o) {
    Tensor s = reduce_sum(o.obj);
    s = add(s, reduce_sum(o.cls));
    s = add(s, reduce_sum(mul(o.pos, o.pos)));
    s = add(s, scale(reduce_sum(o.feat), 0.1));
    return s;
}

}  // namespace

TEST_CASE("manifest covers all stages and heads with consistent sizes") {
    const DetectorConfig cfg = tiny_config();
    const auto man = DetectorWeights::manifest(cfg);
    REQUIRE(man.size() == 14);
    CHECK(man[0].first == "stage1.kernel");
    CHECK(man[0].second == std::vector<int>{4, 3, 3, 3});
    CHECK(man[1].second == std::vector<int>{4});
    CHECK(man[2].second == std::vector<int>{6, 4, 3, 3});
    CHECK(man[6].second == std::vector<int>{8, 8, 3, 3});
    CHECK(man[8].first == "head_pos.kernel");
    CHECK(man[8].second == std::vector<int>{8, 8, 1, 1});
    CHECK(man[10].second == std::vector<int>{4, 8, 1, 1});
    CHECK(man[12].second == std::vector<int>{2, 8, 1, 1});
    CHECK(man[13].second == std::vector<int>{2});

    const DetectorWeights w = DetectorWeights::init(cfg, 7);
    std::size_t total = 0;
    for (const auto& [name, shape] : man) {
        std::size_t n = 1;
        for (int d : shape) n *= (std::size_t)d;
        total += n;
    }
    CHECK(w.flat.size() == total);

    DetectorConfig bad = cfg;
    bad.channels = {4, 6, 8};
    CHECK_THROWS_AS(DetectorWeights::manifest(bad), std::invalid_argument);
    bad = cfg;
    bad.input_size = 33;
    CHECK_THROWS_AS(DetectorWeights::manifest(bad), std::invalid_argument);
}

TEST_CASE("anchor priors span the expected size range") {
    const DetectorConfig cfg = tiny_config();
    CHECK(anchor_prior_h(cfg, 0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(anchor_prior_h(cfg, 1) == doctest::Approx(0.60).epsilon(1e-12));
    CHECK(anchor_prior_w(cfg, 0) == doctest::Approx(0.45 * 0.25).epsilon(1e-12));
    CHECK(anchor_prior_w(cfg, 1) == doctest::Approx(0.45 * 0.60).epsilon(1e-12));
}

TEST_CASE("zero weights yield constant sigmoid outputs") {
    const DetectorConfig cfg = tiny_config();
    DetectorWeights w = DetectorWeights::init(cfg, 3);
    std::fill(w.flat.begin(), w.flat.end(), 0.0);

    const Scene s = tiny_scenes(1, 11)[0];
    const DetectorOutput out =
        forward(Tensor::constant({3, 32, 32}, s.image), w);
    for (double v : out.obj.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
    for (double v : out.cls.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
    for (double v : out.pos.values()) CHECK(v == 0.0);

    // score = 0.5 * 0.5 = 0.25 < 0.5, so nothing decodes
    CHECK(decode(cfg, out, 0.5, 0.5).empty());
    CHECK(out.obj.shape() == std::vector<int>{2, 4, 4});
    CHECK(out.cls.shape() == std::vector<int>{4, 4, 4});
    CHECK(out.pos.shape() == std::vector<int>{8, 4, 4});
    CHECK(out.feat.shape() == std::vector<int>{8, 4, 4});
}

TEST_CASE("initialization is seed-deterministic and seed-sensitive") {
    const DetectorConfig cfg = tiny_config();
    const DetectorWeights a = DetectorWeights::init(cfg, 42);
    const DetectorWeights b = DetectorWeights::init(cfg, 42);
    const DetectorWeights c = DetectorWeights::init(cfg, 43);
    CHECK(a.flat == b.flat);
    CHECK(a.flat != c.flat);
    // objectness bias starts pessimistic
    const auto man = DetectorWeights::manifest(cfg);
    std::size_t off = 0;
    for (const auto& [name, shape] : man) {
        std::size_t n = 1;
        for (int d : shape) n *= (std::size_t)d;
        if (name == "head_obj.bias")
            for (std::size_t i = 0; i < n; ++i) CHECK(a.flat[off + i] == -2.0);
        off += n;
    }
}

TEST_CASE("forward is bit-identical across calls") {
    const DetectorConfig cfg = tiny_config();
    const DetectorWeights w = DetectorWeights::init(cfg, 5);
    const Scene s = tiny_scenes(1, 21)[0];
    const Tensor img = Tensor::constant({3, 32, 32}, s.image);
    const DetectorOutput a = forward(img, w);
    const DetectorOutput b = forward(img, w);
    CHECK(a.obj.values() == b.obj.values());
    CHECK(a.cls.values() == b.cls.values());
    CHECK(a.pos.values() == b.pos.values());
    CHECK(a.feat.values() == b.feat.values());

    CHECK_THROWS_AS(forward(Tensor::constant({3, 16, 16},
                                             std::vector<double>(768, 0.5)),
                            w),
                    std::invalid_argument);
}

TEST_CASE("image gradients match central finite differences") {
    const DetectorConfig cfg = tiny_config();
    const DetectorWeights w = DetectorWeights::init(cfg, 9);
    const Scene s = tiny_scenes(1, 31)[0];

    Tape tape;
    Tensor img = tape.variable({3, 32, 32}, s.image);
    const Tensor loss = head_sum_tensor(forward(img, w));
    tape.backward(loss);
    const std::vector<double> ana = img.grad();

    Rng rng(1234);
    const double h = 1e-5;
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t i = rng.uniform_index(s.image.size());
        std::vector<double> hi = s.image, lo = s.image;
        hi[i] += h;
        lo[i] -= h;
        const double fhi = head_sum(forward(Tensor::constant({3, 32, 32}, hi), w));
        const double flo = head_sum(forward(Tensor::constant({3, 32, 32}, lo), w));
        const double num = (fhi - flo) / (2.0 * h);
        const double err = std::abs(ana[i] - num) /
                           std::max({std::abs(ana[i]), std::abs(num), 1e-3});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("weight gradients match central finite differences") {
    const DetectorConfig cfg = tiny_config();
    const DetectorWeights w = DetectorWeights::init(cfg, 13);
    const Scene s = tiny_scenes(1, 41)[0];

    Tape tape;
    DetectorGraph g = forward_trainable(tape, s.image, w);
    const Tensor loss = head_sum_tensor(g.out);
    tape.backward(loss);
    std::vector<double> ana;
    for (const Tensor& p : g.params)
        ana.insert(ana.end(), p.grad().begin(), p.grad().end());
    REQUIRE(ana.size() == w.flat.size());

    auto value_at = [&](const std::vector<double>& flat) {
        DetectorWeights wt = w;
        wt.flat = flat;
        return head_sum(forward(Tensor::constant({3, 32, 32}, s.image), wt));
    };

    Rng rng(777);
    const double h = 1e-5;
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t i = rng.uniform_index(w.flat.size());
        std::vector<double> hi = w.flat, lo = w.flat;
        hi[i] += h;
        lo[i] -= h;
        const double num = (value_at(hi) - value_at(lo)) / (2.0 * h);
        const double err = std::abs(ana[i] - num) /
                           std::max({std::abs(ana[i]), std::abs(num), 1e-3});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("decode_box matches the closed-form mapping") {
    const DetectorConfig cfg = tiny_config();
    const double S = cfg.input_size;
    const double cell = S / cfg.grid;

    // zero offsets: centered on the cell, box at half the prior ceiling
    Box b = decode_box(cfg, 0, 1, 2, 0.0, 0.0, 0.0, 0.0);
    const double cx = (2 + 0.5) * cell, cy = (1 + 0.5) * cell;
    const double w0 = 2.0 * anchor_prior_w(cfg, 0) * S * 0.5;
    const double h0 = 2.0 * anchor_prior_h(cfg, 0) * S * 0.5;
    CHECK((b.x1 + b.x2) / 2 == doctest::Approx(cx).epsilon(1e-12));
    CHECK((b.y1 + b.y2) / 2 == doctest::Approx(cy).epsilon(1e-12));
    CHECK(b.width() == doctest::Approx(w0).epsilon(1e-12));
    CHECK(b.height() == doctest::Approx(h0).epsilon(1e-12));

    // saturated size offsets approach twice the prior (central cell, so the
    // width fits inside the frame; the height hits the frame clamp)
    b = decode_box(cfg, 1, 2, 2, 0.0, 0.0, 30.0, 30.0);
    CHECK(b.width() ==
          doctest::Approx(2.0 * anchor_prior_w(cfg, 1) * S).epsilon(1e-6));
    CHECK(b.y2 == S);

    // clamped to the frame
    b = decode_box(cfg, 1, 0, 0, -30.0, -30.0, 0.0, 0.0);
    CHECK(b.x1 == 0.0);
    CHECK(b.y1 == 0.0);
}

TEST_CASE("box_iou agrees with hand-computed overlaps") {
    const Box a{0, 0, 10, 10, 0};
    CHECK(box_iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(box_iou(a, Box{20, 20, 30, 30, 0}) == 0.0);
    // half-area overlap: inter 50, union 150
    CHECK(box_iou(a, Box{0, 5, 10, 15, 0}) ==
          doctest::Approx(50.0 / 150.0).epsilon(1e-12));
    // touching edges share no area
    CHECK(box_iou(a, Box{10, 0, 20, 10, 0}) == 0.0);
}

TEST_CASE("decode keeps strong cells and suppresses same-class overlap") {
    const DetectorConfig cfg = tiny_config();
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const std::size_t gg = (std::size_t)G * G;
    std::vector<double> pos((std::size_t)A * 4 * gg, 0.0);
    std::vector<double> cls((std::size_t)A * K * gg, 0.01);
    std::vector<double> obj((std::size_t)A * gg, 0.01);

    // anchor 0 and anchor 1 at the same cell, same class; size offsets are
    // chosen so both decode to the same 6x12 box (certain suppression)
    auto lg = [](double p) { return std::log(p / (1.0 - p)); };
    const double S = cfg.input_size;
    const std::size_t cell = (std::size_t)1 * G + 1;
    obj[0 * gg + cell] = 0.9;
    cls[(0 * K + 1) * gg + cell] = 0.8;
    obj[1 * gg + cell] = 0.8;
    cls[(1 * K + 1) * gg + cell] = 0.8;
    for (int a = 0; a < A; ++a) {
        pos[(a * 4 + 2) * gg + cell] = lg(6.0 / (2.0 * anchor_prior_w(cfg, a) * S));
        pos[(a * 4 + 3) * gg + cell] = lg(12.0 / (2.0 * anchor_prior_h(cfg, a) * S));
    }
    // distinct cell, other class, clearly separated
    const std::size_t cell2 = (std::size_t)3 * G + 3;
    obj[1 * gg + cell2] = 0.95;
    cls[(1 * K + 0) * gg + cell2] = 0.9;

    DetectorOutput out;
    out.pos = Tensor::constant({A * 4, G, G}, pos);
    out.cls = Tensor::constant({A * K, G, G}, cls);
    out.obj = Tensor::constant({A, G, G}, obj);

    const auto dets = decode(cfg, out, 0.5, 0.5);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].score == doctest::Approx(0.95 * 0.9).epsilon(1e-12));
    CHECK(dets[0].class_id == 0);
    CHECK(dets[1].score == doctest::Approx(0.9 * 0.8).epsilon(1e-12));
    CHECK(dets[1].class_id == 1);

    // same inputs decode identically (pure function)
    const auto again = decode(cfg, out, 0.5, 0.5);
    REQUIRE(again.size() == dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
        CHECK(again[i].score == dets[i].score);
        CHECK(again[i].box.x1 == dets[i].box.x1);
    }

    // a lower nms threshold cannot keep more boxes
    CHECK(decode(cfg, out, 0.5, 0.01).size() <= dets.size());
    CHECK_THROWS_AS(decode(cfg, out, 0.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(decode(cfg, out, 0.5, 1.0), std::invalid_argument);
}

TEST_CASE("weights survive a save/load round trip bit-exactly") {
    const DetectorConfig cfg = tiny_config();
    const DetectorWeights w = DetectorWeights::init(cfg, 77);
    const std::string path = "detector_roundtrip.bin";
    w.save(path);
    const DetectorWeights r = DetectorWeights::load(path);
    CHECK(r.config.input_size == cfg.input_size);
    CHECK(r.config.grid == cfg.grid);
    CHECK(r.config.anchors == cfg.anchors);
    CHECK(r.config.classes == cfg.classes);
    CHECK(r.config.channels == cfg.channels);
    CHECK(r.flat == w.flat);
    std::remove(path.c_str());
}

TEST_CASE("weights loading rejects bad versions and truncation") {
    const DetectorConfig cfg = tiny_config();
    const DetectorWeights w = DetectorWeights::init(cfg, 78);
    const std::string path = "detector_corrupt.bin";
    w.save(path);

    // flip the version line
    {
        std::ifstream in(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
        in.close();
        std::string bad = all;
        bad[bad.find('1')] = '9';
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bad.data(), (long)bad.size());
        out.close();
        CHECK_THROWS_WITH_AS(DetectorWeights::load(path),
                             doctest::Contains("version"), std::runtime_error);

        // restore, then truncate the payload
        std::ofstream out2(path, std::ios::binary | std::ios::trunc);
        out2.write(all.data(), (long)all.size() - 16);
        out2.close();
        CHECK_THROWS_WITH_AS(DetectorWeights::load(path),
                             doctest::Contains("truncated"), std::runtime_error);
    }
    std::remove(path.c_str());
    CHECK_THROWS_AS(DetectorWeights::load("missing_weights.bin"),
                    std::runtime_error);
}

TEST_CASE("zero epochs returns the seeded initialization unchanged") {
    const DetectorConfig cfg = tiny_config();
    const auto scenes = tiny_scenes(3, 51);
    const DetectorWeights w = train_toy(scenes, 0, 0.01, 99, cfg);
    CHECK(w.flat == DetectorWeights::init(cfg, 99).flat);
}

TEST_CASE("training is deterministic per seed and moves the weights") {
    const DetectorConfig cfg = tiny_config();
    const auto scenes = tiny_scenes(4, 61);
    const DetectorWeights a = train_toy(scenes, 2, 0.01, 7, cfg);
    const DetectorWeights b = train_toy(scenes, 2, 0.01, 7, cfg);
    const DetectorWeights c = train_toy(scenes, 2, 0.01, 8, cfg);
    CHECK(a.flat == b.flat);
    CHECK(a.flat != c.flat);
    CHECK(a.flat != DetectorWeights::init(cfg, 7).flat);
}

TEST_CASE("training aborts on non-finite pixels with a clear error") {
    const DetectorConfig cfg = tiny_config();
    auto scenes = tiny_scenes(2, 71);
    scenes[0].image[5] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(train_toy(scenes, 1, 0.01, 7, cfg),
                         doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("training rejects empty or label-free datasets") {
    const DetectorConfig cfg = tiny_config();
    CHECK_THROWS_AS(train_toy({}, 1, 0.01, 7, cfg), std::invalid_argument);
    auto scenes = tiny_scenes(1, 81);
    scenes[0].boxes.clear();
    CHECK_THROWS_AS(train_toy(scenes, 1, 0.01, 7, cfg), std::invalid_argument);
}

TEST_CASE("trained toy detector recalls held-out targets; the init does not") {
    const DetectorConfig cfg;  // full-size defaults
    SceneGenConfig sg;
    std::vector<Scene> train, hold;
    for (int i = 0; i < 100; ++i) train.push_back(synthesize_scene(91 + i, sg));
    for (int i = 0; i < 16; ++i) hold.push_back(synthesize_scene(991 + i, sg));

    const DetectorWeights w0 = DetectorWeights::init(cfg, 17);
    const DetectorWeights w = train_toy(train, 20, 0.01, 17, cfg);

    const double r0 = measure_recall(w0, hold, 0.5, 0.5, 0);
    const double r1 = measure_recall(w, hold, 0.5, 0.5, 0);
    CHECK(r0 < 0.5);
    CHECK(r1 >= 0.8);
    CHECK(r1 > r0);

    CHECK_THROWS_AS(measure_recall(w, hold, 0.5, 0.5, 5), std::invalid_argument);
}
