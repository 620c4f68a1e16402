#include "stealth/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "stealth/detector.hpp"
#include "stealth/params.hpp"
#include "stealth/rng.hpp"
#include "stealth/scene.hpp"
#include "stealth/tensor.hpp"
#include "testutil.hpp"

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

// Independent scalar re-derivations used as oracles below.
double o_sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct OBox {
    double x1, y1, x2, y2;
};

OBox o_decode(const DetectorConfig& cfg, int a, int gy, int gx, double tx,
              double ty, double tw, double th) {
    const double S = cfg.input_size;
    const double cell = S / cfg.grid;
    const double scale_a =
        cfg.anchors == 1 ? 0.4 : 0.25 + 0.35 * a / (double)(cfg.anchors - 1);
    const double cx = (gx + o_sig(tx)) * cell;
    const double cy = (gy + o_sig(ty)) * cell;
    const double w = 2.0 * (0.45 * scale_a) * S * o_sig(tw);
    const double h = 2.0 * scale_a * S * o_sig(th);
    OBox b;
    b.x1 = std::max(0.0, cx - w / 2);
    b.y1 = std::max(0.0, cy - h / 2);
    b.x2 = std::min(S, cx + w / 2);
    b.y2 = std::min(S, cy + h / 2);
    return b;
}

double o_iou(const OBox& a, const OBox& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) +
                       (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// Plain-double evaluation of the attack objective.
double o_adv_loss(const DetectorConfig& cfg, const std::vector<double>& pos,
                  const std::vector<double>& cls, const std::vector<double>& obj,
                  const std::vector<Box>& gts, const AdvLossWeights& w) {
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const std::size_t gg = (std::size_t)G * G;
    double loss = 0.0;
    for (int a = 0; a < A; ++a)
        for (int gy = 0; gy < G; ++gy)
            for (int gx = 0; gx < G; ++gx) {
                const std::size_t cell = (std::size_t)gy * G + gx;
                const OBox d = o_decode(cfg, a, gy, gx,
                                        pos[(std::size_t)(a * 4 + 0) * gg + cell],
                                        pos[(std::size_t)(a * 4 + 1) * gg + cell],
                                        pos[(std::size_t)(a * 4 + 2) * gg + cell],
                                        pos[(std::size_t)(a * 4 + 3) * gg + cell]);
                double best = -1.0;
                std::size_t best_g = 0;
                for (std::size_t g = 0; g < gts.size(); ++g) {
                    const OBox gb{gts[g].x1, gts[g].y1, gts[g].x2, gts[g].y2};
                    const double iou = o_iou(d, gb);
                    if (iou > best) {
                        best = iou;
                        best_g = g;
                    }
                }
                if (best <= 0.1) continue;
                loss += w.lambda1 * cls[(std::size_t)(a * K) * gg + cell];
                loss += w.lambda2 * obj[(std::size_t)a * gg + cell];
                const OBox gb{gts[best_g].x1, gts[best_g].y1, gts[best_g].x2,
                              gts[best_g].y2};
                loss += w.lambda3 * o_iou(d, gb);
            }
    return loss;
}

DetectorOutput make_output(const DetectorConfig& cfg, std::vector<double> pos,
                           std::vector<double> cls, std::vector<double> obj) {
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    DetectorOutput out;
    out.pos = Tensor::constant({A * 4, G, G}, std::move(pos));
    out.cls = Tensor::constant({A * K, G, G}, std::move(cls));
    out.obj = Tensor::constant({A, G, G}, std::move(obj));
    return out;
}

DetectorOutput random_output(const DetectorConfig& cfg, std::uint64_t seed) {
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const std::size_t gg = (std::size_t)G * G;
    Rng rng(seed);
    std::vector<double> pos((std::size_t)A * 4 * gg), cls((std::size_t)A * K * gg),
        obj((std::size_t)A * gg);
    for (double& v : pos) v = rng.normal(0.0, 1.0);
    for (double& v : cls) v = rng.uniform();
    for (double& v : obj) v = rng.uniform();
    return make_output(cfg, std::move(pos), std::move(cls), std::move(obj));
}

}  // namespace

TEST_CASE("single perfectly-localized anchor gives the direct sum") {
    const DetectorConfig cfg = tiny_config();
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const std::size_t gg = (std::size_t)G * G;

    // anchor 0 at cell (1,1) decodes exactly onto the gt box; anchor 1 is
    // shrunk to nothing everywhere so only one anchor matches
    std::vector<double> pos((std::size_t)A * 4 * gg, 0.0);
    for (int j = 2; j < 4; ++j)
        for (std::size_t c = 0; c < gg; ++c)
            pos[(std::size_t)(4 + j) * gg + c] = -8.0;
    std::vector<double> cls((std::size_t)A * K * gg, 0.0);
    std::vector<double> obj((std::size_t)A * gg, 0.0);
    const std::size_t cell = 1 * G + 1;
    cls[0 * gg + cell] = 0.5;
    obj[0 * gg + cell] = 0.5;

    Box gt = decode_box(cfg, 0, 1, 1, 0, 0, 0, 0);
    gt.class_id = 0;
    const DetectorOutput out = make_output(cfg, pos, cls, obj);

    const auto matched = match_anchors(cfg, out, {gt});
    REQUIRE(matched.size() == 1);
    CHECK(matched[0].anchor == 0);
    CHECK(matched[0].gy == 1);
    CHECK(matched[0].gx == 1);
    CHECK(matched[0].iou == doctest::Approx(1.0).epsilon(1e-12));

    const Tensor loss = adversarial_loss(cfg, out, {gt}, {1.0, 1.0, 1.0});
    CHECK(loss.item() == doctest::Approx(2.0).epsilon(1e-12));

    CHECK(mean_matched_objectness(cfg, out, {gt}) ==
          doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("zero scores with no localization weight floor at zero") {
    const DetectorConfig cfg = tiny_config();
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const std::size_t gg = (std::size_t)G * G;
    const DetectorOutput out =
        make_output(cfg, std::vector<double>((std::size_t)A * 4 * gg, 0.0),
                    std::vector<double>((std::size_t)A * K * gg, 0.0),
                    std::vector<double>((std::size_t)A * gg, 0.0));
    Box gt = decode_box(cfg, 0, 1, 1, 0, 0, 0, 0);
    gt.class_id = 0;
    const Tensor loss = adversarial_loss(cfg, out, {gt}, {1.0, 1.0, 0.0});
    CHECK(loss.item() == 0.0);
}

TEST_CASE("attack loss matches a direct re-computation on random outputs") {
    const DetectorConfig cfg = tiny_config();
    const AdvLossWeights w{1.0, 1.0, 0.5};
    SceneGenConfig sg;
    sg.size = cfg.input_size;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const DetectorOutput out = random_output(cfg, seed);
        const Scene sc = synthesize_scene(1000 + seed, sg);
        std::vector<Box> gts;
        for (const Box& b : sc.boxes)
            if (b.class_id == 0) gts.push_back(b);
        REQUIRE(!gts.empty());
        const double want = o_adv_loss(cfg, out.pos.values(), out.cls.values(),
                                       out.obj.values(), gts, w);
        const Tensor got = adversarial_loss(cfg, out, gts, w);
        CHECK(got.item() == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("attack loss rejects empty ground truth and zero weights") {
    const DetectorConfig cfg = tiny_config();
    const DetectorOutput out = random_output(cfg, 3);
    CHECK_THROWS_AS(adversarial_loss(cfg, out, {}, {1, 1, 0.5}),
                    std::invalid_argument);
    Box gt{8, 8, 20, 24, 0};
    CHECK_THROWS_AS(adversarial_loss(cfg, out, {gt}, {0, 0, 0}),
                    std::invalid_argument);
    CHECK_THROWS_AS(adversarial_loss(cfg, out, {gt}, {-1, 1, 0}),
                    std::invalid_argument);
}

TEST_CASE("lowering a matched anchor's objectness strictly lowers the loss") {
    const DetectorConfig cfg = tiny_config();
    SceneGenConfig sg;
    sg.size = cfg.input_size;
    const Scene sc = synthesize_scene(77, sg);
    std::vector<Box> gts;
    for (const Box& b : sc.boxes)
        if (b.class_id == 0) gts.push_back(b);

    const DetectorOutput out = random_output(cfg, 5);
    const auto matched = match_anchors(cfg, out, gts);
    REQUIRE(!matched.empty());

    const int G = cfg.grid;
    const std::size_t gg = (std::size_t)G * G;
    const MatchedAnchor& m = matched[0];
    std::vector<double> obj2 = out.obj.values();
    const std::size_t idx = (std::size_t)m.anchor * gg + (std::size_t)m.gy * G + m.gx;
    obj2[idx] -= 0.1;
    const DetectorOutput out2 =
        make_output(cfg, out.pos.values(), out.cls.values(), obj2);

    const AdvLossWeights w{1.0, 1.0, 0.5};
    CHECK(adversarial_loss(cfg, out2, gts, w).item() <
          adversarial_loss(cfg, out, gts, w).item());
}

TEST_CASE("attack loss gradients flow through the detector to the image") {
    const DetectorConfig cfg = tiny_config();
    const DetectorWeights w = DetectorWeights::init(cfg, 21);
    SceneGenConfig sg;
    sg.size = cfg.input_size;
    const Scene sc = synthesize_scene(55, sg);
    std::vector<Box> gts;
    for (const Box& b : sc.boxes)
        if (b.class_id == 0) gts.push_back(b);
    REQUIRE(!gts.empty());
    const AdvLossWeights lw{1.0, 1.0, 0.5};

    Tape tape;
    Tensor img = tape.variable({3, 32, 32}, sc.image);
    const DetectorOutput out = forward(img, w);
    REQUIRE(!match_anchors(cfg, out, gts).empty());
    const Tensor loss = adversarial_loss(cfg, out, gts, lw);
    tape.backward(loss);
    const std::vector<double> ana = img.grad();

    auto value_of = [&](const std::vector<double>& pixels) {
        const DetectorOutput o =
            forward(Tensor::constant({3, 32, 32}, pixels), w);
        return adversarial_loss(cfg, o, gts, lw).item();
    };

    Rng rng(99);
    const double h = 1e-5;
    int nonzero = 0;
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t i = rng.uniform_index(sc.image.size());
        std::vector<double> hi = sc.image, lo = sc.image;
        hi[i] += h;
        lo[i] -= h;
        const double num = (value_of(hi) - value_of(lo)) / (2.0 * h);
        const double err = std::abs(ana[i] - num) /
                           std::max({std::abs(ana[i]), std::abs(num), 1e-3});
        CHECK(err < 1e-4);
        nonzero += std::abs(ana[i]) > 1e-12;
    }
    CHECK(nonzero > 0);
}

TEST_CASE("score maps equal per-cell maxima under every strategy") {
    const DetectorConfig cfg = tiny_config();
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const std::size_t gg = (std::size_t)G * G;

    // uniform objectness: obj_conf map is constant
    {
        DetectorOutput out = make_output(
            cfg, std::vector<double>((std::size_t)A * 4 * gg, 0.0),
            std::vector<double>((std::size_t)A * K * gg, 0.4),
            std::vector<double>((std::size_t)A * gg, 0.3));
        const Tensor so = score_map(out, MaskStrategy::obj_conf);
        REQUIRE(so.shape() == std::vector<int>{G, G});
        for (double v : so.values()) CHECK(v == 0.3);
        // or-map takes the larger family, and-map the smaller
        const Tensor s_or = score_map(out, MaskStrategy::obj_or_cls);
        const Tensor s_and = score_map(out, MaskStrategy::obj_and_cls);
        for (double v : s_or.values()) CHECK(v == 0.4);
        for (double v : s_and.values()) CHECK(v == 0.3);
    }

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const DetectorOutput out = random_output(cfg, 40 + seed);
        const auto& obj = out.obj.values();
        const auto& cls = out.cls.values();
        std::vector<double> omax(gg, 0.0), cmax(gg, 0.0);
        for (int a = 0; a < A; ++a)
            for (std::size_t c = 0; c < gg; ++c) {
                omax[c] = std::max(omax[c], obj[(std::size_t)a * gg + c]);
                for (int k = 0; k < K; ++k)
                    cmax[c] = std::max(
                        cmax[c], cls[(std::size_t)(a * K + k) * gg + c]);
            }
        CHECK(score_map(out, MaskStrategy::obj_conf).values() == omax);
        CHECK(score_map(out, MaskStrategy::cls_max_conf).values() == cmax);
        const auto orv = score_map(out, MaskStrategy::obj_or_cls).values();
        const auto andv = score_map(out, MaskStrategy::obj_and_cls).values();
        for (std::size_t c = 0; c < gg; ++c) {
            CHECK(orv[c] == std::max(omax[c], cmax[c]));
            CHECK(andv[c] == std::min(omax[c], cmax[c]));
        }
    }
}

TEST_CASE("strategy thresholds pair the loose or and the strict and") {
    MaskConfig mc;
    mc.th_cls = 0.25;
    mc.th_obj = 0.1;
    mc.strategy = MaskStrategy::obj_conf;
    CHECK(mask_threshold(mc) == 0.1);
    mc.strategy = MaskStrategy::cls_max_conf;
    CHECK(mask_threshold(mc) == 0.25);
    mc.strategy = MaskStrategy::obj_or_cls;
    CHECK(mask_threshold(mc) == 0.1);
    mc.strategy = MaskStrategy::obj_and_cls;
    CHECK(mask_threshold(mc) == 0.25);
}

TEST_CASE("masks gate at the threshold and tile to the feature grid") {
    // all below threshold: zero mask
    {
        const Tensor s = Tensor::constant({2, 2}, {0.1, 0.2, 0.25, 0.05});
        const Tensor m = build_mask(s, 0.25, 2, 2);
        for (double v : m.values()) CHECK(v == 0.0);
    }
    // one hot cell keeps its score over its footprint
    {
        const Tensor s = Tensor::constant({2, 2}, {0.0, 0.9, 0.0, 0.0});
        const Tensor m = build_mask(s, 0.25, 4, 4);
        REQUIRE(m.shape() == std::vector<int>{4, 4});
        const auto& v = m.values();
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                CHECK(v[(std::size_t)y * 4 + x] == (y < 2 && x >= 2 ? 0.9 : 0.0));
    }
    CHECK_THROWS_AS(build_mask(Tensor::constant({2, 2}, {0, 0, 0, 0}), 0.0, 2, 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_mask(Tensor::constant({2, 2}, {0, 0, 0, 0}), 1.0, 2, 2),
                    std::invalid_argument);
}

TEST_CASE("mask resize matches an independent footprint-painting oracle") {
    Rng rng(321);
    for (int trial = 0; trial < 8; ++trial) {
        const int H = 4, W = 4;
        const int fh = trial % 2 == 0 ? 8 : 5;
        const int fw = trial % 2 == 0 ? 8 : 7;
        std::vector<double> s((std::size_t)H * W);
        for (double& v : s) v = rng.uniform();
        const double th = 0.25;

        // paint each source cell's half-open destination footprint
        std::vector<double> want((std::size_t)fh * fw, 0.0);
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const double v = s[(std::size_t)i * W + j];
                if (v <= th) continue;
                const int y0 = (int)std::ceil((double)i * fh / H);
                const int y1 = (int)std::ceil((double)(i + 1) * fh / H);
                const int x0 = (int)std::ceil((double)j * fw / W);
                const int x1 = (int)std::ceil((double)(j + 1) * fw / W);
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x)
                        want[(std::size_t)y * fw + x] = v;
            }
        const Tensor got = build_mask(Tensor::constant({H, W}, s), th, fh, fw);
        CHECK(got.values() == want);
    }
}

TEST_CASE("feature imitation is zero at identity or zero region weight") {
    Rng rng(11);
    std::vector<double> f(3 * 2 * 2), m(4);
    for (double& v : f) v = rng.normal(0.0, 1.0);
    for (double& v : m) v = rng.uniform();
    const Tensor feat = Tensor::constant({3, 2, 2}, f);
    const Tensor mask = Tensor::constant({2, 2}, m);
    const Tensor other_mask =
        Tensor::constant({2, 2}, {m[0] + 0.3, m[1], m[2] + 0.1, m[3]});

    CHECK(distillation_loss(feat, feat, mask, other_mask).item() == 0.0);

    std::vector<double> f2 = f;
    f2[0] += 1.0;
    const Tensor feat2 = Tensor::constant({3, 2, 2}, f2);
    CHECK(distillation_loss(feat, feat2, mask, mask).item() == 0.0);
    CHECK(distillation_loss(feat, feat2, mask, other_mask).item() > 0.0);
}

TEST_CASE("feature imitation matches a direct summation oracle") {
    Rng rng(13);
    for (int trial = 0; trial < 6; ++trial) {
        const int C = 4, H = 2, W = 2;
        std::vector<double> t((std::size_t)C * H * W), s(t.size());
        std::vector<double> mt((std::size_t)H * W), ms(mt.size());
        for (double& v : t) v = rng.normal(0.0, 1.0);
        for (double& v : s) v = rng.normal(0.0, 1.0);
        for (double& v : mt) v = rng.uniform();
        for (double& v : ms) v = rng.uniform();

        double want = 0.0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double m = std::abs(mt[(std::size_t)y * W + x] -
                                          ms[(std::size_t)y * W + x]);
                double q = 0.0;
                for (int c = 0; c < C; ++c) {
                    const std::size_t i = ((std::size_t)c * H + y) * W + x;
                    q += (t[i] - s[i]) * (t[i] - s[i]) * m * m;
                }
                want += std::sqrt(q);
            }

        const Tensor got = distillation_loss(
            Tensor::constant({C, H, W}, t), Tensor::constant({C, H, W}, s),
            Tensor::constant({H, W}, mt), Tensor::constant({H, W}, ms));
        CHECK(got.item() == doctest::Approx(want).epsilon(1e-10));
        CHECK(got.item() >= 0.0);
    }
}

TEST_CASE("feature imitation rejects mismatched shapes") {
    const Tensor a = Tensor::zeros({3, 2, 2});
    const Tensor b = Tensor::zeros({3, 2, 3});
    const Tensor m = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(distillation_loss(a, b, m, m), std::invalid_argument);
    CHECK_THROWS_AS(distillation_loss(a, a, Tensor::zeros({2, 3}), m),
                    std::invalid_argument);
}

TEST_CASE("feature imitation sends gradients to the student only") {
    Rng rng(17);
    std::vector<double> t(3 * 2 * 2), s(t.size()), mt(4), ms(4);
    for (double& v : t) v = rng.normal(0.0, 1.0);
    for (double& v : s) v = rng.normal(0.0, 1.0);
    for (double& v : mt) v = rng.uniform();
    for (double& v : ms) v = rng.uniform();

    Tape tape;
    Tensor tch = tape.variable({3, 2, 2}, t);
    Tensor stu = tape.variable({3, 2, 2}, s);
    const Tensor loss = distillation_loss(tch, stu,
                                          Tensor::constant({2, 2}, mt),
                                          Tensor::constant({2, 2}, ms));
    tape.backward(loss);
    double tch_norm = 0.0, stu_norm = 0.0;
    for (double g : tch.grad()) tch_norm += g * g;
    for (double g : stu.grad()) stu_norm += g * g;
    CHECK(tch_norm == 0.0);
    CHECK(stu_norm > 0.0);

    // and the student gradient is the true derivative
    const auto res = testutil::gradcheck(
        [&](const std::vector<Tensor>& v) {
            return distillation_loss(Tensor::constant({3, 2, 2}, t), v[0],
                                     Tensor::constant({2, 2}, mt),
                                     Tensor::constant({2, 2}, ms));
        },
        {{{3, 2, 2}, s}});
    CHECK(res.max_err < 1e-4);
    CHECK(res.checked == 12);
}

TEST_CASE("combined objective weights the imitation term") {
    const Tensor a = Tensor::scalar(1.0);
    const Tensor d = Tensor::scalar(2.0);
    CHECK(total_loss(a, d, 1.0).item() == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(total_loss(a, d, 0.01).item() ==
          doctest::Approx(1.02).epsilon(1e-15));
    CHECK(total_loss(a, d, 0.0).item() == 1.0);
    CHECK_THROWS_AS(total_loss(a, d, -0.5), std::invalid_argument);
}
