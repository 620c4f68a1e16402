#include "stealth/detector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "stealth/optim.hpp"
#include "stealth/rng.hpp"

namespace stealth {

namespace {

constexpr char kWeightsMagic[] = "stealthpatch detector weights v1";

// Objectness imbalance weights and head loss scales for toy training.
constexpr double kObjPosWeight = 2.0;
constexpr double kObjNegWeight = 0.45;
constexpr double kClsWeight = 1.0;
constexpr double kPosWeight = 1.0;

// Smoothed positive targets keep head logits in a calibrated range
// instead of saturating them.
constexpr double kObjPosTarget = 0.9;
constexpr double kClsPosTarget = 0.9;
constexpr int kBatchSize = 8;
constexpr double kAugNoiseStd = 0.02;

// Solid-square occluder augmentation: boxes stay positive examples under
// benign occlusion, so plain colored patches alone cannot erase detections.
constexpr double kOccludeProb = 0.7;
constexpr double kOccludeLo = 0.15;
constexpr double kOccludeHi = 0.40;

void validate_config(const DetectorConfig& cfg) {
    if (cfg.channels.size() != 4)
        throw std::invalid_argument(
            "detector needs exactly 4 conv channel widths");
    if (cfg.grid < 1 || cfg.input_size != cfg.grid * 8)
        throw std::invalid_argument(
            "detector input_size must equal grid * 8 (three stride-2 stages)");
    if (cfg.anchors < 1 || cfg.classes < 1)
        throw std::invalid_argument("detector anchors and classes must be >= 1");
    for (int c : cfg.channels)
        if (c < 1) throw std::invalid_argument("detector channel widths must be >= 1");
}

double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

double logit(double p) { return std::log(p / (1.0 - p)); }

double anchor_scale(const DetectorConfig& cfg, int a) {
    if (cfg.anchors == 1) return 0.4;
    return 0.25 + 0.35 * (double)a / (double)(cfg.anchors - 1);
}

size_t manifest_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= (size_t)d;
    return n;
}

}  // namespace

double anchor_prior_w(const DetectorConfig& cfg, int anchor) {
    return 0.45 * anchor_scale(cfg, anchor);
}

double anchor_prior_h(const DetectorConfig& cfg, int anchor) {
    return anchor_scale(cfg, anchor);
}

std::vector<std::pair<std::string, std::vector<int>>> DetectorWeights::manifest(
    const DetectorConfig& cfg) {
    validate_config(cfg);
    const auto& ch = cfg.channels;
    std::vector<std::pair<std::string, std::vector<int>>> m;
    int in_ch = 3;
    for (int s = 0; s < 4; ++s) {
        const std::string name = "stage" + std::to_string(s + 1);
        m.push_back({name + ".kernel", {ch[(size_t)s], in_ch, 3, 3}});
        m.push_back({name + ".bias", {ch[(size_t)s]}});
        in_ch = ch[(size_t)s];
    }
    const int c4 = ch[3];
    m.push_back({"head_pos.kernel", {cfg.anchors * 4, c4, 1, 1}});
    m.push_back({"head_pos.bias", {cfg.anchors * 4}});
    m.push_back({"head_cls.kernel", {cfg.anchors * cfg.classes, c4, 1, 1}});
    m.push_back({"head_cls.bias", {cfg.anchors * cfg.classes}});
    m.push_back({"head_obj.kernel", {cfg.anchors, c4, 1, 1}});
    m.push_back({"head_obj.bias", {cfg.anchors}});
    return m;
}

DetectorWeights DetectorWeights::init(const DetectorConfig& cfg,
                                      std::uint64_t seed) {
    DetectorWeights w;
    w.config = cfg;
    const auto man = manifest(cfg);
    size_t total = 0;
    for (const auto& [name, shape] : man) total += manifest_numel(shape);
    w.flat.reserve(total);
    for (size_t i = 0; i < man.size(); ++i) {
        const auto& [name, shape] = man[i];
        Rng rng(derive_seed(seed, 0xde7ec70uLL, i));
        const size_t n = manifest_numel(shape);
        if (name.ends_with(".bias")) {
            // Objectness starts pessimistic; everything else at zero.
            const double fill = name == "head_obj.bias" ? -2.0 : 0.0;
            w.flat.insert(w.flat.end(), n, fill);
        } else {
            const size_t fan_in = n / (size_t)shape[0];
            const double stddev = name == "head_pos.kernel"
                                      ? 0.01
                                      : std::sqrt(2.0 / (double)fan_in);
            for (size_t k = 0; k < n; ++k)
                w.flat.push_back(rng.normal(0.0, stddev));
        }
    }
    return w;
}

void DetectorWeights::save(const std::string& path) const {
    const auto man = manifest(config);
    std::ostringstream head;
    head << kWeightsMagic << "\n";
    head << "config input_size=" << config.input_size << " grid=" << config.grid
         << " anchors=" << config.anchors << " classes=" << config.classes
         << " channels=";
    for (size_t i = 0; i < config.channels.size(); ++i)
        head << (i ? "," : "") << config.channels[i];
    head << "\n";
    head << "tensors " << man.size() << "\n";
    size_t total = 0;
    for (const auto& [name, shape] : man) {
        head << name;
        for (int d : shape) head << " " << d;
        head << "\n";
        total += manifest_numel(shape);
    }
    if (total != flat.size())
        throw std::logic_error("weights buffer does not match manifest");
    head << "data " << total << "\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open weights file for write: " + path);
    const std::string h = head.str();
    out.write(h.data(), (long)h.size());
    std::vector<unsigned char> buf(flat.size() * 8);
    for (size_t i = 0; i < flat.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(flat[i]);
        for (int b = 0; b < 8; ++b)
            buf[i * 8 + (size_t)b] = (unsigned char)(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), (long)buf.size());
    if (!out) throw std::runtime_error("short write to weights file: " + path);
}

DetectorWeights DetectorWeights::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open weights file: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kWeightsMagic)
        throw std::runtime_error(path + ": unsupported weights format/version");

    DetectorConfig cfg;
    if (!std::getline(in, line) || line.rfind("config ", 0) != 0)
        throw std::runtime_error(path + ": missing config line");
    {
        std::istringstream ls(line.substr(7));
        std::string kv;
        while (ls >> kv) {
            const size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(path + ": bad config entry " + kv);
            const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
            if (key == "input_size") cfg.input_size = std::atoi(val.c_str());
            else if (key == "grid") cfg.grid = std::atoi(val.c_str());
            else if (key == "anchors") cfg.anchors = std::atoi(val.c_str());
            else if (key == "classes") cfg.classes = std::atoi(val.c_str());
            else if (key == "channels") {
                cfg.channels.clear();
                std::stringstream cs(val);
                std::string item;
                while (std::getline(cs, item, ','))
                    cfg.channels.push_back(std::atoi(item.c_str()));
            } else {
                throw std::runtime_error(path + ": unknown config key " + key);
            }
        }
    }

    const auto man = manifest(cfg);
    if (!std::getline(in, line) ||
        line != "tensors " + std::to_string(man.size()))
        throw std::runtime_error(path + ": tensor count mismatch");
    size_t total = 0;
    for (const auto& [name, shape] : man) {
        std::ostringstream want;
        want << name;
        for (int d : shape) want << " " << d;
        if (!std::getline(in, line) || line != want.str())
            throw std::runtime_error(path + ": manifest mismatch at " + name);
        total += manifest_numel(shape);
    }
    if (!std::getline(in, line) || line != "data " + std::to_string(total))
        throw std::runtime_error(path + ": data header mismatch");

    std::vector<unsigned char> buf(total * 8);
    in.read(reinterpret_cast<char*>(buf.data()), (long)buf.size());
    if ((size_t)in.gcount() != buf.size())
        throw std::runtime_error(path + ": truncated weights data");

    DetectorWeights w;
    w.config = cfg;
    w.flat.resize(total);
    for (size_t i = 0; i < total; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= (std::uint64_t)buf[i * 8 + (size_t)b] << (8 * b);
        w.flat[i] = std::bit_cast<double>(bits);
    }
    return w;
}

namespace {

// Shared forward over parameter tensors in manifest order.
DetectorOutput run_forward(const Tensor& image, const std::vector<Tensor>& p,
                           const DetectorConfig& cfg) {
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != 3 || s[1] != cfg.input_size ||
        s[2] != cfg.input_size)
        throw std::invalid_argument(
            "detector input must be [3," + std::to_string(cfg.input_size) + "," +
            std::to_string(cfg.input_size) + "], got " + shape_str(s));

    Tensor x = reshape(image, {1, 3, cfg.input_size, cfg.input_size});
    const int strides[4] = {2, 2, 2, 1};
    for (int stage = 0; stage < 4; ++stage) {
        x = conv2d(x, p[(size_t)(2 * stage)], strides[stage], 1);
        x = add_channel_bias(x, p[(size_t)(2 * stage + 1)]);
        x = relu(x);
    }
    // tap: the map the prediction heads consume
    const Tensor feat = reshape(x, {cfg.channels[3], cfg.grid, cfg.grid});

    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    auto head = [&](int kidx, int out_ch) {
        Tensor h = conv2d(x, p[(size_t)kidx], 1, 0);
        h = add_channel_bias(h, p[(size_t)(kidx + 1)]);
        return reshape(h, {out_ch, G, G});
    };
    DetectorOutput out;
    out.pos = head(8, A * 4);
    out.cls_logits = head(10, A * K);
    out.obj_logits = head(12, A);
    out.cls = sigmoid(out.cls_logits);
    out.obj = sigmoid(out.obj_logits);
    out.feat = feat;
    return out;
}

std::vector<Tensor> constant_params(const DetectorWeights& w) {
    const auto man = DetectorWeights::manifest(w.config);
    std::vector<Tensor> p;
    p.reserve(man.size());
    size_t off = 0;
    for (const auto& [name, shape] : man) {
        const size_t n = manifest_numel(shape);
        p.push_back(Tensor::constant(
            shape, std::vector<double>(w.flat.begin() + (long)off,
                                       w.flat.begin() + (long)(off + n))));
        off += n;
    }
    if (off != w.flat.size())
        throw std::invalid_argument("weights buffer does not match manifest");
    return p;
}

}  // namespace

DetectorOutput forward(const Tensor& image, const DetectorWeights& weights) {
    return run_forward(image, constant_params(weights), weights.config);
}

DetectorGraph forward_trainable(Tape& tape, const std::vector<double>& image,
                                const DetectorWeights& weights) {
    const int S = weights.config.input_size;
    if (image.size() != (size_t)3 * S * S)
        throw std::invalid_argument("image buffer does not match input size");
    const auto man = DetectorWeights::manifest(weights.config);
    DetectorGraph g;
    g.params.reserve(man.size());
    size_t off = 0;
    for (const auto& [name, shape] : man) {
        const size_t n = manifest_numel(shape);
        g.params.push_back(tape.variable(
            shape, std::vector<double>(weights.flat.begin() + (long)off,
                                       weights.flat.begin() + (long)(off + n))));
        off += n;
    }
    if (off != weights.flat.size())
        throw std::invalid_argument("weights buffer does not match manifest");
    g.out = run_forward(Tensor::constant({3, S, S}, image), g.params,
                        weights.config);
    return g;
}

Box decode_box(const DetectorConfig& cfg, int anchor, int gy, int gx,
               double tx, double ty, double tw, double th) {
    const double S = cfg.input_size;
    const double cell = S / cfg.grid;
    const double cx = (gx + sigmoid(tx)) * cell;
    const double cy = (gy + sigmoid(ty)) * cell;
    const double w = 2.0 * anchor_prior_w(cfg, anchor) * S * sigmoid(tw);
    const double h = 2.0 * anchor_prior_h(cfg, anchor) * S * sigmoid(th);
    Box b;
    b.x1 = std::max(0.0, cx - w / 2);
    b.y1 = std::max(0.0, cy - h / 2);
    b.x2 = std::min(S, cx + w / 2);
    b.y2 = std::min(S, cy + h / 2);
    return b;
}

double box_iou(const Box& a, const Box& b) {
    const double ix = std::max(
        0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(
        0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.width() * a.height() + b.width() * b.height() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> decode(const DetectorConfig& cfg,
                              const DetectorOutput& out,
                              double conf_threshold, double nms_iou) {
    if (conf_threshold <= 0 || conf_threshold >= 1 || nms_iou <= 0 || nms_iou >= 1)
        throw std::invalid_argument("decode thresholds must be in (0, 1)");
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const size_t gg = (size_t)G * G;
    const auto& pos = out.pos.values();
    const auto& cls = out.cls.values();
    const auto& obj = out.obj.values();

    std::vector<Detection> cand;
    for (int a = 0; a < A; ++a)
        for (int gy = 0; gy < G; ++gy)
            for (int gx = 0; gx < G; ++gx) {
                const size_t cell = (size_t)gy * G + gx;
                int best_k = 0;
                double best_c = cls[(size_t)(a * K) * gg + cell];
                for (int k = 1; k < K; ++k) {
                    const double ck = cls[(size_t)(a * K + k) * gg + cell];
                    if (ck > best_c) {
                        best_c = ck;
                        best_k = k;
                    }
                }
                const double score = obj[(size_t)a * gg + cell] * best_c;
                if (score < conf_threshold) continue;
                Detection d;
                d.box = decode_box(
                    cfg, a, gy, gx, pos[(size_t)(a * 4 + 0) * gg + cell],
                    pos[(size_t)(a * 4 + 1) * gg + cell],
                    pos[(size_t)(a * 4 + 2) * gg + cell],
                    pos[(size_t)(a * 4 + 3) * gg + cell]);
                d.box.class_id = best_k;
                d.class_id = best_k;
                d.score = score;
                cand.push_back(d);
            }

    // Greedy per-class suppression, then a global sort by score.
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Detection& a, const Detection& b) {
                         return a.score > b.score;
                     });
    std::vector<Detection> kept;
    for (int k = 0; k < K; ++k) {
        std::vector<const Detection*> cls_kept;
        for (const Detection& d : cand) {
            if (d.class_id != k) continue;
            bool suppressed = false;
            for (const Detection* q : cls_kept)
                suppressed = suppressed || box_iou(d.box, q->box) > nms_iou;
            if (!suppressed) {
                cls_kept.push_back(&d);
                kept.push_back(d);
            }
        }
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const Detection& a, const Detection& b) {
                         return a.score > b.score;
                     });
    return kept;
}

namespace {

struct AnchorTargets {
    std::vector<double> obj_t, obj_w;  // [A,G,G]
    std::vector<double> cls_t, cls_w;  // [A*K,G,G]
    std::vector<double> pos_t, pos_w;  // [A*4,G,G]
};

AnchorTargets build_targets(const Scene& scene, const DetectorConfig& cfg) {
    const int G = cfg.grid, A = cfg.anchors, K = cfg.classes;
    const size_t gg = (size_t)G * G;
    AnchorTargets t;
    t.obj_t.assign((size_t)A * gg, 0.0);
    t.obj_w.assign((size_t)A * gg, kObjNegWeight);
    t.cls_t.assign((size_t)A * K * gg, 0.0);
    t.cls_w.assign((size_t)A * K * gg, 0.0);
    t.pos_t.assign((size_t)A * 4 * gg, 0.0);
    t.pos_w.assign((size_t)A * 4 * gg, 0.0);

    const double S = cfg.input_size;
    const double cell = S / cfg.grid;
    constexpr double eps = 1e-4;
    for (const Box& b : scene.boxes) {
        if (b.class_id >= K) continue;
        const double cx = (b.x1 + b.x2) / 2, cy = (b.y1 + b.y2) / 2;
        const int gx = std::clamp((int)(cx / cell), 0, G - 1);
        const int gy = std::clamp((int)(cy / cell), 0, G - 1);
        // Best prior by IoU against the box centered on the gt center.
        int best_a = 0;
        double best_iou = -1.0;
        for (int a = 0; a < A; ++a) {
            const double pw = 2.0 * anchor_prior_w(cfg, a) * S * 0.5;
            const double ph = 2.0 * anchor_prior_h(cfg, a) * S * 0.5;
            const Box prior{cx - pw / 2, cy - ph / 2, cx + pw / 2, cy + ph / 2, 0};
            const double iou = box_iou(prior, b);
            if (iou > best_iou) {
                best_iou = iou;
                best_a = a;
            }
        }
        const size_t cell_idx = (size_t)gy * G + gx;
        const size_t obj_idx = (size_t)best_a * gg + cell_idx;
        if (t.obj_t[obj_idx] > 0.0) continue;  // anchor already claimed
        t.obj_t[obj_idx] = kObjPosTarget;
        t.obj_w[obj_idx] = kObjPosWeight;
        for (int k = 0; k < K; ++k) {
            const size_t ci = (size_t)(best_a * K + k) * gg + cell_idx;
            t.cls_t[ci] = k == b.class_id ? kClsPosTarget : 0.0;
            t.cls_w[ci] = kClsWeight;
        }
        const double tx = std::clamp(cx / cell - gx, eps, 1.0 - eps);
        const double ty = std::clamp(cy / cell - gy, eps, 1.0 - eps);
        const double rw =
            std::clamp(b.width() / (2.0 * anchor_prior_w(cfg, best_a) * S), eps,
                       1.0 - eps);
        const double rh =
            std::clamp(b.height() / (2.0 * anchor_prior_h(cfg, best_a) * S), eps,
                       1.0 - eps);
        const double off[4] = {logit(tx), logit(ty), logit(rw), logit(rh)};
        for (int j = 0; j < 4; ++j) {
            const size_t pi = (size_t)(best_a * 4 + j) * gg + cell_idx;
            t.pos_t[pi] = off[j];
            t.pos_w[pi] = kPosWeight;
        }
    }
    return t;
}

Tensor detection_loss(const DetectorOutput& out, const AnchorTargets& t) {
    const auto& shp_obj = out.obj_logits.shape();
    const auto& shp_cls = out.cls_logits.shape();
    const auto& shp_pos = out.pos.shape();
    const Tensor obj_loss = bce_with_logits_sum(
        out.obj_logits, Tensor::constant(shp_obj, t.obj_t),
        Tensor::constant(shp_obj, t.obj_w));
    const Tensor cls_loss = bce_with_logits_sum(
        out.cls_logits, Tensor::constant(shp_cls, t.cls_t),
        Tensor::constant(shp_cls, t.cls_w));
    const Tensor d = sub(out.pos, Tensor::constant(shp_pos, t.pos_t));
    const Tensor pos_loss =
        reduce_sum(mul(mul(d, d), Tensor::constant(shp_pos, t.pos_w)));
    return add(add(obj_loss, cls_loss), pos_loss);
}

}  // namespace

DetectorWeights train_toy(const std::vector<Scene>& dataset, int epochs,
                          double learning_rate, std::uint64_t seed,
                          const DetectorConfig& cfg) {
    if (dataset.empty())
        throw std::invalid_argument("detector training needs a non-empty dataset");
    for (size_t si = 0; si < dataset.size(); ++si) {
        const Scene& s = dataset[si];
        bool has_gt = false;
        for (const Box& b : s.boxes) has_gt = has_gt || b.class_id < cfg.classes;
        if (!has_gt)
            throw std::invalid_argument(
                "detector training scene lacks ground-truth boxes");
        for (double v : s.image)
            if (!std::isfinite(v))
                throw std::runtime_error(
                    "detector training scene " + std::to_string(si) +
                    " contains non-finite pixels");
    }
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (learning_rate < 0) throw std::invalid_argument("learning_rate must be >= 0");

    DetectorWeights w = DetectorWeights::init(cfg, seed);
    const int S = cfg.input_size;
    std::vector<AnchorTargets> targets, targets_flip;
    std::vector<std::vector<double>> images_flip;
    std::vector<std::vector<Box>> boxes_flip;
    targets.reserve(dataset.size());
    targets_flip.reserve(dataset.size());
    images_flip.reserve(dataset.size());
    boxes_flip.reserve(dataset.size());
    for (const Scene& s : dataset) {
        targets.push_back(build_targets(s, cfg));
        Scene f = s;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    f.image[(size_t)(c * S + y) * S + x] =
                        s.image[(size_t)(c * S + y) * S + (S - 1 - x)];
        for (Box& b : f.boxes) {
            const double x1 = b.x1;
            b.x1 = S - b.x2;
            b.x2 = S - x1;
        }
        targets_flip.push_back(build_targets(f, cfg));
        boxes_flip.push_back(f.boxes);
        images_flip.push_back(std::move(f.image));
    }

    Adam opt(learning_rate);
    std::vector<double> grad(w.flat.size());
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, 0x73687566ULL, (std::uint64_t)epoch));
        for (size_t i = 0; i + 1 < order.size(); ++i) {
            const size_t j = i + shuffle_rng.uniform_index(order.size() - i);
            std::swap(order[i], order[j]);
        }
        for (size_t start = 0; start < order.size(); start += kBatchSize) {
            const size_t stop = std::min(order.size(), start + kBatchSize);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (size_t bi = start; bi < stop; ++bi) {
                const size_t si = order[bi];
                // flip / photometric / pixel-noise augmentation, deterministic
                // per (epoch, scene); draw order is fixed
                Rng aug(derive_seed(seed, 0x61756767ULL, (std::uint64_t)epoch,
                                    si));
                const bool flip = aug.uniform() < 0.5;
                const double gain = aug.uniform(0.9, 1.1);
                const double shift = aug.uniform(-0.05, 0.05);
                std::vector<double> pixels =
                    flip ? images_flip[si] : dataset[si].image;
                const auto& boxes =
                    flip ? boxes_flip[si] : dataset[si].boxes;
                for (const Box& b : boxes) {
                    if (aug.uniform() >= kOccludeProb) continue;
                    const double longer = std::max(b.width(), b.height());
                    const double frac = aug.uniform(kOccludeLo, kOccludeHi);
                    // Half the occluders sit near the box center so a
                    // centered benign patch is squarely in-distribution.
                    const bool centered = aug.uniform() < 0.5;
                    const double ux = aug.uniform(), uy = aug.uniform();
                    const double ocx =
                        centered
                            ? (b.x1 + b.x2) / 2 + (ux - 0.5) * 0.2 * b.width()
                            : b.x1 + ux * b.width();
                    const double ocy =
                        centered
                            ? (b.y1 + b.y2) / 2 + (uy - 0.5) * 0.2 * b.height()
                            : b.y1 + uy * b.height();
                    const double col[3] = {aug.uniform(), aug.uniform(),
                                           aug.uniform()};
                    const int half =
                        std::max(1, (int)std::lround(frac * longer / 2.0));
                    const int x0 = std::clamp((int)std::lround(ocx) - half, 0, S);
                    const int x1 = std::clamp((int)std::lround(ocx) + half, 0, S);
                    const int y0 = std::clamp((int)std::lround(ocy) - half, 0, S);
                    const int y1 = std::clamp((int)std::lround(ocy) + half, 0, S);
                    for (int c = 0; c < 3; ++c)
                        for (int y = y0; y < y1; ++y)
                            for (int x = x0; x < x1; ++x)
                                pixels[(size_t)(c * S + y) * S + x] = col[c];
                }
                for (double& v : pixels)
                    v = std::clamp(gain * v + shift +
                                       aug.normal(0.0, kAugNoiseStd),
                                   0.0, 1.0);
                Tape tape;
                DetectorGraph g = forward_trainable(tape, pixels, w);
                const Tensor loss = detection_loss(
                    g.out, flip ? targets_flip[si] : targets[si]);
                if (!std::isfinite(loss.item()))
                    throw std::runtime_error(
                        "detector training diverged (non-finite loss) at epoch " +
                        std::to_string(epoch) + ", scene " + std::to_string(si) +
                        ", seed " + std::to_string(seed));
                tape.backward(loss);
                size_t off = 0;
                for (const Tensor& p : g.params) {
                    const auto& pg = p.grad();
                    for (size_t k = 0; k < pg.size(); ++k) grad[off + k] += pg[k];
                    off += pg.size();
                }
            }
            const double inv = 1.0 / (double)(stop - start);
            for (double& gv : grad) gv *= inv;
            opt.step(w.flat, grad);
        }
    }
    return w;
}

double measure_recall(const DetectorWeights& weights,
                      const std::vector<Scene>& scenes, double conf_threshold,
                      double nms_iou, int class_filter) {
    size_t total = 0, matched = 0;
    for (const Scene& s : scenes) {
        const DetectorOutput out =
            forward(Tensor::constant({3, s.size, s.size}, s.image), weights);
        const std::vector<Detection> dets =
            decode(weights.config, out, conf_threshold, nms_iou);
        for (const Box& b : s.boxes) {
            if (class_filter >= 0 && b.class_id != class_filter) continue;
            ++total;
            bool hit = false;
            for (const Detection& d : dets)
                hit = hit ||
                      (d.class_id == b.class_id && box_iou(d.box, b) >= 0.5);
            matched += hit;
        }
    }
    if (total == 0)
        throw std::invalid_argument("no ground-truth boxes to measure recall on");
    return (double)matched / (double)total;
}

}  // namespace stealth
