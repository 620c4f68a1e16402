#include "stealth/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace stealth {

MaskStrategy mask_strategy_from_string(const std::string& name) {
    if (name == "obj_conf") return MaskStrategy::obj_conf;
    if (name == "cls_max_conf") return MaskStrategy::cls_max_conf;
    if (name == "obj_or_cls") return MaskStrategy::obj_or_cls;
    if (name == "obj_and_cls") return MaskStrategy::obj_and_cls;
    throw std::invalid_argument(
        "unknown mask strategy '" + name +
        "' (expected obj_conf, cls_max_conf, obj_or_cls, or obj_and_cls)");
}

std::string mask_strategy_to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::obj_conf: return "obj_conf";
        case MaskStrategy::cls_max_conf: return "cls_max_conf";
        case MaskStrategy::obj_or_cls: return "obj_or_cls";
        case MaskStrategy::obj_and_cls: return "obj_and_cls";
    }
    throw std::logic_error("invalid mask strategy value");
}

namespace {

enum class FieldType { U64, Int, Double, String };

struct Field {
    const char* key;
    FieldType type;
    std::uint64_t Config::* u64 = nullptr;
    int Config::* i = nullptr;
    double Config::* d = nullptr;
    std::string Config::* s = nullptr;
};

Field fu(const char* k, std::uint64_t Config::* p) {
    Field f{k, FieldType::U64};
    f.u64 = p;
    return f;
}
Field fi(const char* k, int Config::* p) {
    Field f{k, FieldType::Int};
    f.i = p;
    return f;
}
Field fd(const char* k, double Config::* p) {
    Field f{k, FieldType::Double};
    f.d = p;
    return f;
}
Field fs(const char* k, std::string Config::* p) {
    Field f{k, FieldType::String};
    f.s = p;
    return f;
}

// One row per config key; order fixes the serialized layout.
const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        fu("seed", &Config::seed),
        fi("train.epochs", &Config::train_epochs),
        fi("train.batch_size", &Config::train_batch_size),
        fd("train.teacher_lr", &Config::teacher_lr),
        fd("train.student_lr", &Config::student_lr),
        fd("train.beta", &Config::beta),
        fd("train.omega", &Config::omega),
        fi("train.patch_size", &Config::patch_size),
        fs("train.teacher_init", &Config::teacher_init),
        fi("palette.size", &Config::palette_size),
        fs("palette.file", &Config::palette_file),
        fd("eot.contrast_lo", &Config::eot_contrast_lo),
        fd("eot.contrast_hi", &Config::eot_contrast_hi),
        fd("eot.brightness_lo", &Config::eot_brightness_lo),
        fd("eot.brightness_hi", &Config::eot_brightness_hi),
        fd("eot.noise_std", &Config::eot_noise_std),
        fd("eot.rotation_deg", &Config::eot_rotation_deg),
        fd("eot.patch_scale", &Config::eot_patch_scale),
        fd("adv.lambda1", &Config::lambda1),
        fd("adv.lambda2", &Config::lambda2),
        fd("adv.lambda3", &Config::lambda3),
        fs("mask.strategy", &Config::mask_strategy),
        fd("mask.th_cls", &Config::mask_th_cls),
        fd("mask.th_obj", &Config::mask_th_obj),
        fi("detector.input_size", &Config::det_input_size),
        fi("detector.grid", &Config::det_grid),
        fi("detector.anchors", &Config::det_anchors),
        fi("detector.classes", &Config::det_classes),
        fs("detector.channels", &Config::det_channels),
        fi("detector.epochs", &Config::det_epochs),
        fd("detector.lr", &Config::det_lr),
        fi("data.scenes", &Config::data_scenes),
        fi("data.holdout", &Config::data_holdout),
        fi("data.targets_min", &Config::data_targets_min),
        fi("data.targets_max", &Config::data_targets_max),
        fd("eval.conf_threshold", &Config::eval_conf_threshold),
        fd("eval.nms_iou", &Config::eval_nms_iou),
    };
    return f;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void line_fail(int lineno, const std::string& what) {
    throw std::runtime_error("config line " + std::to_string(lineno) + ": " + what);
}

void set_field(Config& c, const Field& f, const std::string& value, int lineno) {
    errno = 0;
    char* end = nullptr;
    switch (f.type) {
        case FieldType::U64: {
            const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
            if (value.empty() || *end != '\0' || errno == ERANGE)
                line_fail(lineno, "invalid unsigned integer for " + std::string(f.key));
            c.*(f.u64) = v;
            break;
        }
        case FieldType::Int: {
            const long v = std::strtol(value.c_str(), &end, 10);
            if (value.empty() || *end != '\0' || errno == ERANGE || v > 1000000000L ||
                v < -1000000000L)
                line_fail(lineno, "invalid integer for " + std::string(f.key));
            c.*(f.i) = static_cast<int>(v);
            break;
        }
        case FieldType::Double: {
            const double v = std::strtod(value.c_str(), &end);
            if (value.empty() || *end != '\0' || errno == ERANGE)
                line_fail(lineno, "invalid number for " + std::string(f.key));
            c.*(f.d) = v;
            break;
        }
        case FieldType::String:
            c.*(f.s) = value;
            break;
    }
}

std::vector<int> parse_channels(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        errno = 0;
        char* end = nullptr;
        const long v = std::strtol(item.c_str(), &end, 10);
        if (item.empty() || *end != '\0' || errno == ERANGE || v < 1 || v > 4096)
            throw std::runtime_error("detector.channels: invalid entry '" + item + "'");
        out.push_back(static_cast<int>(v));
    }
    if (out.empty()) throw std::runtime_error("detector.channels: empty list");
    return out;
}

}  // namespace

Config Config::parse(const std::string& text) {
    Config c;
    std::vector<char> seen(fields().size(), 0);
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos) line_fail(lineno, "expected key=value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        bool matched = false;
        for (size_t i = 0; i < fields().size(); ++i) {
            if (key == fields()[i].key) {
                if (seen[i]) line_fail(lineno, "duplicate key " + key);
                seen[i] = 1;
                set_field(c, fields()[i], value, lineno);
                matched = true;
                break;
            }
        }
        if (!matched) line_fail(lineno, "unknown key " + key);
    }
    c.validate();
    return c;
}

std::string Config::serialize() const {
    std::string out;
    char buf[64];
    for (const auto& f : fields()) {
        out += f.key;
        out += '=';
        switch (f.type) {
            case FieldType::U64:
                std::snprintf(buf, sizeof(buf), "%llu",
                              (unsigned long long)(this->*(f.u64)));
                out += buf;
                break;
            case FieldType::Int:
                std::snprintf(buf, sizeof(buf), "%d", this->*(f.i));
                out += buf;
                break;
            case FieldType::Double:
                std::snprintf(buf, sizeof(buf), "%.17g", this->*(f.d));
                out += buf;
                break;
            case FieldType::String:
                out += this->*(f.s);
                break;
        }
        out += '\n';
    }
    return out;
}

void Config::validate() const {
    auto fail = [](const std::string& what) {
        throw std::runtime_error("config: " + what);
    };
    if (train_epochs < 1) fail("train.epochs must be >= 1");
    if (train_batch_size < 1) fail("train.batch_size must be >= 1");
    if (teacher_lr <= 0) fail("train.teacher_lr must be > 0");
    if (student_lr <= 0) fail("train.student_lr must be > 0");
    if (beta < 0) fail("train.beta must be >= 0");
    if (omega <= 0) fail("train.omega must be > 0");
    if (patch_size < 2) fail("train.patch_size must be >= 2");
    if (teacher_init != "uniform" && teacher_init != "gray")
        fail("train.teacher_init must be 'uniform' or 'gray'");
    if (palette_size < 2 || palette_size > 64)
        fail("palette.size must be in [2, 64]");
    if (eot_contrast_lo > eot_contrast_hi) fail("eot.contrast range inverted");
    if (eot_brightness_lo > eot_brightness_hi) fail("eot.brightness range inverted");
    if (eot_noise_std < 0) fail("eot.noise_std must be >= 0");
    if (eot_rotation_deg < 0) fail("eot.rotation_deg must be >= 0");
    if (eot_patch_scale <= 0 || eot_patch_scale > 1)
        fail("eot.patch_scale must be in (0, 1]");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
        fail("adv.lambda* must be >= 0");
    if (lambda1 == 0 && lambda2 == 0 && lambda3 == 0)
        fail("adv.lambda* must not all be zero");
    try {
        mask_strategy_from_string(mask_strategy);
    } catch (const std::invalid_argument& e) {
        fail(e.what());
    }
    if (mask_th_cls <= 0 || mask_th_cls >= 1) fail("mask.th_cls must be in (0, 1)");
    if (mask_th_obj <= 0 || mask_th_obj >= 1) fail("mask.th_obj must be in (0, 1)");
    if (det_input_size < 8) fail("detector.input_size must be >= 8");
    if (det_grid < 1) fail("detector.grid must be >= 1");
    if (det_input_size % det_grid != 0)
        fail("detector.input_size must be divisible by detector.grid");
    if (det_anchors < 1) fail("detector.anchors must be >= 1");
    if (det_classes < 1) fail("detector.classes must be >= 1");
    parse_channels(det_channels);
    if (det_epochs < 0) fail("detector.epochs must be >= 0");
    if (det_lr <= 0) fail("detector.lr must be > 0");
    if (data_scenes < 1) fail("data.scenes must be >= 1");
    if (data_holdout < 1) fail("data.holdout must be >= 1");
    if (data_targets_min < 1) fail("data.targets_min must be >= 1");
    if (data_targets_max < data_targets_min)
        fail("data.targets_max must be >= data.targets_min");
    if (eval_conf_threshold <= 0 || eval_conf_threshold >= 1)
        fail("eval.conf_threshold must be in (0, 1)");
    if (eval_nms_iou <= 0 || eval_nms_iou >= 1)
        fail("eval.nms_iou must be in (0, 1)");
}

EotConfig Config::eot() const {
    return {eot_contrast_lo, eot_contrast_hi, eot_brightness_lo,
            eot_brightness_hi, eot_noise_std, eot_rotation_deg, eot_patch_scale};
}

AdvLossWeights Config::adv_weights() const { return {lambda1, lambda2, lambda3}; }

MaskConfig Config::mask() const {
    return {mask_strategy_from_string(mask_strategy), mask_th_cls, mask_th_obj};
}

DetectorConfig Config::detector() const {
    return {det_input_size, det_grid, det_anchors, det_classes,
            parse_channels(det_channels)};
}

SceneGenConfig Config::scene_gen() const {
    return {det_input_size, data_targets_min, data_targets_max};
}

RunConfig Config::teacher_run() const {
    RunConfig r;
    r.epochs = train_epochs;
    r.batch_size = train_batch_size;
    r.learning_rate = teacher_lr;
    r.seed = seed;
    r.eot = eot();
    r.adv = adv_weights();
    r.mask = mask();
    r.beta = beta;
    r.omega = omega;
    r.patch_size = patch_size;
    r.teacher_init = teacher_init;
    r.palette_file = palette_file;
    return r;
}

RunConfig Config::student_run() const {
    RunConfig r = teacher_run();
    r.learning_rate = student_lr;
    return r;
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    try {
        return Config::parse(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

void save_config(const Config& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open config file for write: " + path);
    out << cfg.serialize();
    if (!out) throw std::runtime_error("short write to config file: " + path);
}

}  // namespace stealth
