#include "cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stealth/colorspace.hpp"
#include "stealth/config.hpp"
#include "stealth/detector.hpp"
#include "stealth/image.hpp"
#include "stealth/metrics.hpp"
#include "stealth/patchgen.hpp"
#include "stealth/rng.hpp"
#include "stealth/scene.hpp"
#include "stealth/trainer.hpp"

namespace fs = std::filesystem;

namespace stealth {

namespace {

// Every attack phase requires this held-out recall from the detector.
constexpr double kRecallGate = 0.9;

// Data-derivation tags, disjoint from the trainer's stream tags.
constexpr std::uint64_t kTagTrainScene = 0x7363656e30ULL;
constexpr std::uint64_t kTagHoldoutScene = 0x7363656e31ULL;
constexpr std::uint64_t kTagEnvironment = 0x656e76ULL;
constexpr std::uint64_t kTagDetectorTrain = 0x646574ULL;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for write");
    out.write(content.data(), (long)content.size());
    if (!out) throw std::runtime_error("short write to " + path);
}

void append_text(const std::string& path, const std::string& content,
                 const std::string& header) {
    const bool fresh = !fs::exists(path);
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw std::runtime_error("cannot open " + path + " for write");
    if (fresh) out.write(header.data(), (long)header.size());
    out.write(content.data(), (long)content.size());
    if (!out) throw std::runtime_error("short write to " + path);
}

struct CliArgs {
    std::string config_path;
    std::string run_dir = "run";
    std::uint64_t seed = 0;
    bool seed_given = false;
    double beta = 1.0;
    bool beta_given = false;
    int colors = 0;  // 0 = use config
    int threads = 1; // reserved; execution is single-threaded
};

struct Context {
    Config cfg;
    std::string run;
};

// Effective config: defaults, then file, then flag overrides; the snapshot
// in the run directory must match it byte for byte on every command.
Context make_context(const CliArgs& a) {
    Context ctx;
    if (!a.config_path.empty()) ctx.cfg = load_config(a.config_path);
    if (a.seed_given) ctx.cfg.seed = a.seed;
    if (a.beta_given) ctx.cfg.beta = a.beta;
    if (a.colors > 0) ctx.cfg.palette_size = a.colors;
    ctx.cfg.validate();
    ctx.run = a.run_dir;

    fs::create_directories(ctx.run);
    const std::string snap = ctx.run + "/config.txt";
    const std::string text = ctx.cfg.serialize();
    if (fs::exists(snap)) {
        if (read_text(snap) != text)
            throw std::runtime_error(
                "run directory " + ctx.run +
                " was created with a different config; use matching "
                "config/seed flags or a fresh directory");
    } else {
        write_text(snap, text);
    }
    return ctx;
}

std::string scene_base(const std::string& run, const char* prefix, int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", i);
    return run + "/scenes/" + prefix + "_" + buf;
}

Scene load_scene(const Context& ctx, const char* prefix, int i) {
    const std::string base = scene_base(ctx.run, prefix, i);
    if (!fs::exists(base + ".ppm") || !fs::exists(base + ".txt"))
        throw std::runtime_error("missing scene " + base +
                                 ".ppm; run gen-data first");
    const Image img = load_image(base + ".ppm");
    if (img.width != img.height || img.width != ctx.cfg.det_input_size)
        throw std::runtime_error(base + ".ppm does not match " +
                                 "detector.input_size");
    Scene s;
    s.image = image_to_planar(img);
    s.size = img.width;
    s.boxes = load_annotations(base + ".txt");
    return s;
}

std::vector<Scene> load_train_scenes(const Context& ctx) {
    std::vector<Scene> out;
    for (int i = 0; i < ctx.cfg.data_scenes; ++i)
        out.push_back(load_scene(ctx, "train", i));
    return out;
}

std::vector<Scene> load_holdout_scenes(const Context& ctx) {
    std::vector<Scene> out;
    for (int i = 0; i < ctx.cfg.data_holdout; ++i)
        out.push_back(load_scene(ctx, "holdout", i));
    return out;
}

DetectorWeights load_gated_detector(const Context& ctx,
                                    const std::vector<Scene>& holdout) {
    const std::string path = ctx.run + "/detector.weights";
    if (!fs::exists(path))
        throw std::runtime_error(
            "missing detector weights; run train-detector first");
    const DetectorWeights w = DetectorWeights::load(path);
    const double recall = measure_recall(w, holdout, ctx.cfg.eval_conf_threshold,
                                         ctx.cfg.eval_nms_iou, 0);
    if (recall < kRecallGate)
        throw std::runtime_error("detector recall gate not met: held-out "
                                 "recall " + fmt(recall) +
                                 " < 0.9; retrain the detector");
    return w;
}

int steps_per_epoch(const Config& cfg) {
    return (cfg.data_scenes + cfg.train_batch_size - 1) / cfg.train_batch_size;
}

// Mean l_adv and mean_obj over the last epoch's rows of a loss CSV.
struct FinalEpochStats {
    double l_adv = 0;
    double mean_obj = 0;
};

FinalEpochStats final_epoch_stats(const std::string& csv_path, int spe) {
    std::istringstream in(read_text(csv_path));
    std::string line;
    if (!std::getline(in, line) ||
        line != "step,l_adv,l_distill,l_total,mean_obj")
        throw std::runtime_error(csv_path + ": bad loss csv header");
    std::vector<std::pair<double, double>> rows;
    while (std::getline(in, line)) {
        double step, ladv, ldis, ltot, mobj;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &step, &ladv,
                        &ldis, &ltot, &mobj) != 5)
            throw std::runtime_error(csv_path + ": bad loss csv row");
        rows.emplace_back(ladv, mobj);
    }
    if (rows.empty()) throw std::runtime_error(csv_path + ": no rows");
    const std::size_t tail = rows.size() % (std::size_t)spe == 0
                                 ? (std::size_t)spe
                                 : rows.size() % (std::size_t)spe;
    FinalEpochStats s;
    for (std::size_t i = rows.size() - tail; i < rows.size(); ++i) {
        s.l_adv += rows[i].first;
        s.mean_obj += rows[i].second;
    }
    s.l_adv /= (double)tail;
    s.mean_obj /= (double)tail;
    return s;
}

TeacherPatch best_teacher(const TeacherState& st) {
    return st.best_epoch >= 0 ? st.best : st.patch;
}

RenderedPatch student_patch(const StudentState& st) {
    PatchParams p = st.params;
    if (st.best_epoch >= 0) p.logits = st.best_logits;
    return render_hard(p);
}

int cmd_gen_data(const CliArgs& a) {
    const Context ctx = make_context(a);
    fs::create_directories(ctx.run + "/scenes");
    const SceneGenConfig sg = ctx.cfg.scene_gen();
    auto write_scene = [&](const char* prefix, int i, std::uint64_t tag) {
        const Scene s =
            synthesize_scene(derive_seed(ctx.cfg.seed, tag, (std::uint64_t)i),
                             sg);
        const std::string base = scene_base(ctx.run, prefix, i);
        save_image(planar_to_image(s.image, s.size, s.size), base + ".ppm");
        save_annotations(s.boxes, base + ".txt");
    };
    for (int i = 0; i < ctx.cfg.data_scenes; ++i)
        write_scene("train", i, kTagTrainScene);
    for (int i = 0; i < ctx.cfg.data_holdout; ++i)
        write_scene("holdout", i, kTagHoldoutScene);
    const Image env = render_background(
        derive_seed(ctx.cfg.seed, kTagEnvironment), sg);
    save_image(env, ctx.run + "/scenes/env.ppm");
    std::cout << "gen-data: " << ctx.cfg.data_scenes << " train + "
              << ctx.cfg.data_holdout << " holdout scenes -> " << ctx.run
              << "/scenes\n";
    return 0;
}

int cmd_palette(const CliArgs& a, const std::string& image_path) {
    const Context ctx = make_context(a);
    Image env;
    if (!image_path.empty()) {
        env = load_image(image_path);
    } else {
        env = render_background(derive_seed(ctx.cfg.seed, kTagEnvironment),
                                ctx.cfg.scene_gen());
    }
    EnvironmentSample sample;
    const std::size_t count = (std::size_t)env.width * env.height;
    sample.pixels.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        sample.pixels.push_back({env.pixels[3 * i], env.pixels[3 * i + 1],
                                 env.pixels[3 * i + 2]});
    const Palette pal =
        extract_palette(sample, ctx.cfg.palette_size, ctx.cfg.seed);
    write_text(ctx.run + "/palette.txt", palette_to_text(pal));
    std::cout << "palette: " << pal.size() << " colors -> " << ctx.run
              << "/palette.txt\n";
    return 0;
}

int cmd_train_detector(const CliArgs& a) {
    const Context ctx = make_context(a);
    const auto train = load_train_scenes(ctx);
    const auto holdout = load_holdout_scenes(ctx);
    const DetectorWeights w =
        train_toy(train, ctx.cfg.det_epochs, ctx.cfg.det_lr,
                  derive_seed(ctx.cfg.seed, kTagDetectorTrain),
                  ctx.cfg.detector());
    w.save(ctx.run + "/detector.weights");
    const double tr = measure_recall(w, train, ctx.cfg.eval_conf_threshold,
                                     ctx.cfg.eval_nms_iou, 0);
    const double hr = measure_recall(w, holdout, ctx.cfg.eval_conf_threshold,
                                     ctx.cfg.eval_nms_iou, 0);
    write_text(ctx.run + "/detector_metrics.txt",
               "train_recall=" + fmt(tr) + "\nholdout_recall=" + fmt(hr) +
                   "\n");
    std::cout << "train-detector: holdout recall " << fmt(hr) << " -> "
              << ctx.run << "/detector.weights\n";
    if (hr < kRecallGate)
        std::cerr << "warning: held-out recall below the 0.9 gate; attack "
                     "phases will refuse to run\n";
    return 0;
}

int cmd_train_teacher(const CliArgs& a) {
    const Context ctx = make_context(a);
    const auto holdout = load_holdout_scenes(ctx);
    const DetectorWeights w = load_gated_detector(ctx, holdout);
    const auto train = load_train_scenes(ctx);
    const RunConfig rc = ctx.cfg.teacher_run();

    const std::string dir = ctx.run + "/teacher";
    fs::create_directories(dir);
    const std::string ckpt = dir + "/checkpoint.bin";
    TeacherState st =
        fs::exists(ckpt) ? load_teacher_state(ckpt) : init_teacher_state(rc);
    const int before = st.next_epoch;
    run_teacher_epochs(st, rc, train, w);
    save_teacher_state(st, ckpt);
    append_text(dir + "/loss.csv",
                trace_to_csv(st.trace).substr(
                    std::string("step,l_adv,l_distill,l_total,mean_obj\n")
                        .size()),
                "step,l_adv,l_distill,l_total,mean_obj\n");

    const TeacherPatch best = best_teacher(st);
    save_image(planar_to_image(best.pixels, best.width, best.height),
               dir + "/patch.ppm");
    const FinalEpochStats fin =
        final_epoch_stats(dir + "/loss.csv", steps_per_epoch(ctx.cfg));
    write_text(dir + "/metrics.txt",
               "best_epoch=" + std::to_string(st.best_epoch) +
                   "\nbest_mean_l_adv=" + fmt(st.best_mean) +
                   "\nfinal_epoch_mean_l_adv=" + fmt(fin.l_adv) +
                   "\nfinal_mean_obj=" + fmt(fin.mean_obj) + "\n");
    std::cout << "train-teacher: epochs " << before << ".." << st.next_epoch
              << ", best epoch " << st.best_epoch << " (mean l_adv "
              << fmt(st.best_mean) << ") -> " << dir << "\n";
    return 0;
}

int cmd_train_student(const CliArgs& a, bool distill) {
    const Context ctx = make_context(a);
    const auto holdout = load_holdout_scenes(ctx);
    const DetectorWeights w = load_gated_detector(ctx, holdout);
    const auto train = load_train_scenes(ctx);

    const std::string teacher_ckpt = ctx.run + "/teacher/checkpoint.bin";
    if (!fs::exists(teacher_ckpt))
        throw std::runtime_error(
            "missing teacher checkpoint; run train-teacher first");
    const TeacherPatch teacher = best_teacher(load_teacher_state(teacher_ckpt));

    const std::string palette_path = ctx.run + "/palette.txt";
    if (!fs::exists(palette_path))
        throw std::runtime_error("missing palette file; run palette first");
    const Palette pal = palette_from_text(read_text(palette_path));

    const RunConfig rc = ctx.cfg.student_run();
    const std::string dir =
        ctx.run + (distill ? "/student_distill" : "/student_plain");
    fs::create_directories(dir);
    const std::string ckpt = dir + "/checkpoint.bin";
    StudentState st = fs::exists(ckpt) ? load_student_state(ckpt)
                                       : init_student_state(rc, pal);
    const int before = st.next_epoch;
    run_student_epochs(st, rc, train, w, teacher, distill);
    save_student_state(st, ckpt);
    append_text(dir + "/loss.csv",
                trace_to_csv(st.trace).substr(
                    std::string("step,l_adv,l_distill,l_total,mean_obj\n")
                        .size()),
                "step,l_adv,l_distill,l_total,mean_obj\n");

    const RenderedPatch hard = student_patch(st);
    save_image(planar_to_image(hard.data, hard.width, hard.height),
               dir + "/patch.ppm");
    const FinalEpochStats fin =
        final_epoch_stats(dir + "/loss.csv", steps_per_epoch(ctx.cfg));
    write_text(dir + "/metrics.txt",
               std::string("distill=") + (distill ? "1" : "0") +
                   "\nbest_epoch=" + std::to_string(st.best_epoch) +
                   "\nbest_mean_l_adv=" + fmt(st.best_mean) +
                   "\nfinal_epoch_mean_l_adv=" + fmt(fin.l_adv) +
                   "\nfinal_mean_obj=" + fmt(fin.mean_obj) + "\n");
    std::cout << "train-student" << (distill ? " --distill" : " --no-distill")
              << ": epochs " << before << ".." << st.next_epoch
              << ", best epoch " << st.best_epoch << " (mean l_adv "
              << fmt(st.best_mean) << ") -> " << dir << "\n";
    return 0;
}

int cmd_eval(const CliArgs& a) {
    const Context ctx = make_context(a);
    const auto holdout = load_holdout_scenes(ctx);
    const DetectorWeights w = load_gated_detector(ctx, holdout);
    const double conf = ctx.cfg.eval_conf_threshold;
    const double nms = ctx.cfg.eval_nms_iou;
    const double scale = ctx.cfg.eot_patch_scale;
    const int spe = steps_per_epoch(ctx.cfg);
    std::string out;

    const RenderedPatch gray{
        std::vector<double>((std::size_t)3 * ctx.cfg.patch_size *
                                ctx.cfg.patch_size,
                            0.5),
        ctx.cfg.patch_size, ctx.cfg.patch_size};
    const AsrResult gr = attack_success_rate(holdout, gray, w, conf, nms,
                                             scale);
    out += "gray_asr=" + fmt(gr.asr) + "\n";
    out += "gray_mean_obj=" +
           fmt(mean_patched_objectness(holdout, gray, w, scale)) + "\n";

    bool have_patch = false;
    TeacherPatch teacher;
    bool have_teacher = false;
    const std::string teacher_ckpt = ctx.run + "/teacher/checkpoint.bin";
    if (fs::exists(teacher_ckpt)) {
        const TeacherState ts = load_teacher_state(teacher_ckpt);
        teacher = best_teacher(ts);
        have_teacher = true;
        have_patch = true;
        const RenderedPatch tp{teacher.pixels, teacher.height, teacher.width};
        const AsrResult r = attack_success_rate(holdout, tp, w, conf, nms,
                                                scale);
        out += "teacher_asr=" + fmt(r.asr) + "\n";
        out += "teacher_mean_obj=" +
               fmt(mean_patched_objectness(holdout, tp, w, scale)) + "\n";
        write_text(ctx.run + "/teacher/curve.csv",
                   curve_to_csv(confidence_curve(
                       read_text(ctx.run + "/teacher/loss.csv"), spe)));
    }

    for (const char* variant : {"student_distill", "student_plain"}) {
        const std::string dir = ctx.run + "/" + variant;
        if (!fs::exists(dir + "/checkpoint.bin")) continue;
        have_patch = true;
        const StudentState st = load_student_state(dir + "/checkpoint.bin");
        const RenderedPatch hard = student_patch(st);
        const std::string key = variant;
        const AsrResult r = attack_success_rate(holdout, hard, w, conf, nms,
                                                scale);
        out += key + "_asr=" + fmt(r.asr) + "\n";
        out += key + "_mean_obj=" +
               fmt(mean_patched_objectness(holdout, hard, w, scale)) + "\n";
        out += key + "_final_l_adv=" +
               fmt(final_epoch_stats(dir + "/loss.csv", spe).l_adv) + "\n";
        if (have_teacher) {
            const RenderedPatch tq =
                quantize_to_palette(teacher.pixels, teacher.height,
                                    teacher.width, st.params.palette);
            out += key + "_ssim_teacher=" + fmt(ssim(hard, tq)) + "\n";
        }
        write_text(dir + "/curve.csv",
                   curve_to_csv(confidence_curve(read_text(dir + "/loss.csv"),
                                                 spe)));
    }

    if (!have_patch)
        throw std::runtime_error(
            "nothing to evaluate; run train-teacher or train-student first");
    write_text(ctx.run + "/metrics.txt", out);
    std::cout << "eval: metrics -> " << ctx.run << "/metrics.txt\n";
    return 0;
}

int cmd_report(const CliArgs& a) {
    const Context ctx = make_context(a);
    std::string out = "run directory: " + ctx.run + "\n\n[config]\n" +
                      read_text(ctx.run + "/config.txt");
    for (const char* part :
         {"detector_metrics.txt", "teacher/metrics.txt",
          "student_distill/metrics.txt", "student_plain/metrics.txt",
          "metrics.txt"}) {
        const std::string path = ctx.run + "/" + part;
        if (!fs::exists(path)) continue;
        out += "\n[" + std::string(part) + "]\n" + read_text(path);
    }
    write_text(ctx.run + "/report.txt", out);
    std::cout << "report: -> " << ctx.run << "/report.txt\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"color-constrained adversarial patch engine"};
    app.require_subcommand(1);

    CliArgs a;
    std::string palette_image;
    bool distill = false, no_distill = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", a.config_path, "config file (key=value)");
        auto* seed = sub->add_option("--seed", a.seed, "override config seed");
        seed->each([&](const std::string&) { a.seed_given = true; });
        // Every command takes --beta so one override works across a whole
        // run directory; only student training reads it.
        auto* beta = sub->add_option("--beta", a.beta,
                                     "distillation weight override");
        beta->each([&](const std::string&) { a.beta_given = true; });
        sub->add_option("--run", a.run_dir, "run directory (default: run)");
        sub->add_option("--threads", a.threads,
                        "worker cap (reserved; execution is single-threaded)")
            ->check(CLI::PositiveNumber);
        return sub;
    };

    auto* gen = add_common(app.add_subcommand(
        "gen-data", "synthesize training and held-out scenes"));
    auto* pal = add_common(app.add_subcommand(
        "palette", "extract an environment color palette"));
    pal->add_option("image", palette_image,
                    "environment image (default: synthesized background)");
    pal->add_option("--colors", a.colors, "palette size override")
        ->check(CLI::Range(1, 64));
    auto* det = add_common(
        app.add_subcommand("train-detector", "train the toy detector"));
    auto* tea = add_common(app.add_subcommand(
        "train-teacher", "optimize the unconstrained teacher patch"));
    auto* stu = add_common(app.add_subcommand(
        "train-student", "optimize the palette-constrained student patch"));
    stu->add_flag("--distill", distill,
                  "imitate the teacher's features (default)");
    stu->add_flag("--no-distill", no_distill, "plain student baseline");
    auto* eva = add_common(app.add_subcommand(
        "eval", "success rate, similarity, and confidence curves"));
    auto* rep = add_common(
        app.add_subcommand("report", "aggregate run metrics into one file"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) return cmd_gen_data(a);
        if (pal->parsed()) return cmd_palette(a, palette_image);
        if (det->parsed()) return cmd_train_detector(a);
        if (tea->parsed()) return cmd_train_teacher(a);
        if (stu->parsed()) {
            if (distill && no_distill)
                throw std::runtime_error(
                    "--distill and --no-distill are mutually exclusive");
            return cmd_train_student(a, !no_distill);
        }
        if (eva->parsed()) return cmd_eval(a);
        if (rep->parsed()) return cmd_report(a);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace stealth
