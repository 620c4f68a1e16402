#include "stealth/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "stealth/losses.hpp"
#include "stealth/rng.hpp"
#include "stealth/tensor.hpp"

namespace stealth {

namespace {

// Distinct derivation tags keep the random streams independent.
constexpr std::uint64_t kTagTeacherInit = 0x74696e69ULL;
constexpr std::uint64_t kTagTeacherShuffle = 0x74736866ULL;
constexpr std::uint64_t kTagTeacherEot = 0x74656f74ULL;
constexpr std::uint64_t kTagStudentInit = 0x7061746368ULL;
constexpr std::uint64_t kTagStudentShuffle = 0x73736866ULL;
constexpr std::uint64_t kTagStudentGumbel = 0x7367756dULL;
constexpr std::uint64_t kTagStudentEot = 0x73656f74ULL;

constexpr const char* kTeacherMagic = "stealthpatch teacher checkpoint v1";
constexpr const char* kStudentMagic = "stealthpatch student checkpoint v1";

std::vector<int> shuffled_indices(std::size_t n, std::uint64_t seed,
                                  std::uint64_t tag, int epoch) {
    std::vector<int> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = (int)i;
    Rng rng(derive_seed(seed, tag, (std::uint64_t)epoch));
    for (std::size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
    return idx;
}

std::vector<Box> target_boxes(const Scene& scene) {
    std::vector<Box> out;
    for (const Box& b : scene.boxes)
        if (b.class_id == 0) out.push_back(b);
    return out;
}

void check_run_inputs(const RunConfig& cfg, const std::vector<Scene>& dataset) {
    if (cfg.learning_rate < 0)
        throw std::invalid_argument("learning rate must be >= 0");
    if (cfg.batch_size < 1)
        throw std::invalid_argument("batch size must be >= 1");
    if (dataset.empty()) throw std::invalid_argument("training set is empty");
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (target_boxes(dataset[i]).empty())
            throw std::invalid_argument("scene " + std::to_string(i) +
                                        " has no class-0 target box");
}

[[noreturn]] void diverged(int epoch, long step, int scene) {
    throw std::runtime_error(
        "patch training diverged (non-finite loss) at epoch " +
        std::to_string(epoch) + ", step " + std::to_string(step) + ", scene " +
        std::to_string(scene));
}

// Epoch-mean bookkeeping shared by both trainers.
template <typename State, typename Snapshot>
void finish_epoch(State& st, double epoch_loss_sum, std::size_t scenes,
                  const Snapshot& snapshot) {
    const double mean = epoch_loss_sum / (double)scenes;
    st.trace.epoch_mean_ladv.push_back(mean);
    if (mean < st.best_mean) {
        st.best_mean = mean;
        st.best_epoch = st.next_epoch;
        snapshot();
    }
    ++st.next_epoch;
}

void teacher_epoch(TeacherState& st, const RunConfig& cfg,
                   const std::vector<Scene>& dataset,
                   const DetectorWeights& weights) {
    const int epoch = st.next_epoch;
    const auto order =
        shuffled_indices(dataset.size(), cfg.seed, kTagTeacherShuffle, epoch);
    const std::size_t n = dataset.size();
    const std::size_t bs = (std::size_t)cfg.batch_size;
    double epoch_sum = 0;
    for (std::size_t b0 = 0, bi = 0; b0 < n; b0 += bs, ++bi) {
        const std::size_t b1 = std::min(b0 + bs, n);
        const double members = (double)(b1 - b0);
        Rng eot_rng(derive_seed(cfg.seed, kTagTeacherEot, (std::uint64_t)epoch,
                                bi));
        std::vector<double> grad_sum(st.patch.pixels.size(), 0.0);
        double ladv_sum = 0, obj_sum = 0;
        for (std::size_t k = b0; k < b1; ++k) {
            const Scene& scene = dataset[(std::size_t)order[k]];
            const auto gts = target_boxes(scene);
            const EotDraws draws = sample_patch_draws(scene, cfg.eot, eot_rng);
            Tape tape;
            Tensor patch = tape.variable({3, st.patch.height, st.patch.width},
                                         st.patch.pixels);
            const Tensor composite = apply_patch_with_draws(scene, patch, draws);
            const DetectorOutput out = forward(composite, weights);
            const Tensor l_adv =
                adversarial_loss(weights.config, out, gts, cfg.adv);
            const double lv = l_adv.item();
            if (!std::isfinite(lv)) diverged(epoch, st.next_step, order[k]);
            tape.backward(l_adv);
            const auto& g = patch.grad();
            for (std::size_t i = 0; i < g.size(); ++i) grad_sum[i] += g[i];
            ladv_sum += lv;
            obj_sum += mean_matched_objectness(weights.config, out, gts);
        }
        for (double& g : grad_sum) g /= members;
        st.opt.step(st.patch.pixels, grad_sum);
        for (double& v : st.patch.pixels) v = std::clamp(v, 0.0, 1.0);
        const double ladv = ladv_sum / members;
        st.trace.rows.push_back(
            {st.next_step, ladv, 0.0, ladv, obj_sum / members});
        ++st.next_step;
        epoch_sum += ladv_sum;
    }
    finish_epoch(st, epoch_sum, n, [&] { st.best = st.patch; });
}

void student_epoch(StudentState& st, const RunConfig& cfg,
                   const std::vector<Scene>& dataset,
                   const DetectorWeights& weights, const TeacherPatch& teacher,
                   bool distill) {
    const int epoch = st.next_epoch;
    const auto order =
        shuffled_indices(dataset.size(), cfg.seed, kTagStudentShuffle, epoch);
    const std::size_t n = dataset.size();
    const std::size_t bs = (std::size_t)cfg.batch_size;
    const int m = st.params.colors();
    const int H = st.params.height, W = st.params.width;
    Tensor teacher_patch;
    if (distill)
        teacher_patch = Tensor::constant({3, teacher.height, teacher.width},
                                         teacher.pixels);
    const double th = mask_threshold(cfg.mask);
    double epoch_sum = 0;
    for (std::size_t b0 = 0, bi = 0; b0 < n; b0 += bs, ++bi) {
        const std::size_t b1 = std::min(b0 + bs, n);
        const double members = (double)(b1 - b0);
        Rng eot_rng(derive_seed(cfg.seed, kTagStudentEot, (std::uint64_t)epoch,
                                bi));
        Rng gum_rng(derive_seed(cfg.seed, kTagStudentGumbel,
                                (std::uint64_t)epoch, bi));
        const std::vector<double> gumbel = sample_gumbel(m, H, W, gum_rng);
        std::vector<double> grad_sum(st.params.logits.size(), 0.0);
        double ladv_sum = 0, ldis_sum = 0, ltot_sum = 0, obj_sum = 0;
        for (std::size_t k = b0; k < b1; ++k) {
            const Scene& scene = dataset[(std::size_t)order[k]];
            const auto gts = target_boxes(scene);
            const EotDraws draws = sample_patch_draws(scene, cfg.eot, eot_rng);
            Tape tape;
            Tensor logits = tape.variable({m, H, W}, st.params.logits);
            const Tensor rendered = render_soft_with_noise(
                logits, st.params.palette, st.params.omega, gumbel);
            const Tensor comp_stu =
                apply_patch_with_draws(scene, rendered, draws);
            const DetectorOutput out_stu = forward(comp_stu, weights);
            const Tensor l_adv =
                adversarial_loss(weights.config, out_stu, gts, cfg.adv);
            Tensor l_tot = l_adv;
            double ldis = 0;
            if (distill) {
                // Same draws, constant inputs: no gradient, no rng consumed.
                const Tensor comp_tch =
                    apply_patch_with_draws(scene, teacher_patch, draws);
                const DetectorOutput out_tch = forward(comp_tch, weights);
                const Tensor score_t = score_map(out_tch, cfg.mask.strategy);
                const Tensor score_s = score_map(out_stu, cfg.mask.strategy);
                const auto& fs = out_stu.feat.shape();
                const Tensor mask_t = build_mask(score_t, th, fs[1], fs[2]);
                const Tensor mask_s = build_mask(score_s, th, fs[1], fs[2]);
                const Tensor l_dis = distillation_loss(out_tch.feat,
                                                       out_stu.feat, mask_t,
                                                       mask_s);
                ldis = l_dis.item();
                l_tot = total_loss(l_adv, l_dis, cfg.beta);
            }
            const double lv = l_tot.item();
            if (!std::isfinite(lv) || !std::isfinite(ldis))
                diverged(epoch, st.next_step, order[k]);
            tape.backward(l_tot);
            const auto& g = logits.grad();
            for (std::size_t i = 0; i < g.size(); ++i) grad_sum[i] += g[i];
            ladv_sum += l_adv.item();
            ldis_sum += ldis;
            ltot_sum += lv;
            obj_sum += mean_matched_objectness(weights.config, out_stu, gts);
        }
        for (double& g : grad_sum) g /= members;
        st.opt.step(st.params.logits, grad_sum);
        st.trace.rows.push_back({st.next_step, ladv_sum / members,
                                 ldis_sum / members, ltot_sum / members,
                                 obj_sum / members});
        ++st.next_step;
        epoch_sum += ladv_sum;
    }
    finish_epoch(st, epoch_sum, n, [&] { st.best_logits = st.params.logits; });
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    std::vector<unsigned char> buf(v.size() * 8);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(v[i]);
        for (int b = 0; b < 8; ++b)
            buf[i * 8 + (std::size_t)b] = (unsigned char)(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), (long)buf.size());
}

std::vector<double> read_doubles(std::ifstream& in, std::size_t n,
                                 const std::string& path) {
    std::vector<unsigned char> buf(n * 8);
    in.read(reinterpret_cast<char*>(buf.data()), (long)buf.size());
    if ((std::size_t)in.gcount() != buf.size())
        throw std::runtime_error(path + ": truncated checkpoint data");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= (std::uint64_t)buf[i * 8 + (std::size_t)b] << (8 * b);
        v[i] = std::bit_cast<double>(bits);
    }
    return v;
}

long expect_long(std::ifstream& in, const std::string& key,
                 const std::string& path) {
    std::string line;
    if (!std::getline(in, line) || line.rfind(key + " ", 0) != 0)
        throw std::runtime_error(path + ": missing " + key + " line");
    errno = 0;
    char* end = nullptr;
    const long v = std::strtol(line.c_str() + key.size() + 1, &end, 10);
    if (*end != '\0' || errno == ERANGE)
        throw std::runtime_error(path + ": bad " + key + " value");
    return v;
}

// Moment buffers are stored zero-filled before the first step; restoring
// zeros with t = 0 matches a fresh optimizer exactly.
std::vector<double> padded_moments(const std::vector<double>& m,
                                   std::size_t n) {
    if (m.empty()) return std::vector<double>(n, 0.0);
    return m;
}

}  // namespace

std::string trace_to_csv(const TrainTrace& trace) {
    std::string out = "step,l_adv,l_distill,l_total,mean_obj\n";
    char buf[512];
    for (const StepRow& r : trace.rows) {
        std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g\n", r.step,
                      r.l_adv, r.l_distill, r.l_total, r.mean_obj);
        out += buf;
    }
    return out;
}

TeacherState init_teacher_state(const RunConfig& cfg) {
    if (cfg.learning_rate < 0)
        throw std::invalid_argument("learning rate must be >= 0");
    if (cfg.patch_size < 1)
        throw std::invalid_argument("patch size must be >= 1");
    TeacherState st;
    st.patch.height = cfg.patch_size;
    st.patch.width = cfg.patch_size;
    const std::size_t n = (std::size_t)3 * cfg.patch_size * cfg.patch_size;
    if (cfg.teacher_init == "uniform") {
        Rng rng(derive_seed(cfg.seed, kTagTeacherInit));
        st.patch.pixels.resize(n);
        for (double& v : st.patch.pixels) v = rng.uniform();
    } else if (cfg.teacher_init == "gray") {
        st.patch.pixels.assign(n, 0.5);
    } else {
        throw std::invalid_argument("teacher init must be 'uniform' or 'gray'");
    }
    st.opt = Adam(cfg.learning_rate);
    st.best = st.patch;
    return st;
}

void run_teacher_epochs(TeacherState& state, const RunConfig& cfg,
                        const std::vector<Scene>& dataset,
                        const DetectorWeights& weights, int max_epochs) {
    check_run_inputs(cfg, dataset);
    int ran = 0;
    while (state.next_epoch < cfg.epochs &&
           (max_epochs < 0 || ran < max_epochs)) {
        teacher_epoch(state, cfg, dataset, weights);
        ++ran;
    }
}

TeacherPatch train_teacher(const RunConfig& cfg,
                           const std::vector<Scene>& dataset,
                           const DetectorWeights& weights, TrainTrace* trace) {
    TeacherState st = init_teacher_state(cfg);
    run_teacher_epochs(st, cfg, dataset, weights);
    if (trace) *trace = st.trace;
    return st.best_epoch >= 0 ? st.best : st.patch;
}

StudentState init_student_state(const RunConfig& cfg, const Palette& palette) {
    if (cfg.learning_rate < 0)
        throw std::invalid_argument("learning rate must be >= 0");
    if (cfg.patch_size < 1)
        throw std::invalid_argument("patch size must be >= 1");
    if (palette.size() < 1) throw std::invalid_argument("palette is empty");
    if (palette.size() == 1)
        std::cerr << "warning: single-color palette; the rendered patch "
                     "cannot change\n";
    StudentState st;
    st.params = PatchParams::init(palette, cfg.patch_size, cfg.patch_size,
                                  cfg.omega,
                                  derive_seed(cfg.seed, kTagStudentInit));
    st.opt = Adam(cfg.learning_rate);
    st.best_logits = st.params.logits;
    return st;
}

void run_student_epochs(StudentState& state, const RunConfig& cfg,
                        const std::vector<Scene>& dataset,
                        const DetectorWeights& weights,
                        const TeacherPatch& teacher, bool distill,
                        int max_epochs) {
    check_run_inputs(cfg, dataset);
    if (distill &&
        (teacher.pixels.size() !=
             (std::size_t)3 * teacher.height * teacher.width ||
         teacher.height < 1 || teacher.width < 1))
        throw std::invalid_argument("teacher patch buffer does not match its size");
    int ran = 0;
    while (state.next_epoch < cfg.epochs &&
           (max_epochs < 0 || ran < max_epochs)) {
        student_epoch(state, cfg, dataset, weights, teacher, distill);
        ++ran;
    }
}

PatchParams train_student(const RunConfig& cfg,
                          const std::vector<Scene>& dataset,
                          const DetectorWeights& weights,
                          const Palette& palette, const TeacherPatch& teacher,
                          bool distill, TrainTrace* trace) {
    StudentState st = init_student_state(cfg, palette);
    run_student_epochs(st, cfg, dataset, weights, teacher, distill);
    if (trace) *trace = st.trace;
    PatchParams out = st.params;
    if (st.best_epoch >= 0) out.logits = st.best_logits;
    return out;
}

void save_teacher_state(const TeacherState& state, const std::string& path) {
    const std::size_t n = state.patch.pixels.size();
    if (n != (std::size_t)3 * state.patch.height * state.patch.width ||
        state.best.pixels.size() != n)
        throw std::logic_error("teacher state buffers do not match patch size");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("cannot open checkpoint for write: " + path);
    std::ostringstream head;
    head << kTeacherMagic << "\n";
    head << "patch " << state.patch.height << " " << state.patch.width << "\n";
    head << "epoch " << state.next_epoch << "\n";
    head << "step " << state.next_step << "\n";
    head << "adam_t " << state.opt.steps_taken() << "\n";
    head << "best_epoch " << state.best_epoch << "\n";
    head << "data " << (2 + 4 * n) << "\n";
    const std::string h = head.str();
    out.write(h.data(), (long)h.size());
    write_doubles(out, {state.opt.learning_rate(), state.best_mean});
    write_doubles(out, state.patch.pixels);
    write_doubles(out, padded_moments(state.opt.m(), n));
    write_doubles(out, padded_moments(state.opt.v(), n));
    write_doubles(out, state.best.pixels);
    if (!out) throw std::runtime_error("short write to checkpoint: " + path);
}

TeacherState load_teacher_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kTeacherMagic)
        throw std::runtime_error(path +
                                 ": unsupported checkpoint format/version");
    TeacherState st;
    {
        if (!std::getline(in, line) || line.rfind("patch ", 0) != 0)
            throw std::runtime_error(path + ": missing patch line");
        std::istringstream ls(line.substr(6));
        if (!(ls >> st.patch.height >> st.patch.width) ||
            st.patch.height < 1 || st.patch.width < 1)
            throw std::runtime_error(path + ": bad patch dimensions");
    }
    st.next_epoch = (int)expect_long(in, "epoch", path);
    st.next_step = expect_long(in, "step", path);
    const long adam_t = expect_long(in, "adam_t", path);
    st.best_epoch = (int)expect_long(in, "best_epoch", path);
    const std::size_t n =
        (std::size_t)3 * st.patch.height * st.patch.width;
    if ((std::size_t)expect_long(in, "data", path) != 2 + 4 * n)
        throw std::runtime_error(path + ": data header mismatch");
    const auto scalars = read_doubles(in, 2, path);
    st.patch.pixels = read_doubles(in, n, path);
    auto m = read_doubles(in, n, path);
    auto v = read_doubles(in, n, path);
    st.best.height = st.patch.height;
    st.best.width = st.patch.width;
    st.best.pixels = read_doubles(in, n, path);
    st.best_mean = scalars[1];
    st.opt = Adam(scalars[0]);
    st.opt.restore(std::move(m), std::move(v), adam_t);
    return st;
}

void save_student_state(const StudentState& state, const std::string& path) {
    const int m = state.params.colors();
    const std::size_t n = state.params.logits.size();
    if (n != (std::size_t)m * state.params.height * state.params.width ||
        state.best_logits.size() != n)
        throw std::logic_error("student state buffers do not match logit size");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("cannot open checkpoint for write: " + path);
    std::ostringstream head;
    head << kStudentMagic << "\n";
    head << "logits " << m << " " << state.params.height << " "
         << state.params.width << "\n";
    head << "epoch " << state.next_epoch << "\n";
    head << "step " << state.next_step << "\n";
    head << "adam_t " << state.opt.steps_taken() << "\n";
    head << "best_epoch " << state.best_epoch << "\n";
    head << "palette " << m << "\n";
    head << palette_to_text(state.params.palette);
    head << "data " << (3 + 4 * n) << "\n";
    const std::string h = head.str();
    out.write(h.data(), (long)h.size());
    write_doubles(out, {state.opt.learning_rate(), state.best_mean,
                        state.params.omega});
    write_doubles(out, state.params.logits);
    write_doubles(out, padded_moments(state.opt.m(), n));
    write_doubles(out, padded_moments(state.opt.v(), n));
    write_doubles(out, state.best_logits);
    if (!out) throw std::runtime_error("short write to checkpoint: " + path);
}

StudentState load_student_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kStudentMagic)
        throw std::runtime_error(path +
                                 ": unsupported checkpoint format/version");
    StudentState st;
    int m = 0;
    {
        if (!std::getline(in, line) || line.rfind("logits ", 0) != 0)
            throw std::runtime_error(path + ": missing logits line");
        std::istringstream ls(line.substr(7));
        if (!(ls >> m >> st.params.height >> st.params.width) || m < 1 ||
            st.params.height < 1 || st.params.width < 1)
            throw std::runtime_error(path + ": bad logit dimensions");
    }
    st.next_epoch = (int)expect_long(in, "epoch", path);
    st.next_step = expect_long(in, "step", path);
    const long adam_t = expect_long(in, "adam_t", path);
    st.best_epoch = (int)expect_long(in, "best_epoch", path);
    if (expect_long(in, "palette", path) != m)
        throw std::runtime_error(path + ": palette count mismatch");
    std::string palette_text;
    for (int i = 0; i < m; ++i) {
        if (!std::getline(in, line))
            throw std::runtime_error(path + ": truncated palette");
        palette_text += line + "\n";
    }
    st.params.palette = palette_from_text(palette_text);
    const std::size_t n =
        (std::size_t)m * st.params.height * st.params.width;
    if ((std::size_t)expect_long(in, "data", path) != 3 + 4 * n)
        throw std::runtime_error(path + ": data header mismatch");
    const auto scalars = read_doubles(in, 3, path);
    st.params.logits = read_doubles(in, n, path);
    auto mm = read_doubles(in, n, path);
    auto vv = read_doubles(in, n, path);
    st.best_logits = read_doubles(in, n, path);
    st.best_mean = scalars[1];
    st.params.omega = scalars[2];
    st.opt = Adam(scalars[0]);
    st.opt.restore(std::move(mm), std::move(vv), adam_t);
    return st;
}

}  // namespace stealth
