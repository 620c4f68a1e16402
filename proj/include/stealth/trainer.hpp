#pragma once

#include <limits>
#include <string>
#include <vector>

#include "stealth/colorspace.hpp"
#include "stealth/detector.hpp"
#include "stealth/optim.hpp"
#include "stealth/params.hpp"
#include "stealth/patchgen.hpp"
#include "stealth/scene.hpp"

namespace stealth {

// One optimizer step; loss values are means over the step's batch.
struct StepRow {
    long step = 0;
    double l_adv = 0;
    double l_distill = 0;
    double l_total = 0;
    double mean_obj = 0;  // matched-anchor objectness on the patched images
};

struct TrainTrace {
    std::vector<StepRow> rows;
    std::vector<double> epoch_mean_ladv;  // scene-weighted, one per epoch
};

// "step,l_adv,l_distill,l_total,mean_obj" header plus one row per step;
// doubles are printed round-trip exact.
std::string trace_to_csv(const TrainTrace& trace);

// Unconstrained patch: pixel values in [0,1], planar [3, H, W].
struct TeacherPatch {
    std::vector<double> pixels;
    int height = 0;
    int width = 0;
};

// Training state between whole epochs. All randomness is derived from
// (config seed, stream tag, epoch, batch), so a state saved at an epoch
// boundary resumes bit-exactly.
struct TeacherState {
    TeacherPatch patch;
    Adam opt;
    int next_epoch = 0;
    long next_step = 0;
    TeacherPatch best;  // patch at the end of the best epoch so far
    double best_mean = std::numeric_limits<double>::infinity();
    int best_epoch = -1;  // -1 until an epoch completes
    TrainTrace trace;     // in-memory log; not part of checkpoints
};

// Patch per cfg.teacher_init ("uniform" pixels or 0.5 "gray") and a fresh
// optimizer at cfg.learning_rate (zero is allowed, negative is not).
TeacherState init_teacher_state(const RunConfig& cfg);

// Advances whole epochs until cfg.epochs (at most max_epochs of them when
// max_epochs >= 0). Each step minimizes the attack objective on one shuffled
// mini-batch, then clamps the patch to [0,1]. Every scene must carry at
// least one class-0 box. Aborts on non-finite loss.
void run_teacher_epochs(TeacherState& state, const RunConfig& cfg,
                        const std::vector<Scene>& dataset,
                        const DetectorWeights& weights, int max_epochs = -1);

// init + all epochs; returns the best-epoch snapshot.
TeacherPatch train_teacher(const RunConfig& cfg,
                           const std::vector<Scene>& dataset,
                           const DetectorWeights& weights,
                           TrainTrace* trace = nullptr);

// Text manifest followed by raw little-endian doubles; versioned.
void save_teacher_state(const TeacherState& state, const std::string& path);
TeacherState load_teacher_state(const std::string& path);

struct StudentState {
    PatchParams params;
    Adam opt;
    int next_epoch = 0;
    long next_step = 0;
    std::vector<double> best_logits;
    double best_mean = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    TrainTrace trace;
};

// Near-uniform color logits over the palette; warns to stderr when the
// palette has a single color (rendering is then constant) but proceeds.
StudentState init_student_state(const RunConfig& cfg, const Palette& palette);

// Student steps optimize color logits through a soft palette render. Gumbel
// noise is drawn once per step and shared across the batch; each scene's
// augmentation draws are shared between the student composite and, when
// distilling, the teacher composite, whose forward carries no gradient.
// With distill the objective is l_adv + beta * l_distill; without it the
// distillation term is skipped entirely. A beta of zero with distill on
// follows the exact no-distill trajectory while still logging l_distill.
void run_student_epochs(StudentState& state, const RunConfig& cfg,
                        const std::vector<Scene>& dataset,
                        const DetectorWeights& weights,
                        const TeacherPatch& teacher, bool distill,
                        int max_epochs = -1);

// init + all epochs; returns the params with the best-epoch logits.
PatchParams train_student(const RunConfig& cfg,
                          const std::vector<Scene>& dataset,
                          const DetectorWeights& weights,
                          const Palette& palette, const TeacherPatch& teacher,
                          bool distill, TrainTrace* trace = nullptr);

void save_student_state(const StudentState& state, const std::string& path);
StudentState load_student_state(const std::string& path);

}  // namespace stealth
