// ctxrnnt/training.h
//
// Per-segment transducer losses in one or both encoder modes, the combined
// dual-mode objective, Adam, the learning-rate schedule, bucketed batching and
// the two-phase training driver.

#ifndef CTXRNNT_TRAINING_H_
#define CTXRNNT_TRAINING_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxrnnt/autodiff.h"
#include "ctxrnnt/context.h"
#include "ctxrnnt/corpus.h"
#include "ctxrnnt/gradcheck.h"
#include "ctxrnnt/lattice.h"
#include "ctxrnnt/network.h"
#include "json.hpp"

namespace ctxrnnt {

enum class TrainMode { kStreaming, kNonStreaming, kDual };

const char *TrainModeName(TrainMode mode);
TrainMode ParseTrainMode(const std::string &name);

inline constexpr double kDefaultBeta = 5e-4;
inline constexpr double kBetaSweep[] = {5e-3, 1e-3, 5e-4, 1e-4};

struct TrainConfig {
  TrainMode mode = TrainMode::kStreaming;
  int past = 0;
  int future = 0;
  double beta = kDefaultBeta;
  DistillMode distill = DistillMode::kCollapsed3;
  double peak_lr = 2e-3;
  int warmup_iters = 100;
  double decay_rate = 0.99998;
  int phase1_iters = 1000;
  int phase2_iters = 1000;
  // Mode of the context-free pretraining phase; defaults to `mode`.
  std::optional<TrainMode> phase1_mode;
  std::vector<int> bucket_boundaries{80, 160, 240};
  std::vector<int> bucket_batch_frames{640, 640, 480, 480};
  int eval_every = 100;
  int validation_sessions = 10;  // held out from the end of the dataset
  std::size_t separator_frames = 0;
  std::uint64_t seed = 1;
  ModelConfig model;

  TrainMode pretrain_mode() const { return phase1_mode.value_or(mode); }
  // Throws ConfigError.
  void Validate() const;
};

void to_json(nlohmann::json &j, const TrainConfig &c);
void from_json(const nlohmann::json &j, TrainConfig &c);

// Independent seed for a named use of a base seed ("data", "init", ...).
std::uint64_t SubSeed(std::uint64_t seed, const std::string &stream);

// Graph node: transducer loss of a (T * U1) x V logit matrix.
Var RnntLossNode(Var logits, std::size_t T, const std::vector<int> &labels);
// Graph node: distillation from constant teacher logits to student logits.
Var DistillNode(const Tensor &teacher_logits, Var student_logits, std::size_t T,
                const std::vector<int> &labels, DistillMode mode);

// Sum of per-segment transducer losses in one mode, built on `g`.
Var SingleModeLossGraph(Graph &g, const ModelConfig &config, const ContextWindow &window,
                        std::span<const Segment> segments, Mode mode);
double SingleModeLoss(const ModelConfig &config, const ContextWindow &window,
                      std::span<const Segment> segments, const ParameterStore &params,
                      Mode mode);

struct SegmentLosses {
  double teacher = 0.0;
  double student = 0.0;
  double distill = 0.0;
};

struct DualModeLossBreakdown {
  std::vector<SegmentLosses> segments;
  double teacher = 0.0;
  double student = 0.0;
  double distill = 0.0;
  double beta = 0.0;
  double total = 0.0;
  std::size_t M = 0;
};

struct DualModeGraph {
  Var total;
  DualModeLossBreakdown breakdown;
};

// Teacher: non-streaming encoder over `teacher`. Student: streaming encoder
// over `student`, which must be `teacher` cut after the current utterance.
DualModeGraph DualModeLossGraph(Graph &g, const ModelConfig &config,
                                const ContextWindow &teacher,
                                const ContextWindow &student,
                                std::span<const Segment> segments, double beta,
                                DistillMode distill = DistillMode::kCollapsed3);
DualModeLossBreakdown DualModeLoss(const ModelConfig &config, const ContextWindow &teacher,
                                   const ContextWindow &student,
                                   std::span<const Segment> segments,
                                   const ParameterStore &params, double beta,
                                   DistillMode distill = DistillMode::kCollapsed3);

// Finite-difference check of DualModeLossGraph. The numeric side holds the
// teacher logits fixed at the current parameters, matching the objective's
// treatment of the teacher inside the distillation term.
GradCheckReport CheckDualModeGradients(const ModelConfig &config,
                                       const ContextWindow &teacher,
                                       const ContextWindow &student,
                                       std::span<const Segment> segments,
                                       ParameterStore &params, double beta,
                                       DistillMode distill = DistillMode::kCollapsed3);

// Learning rate for `iteration` (the number of updates made so far plus one
// during training; 0 before any).
double LearningRate(std::int64_t iteration, double peak_lr, int warmup_iters,
                    double decay_rate);
double LearningRate(std::int64_t iteration, const TrainConfig &config);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// One Adam update of every parameter named in `grads`, in place.
void AdamStep(ParameterStore &params, const std::map<std::string, Tensor> &grads,
              double lr, AdamState &state);

struct Batch {
  std::size_t bucket = 0;
  std::vector<std::size_t> items;
  std::size_t frames = 0;
  bool oversize = false;  // single item above its bucket budget
};

// Items are window frame counts. See TrainConfig for the bucket layout.
std::vector<Batch> BucketBatches(std::span<const std::size_t> frames,
                                 std::span<const int> boundaries,
                                 std::span<const int> budgets, std::uint64_t seed);

struct LogEntry {
  std::int64_t iter = 0;
  int phase = 0;
  std::optional<double> loss_teacher, loss_student, loss_distill;  // per segment
  double lr = 0.0;
  double val_wer = 0.0;
};

nlohmann::json ToJson(const LogEntry &e);

struct TrainResult {
  std::filesystem::path checkpoint;  // best checkpoint of the final phase
  std::filesystem::path log;
  std::vector<LogEntry> entries;
  double best_val_wer = 0.0;
  std::int64_t final_iteration = 0;
  // Mean per-segment objective on the validation sessions before any
  // phase-2 update.
  double phase2_start_objective = 0.0;
};

// Phase 1 (skipped with a warm start) trains without context and keeps its
// best checkpoint in out_dir/pretrain; phase 2 continues from it with the
// configured context and writes out_dir/checkpoint. The log is
// out_dir/train_log.jsonl.
TrainResult Train(const TrainConfig &config, std::span<const Session> sessions,
                  const std::filesystem::path &out_dir,
                  const std::optional<std::filesystem::path> &warm_start = std::nullopt);

// Mean per-segment loss of the phase-2 objective over `sessions`, without
// updating anything.
double ObjectiveLoss(const TrainConfig &config, const ParameterStore &params,
                     std::span<const Session> sessions);

}  // namespace ctxrnnt

#endif  // CTXRNNT_TRAINING_H_
