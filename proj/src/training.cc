#include "ctxrnnt/training.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <memory>
#include <random>

#include "ctxrnnt/errors.h"
#include "ctxrnnt/eval.h"

namespace ctxrnnt {
namespace {

using nlohmann::json;

Mode StudentOrSingle(TrainMode m) {
  return m == TrainMode::kNonStreaming ? Mode::kNonStreaming : Mode::kStreaming;
}

const char *DistillName(DistillMode m) {
  return m == DistillMode::kFull ? "full" : "collapsed3";
}

DistillMode ParseDistill(const std::string &s) {
  if (s == "full") return DistillMode::kFull;
  if (s == "collapsed3") return DistillMode::kCollapsed3;
  throw ConfigError("unknown distill mode '" + s + "' (expected full or collapsed3)");
}

void RequireStudentWindow(const ContextWindow &w) {
  if (w.future_used > 0) throw UsageError("student cannot see future utterances");
}

Var SegmentLogits(Graph &g, const ModelConfig &config, Var encodings,
                  const ContextWindow &window, const Segment &segment, Var states,
                  std::size_t *T) {
  EncoderRange r = SegmentEncoderRange(window, segment, config.encoder.downsample_factor);
  if (r.last >= encodings.rows()) {
    throw UsageError("segment extends past the encoded window");
  }
  *T = r.size();
  return JoinGraph(g, config, ad::SliceRows(encodings, r.first, r.last + 1), states);
}

}  // namespace

const char *TrainModeName(TrainMode mode) {
  switch (mode) {
    case TrainMode::kStreaming:
      return "streaming";
    case TrainMode::kNonStreaming:
      return "nonstreaming";
    case TrainMode::kDual:
      return "dual";
  }
  return "?";
}

TrainMode ParseTrainMode(const std::string &name) {
  if (name == "streaming") return TrainMode::kStreaming;
  if (name == "nonstreaming") return TrainMode::kNonStreaming;
  if (name == "dual") return TrainMode::kDual;
  throw ConfigError("unknown training mode '" + name +
                    "' (expected streaming, nonstreaming or dual)");
}

void TrainConfig::Validate() const {
  model.Validate();
  if (past < 0 || future < 0) throw ConfigError("past and future must be non-negative");
  if (mode == TrainMode::kStreaming && future > 0) {
    throw ConfigError("student cannot see future utterances: streaming training "
                      "requires future = 0");
  }
  if (!(beta >= 0.0) || !std::isfinite(beta)) {
    throw ConfigError("beta must be finite and non-negative");
  }
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (warmup_iters < 0) throw ConfigError("warmup_iters must be non-negative");
  if (!(decay_rate > 0.0 && decay_rate <= 1.0)) {
    throw ConfigError("decay_rate must lie in (0, 1]");
  }
  if (phase1_iters < 0 || phase2_iters < 0) {
    throw ConfigError("iteration counts must be non-negative");
  }
  if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
  if (validation_sessions < 1) throw ConfigError("validation_sessions must be at least 1");
  for (std::size_t i = 0; i < bucket_boundaries.size(); ++i) {
    if (bucket_boundaries[i] < 1 ||
        (i > 0 && bucket_boundaries[i] <= bucket_boundaries[i - 1])) {
      throw ConfigError("bucket_boundaries must be positive and ascending");
    }
  }
  if (bucket_batch_frames.size() != bucket_boundaries.size() + 1) {
    throw ConfigError("bucket_batch_frames needs " +
                      std::to_string(bucket_boundaries.size() + 1) + " entries, got " +
                      std::to_string(bucket_batch_frames.size()));
  }
  for (int b : bucket_batch_frames) {
    if (b < 1) throw ConfigError("bucket_batch_frames must be positive");
  }
}

void to_json(json &j, const TrainConfig &c) {
  j = json{{"mode", TrainModeName(c.mode)},
           {"past", c.past},
           {"future", c.future},
           {"beta", c.beta},
           {"distill", DistillName(c.distill)},
           {"peak_lr", c.peak_lr},
           {"warmup_iters", c.warmup_iters},
           {"decay_rate", c.decay_rate},
           {"phase1_iters", c.phase1_iters},
           {"phase2_iters", c.phase2_iters},
           {"phase1_mode", c.phase1_mode ? json(TrainModeName(*c.phase1_mode)) : json()},
           {"bucket_boundaries", c.bucket_boundaries},
           {"bucket_batch_frames", c.bucket_batch_frames},
           {"eval_every", c.eval_every},
           {"validation_sessions", c.validation_sessions},
           {"separator_frames", c.separator_frames},
           {"seed", c.seed},
           {"model", c.model}};
}

void from_json(const json &j, TrainConfig &c) {
  static const char *kKnown[] = {
      "mode",         "past",         "future",       "beta",
      "distill",      "peak_lr",      "warmup_iters", "decay_rate",
      "phase1_iters", "phase2_iters", "phase1_mode",  "bucket_boundaries",
      "bucket_batch_frames", "eval_every", "validation_sessions",
      "separator_frames", "seed", "model"};
  for (const auto &[key, value] : j.items()) {
    if (std::find_if(std::begin(kKnown), std::end(kKnown),
                     [&](const char *k) { return key == k; }) == std::end(kKnown)) {
      throw ConfigError("unknown training config field '" + key + "'");
    }
  }
  TrainConfig d;
  try {
    c.mode = ParseTrainMode(j.value("mode", std::string(TrainModeName(d.mode))));
    c.past = j.value("past", d.past);
    c.future = j.value("future", d.future);
    c.beta = j.value("beta", d.beta);
    c.distill = ParseDistill(j.value("distill", std::string(DistillName(d.distill))));
    c.peak_lr = j.value("peak_lr", d.peak_lr);
    c.warmup_iters = j.value("warmup_iters", d.warmup_iters);
    c.decay_rate = j.value("decay_rate", d.decay_rate);
    c.phase1_iters = j.value("phase1_iters", d.phase1_iters);
    c.phase2_iters = j.value("phase2_iters", d.phase2_iters);
    c.phase1_mode.reset();
    if (j.contains("phase1_mode") && !j.at("phase1_mode").is_null()) {
      c.phase1_mode = ParseTrainMode(j.at("phase1_mode").get<std::string>());
    }
    c.bucket_boundaries = j.value("bucket_boundaries", d.bucket_boundaries);
    c.bucket_batch_frames = j.value("bucket_batch_frames", d.bucket_batch_frames);
    c.eval_every = j.value("eval_every", d.eval_every);
    c.validation_sessions = j.value("validation_sessions", d.validation_sessions);
    c.separator_frames = j.value("separator_frames", d.separator_frames);
    c.seed = j.value("seed", d.seed);
    c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  } catch (const json::exception &e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
}

std::uint64_t SubSeed(std::uint64_t seed, const std::string &stream) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : stream) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Var RnntLossNode(Var logits, std::size_t T, const std::vector<int> &labels) {
  auto lattice = std::make_shared<LatticeTensor>(LatticeTensor::FromLogits(
      T, logits.cols(), logits.value().data(), labels));
  RnntLossResult r = RnntLoss(*lattice);
  auto tables = std::make_shared<AlphaBetaTables>(std::move(r.tables));
  const std::size_t li = logits.id;
  return logits.graph->AddNode(
      "rnnt_loss", Tensor::Scalar(r.loss), {li},
      [li, lattice, tables](Graph &g, std::size_t self) {
        if (!g.needs_grad(li)) return;
        const double up = g.grad(self)[0];
        std::vector<double> d = RnntGrad(*lattice, *tables);
        Tensor &gx = g.grad(li);
        for (std::size_t i = 0; i < d.size(); ++i) gx[i] += up * d[i];
      });
}

Var DistillNode(const Tensor &teacher_logits, Var student_logits, std::size_t T,
                const std::vector<int> &labels, DistillMode mode) {
  const std::size_t V = student_logits.cols();
  auto teacher = std::make_shared<LatticeTensor>(
      LatticeTensor::FromLogits(T, teacher_logits.cols(), teacher_logits.data(), labels));
  auto student = std::make_shared<LatticeTensor>(
      LatticeTensor::FromLogits(T, V, student_logits.value().data(), labels));
  const double value = LatticeDistillation(*teacher, *student, mode);
  const std::size_t si = student_logits.id;
  return student_logits.graph->AddNode(
      "distill", Tensor::Scalar(value), {si},
      [si, teacher, student, mode](Graph &g, std::size_t self) {
        if (!g.needs_grad(si)) return;
        const double up = g.grad(self)[0];
        std::vector<double> d = LatticeDistillationGrad(*teacher, *student, mode);
        Tensor &gx = g.grad(si);
        for (std::size_t i = 0; i < d.size(); ++i) gx[i] += up * d[i];
      });
}

Var SingleModeLossGraph(Graph &g, const ModelConfig &config, const ContextWindow &window,
                        std::span<const Segment> segments, Mode mode) {
  if (mode == Mode::kStreaming) RequireStudentWindow(window);
  if (segments.empty()) throw UsageError("no segments to score");
  Var enc = EncodeGraph(g, config, window.features, mode);
  std::vector<Var> losses;
  for (const Segment &seg : segments) {
    Var states = PredictGraph(g, config, seg.labels);
    std::size_t T = 0;
    Var logits = SegmentLogits(g, config, enc, window, seg, states, &T);
    losses.push_back(RnntLossNode(logits, T, seg.labels));
  }
  return losses.size() == 1 ? losses[0] : ad::Sum(ad::ConcatRows(losses));
}

double SingleModeLoss(const ModelConfig &config, const ContextWindow &window,
                      std::span<const Segment> segments, const ParameterStore &params,
                      Mode mode) {
  Graph g(&params);
  return SingleModeLossGraph(g, config, window, segments, mode).value()[0];
}

DualModeGraph DualModeLossGraph(Graph &g, const ModelConfig &config,
                                const ContextWindow &teacher,
                                const ContextWindow &student,
                                std::span<const Segment> segments, double beta,
                                DistillMode distill) {
  RequireStudentWindow(student);
  if (student.current_offset != teacher.current_offset ||
      student.current_length != teacher.current_length ||
      student.num_frames() != student.current_offset + student.current_length ||
      student.num_frames() > teacher.num_frames() ||
      student.features.cols() != teacher.features.cols()) {
    throw UsageError("student window is not the teacher window cut after the "
                     "current utterance");
  }
  for (std::size_t r = 0; r < student.num_frames(); ++r) {
    auto a = student.features.row(r), b = teacher.features.row(r);
    if (!std::equal(a.begin(), a.end(), b.begin())) {
      throw UsageError("student and teacher windows differ at frame " +
                       std::to_string(r));
    }
  }
  if (segments.empty()) throw UsageError("no segments to score");
  if (!(beta >= 0.0)) throw UsageError("beta must be non-negative");

  DualModeGraph out;
  out.breakdown.beta = beta;
  out.breakdown.M = segments.size();
  Var enc_t = EncodeGraph(g, config, teacher.features, Mode::kNonStreaming);
  Var enc_s = EncodeGraph(g, config, student.features, Mode::kStreaming);
  std::vector<Var> teacher_losses, student_losses, distill_losses;
  for (const Segment &seg : segments) {
    Var states = PredictGraph(g, config, seg.labels);
    std::size_t T = 0;
    Var lt = SegmentLogits(g, config, enc_t, teacher, seg, states, &T);
    Var ls = SegmentLogits(g, config, enc_s, student, seg, states, &T);
    Var t_loss = RnntLossNode(lt, T, seg.labels);
    Var s_loss = RnntLossNode(ls, T, seg.labels);
    Var d_loss = DistillNode(lt.value(), ls, T, seg.labels, distill);
    teacher_losses.push_back(t_loss);
    student_losses.push_back(s_loss);
    distill_losses.push_back(d_loss);
    SegmentLosses sl{t_loss.value()[0], s_loss.value()[0], d_loss.value()[0]};
    out.breakdown.segments.push_back(sl);
  }
  auto total_of = [](const std::vector<Var> &v) {
    return v.size() == 1 ? v[0] : ad::Sum(ad::ConcatRows(v));
  };
  Var t_sum = total_of(teacher_losses);
  Var s_sum = total_of(student_losses);
  Var d_sum = total_of(distill_losses);
  out.total = ad::Add(ad::Add(t_sum, s_sum), ad::Scale(d_sum, beta));
  out.breakdown.teacher = t_sum.value()[0];
  out.breakdown.student = s_sum.value()[0];
  out.breakdown.distill = d_sum.value()[0];
  out.breakdown.total = out.total.value()[0];
  return out;
}

DualModeLossBreakdown DualModeLoss(const ModelConfig &config, const ContextWindow &teacher,
                                   const ContextWindow &student,
                                   std::span<const Segment> segments,
                                   const ParameterStore &params, double beta,
                                   DistillMode distill) {
  Graph g(&params);
  return DualModeLossGraph(g, config, teacher, student, segments, beta, distill).breakdown;
}

GradCheckReport CheckDualModeGradients(const ModelConfig &config,
                                       const ContextWindow &teacher,
                                       const ContextWindow &student,
                                       std::span<const Segment> segments,
                                       ParameterStore &params, double beta,
                                       DistillMode distill) {
  const int d = config.encoder.downsample_factor;
  std::vector<Tensor> frozen;
  {
    Graph g(&params);
    Var enc = EncodeGraph(g, config, teacher.features, Mode::kNonStreaming);
    for (const Segment &seg : segments) {
      EncoderRange r = SegmentEncoderRange(teacher, seg, d);
      frozen.push_back(JoinGraph(g, config, ad::SliceRows(enc, r.first, r.last + 1),
                                 PredictGraph(g, config, seg.labels))
                           .value());
    }
  }
  GradCheckOptions o;
  o.numeric_build = [&](Graph &g) {
    Var total = DualModeLossGraph(g, config, teacher, student, segments, 0.0, distill).total;
    Var enc = EncodeGraph(g, config, student.features, Mode::kStreaming);
    for (std::size_t i = 0; i < segments.size(); ++i) {
      EncoderRange r = SegmentEncoderRange(student, segments[i], d);
      Var logits = JoinGraph(g, config, ad::SliceRows(enc, r.first, r.last + 1),
                             PredictGraph(g, config, segments[i].labels));
      Var kl = DistillNode(frozen[i], logits, r.size(), segments[i].labels, distill);
      total = ad::Add(total, ad::Scale(kl, beta));
    }
    return total;
  };
  return CheckGradients(
      [&](Graph &g) {
        return DualModeLossGraph(g, config, teacher, student, segments, beta, distill).total;
      },
      params, o);
}

double LearningRate(std::int64_t iteration, double peak_lr, int warmup_iters,
                    double decay_rate) {
  if (iteration < 0) throw UsageError("iteration must be non-negative");
  if (iteration <= warmup_iters) {
    // The fraction is exactly 1 at the knee, so both pieces give peak_lr.
    return warmup_iters == 0
               ? peak_lr
               : peak_lr * (static_cast<double>(iteration) / warmup_iters);
  }
  return peak_lr * std::pow(decay_rate, static_cast<double>(iteration - warmup_iters));
}

double LearningRate(std::int64_t iteration, const TrainConfig &config) {
  return LearningRate(iteration, config.peak_lr, config.warmup_iters, config.decay_rate);
}

void AdamStep(ParameterStore &params, const std::map<std::string, Tensor> &grads,
              double lr, AdamState &state) {
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (const auto &[name, grad] : grads) {
    std::span<double> p = params.MutableData(name);
    if (grad.size() != p.size()) {
      throw UsageError("gradient of " + name + " has the wrong size");
    }
    auto &m = state.m[name];
    auto &v = state.v[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
  params.BumpVersion();
}

std::vector<Batch> BucketBatches(std::span<const std::size_t> frames,
                                 std::span<const int> boundaries,
                                 std::span<const int> budgets, std::uint64_t seed) {
  if (budgets.size() != boundaries.size() + 1) {
    throw UsageError("need one budget per bucket (" +
                     std::to_string(boundaries.size() + 1) + ")");
  }
  for (int b : budgets) {
    if (b < 1) throw UsageError("bucket budgets must be positive");
  }
  for (std::size_t i = 1; i < boundaries.size(); ++i) {
    if (boundaries[i] <= boundaries[i - 1]) {
      throw UsageError("bucket boundaries must be ascending");
    }
  }
  std::vector<std::vector<std::size_t>> buckets(budgets.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::size_t b = 0;
    while (b < boundaries.size() && frames[i] > static_cast<std::size_t>(boundaries[b])) ++b;
    buckets[b].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<Batch> out;
  std::size_t oversize = 0;
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    std::shuffle(buckets[b].begin(), buckets[b].end(), rng);
    const std::size_t budget = budgets[b];
    Batch current{b, {}, 0, false};
    for (std::size_t item : buckets[b]) {
      if (frames[item] > budget) {
        out.push_back(Batch{b, {item}, frames[item], true});
        ++oversize;
        continue;
      }
      if (current.frames + frames[item] > budget) {
        out.push_back(std::move(current));
        current = Batch{b, {}, 0, false};
      }
      current.items.push_back(item);
      current.frames += frames[item];
    }
    if (!current.items.empty()) out.push_back(std::move(current));
  }
  if (oversize > 0) {
    std::cerr << "warning: " << oversize
              << " window(s) exceed their bucket frame budget; each forms a batch "
                 "of one\n";
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

json ToJson(const LogEntry &e) {
  auto opt = [](const std::optional<double> &v) { return v ? json(*v) : json(); };
  return json{{"iter", e.iter},
              {"phase", e.phase},
              {"loss_teacher", opt(e.loss_teacher)},
              {"loss_student", opt(e.loss_student)},
              {"loss_distill", opt(e.loss_distill)},
              {"lr", e.lr},
              {"val_wer", e.val_wer}};
}

namespace {

struct Example {
  const Utterance *utterance;
  ContextWindow teacher;  // non-streaming window (unused in streaming mode)
  ContextWindow student;  // streaming window (unused in non-streaming mode)
  std::size_t frames;
};

std::vector<Example> BuildExamples(std::span<const Session> sessions, TrainMode mode,
                                   int past, int future, std::size_t sep) {
  std::vector<Example> out;
  for (const Session &s : sessions) {
    for (std::size_t i = 0; i < s.utterances.size(); ++i) {
      if (s.utterances[i].segments.empty()) continue;
      Example e{&s.utterances[i], {}, {}, 0};
      if (mode != TrainMode::kStreaming) {
        e.teacher = BuildContextWindow(s.utterances, i, past, future, sep);
        e.frames = e.teacher.num_frames();
      }
      if (mode != TrainMode::kNonStreaming) {
        e.student = StudentWindow(s.utterances, i, past, sep);
        e.frames = std::max(e.frames, e.student.num_frames());
      }
      out.push_back(std::move(e));
    }
  }
  return out;
}

struct ExampleLoss {
  double teacher = 0.0, student = 0.0, distill = 0.0, total = 0.0;
  std::size_t segments = 0;
};

// Builds the objective of one example on `g`.
Var ExampleObjective(Graph &g, const TrainConfig &c, TrainMode mode, const Example &e,
                     ExampleLoss *loss) {
  const auto &segs = e.utterance->segments;
  loss->segments = segs.size();
  if (mode == TrainMode::kDual) {
    DualModeGraph d =
        DualModeLossGraph(g, c.model, e.teacher, e.student, segs, c.beta, c.distill);
    loss->teacher = d.breakdown.teacher;
    loss->student = d.breakdown.student;
    loss->distill = d.breakdown.distill;
    loss->total = d.breakdown.total;
    return d.total;
  }
  if (mode == TrainMode::kStreaming) {
    Var v = SingleModeLossGraph(g, c.model, e.student, segs, Mode::kStreaming);
    loss->student = loss->total = v.value()[0];
    return v;
  }
  Var v = SingleModeLossGraph(g, c.model, e.teacher, segs, Mode::kNonStreaming);
  loss->teacher = loss->total = v.value()[0];
  return v;
}

double Validate(const TrainConfig &c, TrainMode mode, int past, int future,
                const ParameterStore &params, std::span<const Session> val) {
  EvalOptions o;
  o.mode = StudentOrSingle(mode);
  o.past = past;
  o.future = o.mode == Mode::kStreaming ? 0 : future;
  o.separator_frames = c.separator_frames;
  return Evaluate(c.model, params, val, o).wer;
}

double MeanObjective(const TrainConfig &c, TrainMode mode,
                     const std::vector<Example> &examples, const ParameterStore &params) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Example &e : examples) {
    Graph g(&params);
    ExampleLoss l;
    ExampleObjective(g, c, mode, e, &l);
    sum += l.total;
    n += l.segments;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

struct PhaseSpec {
  int phase;
  TrainMode mode;
  int past, future;
  int iters;
  std::filesystem::path checkpoint_dir;
};

struct PhaseOutcome {
  ParameterStore best;
  double best_wer;
  double start_objective;
};

class Trainer {
 public:
  Trainer(const TrainConfig &c, std::span<const Session> train,
          std::span<const Session> val, std::ofstream &log, TrainResult &result)
      : c_(c), train_(train), val_(val), log_(log), result_(result) {}

  PhaseOutcome Run(const PhaseSpec &spec, ParameterStore &params, std::int64_t &iteration) {
    std::vector<Example> examples =
        BuildExamples(train_, spec.mode, spec.past, spec.future, c_.separator_frames);
    if (examples.empty()) throw ConfigError("training data has no labeled segments");
    std::vector<std::size_t> frames;
    for (const Example &e : examples) frames.push_back(e.frames);

    PhaseOutcome out{params, 0.0, 0.0};
    std::vector<Example> val_examples =
        BuildExamples(val_, spec.mode, spec.past, spec.future, c_.separator_frames);
    out.start_objective = MeanObjective(c_, spec.mode, val_examples, params);
    out.best_wer = Validate(c_, spec.mode, spec.past, spec.future, params, val_);
    SaveCheckpoint(params, c_.model, iteration, spec.checkpoint_dir);
    Log(LogEntry{iteration, spec.phase, {}, {}, {}, LearningRate(iteration, c_), out.best_wer});

    AdamState adam;
    std::vector<Batch> batches;
    std::size_t next_batch = 0;
    int epoch = 0;
    ExampleLoss interval;
    for (int it = 1; it <= spec.iters; ++it) {
      if (next_batch == batches.size()) {
        batches = BucketBatches(frames, c_.bucket_boundaries, c_.bucket_batch_frames,
                                SubSeed(c_.seed, "shuffle/" + std::to_string(spec.phase) +
                                                     "/" + std::to_string(epoch++)));
        next_batch = 0;
      }
      const std::size_t batch_id = next_batch++;
      const Batch &batch = batches[batch_id];
      ++iteration;
      std::map<std::string, Tensor> grads;
      std::size_t batch_segments = 0;
      for (std::size_t item : batch.items) batch_segments += examples[item].utterance->segments.size();
      try {
        for (std::size_t item : batch.items) {
          Graph g(&params);
          ExampleLoss l;
          Var root = ExampleObjective(g, c_, spec.mode, examples[item], &l);
          // Mean per-segment objective over the batch.
          Var scaled = ad::Scale(root, 1.0 / static_cast<double>(batch_segments));
          for (auto &[name, grad] : g.Backward(scaled)) {
            auto [pos, inserted] = grads.try_emplace(name, grad);
            if (!inserted) {
              for (std::size_t i = 0; i < grad.size(); ++i) pos->second[i] += grad[i];
            }
          }
          interval.teacher += l.teacher;
          interval.student += l.student;
          interval.distill += l.distill;
          interval.segments += l.segments;
        }
      } catch (const NumericError &e) {
        throw NumericError("non-finite loss at iteration " + std::to_string(iteration) +
                           ", batch " + std::to_string(batch_id) + " (phase " +
                           std::to_string(spec.phase) + "): " + e.what());
      }
      const double lr = LearningRate(iteration, c_);
      AdamStep(params, grads, lr, adam);

      if (it % c_.eval_every == 0 || it == spec.iters) {
        const double wer = Validate(c_, spec.mode, spec.past, spec.future, params, val_);
        LogEntry e{iteration, spec.phase, {}, {}, {}, lr, wer};
        const double n = static_cast<double>(interval.segments);
        if (spec.mode != TrainMode::kStreaming) e.loss_teacher = interval.teacher / n;
        if (spec.mode != TrainMode::kNonStreaming) e.loss_student = interval.student / n;
        if (spec.mode == TrainMode::kDual) e.loss_distill = interval.distill / n;
        Log(e);
        interval = ExampleLoss{};
        if (wer < out.best_wer) {
          out.best_wer = wer;
          out.best = params;
          SaveCheckpoint(params, c_.model, iteration, spec.checkpoint_dir);
        }
      }
    }
    return out;
  }

 private:
  void Log(const LogEntry &e) {
    log_ << ToJson(e).dump() << '\n';
    log_.flush();
    result_.entries.push_back(e);
  }

  const TrainConfig &c_;
  std::span<const Session> train_, val_;
  std::ofstream &log_;
  TrainResult &result_;
};

}  // namespace

TrainResult Train(const TrainConfig &config, std::span<const Session> sessions,
                  const std::filesystem::path &out_dir,
                  const std::optional<std::filesystem::path> &warm_start) {
  config.Validate();
  if (sessions.size() <= static_cast<std::size_t>(config.validation_sessions)) {
    throw ConfigError("dataset has " + std::to_string(sessions.size()) +
                      " sessions; need more than validation_sessions = " +
                      std::to_string(config.validation_sessions));
  }
  const std::size_t n_train = sessions.size() - config.validation_sessions;
  auto train = sessions.subspan(0, n_train);
  auto val = sessions.subspan(n_train);

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.log = out_dir / "train_log.jsonl";
  std::ofstream log(result.log, std::ios::binary | std::ios::trunc);
  if (!log) throw UsageError("cannot write " + result.log.string());

  ParameterStore params;
  std::int64_t iteration = 0;
  bool run_phase1 = config.phase1_iters > 0;
  if (warm_start) {
    LoadedCheckpoint ckpt = LoadCheckpoint(*warm_start);
    if (json(ckpt.config) != json(config.model)) {
      throw ConfigError("warm-start checkpoint model config differs from the "
                        "training config");
    }
    params = std::move(ckpt.params);
    iteration = ckpt.step;
    run_phase1 = false;
  } else {
    params = InitParameters(config.model, SubSeed(config.seed, "init"));
  }

  Trainer trainer(config, train, val, log, result);
  if (run_phase1) {
    PhaseOutcome p1 = trainer.Run(
        PhaseSpec{1, config.pretrain_mode(), 0, 0, config.phase1_iters, out_dir / "pretrain"},
        params, iteration);
    params = std::move(p1.best);
  }
  PhaseOutcome p2 = trainer.Run(PhaseSpec{2, config.mode, config.past, config.future,
                                          config.phase2_iters, out_dir / "checkpoint"},
                                params, iteration);
  result.checkpoint = out_dir / "checkpoint";
  result.best_val_wer = p2.best_wer;
  result.final_iteration = iteration;
  result.phase2_start_objective = p2.start_objective;
  return result;
}

double ObjectiveLoss(const TrainConfig &config, const ParameterStore &params,
                     std::span<const Session> sessions) {
  std::vector<Example> examples = BuildExamples(sessions, config.mode, config.past,
                                                config.future, config.separator_frames);
  return MeanObjective(config, config.mode, examples, params);
}

}  // namespace ctxrnnt
