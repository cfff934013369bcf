// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Criteria 7 and 8 train small models on the preset synthetic
// data in configs/ and take several minutes on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ctxrnnt/autodiff.h"
#include "ctxrnnt/context.h"
#include "ctxrnnt/errors.h"
#include "ctxrnnt/eval.h"
#include "ctxrnnt/gradcheck.h"
#include "ctxrnnt/lattice.h"
#include "ctxrnnt/network.h"
#include "ctxrnnt/synthdata.h"
#include "ctxrnnt/training.h"

namespace ctxrnnt {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Tolerances and sizes.
constexpr int kOracleLattices = 1000;
constexpr double kOracleTol = 1e-9;
constexpr double kOracleSeconds = 30.0;
constexpr double kAnalyticTol = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr double kVocabSumTol = 1e-10;
constexpr std::size_t kMaxGradCheckParams = 5000;
constexpr int kSharingSteps = 100;
constexpr double kLinearityTol = 1e-12;
constexpr int kExperimentSeeds = 3;
constexpr double kSweepBetas[] = {5e-3, 1e-3, 5e-4, 1e-4};

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void Report(int n, const std::string &title, const Outcome &o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << title
            << "): " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

std::string Fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

void Progress(const std::string &msg) { std::cerr << "[acceptance] " << msg << std::endl; }

std::vector<double> RandomLogits(std::size_t n, std::mt19937_64 &rng) {
  std::normal_distribution<double> z(0.0, 2.0);
  std::vector<double> v(n);
  for (double &x : v) x = z(rng);
  return v;
}

std::vector<int> RandomLabels(std::size_t U, std::size_t V, std::mt19937_64 &rng) {
  std::uniform_int_distribution<int> pick(1, static_cast<int>(V) - 1);
  std::vector<int> y(U);
  for (int &k : y) k = pick(rng);
  return y;
}

LatticeTensor Uniform(std::size_t T, std::size_t U, std::size_t V) {
  std::vector<double> lp(T * (U + 1) * V, -std::log(static_cast<double>(V)));
  return LatticeTensor::FromLogProbs(T, V, lp, std::vector<int>(U, 1));
}

// 1. Forward-backward against exhaustive path enumeration.
Outcome LatticeOracle() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < kOracleLattices; ++i) {
    const std::size_t T = 1 + rng() % 6, U = rng() % 5, V = 2 + rng() % 4;
    auto l = LatticeTensor::FromLogits(T, V, RandomLogits(T * (U + 1) * V, rng),
                                       RandomLabels(U, V, rng));
    worst = std::max(worst, std::abs(RnntLoss(l).loss - RnntLossBruteForce(l)));
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= kOracleTol && secs < kOracleSeconds,
          "max |dp - bruteforce| " + Fmt(worst) + " over " + std::to_string(kOracleLattices) +
              " lattices in " + Fmt(secs) + " s"};
}

// 2. Closed forms.
Outcome AnalyticSpots() {
  const double a = RnntLoss(Uniform(1, 1, 3)).loss;
  const double b = RnntLoss(Uniform(2, 1, 3)).loss;
  const double ea = std::abs(a - 2.0 * std::log(3.0));
  const double eb = std::abs(b - std::log(27.0 / 2.0));
  // U = 0: the only path is all blanks.
  std::mt19937_64 rng(5);
  bool exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng() % 8, V = 2 + rng() % 4;
    auto l = LatticeTensor::FromLogits(T, V, RandomLogits(T * V, rng), {});
    double closed = 0.0;
    for (std::size_t t = 0; t < T; ++t) closed -= l.lp(t, 0, kBlank);
    exact = exact && RnntLoss(l).loss == closed;
  }
  return {ea <= kAnalyticTol && eb <= kAnalyticTol && exact,
          "|T1U1 - 2 ln 3| " + Fmt(ea) + ", |T2U1 - ln 13.5| " + Fmt(eb) +
              ", U=0 closed form " + (exact ? "exact" : "NOT exact")};
}

ModelConfig TinyModel() {
  ModelConfig c;
  c.feature_dim = 3;
  c.vocab_size = 4;
  c.encoder.num_blocks = 1;
  c.encoder.model_dim = 4;
  c.encoder.num_heads = 2;
  c.encoder.feedforward_dim = 6;
  c.embed_dim = 3;
  c.pred_dim = 4;
  c.joint_dim = 5;
  return c;
}

std::vector<Utterance> RandomUtterances(const std::vector<std::size_t> &lengths,
                                        std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Utterance> s;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Utterance u;
    u.session_id = "a";
    u.index = static_cast<int>(i);
    u.features = Tensor::Matrix(lengths[i], dim);
    for (std::size_t k = 0; k < u.features.size(); ++k) u.features[k] = z(rng);
    s.push_back(std::move(u));
  }
  return s;
}

// 3. Analytic gradients against central differences.
Outcome GradientFidelity() {
  std::mt19937_64 rng(99);
  double lattice_err = 0.0, vocab_sum = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng() % 5, U = rng() % 4, V = 2 + rng() % 4;
    std::vector<double> z = RandomLogits(T * (U + 1) * V, rng);
    std::vector<int> y = RandomLabels(U, V, rng);
    std::vector<double> g = RnntGrad(LatticeTensor::FromLogits(T, V, z, y));
    for (std::size_t node = 0; node < T * (U + 1); ++node) {
      double s = 0.0;
      for (std::size_t k = 0; k < V; ++k) s += g[node * V + k];
      vocab_sum = std::max(vocab_sum, std::abs(s));
    }
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double orig = z[i];
      z[i] = orig + kFiniteDifferenceStep;
      const double up = RnntLoss(LatticeTensor::FromLogits(T, V, z, y)).loss;
      z[i] = orig - kFiniteDifferenceStep;
      const double down = RnntLoss(LatticeTensor::FromLogits(T, V, z, y)).loss;
      z[i] = orig;
      lattice_err = std::max(lattice_err,
                             RelativeError(g[i], (up - down) / (2 * kFiniteDifferenceStep)));
    }
  }
  double model_err = 0.0;
  std::size_t params = 0, kinks = 0, checked = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ModelConfig c = TinyModel();
    ParameterStore p = InitParameters(c, seed);
    params = p.NumParameters();
    auto s = RandomUtterances({5, 9, 6}, c.feature_dim, seed + 100);
    std::vector<Segment> segs{{0, 3, {1, 2}}, {4, 9, {3, 1}}};
    GradCheckReport r = CheckDualModeGradients(c, BuildContextWindow(s, 1, 1, 1),
                                               StudentWindow(s, 1, 1), segs, p, 0.5);
    model_err = std::max(model_err, r.max_relative_error);
    kinks += r.kinks_skipped;
    checked += r.entries_checked;
  }
  const bool pass = lattice_err <= kGradTol && model_err <= kGradTol &&
                    vocab_sum <= kVocabSumTol && params <= kMaxGradCheckParams &&
                    kinks * 100 <= checked;
  return {pass, "rnnt_grad rel err " + Fmt(lattice_err) + ", dual_mode_loss rel err " +
                    Fmt(model_err) + " on " + std::to_string(params) + " params (" +
                    std::to_string(kinks) + "/" + std::to_string(checked) +
                    " entries at ReLU kinks), max |vocab-axis sum| " + Fmt(vocab_sum)};
}

bool RowsEqual(const Tensor &a, const Tensor &b, std::size_t rows) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < a.cols(); ++k)
      if (a.at(r, k) != b.at(r, k)) return false;
  return true;
}

// 4. Causality, future dependence and agreement at length one.
Outcome ModeSemantics(const ModelConfig &preset) {
  bool causal = true, witness = true, single = true;
  for (bool conv : {false, true}) {
    ModelConfig c = preset;
    c.encoder.use_depthwise_conv = conv;
    ParameterStore p = InitParameters(c, 7);
    auto x = RandomUtterances({12}, c.feature_dim, 8)[0].features;
    Tensor base = Encode(c, x, Mode::kStreaming, p);
    for (std::size_t t = 0; t + 1 < x.rows(); ++t) {
      Tensor y = x;
      for (std::size_t r = t + 1; r < x.rows(); ++r)
        for (std::size_t k = 0; k < x.cols(); ++k) y.at(r, k) += 3.0;
      causal = causal && RowsEqual(base, Encode(c, y, Mode::kStreaming, p), t + 1);
    }
    Tensor y = x;
    for (std::size_t k = 0; k < x.cols(); ++k) y.at(x.rows() - 1, k) += 1.0;
    witness = witness && !RowsEqual(Encode(c, x, Mode::kNonStreaming, p),
                                    Encode(c, y, Mode::kNonStreaming, p), 1);
    auto one = RandomUtterances({1}, c.feature_dim, 9)[0].features;
    single = single && Encode(c, one, Mode::kStreaming, p)
                           .BitwiseEquals(Encode(c, one, Mode::kNonStreaming, p));
  }
  return {causal && witness && single,
          std::string("streaming prefix bitwise invariant: ") + (causal ? "yes" : "NO") +
              "; nonstreaming frame 0 moves with the last frame: " +
              (witness ? "yes" : "NO") + "; T=1 identical: " + (single ? "yes" : "NO")};
}

// 5. One store behind both modes across optimizer steps.
Outcome WeightSharing() {
  ModelConfig c = TinyModel();
  ParameterStore p = InitParameters(c, 21);
  auto s = RandomUtterances({5, 9, 6}, c.feature_dim, 121);
  ContextWindow teacher = BuildContextWindow(s, 1, 1, 1), student = StudentWindow(s, 1, 1);
  std::vector<Segment> segs{{0, 3, {1, 2}}, {4, 9, {3, 1}}};
  auto one = RandomUtterances({1}, c.feature_dim, 77)[0].features;
  AdamState adam;
  int bad = 0;
  Tensor prev_s = Encode(c, student.features, Mode::kStreaming, p);
  Tensor prev_n = Encode(c, teacher.features, Mode::kNonStreaming, p);
  for (int step = 0; step < kSharingSteps; ++step) {
    ValueAndGrad vg = EvaluateWithGradients(
        [&](Graph &g) { return DualModeLossGraph(g, c, teacher, student, segs, 0.1).total; },
        p);
    AdamStep(p, vg.gradients, 1e-2, adam);
    Graph gs(&p), gn(&p);
    EncodeGraph(gs, c, student.features, Mode::kStreaming);
    EncodeGraph(gn, c, teacher.features, Mode::kNonStreaming);
    for (const std::string &name : p.names()) {
      if (!gs.Param(name).value().BitwiseEquals(p.Get(name)) ||
          !gn.Param(name).value().BitwiseEquals(p.Get(name)))
        ++bad;
    }
    Tensor now_s = Encode(c, student.features, Mode::kStreaming, p);
    Tensor now_n = Encode(c, teacher.features, Mode::kNonStreaming, p);
    if (now_s.BitwiseEquals(prev_s) || now_n.BitwiseEquals(prev_n)) ++bad;
    if (!Encode(c, one, Mode::kStreaming, p)
             .BitwiseEquals(Encode(c, one, Mode::kNonStreaming, p)))
      ++bad;
    prev_s = now_s;
    prev_n = now_n;
  }
  return {bad == 0, std::to_string(kSharingSteps) + " Adam steps, " + std::to_string(bad) +
                        " divergences between modes and the store"};
}

// 6. Combined objective arithmetic.
Outcome ObjectiveArithmetic() {
  bool zero_exact = true, nonneg = true, coincide = true;
  double lin = 0.0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    ModelConfig c = TinyModel();
    ParameterStore p = InitParameters(c, seed);
    auto s = RandomUtterances({5, 9, 6}, c.feature_dim, seed + 300);
    ContextWindow teacher = BuildContextWindow(s, 1, 1, 1), student = StudentWindow(s, 1, 1);
    std::vector<Segment> segs{{0, 3, {1, 2}}, {4, 9, {3, 1}}};
    for (DistillMode m : {DistillMode::kFull, DistillMode::kCollapsed3}) {
      auto b0 = DualModeLoss(c, teacher, student, segs, p, 0.0, m);
      zero_exact = zero_exact && b0.total == b0.teacher + b0.student;
      for (double beta : kSweepBetas) {
        auto b = DualModeLoss(c, teacher, student, segs, p, beta, m);
        lin = std::max(lin, std::abs((b.total - b0.total) - beta * b0.distill));
        lin = std::max(lin, std::abs(b.total - (b.teacher + b.student + beta * b.distill)));
      }
      nonneg = nonneg && b0.distill >= 0.0;
      for (const auto &sl : b0.segments) nonneg = nonneg && sl.distill >= 0.0;
      // Single-frame utterance: both modes compute the same lattice.
      auto one = RandomUtterances({1}, c.feature_dim, seed + 500);
      std::vector<Segment> seg1{{0, 1, {2}}};
      auto b1 = DualModeLoss(c, BuildContextWindow(one, 0, 0, 0), StudentWindow(one, 0, 0),
                             seg1, p, 0.3, m);
      coincide = coincide && b1.distill == 0.0;
    }
  }
  return {zero_exact && lin <= kLinearityTol && nonneg && coincide,
          std::string("beta=0 total == teacher + student exactly: ") +
              (zero_exact ? "yes" : "NO") + "; max beta-linearity residual " + Fmt(lin) +
              "; distill 0 where modes coincide: " + (coincide ? "yes" : "NO") +
              "; distill >= 0: " + (nonneg ? "yes" : "NO")};
}

std::string Slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path Scratch(const std::string &name) {
  fs::path p = fs::temp_directory_path() / "ctxrnnt_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// 9. Round trips and seeded determinism.
Outcome Determinism(const ModelConfig &preset) {
  fs::path dir = Scratch("determinism");
  ParameterStore p = InitParameters(preset, 3);
  SaveCheckpoint(p, preset, 17, dir / "ck_a");
  SaveCheckpoint(p, preset, 17, dir / "ck_b");
  LoadedCheckpoint ck = LoadCheckpoint(dir / "ck_a");
  const bool ckpt = ck.params.BitwiseEquals(p) && ck.step == 17 &&
                    Slurp(dir / "ck_a" / "params.bin") == Slurp(dir / "ck_b" / "params.bin") &&
                    Slurp(dir / "ck_a" / "manifest.json") ==
                        Slurp(dir / "ck_b" / "manifest.json");

  SynthConfig sc;
  Dataset ds = MakeDataset(sc, StripGroundTruth(GenerateSessions(sc, 1, 50)));
  WriteDataset(ds, dir / "a.jsonl");
  Dataset back = ReadDataset(dir / "a.jsonl");
  bool data = back.sessions.size() == ds.sessions.size();
  for (std::size_t i = 0; data && i < ds.sessions.size(); ++i)
    data = BitwiseEqual(ds.sessions[i], back.sessions[i]);
  WriteDataset(back, dir / "b.jsonl");
  data = data && Slurp(dir / "a.jsonl") == Slurp(dir / "b.jsonl");

  TrainConfig t;
  t.mode = TrainMode::kDual;
  t.past = 1;
  t.phase1_iters = 6;
  t.phase2_iters = 6;
  t.warmup_iters = 2;
  t.eval_every = 3;
  t.validation_sessions = 2;
  t.seed = 11;
  t.model = preset;
  t.model.encoder.num_blocks = 1;
  t.model.encoder.model_dim = 8;
  t.model.encoder.feedforward_dim = 8;
  auto sessions = StripGroundTruth(GenerateSessions(sc, 1, 10));
  TrainResult ra = Train(t, sessions, dir / "run_a");
  TrainResult rb = Train(t, sessions, dir / "run_b");
  const bool logs = !Slurp(ra.log).empty() && Slurp(ra.log) == Slurp(rb.log) &&
                    LoadCheckpoint(ra.checkpoint).params.BitwiseEquals(
                        LoadCheckpoint(rb.checkpoint).params);
  fs::remove_all(dir);
  return {ckpt && data && logs, std::string("checkpoint round trip bitwise: ") +
                                    (ckpt ? "yes" : "NO") + "; dataset round trip bitwise: " +
                                    (data ? "yes" : "NO") + "; identical seeded logs: " +
                                    (logs ? "yes" : "NO")};
}

// 10. Schedule knee and bucket budgets.
Outcome ScheduleAndBuckets() {
  bool knee = true;
  for (double peak : {1e-3, 2e-3, 3e-3, 7e-4}) {
    for (int warmup : {1, 7, 50, 100, 333}) {
      for (double decay : {0.999, 0.99998}) {
        knee = knee && LearningRate(warmup, peak, warmup, decay) == peak &&
               peak * std::pow(decay, 0.0) == peak &&
               LearningRate(warmup + 1, peak, warmup, decay) == peak * decay &&
               LearningRate(warmup - 1, peak, warmup, decay) < peak;
      }
    }
  }
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> nb(1, 4), bound(10, 400), budget(100, 2000);
  std::uniform_int_distribution<std::size_t> count(0, 300);
  std::size_t batches = 0, violations = 0;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<int> boundaries(nb(rng));
    int prev = 0;
    for (int &b : boundaries) prev = b = prev + bound(rng);
    std::vector<int> budgets(boundaries.size() + 1);
    for (int &b : budgets) b = budget(rng);
    std::uniform_int_distribution<std::size_t> len(1, static_cast<std::size_t>(prev) + 500);
    std::vector<std::size_t> frames(count(rng));
    for (auto &f : frames) f = len(rng);
    std::multiset<std::size_t> seen;
    for (const Batch &b : BucketBatches(frames, boundaries, budgets, trial)) {
      ++batches;
      std::size_t sum = 0;
      for (std::size_t i : b.items) sum += frames[i];
      const bool within = sum <= static_cast<std::size_t>(budgets[b.bucket]);
      const bool lone_oversize = b.oversize && b.items.size() == 1 && !within;
      if (sum != b.frames || !(within || lone_oversize)) ++violations;
      seen.insert(b.items.begin(), b.items.end());
    }
    if (seen.size() != frames.size()) ++violations;
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (seen.count(i) != 1) ++violations;
  }
  return {knee && violations == 0,
          std::string("knee exact: ") + (knee ? "yes" : "NO") + "; " +
              std::to_string(batches) + " randomized batches, " +
              std::to_string(violations) + " budget or coverage violations"};
}

// Criteria 7 and 8: train, decode the held-out test sessions, compare.
struct RunResult {
  double wer = 0.0;
  double ael = 0.0;
  EvalReport report;
};

struct Preset {
  SynthConfig data;
  int num_sessions = 0;
  TrainConfig train;
};

Preset LoadPreset() {
  const fs::path dir = CTXRNNT_CONFIG_DIR;
  json d = json::parse(Slurp(dir / "acceptance_data.json"));
  Preset p;
  p.num_sessions = d.at("num_sessions").get<int>();
  d.erase("num_sessions");
  p.data = d.get<SynthConfig>();
  p.train = json::parse(Slurp(dir / "acceptance_train.json")).get<TrainConfig>();
  return p;
}

std::vector<Session> Sessions(SynthConfig c, int count) {
  c.seed = SubSeed(c.seed, "data");  // as `ctxrnnt gen-data` does
  return StripGroundTruth(GenerateSessions(c, 1, count));
}

struct Experiment {
  // run name -> one result per seed
  std::map<std::string, std::vector<RunResult>> runs;
};

std::string BetaName(double beta) { return "dual_P0_beta" + Fmt(beta); }

Experiment RunExperiment(const Preset &preset) {
  const std::vector<Session> train = Sessions(preset.data, preset.num_sessions);
  SynthConfig test_cfg = preset.data;
  test_cfg.seed = 1001;
  const std::vector<Session> test = Sessions(test_cfg, 100);
  Experiment ex;
  for (int seed = 1; seed <= kExperimentSeeds; ++seed) {
    const fs::path dir = Scratch("seed" + std::to_string(seed));
    auto config = [&](TrainMode mode, int past, int future, double beta) {
      TrainConfig t = preset.train;
      t.mode = mode;
      t.past = past;
      t.future = future;
      t.beta = beta;
      t.seed = static_cast<std::uint64_t>(seed);
      return t;
    };
    auto pretrain = [&](TrainMode mode, const std::string &name) {
      TrainConfig t = config(mode, 0, 0, kDefaultBeta);
      t.phase2_iters = 0;
      Progress("seed " + std::to_string(seed) + ": pretrain " + name);
      return Train(t, train, dir / name).checkpoint;
    };
    const fs::path pre_s = pretrain(TrainMode::kStreaming, "pre_streaming");
    const fs::path pre_n = pretrain(TrainMode::kNonStreaming, "pre_nonstreaming");
    auto run = [&](const std::string &name, const fs::path &warm, TrainMode mode, int past,
                   int future, double beta) {
      Progress("seed " + std::to_string(seed) + ": " + name);
      TrainConfig t = config(mode, past, future, beta);
      t.phase1_iters = 0;
      TrainResult r = Train(t, train, dir / name, warm);
      LoadedCheckpoint ck = LoadCheckpoint(r.checkpoint);
      EvalOptions o;
      o.mode = mode == TrainMode::kNonStreaming ? Mode::kNonStreaming : Mode::kStreaming;
      o.past = past;
      o.future = future;
      o.frame_ms = preset.data.frame_ms;
      RunResult rr;
      rr.report = Evaluate(ck.config, ck.params, test, o);
      rr.wer = rr.report.wer;
      rr.ael = rr.report.ael_ms;
      Progress("  WER " + Fmt(rr.wer) + " AEL " + Fmt(rr.ael) + " ms");
      ex.runs[name].push_back(std::move(rr));
    };
    run("streaming_P0", pre_s, TrainMode::kStreaming, 0, 0, kDefaultBeta);
    run("streaming_P1", pre_s, TrainMode::kStreaming, 1, 0, kDefaultBeta);
    run("nonstreaming_P1F1", pre_n, TrainMode::kNonStreaming, 1, 1, kDefaultBeta);
    for (double beta : kSweepBetas) run(BetaName(beta), pre_s, TrainMode::kDual, 0, 0, beta);
    fs::remove_all(dir);
  }
  return ex;
}

double Mean(const std::vector<double> &v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

std::string List(const std::vector<double> &v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + Fmt(v[i]);
  return s + "]";
}

std::vector<double> Field(const std::vector<RunResult> &rs, double RunResult::*f) {
  std::vector<double> out;
  for (const auto &r : rs) out.push_back(r.*f);
  return out;
}

Outcome ContextHelps(const Experiment &ex) {
  const auto &base = ex.runs.at("streaming_P0");
  const auto &p1 = ex.runs.at("streaming_P1");
  std::vector<double> rwerr;
  bool all_positive = true;
  for (std::size_t i = 0; i < base.size(); ++i) {
    rwerr.push_back(CompareReports(base[i].report, p1[i].report).rwerr_pct);
    all_positive = all_positive && rwerr.back() > 0.0;
  }
  const double wer_s1 = Mean(Field(p1, &RunResult::wer));
  const double wer_n11 = Mean(Field(ex.runs.at("nonstreaming_P1F1"), &RunResult::wer));
  return {all_positive && wer_n11 <= wer_s1,
          "streaming P1 rWERR vs P0 per seed " + List(rwerr) + " %; mean WER nonstreaming P1F1 " +
              Fmt(wer_n11) + " vs streaming P1 " + Fmt(wer_s1)};
}

Outcome LatencyDirection(const Experiment &ex) {
  const auto &base = ex.runs.at("streaming_P0");
  std::map<double, double> raelr, wer;
  std::string per_beta;
  for (double beta : kSweepBetas) {
    const auto &d = ex.runs.at(BetaName(beta));
    std::vector<double> r;
    for (std::size_t i = 0; i < base.size(); ++i)
      r.push_back(CompareReports(base[i].report, d[i].report).raelr_ms);
    raelr[beta] = Mean(r);
    wer[beta] = Mean(Field(d, &RunResult::wer));
    per_beta += " beta " + Fmt(beta) + ": rAELR " + List(r) + " ms, mean WER " +
                Fmt(wer[beta]) + ";";
  }
  const double big = kSweepBetas[0], tiny = kSweepBetas[3];
  const bool main = raelr[kDefaultBeta] > 0.0;
  const bool pattern = raelr[big] > raelr[tiny] && wer[big] >= wer[tiny];
  return {main && pattern,
          "mean rAELR at beta 5e-4 " + Fmt(raelr[kDefaultBeta]) +
              " ms; sweep pattern (largest beta gains more latency and loses WER vs "
              "smallest): " +
              (pattern ? "yes" : "NO") + "; streaming P0 mean WER " +
              Fmt(Mean(Field(base, &RunResult::wer))) + ";" + per_beta};
}

}  // namespace
}  // namespace ctxrnnt

int main() {
  using namespace ctxrnnt;
  const auto start = std::chrono::steady_clock::now();
  Preset preset = LoadPreset();
  Report(1, "lattice oracle equivalence", LatticeOracle());
  Report(2, "analytic spot checks", AnalyticSpots());
  Report(3, "gradient fidelity", GradientFidelity());
  Report(4, "mode semantics", ModeSemantics(preset.train.model));
  Report(5, "weight sharing", WeightSharing());
  Report(6, "combined objective arithmetic", ObjectiveArithmetic());
  Experiment ex = RunExperiment(preset);
  Report(7, "context helps", ContextHelps(ex));
  Report(8, "dual-mode latency direction", LatencyDirection(ex));
  Report(9, "determinism and round trips", Determinism(preset.train.model));
  Report(10, "schedule and bucketing", ScheduleAndBuckets());
  const double mins =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) +
                                                            " criteria failed")
            << " in " << Fmt(mins) << " min" << std::endl;
  return failures == 0 ? 0 : 1;
}
