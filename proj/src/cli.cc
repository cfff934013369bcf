#include "ctxrnnt/cli.h"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "ctxrnnt/errors.h"
#include "ctxrnnt/eval.h"
#include "ctxrnnt/gradcheck.h"
#include "ctxrnnt/lattice.h"
#include "ctxrnnt/network.h"
#include "ctxrnnt/synthdata.h"
#include "ctxrnnt/training.h"

namespace ctxrnnt {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string UtcNow() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json ReadJsonFile(const fs::path &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error &e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// Every regular file below `root` (or `root` itself), sorted, with checksums.
json Checksums(const fs::path &root, const fs::path &skip = {}) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(root)) {
    files.push_back(root);
  } else if (fs::is_directory(root)) {
    for (const auto &e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path() != skip) files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  json out = json::array();
  for (const fs::path &f : files) {
    out.push_back({{"path", f.string()}, {"sha256", FileSha256(f)}});
  }
  return out;
}

struct Manifest {
  json j;
  explicit Manifest(const std::vector<std::string> &args) {
    j["command"] = args;
    j["started_at"] = UtcNow();
  }
  void Finish(const fs::path &path) {
    j["finished_at"] = UtcNow();
    WriteManifestAtomically(j, path);
  }
};

// Log-probabilities of a random lattice; logits spread enough to make the
// nodes far from uniform.
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

struct LatticeGradCheck {
  double max_relative_error = 0.0;
  double max_vocab_sum = 0.0;
};

// RnntGrad against central differences of RnntLoss in the logits.
LatticeGradCheck CheckLatticeGradient(std::uint64_t seed, int trials) {
  std::mt19937_64 rng(seed);
  LatticeGradCheck r;
  for (int trial = 0; trial < trials; ++trial) {
    const std::size_t T = 1 + rng() % 5, U = rng() % 4, V = 2 + rng() % 4;
    std::vector<double> logits = RandomLogits(T * (U + 1) * V, rng);
    std::vector<int> labels = RandomLabels(U, V, rng);
    std::vector<double> g =
        RnntGrad(LatticeTensor::FromLogits(T, V, logits, labels));
    for (std::size_t node = 0; node < T * (U + 1); ++node) {
      double s = 0.0;
      for (std::size_t k = 0; k < V; ++k) s += g[node * V + k];
      r.max_vocab_sum = std::max(r.max_vocab_sum, std::abs(s));
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double orig = logits[i];
      logits[i] = orig + kFiniteDifferenceStep;
      const double up = RnntLoss(LatticeTensor::FromLogits(T, V, logits, labels)).loss;
      logits[i] = orig - kFiniteDifferenceStep;
      const double down = RnntLoss(LatticeTensor::FromLogits(T, V, logits, labels)).loss;
      logits[i] = orig;
      const double numeric = (up - down) / (2.0 * kFiniteDifferenceStep);
      r.max_relative_error = std::max(r.max_relative_error, RelativeError(g[i], numeric));
    }
  }
  return r;
}

ModelConfig GradCheckModel() {
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
                                        std::size_t dim, std::mt19937_64 &rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Utterance> s;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Utterance u;
    u.session_id = "gradcheck";
    u.index = static_cast<int>(i);
    u.features = Tensor::Matrix(lengths[i], dim);
    for (std::size_t k = 0; k < u.features.size(); ++k) u.features[k] = z(rng);
    s.push_back(std::move(u));
  }
  return s;
}

struct GradCheckArgs {
  std::uint64_t seed = 7;
  std::string manifest;
};

int RunGradCheck(const GradCheckArgs &a, const std::vector<std::string> &args,
                 std::ostream &out) {
  Manifest m(args);
  const double tol = 1e-4;
  LatticeGradCheck lg = CheckLatticeGradient(a.seed, 20);
  out << "rnnt_grad max relative error: " << lg.max_relative_error << '\n';
  out << "rnnt_grad max |vocabulary-axis sum|: " << lg.max_vocab_sum << '\n';

  ModelConfig c = GradCheckModel();
  ParameterStore p = InitParameters(c, SubSeed(a.seed, "init"));
  std::mt19937_64 rng(SubSeed(a.seed, "data"));
  auto s = RandomUtterances({5, 9, 6}, c.feature_dim, rng);
  ContextWindow teacher = BuildContextWindow(s, 1, 1, 1);
  ContextWindow student = StudentWindow(s, 1, 1);
  std::vector<Segment> segs{{0, 3, {1, 2}}, {4, 9, {3, 1}}};
  GradCheckReport r = CheckDualModeGradients(c, teacher, student, segs, p, 0.5);
  out << "dual_mode_loss parameters: " << p.NumParameters() << '\n';
  out << "dual_mode_loss max relative error: " << r.max_relative_error << " ("
      << r.worst_parameter << '[' << r.worst_index << "])\n";
  out << "dual_mode_loss entries skipped at ReLU kinks: " << r.kinks_skipped << " of "
      << r.entries_checked << '\n';
  const double worst = std::max(lg.max_relative_error, r.max_relative_error);
  out << "max relative error: " << worst << '\n';
  const bool ok = worst <= tol && lg.max_vocab_sum <= 1e-10 &&
                  r.kinks_skipped * 100 <= r.entries_checked;
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << '\n';
  if (!a.manifest.empty()) {
    m.j["seed"] = a.seed;
    m.j["config"] = {{"model", c}, {"beta", 0.5}, {"tolerance", tol}};
    m.j["result"] = {{"max_relative_error", worst}, {"passed", ok}};
    m.Finish(a.manifest);
  }
  return ok ? kExitOk : kExitVerifyFailed;
}

struct OracleArgs {
  int trials = 1000;
  std::uint64_t seed = 1;
  std::string manifest;
};

int RunOracleCheck(const OracleArgs &a, const std::vector<std::string> &args,
                   std::ostream &out) {
  if (a.trials < 1) throw UsageError("--trials must be at least 1");
  Manifest m(args);
  const double tol = 1e-9;
  std::mt19937_64 rng(a.seed);
  double worst = 0.0;
  for (int trial = 0; trial < a.trials; ++trial) {
    const std::size_t T = 1 + rng() % 6, U = rng() % 5, V = 2 + rng() % 4;
    auto lattice = LatticeTensor::FromLogits(T, V, RandomLogits(T * (U + 1) * V, rng),
                                             RandomLabels(U, V, rng));
    const double diff =
        std::abs(RnntLoss(lattice).loss - RnntLossBruteForce(lattice));
    worst = std::max(worst, diff);
    out << "trial " << trial << " T=" << T << " U=" << U << " V=" << V
        << " max|dp-bruteforce|=" << diff << '\n';
  }
  const bool ok = worst <= tol;
  out << "max |dp-bruteforce| over " << a.trials << " trials: " << worst << '\n';
  out << (ok ? "oracle-check passed" : "oracle-check FAILED") << '\n';
  if (!a.manifest.empty()) {
    m.j["seed"] = a.seed;
    m.j["config"] = {{"trials", a.trials}, {"tolerance", tol}};
    m.j["result"] = {{"max_abs_difference", worst}, {"passed", ok}};
    m.Finish(a.manifest);
  }
  return ok ? kExitOk : kExitVerifyFailed;
}

struct GenDataArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> num_sessions;
};

int RunGenData(const GenDataArgs &a, const std::vector<std::string> &args,
               std::ostream &out) {
  Manifest m(args);
  json j = ReadJsonFile(a.config);
  if (!j.is_object()) throw ConfigError("data config must be a JSON object");
  int num_sessions = 100;
  if (j.contains("num_sessions")) {
    if (!j.at("num_sessions").is_number_integer()) {
      throw ConfigError("num_sessions must be an integer");
    }
    num_sessions = j.at("num_sessions").get<int>();
    j.erase("num_sessions");
  }
  SynthConfig sc;
  try {
    sc = j.get<SynthConfig>();
  } catch (const json::exception &e) {
    throw ConfigError(std::string("bad data config: ") + e.what());
  }
  if (a.seed) sc.seed = *a.seed;
  if (a.num_sessions) num_sessions = *a.num_sessions;
  if (num_sessions < 1) throw ConfigError("num_sessions must be at least 1");
  sc.Validate();

  SynthConfig gen = sc;
  gen.seed = SubSeed(sc.seed, "data");
  auto synth = GenerateSessions(gen, 1, num_sessions);
  Dataset ds = MakeDataset(sc, StripGroundTruth(synth));
  const fs::path path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  WriteDataset(ds, path);

  std::size_t utts = 0;
  for (const Session &s : ds.sessions) utts += s.utterances.size();
  out << "wrote " << ds.sessions.size() << " sessions, " << utts << " utterances to "
      << path.string() << '\n';

  json config = sc;
  config["num_sessions"] = num_sessions;
  m.j["config"] = config;
  m.j["seed"] = sc.seed;
  m.j["inputs"] = {{"config", a.config}};
  m.j["outputs"] = Checksums(path);
  m.Finish(path.string() + ".manifest.json");
  return kExitOk;
}

struct TrainArgs {
  std::string config, data, out, warm_start;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<int> past, future, phase1_iters, phase2_iters;
  std::optional<double> beta;
};

int RunTrain(const TrainArgs &a, const std::vector<std::string> &args,
             std::ostream &out) {
  Manifest m(args);
  TrainConfig tc = ReadJsonFile(a.config).get<TrainConfig>();
  if (a.seed) tc.seed = *a.seed;
  if (a.mode) tc.mode = ParseTrainMode(*a.mode);
  if (a.past) tc.past = *a.past;
  if (a.future) tc.future = *a.future;
  if (a.beta) tc.beta = *a.beta;
  if (a.phase1_iters) tc.phase1_iters = *a.phase1_iters;
  if (a.phase2_iters) tc.phase2_iters = *a.phase2_iters;
  tc.Validate();

  Dataset ds = ReadDataset(a.data);
  if (ds.header.feature_dim != tc.model.feature_dim) {
    throw ConfigError("dataset feature_dim " + std::to_string(ds.header.feature_dim) +
                      " does not match model.feature_dim " +
                      std::to_string(tc.model.feature_dim));
  }
  if (ds.header.vocab_size + 1 != tc.model.vocab_size) {
    throw ConfigError("dataset has " + std::to_string(ds.header.vocab_size) +
                      " labels plus blank, model.vocab_size is " +
                      std::to_string(tc.model.vocab_size));
  }
  std::optional<fs::path> warm;
  if (!a.warm_start.empty()) warm = fs::path(a.warm_start);
  const fs::path out_dir(a.out);
  TrainResult r = Train(tc, ds.sessions, out_dir, warm);
  out << "best validation WER " << r.best_val_wer << " after " << r.final_iteration
      << " iterations; checkpoint " << r.checkpoint.string() << '\n';

  const fs::path manifest_path = out_dir / "run_manifest.json";
  m.j["config"] = tc;
  m.j["seed"] = tc.seed;
  json inputs = {{"config", a.config}, {"data", Checksums(a.data)}};
  if (warm) inputs["warm_start"] = Checksums(*warm);
  m.j["inputs"] = inputs;
  m.j["outputs"] = Checksums(out_dir, manifest_path);
  m.j["result"] = {{"best_val_wer", r.best_val_wer},
                   {"final_iteration", r.final_iteration},
                   {"checkpoint", r.checkpoint.string()}};
  m.Finish(manifest_path);
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, data, mode = "streaming", report, detail, run_id;
  int past = 0, future = 0, max_symbols = kDefaultMaxSymbolsPerFrame;
  std::size_t separator_frames = 0;
  double beta = 0.0;
};

int RunEval(const EvalArgs &a, const std::vector<std::string> &args, std::ostream &out) {
  Manifest m(args);
  EvalOptions o;
  o.mode = ParseMode(a.mode);
  o.past = a.past;
  o.future = a.future;
  o.separator_frames = a.separator_frames;
  o.max_symbols_per_frame = a.max_symbols;
  if (o.mode == Mode::kStreaming && o.future > 0) {
    throw UsageError("student cannot see future utterances");
  }
  if (o.past < 0 || o.future < 0) throw UsageError("--past and --future must be >= 0");
  for (const auto &[flag, value] :
       {std::pair{"--ckpt", &a.ckpt}, {"--data", &a.data}, {"--report", &a.report}}) {
    if (value->empty()) throw UsageError(std::string(flag) + " is required");
  }
  LoadedCheckpoint ck = LoadCheckpoint(a.ckpt);
  Dataset ds = ReadDataset(a.data);
  if (ds.header.feature_dim != ck.config.feature_dim ||
      ds.header.vocab_size + 1 != ck.config.vocab_size) {
    throw ConfigError("dataset header does not match the checkpoint's model config");
  }
  o.frame_ms = ds.header.frame_ms;
  EvalReport r = Evaluate(ck.config, ck.params, ds.sessions, o);
  r.run_id = a.run_id.empty() ? fs::path(a.report).stem().string() : a.run_id;
  r.beta = a.beta;
  r.checkpoint = a.ckpt;
  const fs::path report(a.report);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  WriteReportCsv(r, report);
  if (!a.detail.empty()) WriteReportDetail(r, a.detail);
  out << "segments " << r.segments << " WER " << r.wer << " AEL " << r.ael_ms << " ms";
  if (r.empty_hypotheses > 0) out << " (" << r.empty_hypotheses << " empty hypotheses)";
  out << '\n';

  m.j["config"] = {{"mode", a.mode},
                   {"past", o.past},
                   {"future", o.future},
                   {"separator_frames", o.separator_frames},
                   {"max_symbols_per_frame", o.max_symbols_per_frame},
                   {"frame_ms", o.frame_ms},
                   {"beta", r.beta},
                   {"run_id", r.run_id}};
  m.j["seed"] = nullptr;  // decoding is deterministic
  m.j["inputs"] = {{"checkpoint", Checksums(a.ckpt)}, {"data", Checksums(a.data)}};
  json outputs = Checksums(report);
  if (!a.detail.empty()) outputs.push_back(Checksums(a.detail)[0]);
  m.j["outputs"] = outputs;
  m.Finish(a.report + ".manifest.json");
  return kExitOk;
}

struct CompareArgs {
  std::string baseline, candidate, manifest;
};

int RunCompare(const CompareArgs &a, const std::vector<std::string> &args,
               std::ostream &out) {
  Manifest m(args);
  EvalReport base = ReadReportCsv(a.baseline), cand = ReadReportCsv(a.candidate);
  RelativeMetrics r = CompareReports(base, cand);
  out << "baseline " << base.run_id << " WER " << base.wer << " AEL " << base.ael_ms
      << " ms\n";
  out << "candidate " << cand.run_id << " WER " << cand.wer << " AEL " << cand.ael_ms
      << " ms\n";
  out << "rWERR " << r.rwerr_pct << " %\n";
  out << "rAELR " << r.raelr_ms << " ms\n";
  if (!a.manifest.empty()) {
    m.j["seed"] = nullptr;
    m.j["inputs"] = {{"baseline", Checksums(a.baseline)},
                     {"candidate", Checksums(a.candidate)}};
    m.j["result"] = {{"rwerr_pct", r.rwerr_pct}, {"raelr_ms", r.raelr_ms}};
    m.Finish(a.manifest);
  }
  return kExitOk;
}

}  // namespace

std::string FileSha256(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                              &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), in.gcount());
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return hex.str();
}

void WriteManifestAtomically(const json &manifest, const fs::path &path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + tmp.string());
    out << manifest.dump(2) << '\n';
    if (!out.flush()) throw UsageError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

int RunCli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Contextual transducer lab: data, training, evaluation and checks",
               "ctxrnnt"};
  app.require_subcommand(1, 1);
  app.failure_message(CLI::FailureMessage::help);

  GenDataArgs gd;
  auto *gen = app.add_subcommand("gen-data", "Generate a synthetic session dataset");
  gen->add_option("--config", gd.config, "Data config JSON")->required();
  gen->add_option("--out", gd.out, "Output dataset (JSON Lines)")->required();
  gen->add_option("--seed", gd.seed, "Overrides the config seed");
  gen->add_option("--num-sessions", gd.num_sessions, "Overrides num_sessions");

  TrainArgs ta;
  auto *train = app.add_subcommand("train", "Two-phase training");
  train->add_option("--config", ta.config, "Training config JSON")->required();
  train->add_option("--data", ta.data, "Dataset")->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--warm-start", ta.warm_start, "Checkpoint; skips pretraining");
  train->add_option("--seed", ta.seed);
  train->add_option("--mode", ta.mode, "streaming, nonstreaming or dual");
  train->add_option("--past", ta.past);
  train->add_option("--future", ta.future);
  train->add_option("--beta", ta.beta);
  train->add_option("--phase1-iters", ta.phase1_iters);
  train->add_option("--phase2-iters", ta.phase2_iters);

  EvalArgs ea;
  auto *eval = app.add_subcommand("eval", "Greedy decoding, WER and latency report");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint directory");
  eval->add_option("--data", ea.data, "Dataset");
  eval->add_option("--mode", ea.mode, "streaming or nonstreaming")->capture_default_str();
  eval->add_option("--past", ea.past)->capture_default_str();
  eval->add_option("--future", ea.future)->capture_default_str();
  eval->add_option("--report", ea.report, "Output CSV");
  eval->add_option("--detail", ea.detail, "Per-segment JSON Lines output");
  eval->add_option("--run-id", ea.run_id, "Defaults to the report file stem");
  eval->add_option("--beta", ea.beta, "Recorded in the report")->capture_default_str();
  eval->add_option("--separator-frames", ea.separator_frames)->capture_default_str();
  eval->add_option("--max-symbols-per-frame", ea.max_symbols)->capture_default_str();

  GradCheckArgs ga;
  auto *grad = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  grad->add_option("--seed", ga.seed)->capture_default_str();
  grad->add_option("--manifest", ga.manifest, "Write a run manifest here");

  OracleArgs oa;
  auto *oracle = app.add_subcommand("oracle-check", "Forward-backward vs path enumeration");
  oracle->add_option("--trials", oa.trials)->capture_default_str();
  oracle->add_option("--seed", oa.seed)->capture_default_str();
  oracle->add_option("--manifest", oa.manifest, "Write a run manifest here");

  CompareArgs ca;
  auto *compare = app.add_subcommand("compare", "rWERR and rAELR between two reports");
  compare->add_option("--baseline", ca.baseline)->required();
  compare->add_option("--candidate", ca.candidate)->required();
  compare->add_option("--manifest", ca.manifest, "Write a run manifest here");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp &e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp &e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError &e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  std::vector<std::string> command{"ctxrnnt"};
  command.insert(command.end(), args.begin(), args.end());
  try {
    if (gen->parsed()) return RunGenData(gd, command, out);
    if (train->parsed()) return RunTrain(ta, command, out);
    if (eval->parsed()) return RunEval(ea, command, out);
    if (grad->parsed()) return RunGradCheck(ga, command, out);
    if (oracle->parsed()) return RunOracleCheck(oa, command, out);
    if (compare->parsed()) return RunCompare(ca, command, out);
  } catch (const ParseError &e) {
    err << "error: " << e.what();
    if (e.line() > 0) err << " (line " << e.line() << ")";
    err << '\n';
    return kExitUsage;
  } catch (const UsageError &e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError &e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const LoadError &e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError &e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitVerifyFailed;
  } catch (const fs::filesystem_error &e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace ctxrnnt
