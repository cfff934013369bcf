#include "ctxrnnt/cli.h"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctxrnnt/eval.h"
#include "ctxrnnt/synthdata.h"

namespace ctxrnnt {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliRun {
  int code = -1;
  std::string out, err;
};

CliRun Cli(const std::vector<std::string> &args) {
  std::ostringstream out, err;
  CliRun r;
  r.code = RunCli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path TempDir(const std::string &name) {
  fs::path p = fs::temp_directory_path() / ("ctxrnnt_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string Slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFile(const fs::path &p, const std::string &text) {
  std::ofstream(p, std::ios::binary) << text;
}

int CountLines(const std::string &s, const std::string &prefix) {
  std::istringstream in(s);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) n += line.rfind(prefix, 0) == 0;
  return n;
}

TEST(CliTest, GradCheckSeven) {
  CliRun r = Cli({"gradcheck", "--seed", "7"});
  EXPECT_EQ(r.code, kExitOk) << r.out << r.err;
  EXPECT_NE(r.out.find("max relative error: "), std::string::npos);
}

TEST(CliTest, StreamingWithFutureIsUsageError) {
  CliRun r = Cli({"eval", "--mode", "streaming", "--future", "1"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("student cannot see future utterances"), std::string::npos);
}

TEST(CliTest, OracleCheckPrintsEveryTrial) {
  CliRun r = Cli({"oracle-check", "--trials", "100"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(CountLines(r.out, "trial "), 100);
  EXPECT_NE(r.out.find("max |dp-bruteforce|"), std::string::npos);
}

TEST(CliTest, UnknownSubcommandOrFlagShowsUsage) {
  for (const auto &args : std::vector<std::vector<std::string>>{
           {"frobnicate"}, {}, {"gradcheck", "--nope"}, {"oracle-check", "--trials", "x"}}) {
    CliRun r = Cli(args);
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
    EXPECT_TRUE(r.out.empty());
  }
}

TEST(CliTest, HelpIsSuccess) {
  CliRun r = Cli({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST(CliTest, EvalNeedsItsInputs) {
  CliRun r = Cli({"eval", "--mode", "nonstreaming", "--future", "1"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--ckpt"), std::string::npos);
}

TEST(CliTest, ZeroTrialsIsUsageError) {
  EXPECT_EQ(Cli({"oracle-check", "--trials", "0"}).code, kExitUsage);
}

TEST(FileSha256Test, KnownVector) {
  fs::path d = TempDir("sha");
  WriteFile(d / "abc", "abc");
  EXPECT_EQ(FileSha256(d / "abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  WriteFile(d / "empty", "");
  EXPECT_EQ(FileSha256(d / "empty"),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(ManifestTest, AtomicWriteLeavesNoTemporary) {
  fs::path d = TempDir("manifest");
  WriteManifestAtomically(json{{"a", 1}}, d / "m.json");
  EXPECT_EQ(json::parse(Slurp(d / "m.json"))["a"], 1);
  EXPECT_FALSE(fs::exists(d / "m.json.tmp"));
}

// The manifest names only files that exist, with matching checksums.
void ExpectOutputsVerified(const json &manifest) {
  ASSERT_TRUE(manifest.contains("outputs"));
  ASSERT_FALSE(manifest["outputs"].empty());
  for (const auto &o : manifest["outputs"]) {
    fs::path p = o["path"].get<std::string>();
    ASSERT_TRUE(fs::exists(p)) << p;
    EXPECT_EQ(o["sha256"], FileSha256(p)) << p;
  }
  EXPECT_TRUE(manifest.contains("started_at"));
  EXPECT_TRUE(manifest.contains("finished_at"));
  EXPECT_TRUE(manifest.contains("config"));
  EXPECT_TRUE(manifest.contains("seed"));
}

TEST(CliTest, GenDataWritesReproducibleDatasetAndManifest) {
  fs::path d = TempDir("gen");
  WriteFile(d / "data.json", R"({"num_sessions": 6, "seed": 4})");
  CliRun a = Cli({"gen-data", "--config", (d / "data.json").string(), "--out",
               (d / "a.jsonl").string()});
  ASSERT_EQ(a.code, kExitOk) << a.err;
  json m = json::parse(Slurp(d / "a.jsonl.manifest.json"));
  ExpectOutputsVerified(m);
  EXPECT_EQ(m["seed"], 4);
  EXPECT_EQ(m["config"]["num_sessions"], 6);
  EXPECT_EQ(ReadDataset(d / "a.jsonl").sessions.size(), 6u);

  // Same config and seed again: identical bytes. A flag override changes them.
  ASSERT_EQ(Cli({"gen-data", "--config", (d / "data.json").string(), "--out",
                 (d / "b.jsonl").string()})
                .code,
            kExitOk);
  EXPECT_EQ(Slurp(d / "a.jsonl"), Slurp(d / "b.jsonl"));
  ASSERT_EQ(Cli({"gen-data", "--config", (d / "data.json").string(), "--out",
                 (d / "c.jsonl").string(), "--seed", "5"})
                .code,
            kExitOk);
  EXPECT_NE(Slurp(d / "a.jsonl"), Slurp(d / "c.jsonl"));
}

TEST(CliTest, BadConfigIsUsageError) {
  fs::path d = TempDir("badcfg");
  WriteFile(d / "data.json", R"({"num_sessions": 6, "num_latents": 40})");
  CliRun r = Cli({"gen-data", "--config", (d / "data.json").string(), "--out",
               (d / "x.jsonl").string()});
  EXPECT_EQ(r.code, kExitUsage);
  WriteFile(d / "broken.json", "{");
  EXPECT_EQ(Cli({"gen-data", "--config", (d / "broken.json").string(), "--out",
                 (d / "x.jsonl").string()})
                .code,
            kExitUsage);
}

const char *kTinyTrain = R"({
  "mode": "dual", "past": 1, "future": 0, "beta": 0.001,
  "phase1_iters": 4, "phase2_iters": 4, "warmup_iters": 2, "eval_every": 2,
  "validation_sessions": 2, "seed": 3,
  "bucket_boundaries": [80], "bucket_batch_frames": [200, 200],
  "model": {"feature_dim": 16, "vocab_size": 13,
            "encoder": {"num_blocks": 1, "model_dim": 8, "num_heads": 2,
                        "feedforward_dim": 8},
            "embed_dim": 4, "pred_dim": 8, "joint_dim": 8}
})";

TEST(CliTest, TrainEvalCompareEndToEnd) {
  fs::path d = TempDir("e2e");
  WriteFile(d / "data.json", R"({"num_sessions": 8})");
  WriteFile(d / "train.json", kTinyTrain);
  ASSERT_EQ(Cli({"gen-data", "--config", (d / "data.json").string(), "--out",
                 (d / "data.jsonl").string()})
                .code,
            kExitOk);

  auto train = [&](const std::string &out) {
    return Cli({"train", "--config", (d / "train.json").string(), "--data",
                (d / "data.jsonl").string(), "--out", (d / out).string()});
  };
  CliRun t = train("run_a");
  ASSERT_EQ(t.code, kExitOk) << t.err;
  json m = json::parse(Slurp(d / "run_a" / "run_manifest.json"));
  ExpectOutputsVerified(m);
  EXPECT_EQ(m["config"]["mode"], "dual");

  // Re-running the manifest's config reproduces every checksummed output.
  ASSERT_EQ(train("run_b").code, kExitOk);
  json mb = json::parse(Slurp(d / "run_b" / "run_manifest.json"));
  ASSERT_EQ(m["outputs"].size(), mb["outputs"].size());
  for (std::size_t i = 0; i < m["outputs"].size(); ++i) {
    EXPECT_EQ(m["outputs"][i]["sha256"], mb["outputs"][i]["sha256"])
        << m["outputs"][i]["path"];
  }

  auto eval = [&](const std::string &mode, const std::string &future,
                  const std::string &report) {
    return Cli({"eval", "--ckpt", (d / "run_a" / "checkpoint").string(), "--data",
                (d / "data.jsonl").string(), "--mode", mode, "--past", "1", "--future",
                future, "--report", (d / report).string()});
  };
  CliRun e1 = eval("streaming", "0", "s.csv");
  ASSERT_EQ(e1.code, kExitOk) << e1.err;
  ASSERT_EQ(eval("nonstreaming", "1", "n.csv").code, kExitOk);
  ExpectOutputsVerified(json::parse(Slurp(d / "s.csv.manifest.json")));
  EvalReport s = ReadReportCsv(d / "s.csv");
  EXPECT_EQ(s.run_id, "s");
  EXPECT_EQ(s.past, 1);

  CliRun c = Cli({"compare", "--baseline", (d / "s.csv").string(), "--candidate",
               (d / "n.csv").string()});
  if (s.wer > 0.0) {
    EXPECT_EQ(c.code, kExitOk) << c.err;
    EXPECT_NE(c.out.find("rWERR"), std::string::npos);
    EXPECT_NE(c.out.find("rAELR"), std::string::npos);
  } else {
    EXPECT_EQ(c.code, kExitUsage);
  }

  // A warm start skips pretraining.
  CliRun w = Cli({"train", "--config", (d / "train.json").string(), "--data",
               (d / "data.jsonl").string(), "--out", (d / "warm").string(),
               "--warm-start", (d / "run_a" / "checkpoint").string()});
  ASSERT_EQ(w.code, kExitOk) << w.err;
  EXPECT_FALSE(fs::exists(d / "warm" / "pretrain"));
}

TEST(CliTest, TrainRejectsMismatchedDataset) {
  fs::path d = TempDir("mismatch");
  WriteFile(d / "data.json", R"({"num_sessions": 4, "feature_dim": 20})");
  WriteFile(d / "train.json", kTinyTrain);
  ASSERT_EQ(Cli({"gen-data", "--config", (d / "data.json").string(), "--out",
                 (d / "data.jsonl").string()})
                .code,
            kExitOk);
  CliRun r = Cli({"train", "--config", (d / "train.json").string(), "--data",
               (d / "data.jsonl").string(), "--out", (d / "run").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("feature_dim"), std::string::npos);
}

TEST(CliTest, CompareRejectsDifferentSegmentSets) {
  fs::path d = TempDir("compare");
  EvalReport a, b;
  a.run_id = "a";
  a.segments = 10;
  a.wer = 0.2;
  b = a;
  b.segments = 11;
  WriteReportCsv(a, d / "a.csv");
  WriteReportCsv(b, d / "b.csv");
  EXPECT_EQ(Cli({"compare", "--baseline", (d / "a.csv").string(), "--candidate",
                 (d / "b.csv").string()})
                .code,
            kExitUsage);
  CliRun same = Cli({"compare", "--baseline", (d / "a.csv").string(), "--candidate",
                  (d / "a.csv").string()});
  EXPECT_EQ(same.code, kExitOk);
  EXPECT_NE(same.out.find("rWERR 0 %"), std::string::npos) << same.out;
}

}  // namespace
}  // namespace ctxrnnt
