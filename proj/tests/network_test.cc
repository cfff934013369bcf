#include "ctxrnnt/network.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ctxrnnt/errors.h"

namespace ctxrnnt {
namespace {

ModelConfig SmallConfig(bool conv = false, int downsample = 1) {
  ModelConfig c;
  c.feature_dim = 5;
  c.vocab_size = 6;
  c.encoder.num_blocks = 2;
  c.encoder.model_dim = 8;
  c.encoder.num_heads = 2;
  c.encoder.feedforward_dim = 12;
  c.encoder.use_depthwise_conv = conv;
  c.encoder.conv_kernel = 3;
  c.encoder.downsample_factor = downsample;
  c.embed_dim = 4;
  c.pred_dim = 6;
  c.joint_dim = 7;
  return c;
}

Tensor RandomFeatures(std::size_t t, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  Tensor x = Tensor::Matrix(t, d);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = z(rng);
  return x;
}

bool RowsEqual(const Tensor &a, const Tensor &b, std::size_t rows) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c)
      if (!(a.at(r, c) == b.at(r, c))) return false;
  return true;
}

std::filesystem::path TempDir(const std::string &name) {
  auto p = std::filesystem::temp_directory_path() /
           ("ctxrnnt_network_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

TEST(EncoderConfigTest, HeadsMustDivideModelDim) {
  EncoderConfig c;
  c.model_dim = 10;
  c.num_heads = 4;
  EXPECT_THROW(c.Validate(), ConfigError);
  c.num_heads = 5;
  EXPECT_NO_THROW(c.Validate());
}

TEST(EncodeTest, SingleFrameIdenticalInBothModes) {
  for (bool conv : {false, true}) {
    ModelConfig c = SmallConfig(conv);
    ParameterStore p = InitParameters(c, 1);
    Tensor x = RandomFeatures(1, 5, 2);
    EXPECT_TRUE(Encode(c, x, Mode::kStreaming, p)
                    .BitwiseEquals(Encode(c, x, Mode::kNonStreaming, p)));
  }
}

TEST(EncodeTest, StreamingIsExactlyCausal) {
  for (bool conv : {false, true}) {
    for (int d : {1, 2, 3}) {
      ModelConfig c = SmallConfig(conv, d);
      ParameterStore p = InitParameters(c, 3);
      Tensor x = RandomFeatures(13, 5, 4);
      Tensor base = Encode(c, x, Mode::kStreaming, p);
      for (std::size_t t = 0; t + 1 < 13; ++t) {
        Tensor y = x;
        std::mt19937_64 rng(t);
        std::normal_distribution<double> z(0.0, 5.0);
        for (std::size_t r = t + 1; r < 13; ++r)
          for (std::size_t k = 0; k < 5; ++k) y.at(r, k) += z(rng);
        Tensor out = Encode(c, y, Mode::kStreaming, p);
        // Encoder frames built only from input frames <= t.
        std::size_t complete = (t + 1) / static_cast<std::size_t>(d);
        EXPECT_TRUE(RowsEqual(base, out, complete))
            << "conv=" << conv << " d=" << d << " t=" << t;
      }
    }
  }
}

TEST(EncodeTest, NonStreamingSeesTheFuture) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 5);
  Tensor x = RandomFeatures(9, 5, 6);
  Tensor base = Encode(c, x, Mode::kNonStreaming, p);
  Tensor y = x;
  for (std::size_t k = 0; k < 5; ++k) y.at(8, k) += 1.0;
  Tensor out = Encode(c, y, Mode::kNonStreaming, p);
  EXPECT_FALSE(RowsEqual(base, out, 1));
}

TEST(EncodeTest, DownsampledLength) {
  for (int d = 1; d <= 4; ++d) {
    ModelConfig c = SmallConfig(false, d);
    ParameterStore p = InitParameters(c, 7);
    for (std::size_t t = 1; t <= 10; ++t) {
      Tensor out = Encode(c, RandomFeatures(t, 5, t), Mode::kNonStreaming, p);
      EXPECT_EQ(out.rows(), (t + d - 1) / d);
      EXPECT_EQ(out.cols(), 8u);
    }
  }
}

TEST(EncodeTest, FeatureDimensionMismatch) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 1);
  EXPECT_THROW(Encode(c, RandomFeatures(3, 4, 1), Mode::kStreaming, p), UsageError);
}

TEST(EncodeTest, BothModesObserveUpdatesThroughOneStore) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 8);
  Tensor x = RandomFeatures(6, 5, 9);
  Tensor s0 = Encode(c, x, Mode::kStreaming, p);
  Tensor n0 = Encode(c, x, Mode::kNonStreaming, p);
  auto w = p.MutableData("enc.in.w");
  for (double &v : w) v *= 1.5;
  p.BumpVersion();
  Tensor s1 = Encode(c, x, Mode::kStreaming, p);
  Tensor n1 = Encode(c, x, Mode::kNonStreaming, p);
  EXPECT_FALSE(s0.BitwiseEquals(s1));
  EXPECT_FALSE(n0.BitwiseEquals(n1));
  // Last streaming frame sees the whole input, as does every full-context
  // frame; the single-frame prefix agrees in both modes.
  Tensor first_s = Encode(c, RandomFeatures(1, 5, 10), Mode::kStreaming, p);
  Tensor first_n = Encode(c, RandomFeatures(1, 5, 10), Mode::kNonStreaming, p);
  EXPECT_TRUE(first_s.BitwiseEquals(first_n));
}

TEST(PredictTest, EmptyPrefixIsStartState) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 11);
  Tensor s = Predict(c, {}, p);
  EXPECT_EQ(s.rows(), 1u);
  EXPECT_TRUE(s.BitwiseEquals(p.Get("pred.start")));
}

TEST(PredictTest, PrefixCausality) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 12);
  std::vector<int> a{1, 4, 2, 5}, b{1, 4, 3, 3};
  Tensor sa = Predict(c, a, p), sb = Predict(c, b, p);
  EXPECT_EQ(sa.rows(), 5u);
  EXPECT_TRUE(RowsEqual(sa, sb, 3));
  EXPECT_FALSE(RowsEqual(sa, sb, 4));
  std::vector<int> c1{2, 1}, c2{2, 5};
  EXPECT_TRUE(RowsEqual(Predict(c, c1, p), Predict(c, c2, p), 2));
}

TEST(PredictTest, InvalidIdIsUsageError) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 12);
  std::vector<int> blank{0}, big{6};
  EXPECT_THROW(Predict(c, blank, p), UsageError);
  EXPECT_THROW(Predict(c, big, p), UsageError);
}

TEST(PredictTest, StepperMatchesGraph) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 13);
  std::vector<int> y{3, 1, 5, 5, 2};
  Tensor states = Predict(c, y, p);
  PredictionStepper stepper(c, p);
  for (std::size_t j = 0; j <= y.size(); ++j) {
    for (std::size_t k = 0; k < states.cols(); ++k)
      EXPECT_NEAR(stepper.output()[k], states.at(j, k), 1e-13);
    if (j < y.size()) stepper.Advance(y[j]);
  }
}

TEST(JoinTest, ZeroWeightsGiveUniform) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 14);
  for (const char *name :
       {"joint.enc.w", "joint.pred.w", "joint.b1", "joint.out.w", "joint.out.b"}) {
    for (double &v : p.MutableData(name)) v = 0.0;
  }
  std::vector<double> e(8, 0.7), s(6, -0.2);
  auto logits = Join(c, e, s, p);
  ASSERT_EQ(logits.size(), 6u);
  for (double v : logits) EXPECT_EQ(v, 0.0);
}

TEST(JoinTest, RowsAreDistributionsAfterLogSoftmax) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 15);
  Tensor enc = Encode(c, RandomFeatures(4, 5, 16), Mode::kNonStreaming, p);
  std::vector<int> y{2, 3};
  Graph g(&p);
  Var logits = JoinGraph(g, c, g.Constant(enc), PredictGraph(g, c, y));
  EXPECT_EQ(logits.rows(), 4u * 3u);
  Tensor lp = ad::LogSoftmaxRows(logits).value();
  for (std::size_t r = 0; r < lp.rows(); ++r) EXPECT_NEAR(LogSumExp(lp.row(r)), 0.0, 1e-12);
  // Single-pair Join agrees with the batched joint.
  Tensor states = Predict(c, y, p);
  auto single = Join(c, enc.row(2), states.row(1), p);
  for (std::size_t k = 0; k < 6; ++k)
    EXPECT_NEAR(single[k], logits.value().at(2 * 3 + 1, k), 1e-13);
}

TEST(JoinTest, DimensionMismatch) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 1);
  std::vector<double> e(7, 0.0), s(6, 0.0);
  EXPECT_THROW(Join(c, e, s, p), UsageError);
}

TEST(CheckpointTest, RoundTripIsBitwise) {
  ModelConfig c = SmallConfig(true, 2);
  ParameterStore p = InitParameters(c, 21);
  auto dir = TempDir("roundtrip");
  SaveCheckpoint(p, c, 1234, dir);
  LoadedCheckpoint l = LoadCheckpoint(dir);
  EXPECT_EQ(l.step, 1234);
  EXPECT_TRUE(l.params.BitwiseEquals(p));
  EXPECT_EQ(nlohmann::json(l.config), nlohmann::json(c));
}

std::string ReadAll(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

TEST(CheckpointTest, TwoSavesAreByteIdentical) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 22);
  auto a = TempDir("save_a"), b = TempDir("save_b");
  SaveCheckpoint(p, c, 5, a);
  SaveCheckpoint(p, c, 5, b);
  EXPECT_EQ(ReadAll(a / "params.bin"), ReadAll(b / "params.bin"));
  EXPECT_EQ(ReadAll(a / "manifest.json"), ReadAll(b / "manifest.json"));
  auto d = TempDir("save_d");
  SaveCheckpoint(p, c, 6, d);
  EXPECT_EQ(ReadAll(a / "params.bin"), ReadAll(d / "params.bin"));
  EXPECT_NE(ReadAll(a / "manifest.json"), ReadAll(d / "manifest.json"));
}

TEST(CheckpointTest, EditedShapeNamesTheTensor) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 23);
  auto dir = TempDir("edited");
  SaveCheckpoint(p, c, 0, dir);
  nlohmann::json m = nlohmann::json::parse(ReadAll(dir / "manifest.json"));
  for (auto &t : m["tensors"]) {
    if (t["name"] == "joint.b1") t["shape"] = {1, 8};
  }
  std::ofstream(dir / "manifest.json") << m.dump(2);
  try {
    LoadCheckpoint(dir);
    FAIL() << "expected LoadError";
  } catch (const LoadError &e) {
    EXPECT_NE(std::string(e.what()).find("joint.b1"), std::string::npos) << e.what();
  }
}

TEST(CheckpointTest, TruncatedPayloadIsRejected) {
  ModelConfig c = SmallConfig();
  ParameterStore p = InitParameters(c, 24);
  auto dir = TempDir("truncated");
  SaveCheckpoint(p, c, 0, dir);
  std::string bytes = ReadAll(dir / "params.bin");
  std::ofstream(dir / "params.bin", std::ios::binary | std::ios::trunc)
      << bytes.substr(0, bytes.size() - 64);
  EXPECT_THROW(LoadCheckpoint(dir), LoadError);
}

}  // namespace
}  // namespace ctxrnnt
