// ctxrnnt/network.cc

#include "ctxrnnt/network.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "ctxrnnt/errors.h"

namespace ctxrnnt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in host byte order");

const char *ModeName(Mode mode) {
  return mode == Mode::kStreaming ? "streaming" : "nonstreaming";
}

Mode ParseMode(const std::string &name) {
  if (name == "streaming") return Mode::kStreaming;
  if (name == "nonstreaming") return Mode::kNonStreaming;
  throw UsageError("unknown mode '" + name +
                   "' (expected streaming or nonstreaming)");
}

void EncoderConfig::Validate() const {
  if (num_blocks < 0) throw ConfigError("encoder.num_blocks must be >= 0");
  if (model_dim < 1 || num_heads < 1 || feedforward_dim < 1) {
    throw ConfigError("encoder dimensions must be positive");
  }
  if (model_dim % num_heads != 0) {
    throw ConfigError("encoder.model_dim (" + std::to_string(model_dim) +
                      ") is not divisible by num_heads (" +
                      std::to_string(num_heads) + ")");
  }
  if (conv_kernel < 1 || conv_kernel % 2 == 0) {
    throw ConfigError("encoder.conv_kernel must be a positive odd number");
  }
  if (downsample_factor < 1) {
    throw ConfigError("encoder.downsample_factor must be >= 1");
  }
}

void ModelConfig::Validate() const {
  encoder.Validate();
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  if (vocab_size < 2) throw ConfigError("vocab_size must include blank and a label");
  if (embed_dim < 1 || pred_dim < 1 || joint_dim < 1) {
    throw ConfigError("prediction/joint dimensions must be positive");
  }
}

void to_json(nlohmann::json &j, const EncoderConfig &c) {
  j = nlohmann::json{{"num_blocks", c.num_blocks},
                     {"model_dim", c.model_dim},
                     {"num_heads", c.num_heads},
                     {"feedforward_dim", c.feedforward_dim},
                     {"use_depthwise_conv", c.use_depthwise_conv},
                     {"conv_kernel", c.conv_kernel},
                     {"downsample_factor", c.downsample_factor}};
}

void from_json(const nlohmann::json &j, EncoderConfig &c) {
  EncoderConfig d;
  c.num_blocks = j.value("num_blocks", d.num_blocks);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.feedforward_dim = j.value("feedforward_dim", d.feedforward_dim);
  c.use_depthwise_conv = j.value("use_depthwise_conv", d.use_depthwise_conv);
  c.conv_kernel = j.value("conv_kernel", d.conv_kernel);
  c.downsample_factor = j.value("downsample_factor", d.downsample_factor);
}

void to_json(nlohmann::json &j, const ModelConfig &c) {
  j = nlohmann::json{{"feature_dim", c.feature_dim},
                     {"vocab_size", c.vocab_size},
                     {"encoder", c.encoder},
                     {"embed_dim", c.embed_dim},
                     {"pred_dim", c.pred_dim},
                     {"joint_dim", c.joint_dim}};
}

void from_json(const nlohmann::json &j, ModelConfig &c) {
  ModelConfig d;
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.encoder = j.contains("encoder") ? j.at("encoder").get<EncoderConfig>()
                                    : d.encoder;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.pred_dim = j.value("pred_dim", d.pred_dim);
  c.joint_dim = j.value("joint_dim", d.joint_dim);
}

namespace {

std::string BlockName(int b, const char *leaf) {
  return "enc.block" + std::to_string(b) + "." + leaf;
}

struct ParamSpec {
  std::string name;
  std::size_t rows, cols;
  enum Init { kXavier, kOnes, kZeros, kSmall, kForgetBias } init;
};

std::vector<ParamSpec> ParameterLayout(const ModelConfig &c) {
  const std::size_t m = c.encoder.model_dim, f = c.encoder.feedforward_dim;
  const std::size_t in = static_cast<std::size_t>(c.feature_dim) *
                         c.encoder.downsample_factor;
  const std::size_t v = c.vocab_size, e = c.embed_dim, h = c.pred_dim,
                    jd = c.joint_dim;
  std::vector<ParamSpec> s;
  s.push_back({"enc.in.w", in, m, ParamSpec::kXavier});
  s.push_back({"enc.in.b", 1, m, ParamSpec::kZeros});
  for (int b = 0; b < c.encoder.num_blocks; ++b) {
    s.push_back({BlockName(b, "ln_att.g"), 1, m, ParamSpec::kOnes});
    s.push_back({BlockName(b, "ln_att.b"), 1, m, ParamSpec::kZeros});
    s.push_back({BlockName(b, "att.wq"), m, m, ParamSpec::kXavier});
    s.push_back({BlockName(b, "att.wk"), m, m, ParamSpec::kXavier});
    s.push_back({BlockName(b, "att.wv"), m, m, ParamSpec::kXavier});
    s.push_back({BlockName(b, "att.wo"), m, m, ParamSpec::kXavier});
    if (c.encoder.use_depthwise_conv) {
      s.push_back({BlockName(b, "ln_conv.g"), 1, m, ParamSpec::kOnes});
      s.push_back({BlockName(b, "ln_conv.b"), 1, m, ParamSpec::kZeros});
      s.push_back({BlockName(b, "conv.kernel"),
                   static_cast<std::size_t>(c.encoder.conv_kernel), m,
                   ParamSpec::kXavier});
      s.push_back({BlockName(b, "conv.pw"), m, m, ParamSpec::kXavier});
    }
    s.push_back({BlockName(b, "ln_ff.g"), 1, m, ParamSpec::kOnes});
    s.push_back({BlockName(b, "ln_ff.b"), 1, m, ParamSpec::kZeros});
    s.push_back({BlockName(b, "ff.w1"), m, f, ParamSpec::kXavier});
    s.push_back({BlockName(b, "ff.b1"), 1, f, ParamSpec::kZeros});
    s.push_back({BlockName(b, "ff.w2"), f, m, ParamSpec::kXavier});
    s.push_back({BlockName(b, "ff.b2"), 1, m, ParamSpec::kZeros});
  }
  s.push_back({"enc.final_ln.g", 1, m, ParamSpec::kOnes});
  s.push_back({"enc.final_ln.b", 1, m, ParamSpec::kZeros});
  s.push_back({"pred.embed", v, e, ParamSpec::kXavier});
  s.push_back({"pred.start", 1, h, ParamSpec::kSmall});
  s.push_back({"pred.lstm.wx", e, 4 * h, ParamSpec::kXavier});
  s.push_back({"pred.lstm.wh", h, 4 * h, ParamSpec::kXavier});
  s.push_back({"pred.lstm.b", 1, 4 * h, ParamSpec::kForgetBias});
  s.push_back({"joint.enc.w", m, jd, ParamSpec::kXavier});
  s.push_back({"joint.pred.w", h, jd, ParamSpec::kXavier});
  s.push_back({"joint.b1", 1, jd, ParamSpec::kZeros});
  s.push_back({"joint.out.w", jd, v, ParamSpec::kXavier});
  s.push_back({"joint.out.b", 1, v, ParamSpec::kZeros});
  return s;
}

Tensor PositionalEncoding(std::size_t rows, std::size_t dim) {
  Tensor pe = Tensor::Matrix(rows, dim);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) /
                                          static_cast<double>(dim));
      double angle = static_cast<double>(pos) * rate;
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Var Linear(Graph &g, Var x, const std::string &w, const std::string &b) {
  return ad::AddRow(ad::MatMul(x, g.Param(w)), g.Param(b));
}

Var LayerNorm(Graph &g, Var x, const std::string &prefix) {
  return ad::LayerNormRows(x, g.Param(prefix + ".g"), g.Param(prefix + ".b"));
}

Var SelfAttention(Graph &g, const ModelConfig &c, int b, Var x, bool causal) {
  const std::size_t m = c.encoder.model_dim;
  const std::size_t heads = c.encoder.num_heads;
  const std::size_t dh = m / heads;
  Var q = ad::MatMul(x, g.Param(BlockName(b, "att.wq")));
  Var k = ad::MatMul(x, g.Param(BlockName(b, "att.wk")));
  Var v = ad::MatMul(x, g.Param(BlockName(b, "att.wv")));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ad::SliceCols(q, h * dh, (h + 1) * dh);
    Var kh = ad::SliceCols(k, h * dh, (h + 1) * dh);
    Var vh = ad::SliceCols(v, h * dh, (h + 1) * dh);
    Var scores = ad::Scale(ad::MatMulNT(qh, kh), scale);
    Var weights = ad::MaskedSoftmaxRows(scores, causal);
    outs.push_back(ad::MatMul(weights, vh));
  }
  Var merged = heads == 1 ? outs[0] : ad::ConcatCols(outs);
  return ad::MatMul(merged, g.Param(BlockName(b, "att.wo")));
}

}  // namespace

ParameterStore InitParameters(const ModelConfig &config, std::uint64_t seed) {
  config.Validate();
  std::mt19937_64 rng(seed);
  ParameterStore store;
  for (const auto &spec : ParameterLayout(config)) {
    Tensor t = Tensor::Matrix(spec.rows, spec.cols);
    switch (spec.init) {
      case ParamSpec::kXavier: {
        double a = std::sqrt(6.0 / static_cast<double>(spec.rows + spec.cols));
        std::uniform_real_distribution<double> dist(-a, a);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
        break;
      }
      case ParamSpec::kOnes:
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
        break;
      case ParamSpec::kZeros:
        break;
      case ParamSpec::kSmall: {
        std::uniform_real_distribution<double> dist(-0.1, 0.1);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
        break;
      }
      case ParamSpec::kForgetBias: {
        // Gate order i, f, g, o; the forget gate starts open.
        std::size_t h = spec.cols / 4;
        for (std::size_t i = h; i < 2 * h; ++i) t[i] = 1.0;
        break;
      }
    }
    store.Add(spec.name, std::move(t));
  }
  return store;
}

Tensor StackFrames(const Tensor &features, int factor) {
  if (factor < 1) throw UsageError("downsample factor must be >= 1");
  const std::size_t t_len = features.rows(), d = features.cols();
  const std::size_t f = static_cast<std::size_t>(factor);
  if (f == 1) return Tensor({t_len, d}, std::vector<double>(features.data().begin(),
                                                           features.data().end()));
  const std::size_t out_rows = (t_len + f - 1) / f;
  Tensor out = Tensor::Matrix(out_rows, f * d);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto src = features.row(t);
    std::copy(src.begin(), src.end(),
              out.mutable_row(t / f).begin() + (t % f) * d);
  }
  return out;
}

Var EncodeGraph(Graph &g, const ModelConfig &c, const Tensor &features,
                Mode mode) {
  if (features.rows() < 1 || features.size() == 0) {
    throw UsageError("encoder input needs at least one frame");
  }
  if (features.cols() != static_cast<std::size_t>(c.feature_dim)) {
    throw UsageError("encoder input has " + std::to_string(features.cols()) +
                     " feature dims, model expects " +
                     std::to_string(c.feature_dim));
  }
  const bool causal = mode == Mode::kStreaming;
  Tensor stacked = StackFrames(features, c.encoder.downsample_factor);
  const std::size_t rows = stacked.rows();
  Var x = g.Constant(std::move(stacked));
  Var h = Linear(g, x, "enc.in.w", "enc.in.b");
  h = ad::Add(h, g.Constant(PositionalEncoding(rows, c.encoder.model_dim)));
  for (int b = 0; b < c.encoder.num_blocks; ++b) {
    Var a = LayerNorm(g, h, BlockName(b, "ln_att"));
    h = ad::Add(h, SelfAttention(g, c, b, a, causal));
    if (c.encoder.use_depthwise_conv) {
      Var cv = LayerNorm(g, h, BlockName(b, "ln_conv"));
      cv = ad::DepthwiseConv1d(cv, g.Param(BlockName(b, "conv.kernel")), causal);
      cv = ad::MatMul(ad::Relu(cv), g.Param(BlockName(b, "conv.pw")));
      h = ad::Add(h, cv);
    }
    Var f = LayerNorm(g, h, BlockName(b, "ln_ff"));
    f = ad::Relu(Linear(g, f, BlockName(b, "ff.w1"), BlockName(b, "ff.b1")));
    f = Linear(g, f, BlockName(b, "ff.w2"), BlockName(b, "ff.b2"));
    h = ad::Add(h, f);
  }
  return LayerNorm(g, h, "enc.final_ln");
}

Var PredictGraph(Graph &g, const ModelConfig &c, std::span<const int> prefix) {
  const std::size_t hd = c.pred_dim;
  for (int y : prefix) {
    if (y < 1 || y >= c.vocab_size) {
      throw UsageError("prediction input id " + std::to_string(y) +
                       " outside [1, " + std::to_string(c.vocab_size - 1) + "]");
    }
  }
  Var embed = g.Param("pred.embed");
  Var wx = g.Param("pred.lstm.wx");
  Var wh = g.Param("pred.lstm.wh");
  Var bias = g.Param("pred.lstm.b");
  Var h = g.Param("pred.start");
  Var cell = g.Constant(Tensor::Matrix(1, hd));
  std::vector<Var> states{h};
  for (int y : prefix) {
    Var x = ad::GatherRows(embed, {static_cast<std::size_t>(y)});
    Var z = ad::AddRow(ad::Add(ad::MatMul(x, wx), ad::MatMul(h, wh)), bias);
    Var in_gate = ad::Sigmoid(ad::SliceCols(z, 0, hd));
    Var forget = ad::Sigmoid(ad::SliceCols(z, hd, 2 * hd));
    Var cand = ad::Tanh(ad::SliceCols(z, 2 * hd, 3 * hd));
    Var out_gate = ad::Sigmoid(ad::SliceCols(z, 3 * hd, 4 * hd));
    cell = ad::Add(ad::Mul(forget, cell), ad::Mul(in_gate, cand));
    h = ad::Mul(out_gate, ad::Tanh(cell));
    states.push_back(h);
  }
  return states.size() == 1 ? states[0] : ad::ConcatRows(states);
}

Var JoinGraph(Graph &g, const ModelConfig &c, Var encodings, Var states) {
  if (encodings.cols() != static_cast<std::size_t>(c.encoder.model_dim)) {
    throw UsageError("joint: encoding width does not match model_dim");
  }
  if (states.cols() != static_cast<std::size_t>(c.pred_dim)) {
    throw UsageError("joint: prediction state width does not match pred_dim");
  }
  Var enc = ad::MatMul(encodings, g.Param("joint.enc.w"));
  Var pred = Linear(g, states, "joint.pred.w", "joint.b1");
  Var hidden = ad::Tanh(ad::PairSum(enc, pred));
  return Linear(g, hidden, "joint.out.w", "joint.out.b");
}

Tensor Encode(const ModelConfig &config, const Tensor &features, Mode mode,
              const ParameterStore &params) {
  Graph g(&params);
  return EncodeGraph(g, config, features, mode).value();
}

Tensor Predict(const ModelConfig &config, std::span<const int> prefix,
               const ParameterStore &params) {
  Graph g(&params);
  return PredictGraph(g, config, prefix).value();
}

std::vector<double> Join(const ModelConfig &config,
                         std::span<const double> encoding_frame,
                         std::span<const double> prediction_state,
                         const ParameterStore &params) {
  if (encoding_frame.size() != static_cast<std::size_t>(config.encoder.model_dim) ||
      prediction_state.size() != static_cast<std::size_t>(config.pred_dim)) {
    throw UsageError("joint: input dimensions do not match the model");
  }
  Graph g(&params);
  Var e = g.Constant(Tensor::Row({encoding_frame.begin(), encoding_frame.end()}));
  Var p = g.Constant(
      Tensor::Row({prediction_state.begin(), prediction_state.end()}));
  auto out = JoinGraph(g, config, e, p).value().data();
  return {out.begin(), out.end()};
}

PredictionStepper::PredictionStepper(const ModelConfig &config,
                                     const ParameterStore &params)
    : config_(config), params_(params) {
  auto start = params_.Get("pred.start").data();
  h_.assign(start.begin(), start.end());
  c_.assign(h_.size(), 0.0);
}

void PredictionStepper::Advance(int label) {
  if (label < 1 || label >= config_.vocab_size) {
    throw UsageError("prediction input id " + std::to_string(label) +
                     " outside vocabulary");
  }
  const std::size_t hd = config_.pred_dim, e = config_.embed_dim;
  const auto emb = params_.Get("pred.embed").row(static_cast<std::size_t>(label));
  const auto wx = params_.Get("pred.lstm.wx").data();
  const auto wh = params_.Get("pred.lstm.wh").data();
  const auto b = params_.Get("pred.lstm.b").data();
  std::vector<double> zx(4 * hd, 0.0), zh(4 * hd, 0.0);
  for (std::size_t p = 0; p < e; ++p) {
    if (emb[p] == 0.0) continue;
    for (std::size_t j = 0; j < 4 * hd; ++j) zx[j] += emb[p] * wx[p * 4 * hd + j];
  }
  for (std::size_t p = 0; p < hd; ++p) {
    if (h_[p] == 0.0) continue;
    for (std::size_t j = 0; j < 4 * hd; ++j) zh[j] += h_[p] * wh[p * 4 * hd + j];
  }
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (std::size_t j = 0; j < hd; ++j) {
    double zi = zx[j] + zh[j] + b[j];
    double zf = zx[hd + j] + zh[hd + j] + b[hd + j];
    double zg = zx[2 * hd + j] + zh[2 * hd + j] + b[2 * hd + j];
    double zo = zx[3 * hd + j] + zh[3 * hd + j] + b[3 * hd + j];
    c_[j] = sigmoid(zf) * c_[j] + sigmoid(zi) * std::tanh(zg);
    h_[j] = sigmoid(zo) * std::tanh(c_[j]);
  }
}

void SaveCheckpoint(const ParameterStore &params, const ModelConfig &config,
                    std::int64_t step, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw UsageError("cannot write " + (dir / "params.bin").string());
  for (const auto &name : params.names()) {
    const Tensor &t = params.Get(name);
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"offset", offset},
                       {"length", t.size()}});
    bin.write(reinterpret_cast<const char *>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
    offset += t.size();
  }
  bin.close();
  if (!bin) throw UsageError("failed writing " + (dir / "params.bin").string());
  nlohmann::json manifest{{"schema_version", kCheckpointSchemaVersion},
                          {"config", config},
                          {"step", step},
                          {"tensors", tensors}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw UsageError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

LoadedCheckpoint LoadCheckpoint(const std::filesystem::path &dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw LoadError("missing " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw LoadError(std::string("manifest.json is not valid JSON: ") + e.what());
  }
  if (manifest.value("schema_version", -1) != kCheckpointSchemaVersion) {
    throw LoadError("unsupported checkpoint schema version");
  }
  LoadedCheckpoint out;
  try {
    out.config = manifest.at("config").get<ModelConfig>();
    out.step = manifest.at("step").get<std::int64_t>();
  } catch (const nlohmann::json::exception &e) {
    throw LoadError(std::string("manifest.json: ") + e.what());
  }
  try {
    out.config.Validate();
  } catch (const ConfigError &e) {
    throw LoadError(std::string("manifest config: ") + e.what());
  }

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw LoadError("missing " + (dir / "params.bin").string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() % sizeof(double) != 0) {
    throw LoadError("params.bin size is not a multiple of 8 bytes");
  }
  const std::size_t total = bytes.size() / sizeof(double);

  const auto layout = ParameterLayout(out.config);
  const auto &entries = manifest.at("tensors");
  if (!entries.is_array() || entries.size() != layout.size()) {
    throw LoadError("manifest lists " + std::to_string(entries.size()) +
                    " tensors, config implies " + std::to_string(layout.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto &e = entries[i];
    const std::string name = e.value("name", std::string("<unnamed>"));
    const ParamSpec &spec = layout[i];
    if (name != spec.name) {
      throw LoadError("tensor '" + name + "' found where '" + spec.name +
                      "' was expected");
    }
    Shape shape;
    std::size_t offset = 0, length = 0;
    try {
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
      length = e.at("length").get<std::size_t>();
    } catch (const nlohmann::json::exception &) {
      throw LoadError("tensor '" + name + "' has a malformed manifest entry");
    }
    if (shape != Shape{spec.rows, spec.cols}) {
      throw LoadError("tensor '" + name + "' has shape " + ShapeToString(shape) +
                      ", config implies " +
                      ShapeToString(Shape{spec.rows, spec.cols}));
    }
    if (length != NumElements(shape) || offset != expected_offset ||
        offset + length > total) {
      throw LoadError("tensor '" + name + "' has an inconsistent offset/length");
    }
    std::vector<double> data(length);
    std::memcpy(data.data(), bytes.data() + offset * sizeof(double),
                length * sizeof(double));
    out.params.Add(name, Tensor(shape, std::move(data)));
    expected_offset += length;
  }
  if (expected_offset != total) {
    throw LoadError("params.bin holds " + std::to_string(total) +
                    " values, manifest accounts for " +
                    std::to_string(expected_offset));
  }
  out.params.set_step(out.step);
  return out;
}

}  // namespace ctxrnnt
