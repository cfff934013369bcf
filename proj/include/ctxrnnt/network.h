// ctxrnnt/network.h
//
// Dual-mode transducer network. One ParameterStore holds every weight; the
// encoder reads it in either streaming (causal) or non-streaming (full
// context) mode.

#ifndef CTXRNNT_NETWORK_H_
#define CTXRNNT_NETWORK_H_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ctxrnnt/autodiff.h"
#include "ctxrnnt/tensor.h"
#include "json.hpp"

namespace ctxrnnt {

enum class Mode { kStreaming, kNonStreaming };

const char *ModeName(Mode mode);
// Accepts "streaming" / "nonstreaming". Throws UsageError otherwise.
Mode ParseMode(const std::string &name);

struct EncoderConfig {
  int num_blocks = 4;
  int model_dim = 64;
  int num_heads = 4;
  int feedforward_dim = 128;
  bool use_depthwise_conv = false;
  int conv_kernel = 5;
  int downsample_factor = 1;

  // Throws ConfigError on a violated invariant.
  void Validate() const;
};

struct ModelConfig {
  int feature_dim = 16;
  // Includes blank at index 0.
  int vocab_size = 13;
  EncoderConfig encoder;
  int embed_dim = 32;
  int pred_dim = 64;
  int joint_dim = 64;

  void Validate() const;
};

void to_json(nlohmann::json &j, const EncoderConfig &c);
void from_json(const nlohmann::json &j, EncoderConfig &c);
void to_json(nlohmann::json &j, const ModelConfig &c);
void from_json(const nlohmann::json &j, ModelConfig &c);

// Registers every parameter of the model with a deterministic random
// initialization drawn from `seed`.
ParameterStore InitParameters(const ModelConfig &config, std::uint64_t seed);

// Stacks `factor` consecutive frames into one row; the tail is zero padded.
// Output has ceil(T / factor) rows and factor * D columns.
Tensor StackFrames(const Tensor &features, int factor);

// Encoder on a graph. `features` is T x feature_dim; result is
// ceil(T / downsample_factor) x model_dim.
Var EncodeGraph(Graph &g, const ModelConfig &config, const Tensor &features,
                Mode mode);

// Prediction network on a graph: (prefix.size() + 1) x pred_dim. Row 0 is the
// learned start state; row j depends on prefix[0 .. j-1] only.
Var PredictGraph(Graph &g, const ModelConfig &config, std::span<const int> prefix);

// Joint network over every (encoder frame, prediction state) pair:
// (T * U1) x vocab_size logits, row t * U1 + u.
Var JoinGraph(Graph &g, const ModelConfig &config, Var encodings, Var states);

// Forward-only conveniences; they build a throwaway graph over `params`.
Tensor Encode(const ModelConfig &config, const Tensor &features, Mode mode,
              const ParameterStore &params);
Tensor Predict(const ModelConfig &config, std::span<const int> prefix,
               const ParameterStore &params);
std::vector<double> Join(const ModelConfig &config,
                         std::span<const double> encoding_frame,
                         std::span<const double> prediction_state,
                         const ParameterStore &params);

// Incremental prediction network for decoding.
class PredictionStepper {
 public:
  PredictionStepper(const ModelConfig &config, const ParameterStore &params);

  // Output of the current state (starts at the learned start state).
  std::span<const double> output() const { return h_; }
  // Feeds one label and advances the recurrent state.
  void Advance(int label);

 private:
  ModelConfig config_;
  const ParameterStore &params_;
  std::vector<double> h_;
  std::vector<double> c_;
};

// Checkpoint directory: manifest.json plus params.bin (little-endian doubles
// concatenated in manifest order).
inline constexpr int kCheckpointSchemaVersion = 1;

void SaveCheckpoint(const ParameterStore &params, const ModelConfig &config,
                    std::int64_t step, const std::filesystem::path &dir);

struct LoadedCheckpoint {
  ModelConfig config;
  ParameterStore params;
  std::int64_t step = 0;
};

// Throws LoadError naming the offending tensor on any mismatch between the
// manifest, the binary payload and the shapes implied by the stored config.
LoadedCheckpoint LoadCheckpoint(const std::filesystem::path &dir);

}  // namespace ctxrnnt

#endif  // CTXRNNT_NETWORK_H_
