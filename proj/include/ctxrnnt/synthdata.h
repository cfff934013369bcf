// ctxrnnt/synthdata.h
//
// Synthetic contextual sessions. Every session draws one latent k; each token
// frame is prototype(token) + bias(k) + gaussian noise, and gap frames are
// pure noise.
//
// Non-anchor tokens form chains: token i of a chain sits at i * shift along
// the first feature axis and bias(k) moves along the same axis by k * shift,
// so token i under latent k looks exactly like token i + 1 under latent
// k - 1. Without knowing k these tokens are ambiguous. Anchor tokens, one per
// latent, are unambiguous and reveal k; they appear in some utterances of a
// session, so seeing more of the session raises the chance of seeing one.

#ifndef CTXRNNT_SYNTHDATA_H_
#define CTXRNNT_SYNTHDATA_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctxrnnt/corpus.h"
#include "json.hpp"

namespace ctxrnnt {

struct SynthConfig {
  int num_labels = 12;  // non-blank tokens; model vocabulary is num_labels + 1
  int feature_dim = 16;
  int num_latents = 4;
  int chain_length = 4;
  double chain_separation = 3.0;  // distance between chain / anchor centers
  double shift = 1.0;             // step between chain positions and latents
  int min_token_frames = 4;
  int max_token_frames = 7;
  // Leading frames of a chain token that show only its chain: position and
  // latent become visible after them, so a causal reader has to wait.
  int onset_frames = 2;
  int max_gap_frames = 2;  // silence between tokens of a segment
  int min_edge_frames = 2;  // silence before / after segments
  int max_edge_frames = 4;
  double noise_std = 0.25;
  int min_utterances = 3;
  int max_utterances = 5;
  int min_segments = 1;
  int max_segments = 2;
  int min_tokens_per_segment = 2;
  int max_tokens_per_segment = 4;
  double anchor_probability = 0.35;  // per utterance; one is always forced
  double frame_ms = 10.0;
  std::uint64_t seed = 1;

  int num_anchor_tokens() const { return num_latents; }
  int num_chains() const { return (num_labels - num_latents) / chain_length; }
  int vocab_size() const { return num_labels + 1; }

  // Throws ConfigError when the construction is impossible.
  void Validate() const;
};

void to_json(nlohmann::json &j, const SynthConfig &c);
void from_json(const nlohmann::json &j, SynthConfig &c);

// Where a token landed in an utterance.
struct TokenSpan {
  int token = 0;
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;
};

// A generated session plus the ground truth the generator used.
struct SynthSession {
  Session session;
  int latent = 0;
  std::vector<std::vector<TokenSpan>> spans;  // per utterance
};

// Token layout helpers. Tokens are 1-based ids.
bool IsAnchorToken(const SynthConfig &c, int token);
int AnchorTokenFor(const SynthConfig &c, int latent);
// Noise-free frame of `token` under `latent`, past the onset.
std::vector<double> CleanFrame(const SynthConfig &c, int token, int latent);
// Same at a given frame offset within the token.
std::vector<double> CleanFrame(const SynthConfig &c, int token, int latent,
                               std::size_t frame_in_token);

// Deterministic in (config.seed, session_seed) only.
SynthSession GenerateSession(const SynthConfig &config, std::uint64_t session_seed);

std::vector<SynthSession> GenerateSessions(const SynthConfig &config,
                                           std::uint64_t first_session_seed,
                                           int count);

std::vector<Session> StripGroundTruth(const std::vector<SynthSession> &sessions);

// Error a context-free Bayes classifier must make on chain tokens when every
// token position and latent is equally likely: 1 - (L + K - 1) / (L * K).
double DesignedCollisionRate(const SynthConfig &config);

struct BayesOracleResult {
  double accuracy_without_context = 0.0;  // expected accuracy, chain tokens
  double accuracy_with_context = 0.0;     // latent known from the session
  std::size_t tokens = 0;
};

// Closed-form Gaussian posterior over tokens from each token's own frames,
// with and without knowledge of the session latent.
BayesOracleResult BayesTokenOracle(const SynthConfig &config,
                                   const std::vector<SynthSession> &sessions);

// Dataset file: JSON Lines. Line 1 is the header; each further line is one
// utterance; sessions are contiguous and ordered by index.
struct DatasetHeader {
  int schema = 1;
  int feature_dim = 0;
  double frame_ms = 10.0;
  int vocab_size = 0;  // non-blank labels; ids run 1..vocab_size
};

struct Dataset {
  DatasetHeader header;
  std::vector<Session> sessions;
};

Dataset MakeDataset(const SynthConfig &config, std::vector<Session> sessions);

void WriteDataset(const Dataset &dataset, const std::filesystem::path &path);
// Throws ParseError carrying the 1-based line number of the first problem.
Dataset ReadDataset(const std::filesystem::path &path);

}  // namespace ctxrnnt

#endif  // CTXRNNT_SYNTHDATA_H_
