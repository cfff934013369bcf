// ctxrnnt/eval.h
//
// Greedy transducer decoding, token error rate, last-token emission latency
// and relative comparisons between two evaluation runs.

#ifndef CTXRNNT_EVAL_H_
#define CTXRNNT_EVAL_H_

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxrnnt/context.h"
#include "ctxrnnt/corpus.h"
#include "ctxrnnt/network.h"

namespace ctxrnnt {

inline constexpr int kDefaultMaxSymbolsPerFrame = 10;

struct DecodeResult {
  std::vector<int> tokens;
  // Encoder frame (window coordinates) at which each token was emitted.
  std::vector<std::size_t> emission_frames;
  Mode mode = Mode::kStreaming;
  EncoderRange range;  // encoder frames of the decoded segment
};

// Greedy decoding of one segment. `encodings` is the encoder output of the
// whole window in `mode`; pass it when several segments share a window.
DecodeResult GreedyDecode(const ModelConfig &config, const ContextWindow &window,
                          const Segment &segment, const ParameterStore &params,
                          Mode mode, int max_symbols_per_frame = kDefaultMaxSymbolsPerFrame);
DecodeResult GreedyDecodeEncoded(const ModelConfig &config, const Tensor &encodings,
                                 const ContextWindow &window, const Segment &segment,
                                 const ParameterStore &params, Mode mode,
                                 int max_symbols_per_frame = kDefaultMaxSymbolsPerFrame);

struct ErrorCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  // Throws UsageError when the reference is empty.
  double rate() const;
};

// Levenshtein alignment. Ties prefer substitution, then deletion.
ErrorCounts AlignTokens(std::span<const int> hypothesis, std::span<const int> reference);
// AlignTokens(...).rate().
double WordErrorRate(std::span<const int> hypothesis, std::span<const int> reference);

// (last emission frame - encoder frame of the segment end) * frame_ms * d.
// Throws UsageError on an empty hypothesis.
double LastTokenLatencyMs(const DecodeResult &result, double frame_ms,
                          int downsample_factor);

struct SegmentRow {
  std::string session_id;
  int utterance = 0;
  int segment = 0;
  std::vector<int> reference;
  std::vector<int> hypothesis;
  std::size_t errors = 0;
  std::optional<double> latency_ms;  // empty hypothesis has none
};

struct EvalReport {
  std::string run_id;
  Mode mode = Mode::kStreaming;
  int past = 0;
  int future = 0;
  double beta = 0.0;
  std::string checkpoint;

  std::vector<SegmentRow> rows;
  std::size_t segments = 0;
  std::size_t total_errors = 0;
  std::size_t total_reference = 0;
  std::size_t empty_hypotheses = 0;  // excluded from the latency mean
  double wer = 0.0;
  double ael_ms = 0.0;
};

struct EvalOptions {
  Mode mode = Mode::kStreaming;
  int past = 0;
  int future = 0;
  std::size_t separator_frames = 0;
  int max_symbols_per_frame = kDefaultMaxSymbolsPerFrame;
  double frame_ms = 10.0;
};

// Decodes every segment of every utterance. Streaming mode with future > 0
// is a UsageError: the student cannot see future utterances.
EvalReport Evaluate(const ModelConfig &config, const ParameterStore &params,
                    std::span<const Session> sessions, const EvalOptions &options);

// Recomputes wer / ael_ms / counts from rows.
void Aggregate(EvalReport &report);

struct RelativeMetrics {
  double rwerr_pct = 0.0;
  double raelr_ms = 0.0;
};

// rWERR = 100 (WER_base - WER_cand) / WER_base, rAELR = AEL_base - AEL_cand.
// Reports must cover the same segments; baseline WER must be positive.
RelativeMetrics CompareReports(const EvalReport &baseline, const EvalReport &candidate);

inline constexpr const char *kLatencyReference = "segment_end_frame";
inline constexpr const char *kReportHeader =
    "run_id,mode,past,future,beta,checkpoint,segments,wer,ael_ms";

// One summary row after a header comment naming the latency reference.
void WriteReportCsv(const EvalReport &report, const std::filesystem::path &path);
// Summary only (rows are not stored in the CSV). Throws ParseError.
EvalReport ReadReportCsv(const std::filesystem::path &path);
// One JSON object per segment, after a header object.
void WriteReportDetail(const EvalReport &report, const std::filesystem::path &path);

}  // namespace ctxrnnt

#endif  // CTXRNNT_EVAL_H_
