// ctxrnnt/context.h
//
// Assembly of contextual-utterance windows and slicing of per-segment
// encodings out of the encoded window.

#ifndef CTXRNNT_CONTEXT_H_
#define CTXRNNT_CONTEXT_H_

#include <cstddef>
#include <span>

#include "ctxrnnt/corpus.h"
#include "ctxrnnt/tensor.h"

namespace ctxrnnt {

// Up to P past utterances, the current one, and up to F future utterances,
// concatenated along time.
struct ContextWindow {
  Tensor features;  // (sum of included lengths + separators) x D
  std::size_t current_offset = 0;
  std::size_t current_length = 0;
  int past_used = 0;
  int future_used = 0;
  std::size_t separator_frames = 0;

  std::size_t num_frames() const { return features.rows(); }
};

// Missing neighbours are clamped, not padded. `separator_frames` zero frames
// are placed between consecutive utterances.
ContextWindow BuildContextWindow(std::span<const Utterance> session,
                                 std::size_t index, int past, int future,
                                 std::size_t separator_frames = 0);

// Window the streaming encoder may see: past context and the current
// utterance, never anything after it.
ContextWindow StudentWindow(std::span<const Utterance> session,
                            std::size_t index, int past,
                            std::size_t separator_frames = 0);

// Inclusive range of encoder frames covering a segment of the current
// utterance.
struct EncoderRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last - first + 1; }
};

// Throws UsageError if the segment is not inside the current utterance.
EncoderRange SegmentEncoderRange(const ContextWindow &window,
                                 const Segment &segment, int downsample_factor);

// Rows of `encodings` selected by SegmentEncoderRange.
Tensor SliceSegmentEncodings(const Tensor &encodings, const ContextWindow &window,
                             const Segment &segment, int downsample_factor);

}  // namespace ctxrnnt

#endif  // CTXRNNT_CONTEXT_H_
