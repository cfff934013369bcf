// ctxrnnt/context.cc

#include "ctxrnnt/context.h"

#include <algorithm>
#include <cstring>

#include "ctxrnnt/errors.h"

namespace ctxrnnt {

bool BitwiseEqual(const Utterance &a, const Utterance &b) {
  return a.session_id == b.session_id && a.index == b.index &&
         a.segments == b.segments && a.features.BitwiseEquals(b.features);
}

bool BitwiseEqual(const Session &a, const Session &b) {
  if (a.session_id != b.session_id ||
      a.utterances.size() != b.utterances.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    if (!BitwiseEqual(a.utterances[i], b.utterances[i])) return false;
  }
  return true;
}

ContextWindow BuildContextWindow(std::span<const Utterance> session,
                                 std::size_t index, int past, int future,
                                 std::size_t separator_frames) {
  if (index >= session.size()) {
    throw UsageError("utterance index " + std::to_string(index) +
                     " outside session of " + std::to_string(session.size()));
  }
  if (past < 0 || future < 0) {
    throw UsageError("context counts must be non-negative");
  }
  const std::size_t first =
      index - std::min<std::size_t>(static_cast<std::size_t>(past), index);
  const std::size_t last = std::min<std::size_t>(
      index + static_cast<std::size_t>(future), session.size() - 1);

  const std::size_t d = session[index].features.cols();
  std::size_t total = 0;
  for (std::size_t i = first; i <= last; ++i) {
    if (session[i].features.cols() != d) {
      throw UsageError("utterances of a session differ in feature dimension");
    }
    total += session[i].num_frames();
  }
  total += separator_frames * (last - first);

  ContextWindow w;
  w.features = Tensor::Matrix(total, d);
  w.past_used = static_cast<int>(index - first);
  w.future_used = static_cast<int>(last - index);
  w.separator_frames = separator_frames;
  std::size_t row = 0;
  for (std::size_t i = first; i <= last; ++i) {
    if (i > first) row += separator_frames;
    if (i == index) {
      w.current_offset = row;
      w.current_length = session[i].num_frames();
    }
    auto src = session[i].features.data();
    std::copy(src.begin(), src.end(), w.features.mutable_data().begin() + row * d);
    row += session[i].num_frames();
  }
  return w;
}

ContextWindow StudentWindow(std::span<const Utterance> session,
                            std::size_t index, int past,
                            std::size_t separator_frames) {
  return BuildContextWindow(session, index, past, 0, separator_frames);
}

EncoderRange SegmentEncoderRange(const ContextWindow &window,
                                 const Segment &segment, int downsample_factor) {
  if (downsample_factor < 1) throw UsageError("downsample factor must be >= 1");
  if (segment.start_frame >= segment.end_frame ||
      segment.end_frame > window.current_length) {
    throw UsageError("segment [" + std::to_string(segment.start_frame) + ", " +
                     std::to_string(segment.end_frame) +
                     ") is outside the current utterance of " +
                     std::to_string(window.current_length) + " frames");
  }
  const std::size_t d = static_cast<std::size_t>(downsample_factor);
  return EncoderRange{(window.current_offset + segment.start_frame) / d,
                      (window.current_offset + segment.end_frame - 1) / d};
}

Tensor SliceSegmentEncodings(const Tensor &encodings, const ContextWindow &window,
                             const Segment &segment, int downsample_factor) {
  EncoderRange r = SegmentEncoderRange(window, segment, downsample_factor);
  if (r.last >= encodings.rows()) {
    throw UsageError("segment maps past the end of the encoded window");
  }
  const std::size_t m = encodings.cols();
  auto src = encodings.data().subspan(r.first * m, r.size() * m);
  return Tensor({r.size(), m}, std::vector<double>(src.begin(), src.end()));
}

}  // namespace ctxrnnt
