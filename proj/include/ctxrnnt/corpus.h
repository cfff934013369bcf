// ctxrnnt/corpus.h
//
// Utterances, labeled segments and sessions.

#ifndef CTXRNNT_CORPUS_H_
#define CTXRNNT_CORPUS_H_

#include <cstddef>
#include <string>
#include <vector>

#include "ctxrnnt/tensor.h"

namespace ctxrnnt {

// Labeled span [start_frame, end_frame) of feature frames.
struct Segment {
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;
  std::vector<int> labels;

  bool operator==(const Segment &) const = default;
};

struct Utterance {
  std::string session_id;
  int index = 0;  // position within the session
  Tensor features;  // T x D
  std::vector<Segment> segments;

  std::size_t num_frames() const { return features.rows(); }
};

// Utterances in temporal order.
struct Session {
  std::string session_id;
  std::vector<Utterance> utterances;
};

// Exact equality including every feature value.
bool BitwiseEqual(const Utterance &a, const Utterance &b);
bool BitwiseEqual(const Session &a, const Session &b);

}  // namespace ctxrnnt

#endif  // CTXRNNT_CORPUS_H_
