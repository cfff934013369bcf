#include "ctxrnnt/synthdata.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ctxrnnt/autodiff.h"
#include "ctxrnnt/errors.h"

namespace ctxrnnt {
namespace {

using nlohmann::json;

void RequireRange(int lo, int hi, int floor, const char *what) {
  if (lo < floor || hi < lo) {
    throw ConfigError(std::string(what) + " range [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "] is invalid");
  }
}

int Uniform(std::mt19937_64 &rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

double Bias(const SynthConfig &c, int latent) {
  return (latent - 0.5 * (c.num_latents - 1)) * c.shift;
}

}  // namespace

void SynthConfig::Validate() const {
  if (num_latents < 2) throw ConfigError("need at least two session latents");
  if (chain_length < 2) throw ConfigError("chain_length must be at least 2");
  if (num_labels < num_latents + chain_length ||
      (num_labels - num_latents) % chain_length != 0) {
    throw ConfigError("num_labels - num_latents must be a positive multiple of "
                      "chain_length");
  }
  // One shift axis, one axis per chain and one per anchor.
  const int axes = 1 + num_chains() + num_anchor_tokens();
  if (feature_dim < axes) {
    throw ConfigError("feature_dim " + std::to_string(feature_dim) +
                      " cannot hold " + std::to_string(num_latents) +
                      " latents with " + std::to_string(num_chains()) +
                      " chains; need " + std::to_string(axes));
  }
  if (!(shift > 0.0) || !(chain_separation > 0.0)) {
    throw ConfigError("shift and chain_separation must be positive");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw ConfigError("noise_std must be finite and non-negative");
  }
  if (!(anchor_probability >= 0.0 && anchor_probability <= 1.0)) {
    throw ConfigError("anchor_probability must lie in [0, 1]");
  }
  if (!(frame_ms > 0.0)) throw ConfigError("frame_ms must be positive");
  RequireRange(min_token_frames, max_token_frames, 1, "token frames");
  if (onset_frames < 0 || onset_frames >= min_token_frames) {
    throw ConfigError("onset_frames must be in [0, min_token_frames)");
  }
  RequireRange(0, max_gap_frames, 0, "gap frames");
  RequireRange(min_edge_frames, max_edge_frames, 0, "edge frames");
  RequireRange(min_utterances, max_utterances, 1, "utterances per session");
  RequireRange(min_segments, max_segments, 1, "segments per utterance");
  RequireRange(min_tokens_per_segment, max_tokens_per_segment, 1,
               "tokens per segment");
}

void to_json(json &j, const SynthConfig &c) {
  j = json{{"num_labels", c.num_labels},
           {"feature_dim", c.feature_dim},
           {"num_latents", c.num_latents},
           {"chain_length", c.chain_length},
           {"chain_separation", c.chain_separation},
           {"shift", c.shift},
           {"min_token_frames", c.min_token_frames},
           {"max_token_frames", c.max_token_frames},
           {"onset_frames", c.onset_frames},
           {"max_gap_frames", c.max_gap_frames},
           {"min_edge_frames", c.min_edge_frames},
           {"max_edge_frames", c.max_edge_frames},
           {"noise_std", c.noise_std},
           {"min_utterances", c.min_utterances},
           {"max_utterances", c.max_utterances},
           {"min_segments", c.min_segments},
           {"max_segments", c.max_segments},
           {"min_tokens_per_segment", c.min_tokens_per_segment},
           {"max_tokens_per_segment", c.max_tokens_per_segment},
           {"anchor_probability", c.anchor_probability},
           {"frame_ms", c.frame_ms},
           {"seed", c.seed}};
}

void from_json(const json &j, SynthConfig &c) {
  SynthConfig d;
  c.num_labels = j.value("num_labels", d.num_labels);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.num_latents = j.value("num_latents", d.num_latents);
  c.chain_length = j.value("chain_length", d.chain_length);
  c.chain_separation = j.value("chain_separation", d.chain_separation);
  c.shift = j.value("shift", d.shift);
  c.min_token_frames = j.value("min_token_frames", d.min_token_frames);
  c.max_token_frames = j.value("max_token_frames", d.max_token_frames);
  c.onset_frames = j.value("onset_frames", d.onset_frames);
  c.max_gap_frames = j.value("max_gap_frames", d.max_gap_frames);
  c.min_edge_frames = j.value("min_edge_frames", d.min_edge_frames);
  c.max_edge_frames = j.value("max_edge_frames", d.max_edge_frames);
  c.noise_std = j.value("noise_std", d.noise_std);
  c.min_utterances = j.value("min_utterances", d.min_utterances);
  c.max_utterances = j.value("max_utterances", d.max_utterances);
  c.min_segments = j.value("min_segments", d.min_segments);
  c.max_segments = j.value("max_segments", d.max_segments);
  c.min_tokens_per_segment = j.value("min_tokens_per_segment", d.min_tokens_per_segment);
  c.max_tokens_per_segment = j.value("max_tokens_per_segment", d.max_tokens_per_segment);
  c.anchor_probability = j.value("anchor_probability", d.anchor_probability);
  c.frame_ms = j.value("frame_ms", d.frame_ms);
  c.seed = j.value("seed", d.seed);
}

bool IsAnchorToken(const SynthConfig &c, int token) {
  return token > c.num_chains() * c.chain_length && token <= c.num_labels;
}

int AnchorTokenFor(const SynthConfig &c, int latent) {
  return c.num_chains() * c.chain_length + 1 + latent;
}

std::vector<double> CleanFrame(const SynthConfig &c, int token, int latent) {
  if (token < 1 || token > c.num_labels) {
    throw UsageError("token " + std::to_string(token) + " outside 1.." +
                     std::to_string(c.num_labels));
  }
  std::vector<double> f(c.feature_dim, 0.0);
  f[0] = Bias(c, latent);
  if (IsAnchorToken(c, token)) {
    const int k = token - AnchorTokenFor(c, 0);
    f[1 + c.num_chains() + k] = c.chain_separation;
  } else {
    const int chain = (token - 1) / c.chain_length;
    const int pos = (token - 1) % c.chain_length;
    f[1 + chain] = c.chain_separation;
    f[0] += pos * c.shift;
  }
  return f;
}

std::vector<double> CleanFrame(const SynthConfig &c, int token, int latent,
                               std::size_t frame_in_token) {
  std::vector<double> f = CleanFrame(c, token, latent);
  if (!IsAnchorToken(c, token) &&
      frame_in_token < static_cast<std::size_t>(c.onset_frames)) {
    f[0] = 0.0;
  }
  return f;
}

SynthSession GenerateSession(const SynthConfig &config, std::uint64_t session_seed) {
  config.Validate();
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed),
                    static_cast<std::uint32_t>(config.seed >> 32),
                    static_cast<std::uint32_t>(session_seed),
                    static_cast<std::uint32_t>(session_seed >> 32)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution anchor_coin(config.anchor_probability);

  SynthSession out;
  out.latent = Uniform(rng, 0, config.num_latents - 1);
  out.session.session_id = "s" + std::to_string(session_seed);
  const int n_utt = Uniform(rng, config.min_utterances, config.max_utterances);

  std::vector<bool> has_anchor(n_utt);
  bool any = false;
  for (int i = 0; i < n_utt; ++i) any |= (has_anchor[i] = anchor_coin(rng));
  if (!any) has_anchor[Uniform(rng, 0, n_utt - 1)] = true;

  const int chain_tokens = config.num_chains() * config.chain_length;
  for (int ui = 0; ui < n_utt; ++ui) {
    // Token sequence per segment.
    const int n_seg = Uniform(rng, config.min_segments, config.max_segments);
    std::vector<std::vector<int>> seg_tokens(n_seg);
    for (auto &toks : seg_tokens) {
      toks.resize(Uniform(rng, config.min_tokens_per_segment,
                          config.max_tokens_per_segment));
      for (int &t : toks) t = Uniform(rng, 1, chain_tokens);
    }
    if (has_anchor[ui]) {
      auto &toks = seg_tokens[Uniform(rng, 0, n_seg - 1)];
      toks[Uniform(rng, 0, static_cast<int>(toks.size()) - 1)] =
          AnchorTokenFor(config, out.latent);
    }

    // Frame layout: edge, segment, edge, segment, ..., edge. A segment
    // extends over the silence that follows it.
    std::vector<int> frame_token;  // 0 = silence
    std::vector<std::size_t> frame_offset;  // position within its token
    std::vector<TokenSpan> spans;
    std::vector<Segment> segments;
    auto silence = [&](int n) {
      frame_token.insert(frame_token.end(), n, 0);
      frame_offset.insert(frame_offset.end(), n, 0);
    };
    silence(Uniform(rng, config.min_edge_frames, config.max_edge_frames));
    for (const auto &toks : seg_tokens) {
      Segment seg;
      seg.start_frame = frame_token.size();
      for (std::size_t k = 0; k < toks.size(); ++k) {
        if (k > 0) silence(Uniform(rng, 0, config.max_gap_frames));
        TokenSpan span{toks[k], frame_token.size(), 0};
        const int len = Uniform(rng, config.min_token_frames, config.max_token_frames);
        frame_token.insert(frame_token.end(), len, toks[k]);
        for (int f = 0; f < len; ++f) frame_offset.push_back(f);
        span.end_frame = frame_token.size();
        spans.push_back(span);
      }
      silence(Uniform(rng, config.min_edge_frames, config.max_edge_frames));
      seg.end_frame = frame_token.size();
      seg.labels = toks;
      segments.push_back(std::move(seg));
    }

    Utterance u;
    u.session_id = out.session.session_id;
    u.index = ui;
    u.features = Tensor::Matrix(frame_token.size(), config.feature_dim);
    for (std::size_t t = 0; t < frame_token.size(); ++t) {
      auto row = u.features.mutable_row(t);
      if (frame_token[t] != 0) {
        auto clean = CleanFrame(config, frame_token[t], out.latent, frame_offset[t]);
        std::copy(clean.begin(), clean.end(), row.begin());
      }
      for (double &v : row) v += config.noise_std * noise(rng);
    }
    u.segments = std::move(segments);
    out.session.utterances.push_back(std::move(u));
    out.spans.push_back(std::move(spans));
  }
  return out;
}

std::vector<SynthSession> GenerateSessions(const SynthConfig &config,
                                           std::uint64_t first_session_seed,
                                           int count) {
  std::vector<SynthSession> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    out.push_back(GenerateSession(config, first_session_seed + i));
  }
  return out;
}

std::vector<Session> StripGroundTruth(const std::vector<SynthSession> &sessions) {
  std::vector<Session> out;
  out.reserve(sessions.size());
  for (const auto &s : sessions) out.push_back(s.session);
  return out;
}

double DesignedCollisionRate(const SynthConfig &config) {
  const double L = config.chain_length, K = config.num_latents;
  return 1.0 - (L + K - 1.0) / (L * K);
}

BayesOracleResult BayesTokenOracle(const SynthConfig &config,
                                   const std::vector<SynthSession> &sessions) {
  config.Validate();
  const double sigma = std::max(config.noise_std, 1e-3);
  const int chain_tokens = config.num_chains() * config.chain_length;
  const int K = config.num_latents;

  // Clean frames for every (token, latent) hypothesis.
  std::vector<std::vector<double>> clean(chain_tokens * K), onset(chain_tokens * K);
  for (int j = 0; j < chain_tokens; ++j) {
    for (int k = 0; k < K; ++k) {
      clean[j * K + k] = CleanFrame(config, j + 1, k);
      onset[j * K + k] = CleanFrame(config, j + 1, k, 0);
    }
  }

  BayesOracleResult r;
  double sum_without = 0.0, sum_with = 0.0;
  std::vector<double> ll(chain_tokens * K), marg(chain_tokens), cond(chain_tokens);
  for (const auto &s : sessions) {
    for (std::size_t ui = 0; ui < s.spans.size(); ++ui) {
      const Tensor &x = s.session.utterances[ui].features;
      for (const TokenSpan &span : s.spans[ui]) {
        if (IsAnchorToken(config, span.token)) continue;
        for (int h = 0; h < chain_tokens * K; ++h) {
          double acc = 0.0;
          for (std::size_t t = span.start_frame; t < span.end_frame; ++t) {
            auto row = x.row(t);
            const auto &mu =
                t - span.start_frame < static_cast<std::size_t>(config.onset_frames)
                    ? onset[h]
                    : clean[h];
            for (int d = 0; d < config.feature_dim; ++d) {
              const double e = row[d] - mu[d];
              acc += e * e;
            }
          }
          ll[h] = -acc / (2.0 * sigma * sigma);
        }
        for (int j = 0; j < chain_tokens; ++j) {
          marg[j] = LogSumExp(std::span<const double>(ll).subspan(j * K, K));
          cond[j] = ll[j * K + s.latent];
        }
        const double z_without = LogSumExp(marg);
        const double z_with = LogSumExp(cond);
        sum_without += std::exp(*std::max_element(marg.begin(), marg.end()) - z_without);
        sum_with += std::exp(*std::max_element(cond.begin(), cond.end()) - z_with);
        ++r.tokens;
      }
    }
  }
  if (r.tokens > 0) {
    r.accuracy_without_context = sum_without / r.tokens;
    r.accuracy_with_context = sum_with / r.tokens;
  }
  return r;
}

Dataset MakeDataset(const SynthConfig &config, std::vector<Session> sessions) {
  Dataset d;
  d.header.feature_dim = config.feature_dim;
  d.header.frame_ms = config.frame_ms;
  d.header.vocab_size = config.num_labels;
  d.sessions = std::move(sessions);
  return d;
}

void WriteDataset(const Dataset &dataset, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot open " + path.string() + " for writing");
  const DatasetHeader &h = dataset.header;
  out << json{{"schema", h.schema},
              {"feature_dim", h.feature_dim},
              {"frame_ms", h.frame_ms},
              {"vocab_size", h.vocab_size}}
             .dump()
      << '\n';
  for (const Session &s : dataset.sessions) {
    for (const Utterance &u : s.utterances) {
      json frames = json::array();
      for (std::size_t t = 0; t < u.num_frames(); ++t) {
        auto row = u.features.row(t);
        frames.push_back(std::vector<double>(row.begin(), row.end()));
      }
      json segs = json::array();
      for (const Segment &seg : u.segments) {
        segs.push_back(
            {{"start", seg.start_frame}, {"end", seg.end_frame}, {"labels", seg.labels}});
      }
      out << json{{"session_id", s.session_id},
                  {"index", u.index},
                  {"frames", std::move(frames)},
                  {"segments", std::move(segs)}}
                 .dump()
          << '\n';
    }
  }
  if (!out.flush()) throw UsageError("failed writing " + path.string());
}

namespace {

template <typename T>
T Field(const json &j, const char *key, int line) {
  if (!j.contains(key)) {
    throw ParseError(std::string("missing field \"") + key + "\"", line);
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception &) {
    throw ParseError(std::string("field \"") + key + "\" has the wrong type", line);
  }
}

Utterance ParseUtterance(const json &j, const DatasetHeader &h, int line) {
  Utterance u;
  u.session_id = Field<std::string>(j, "session_id", line);
  u.index = Field<int>(j, "index", line);
  const json &frames = j.contains("frames") ? j.at("frames") : json();
  if (!frames.is_array() || frames.empty()) {
    throw ParseError("\"frames\" must be a non-empty array", line);
  }
  u.features = Tensor::Matrix(frames.size(), h.feature_dim);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const json &row = frames[t];
    if (!row.is_array() || row.size() != static_cast<std::size_t>(h.feature_dim)) {
      throw ParseError("frame " + std::to_string(t) + " does not have " +
                           std::to_string(h.feature_dim) + " values",
                       line);
    }
    for (int d = 0; d < h.feature_dim; ++d) {
      if (!row[d].is_number()) {
        throw ParseError("frame " + std::to_string(t) + " holds a non-number", line);
      }
      u.features.at(t, d) = row[d].get<double>();
    }
  }
  const json &segs = j.contains("segments") ? j.at("segments") : json();
  if (!segs.is_array()) throw ParseError("\"segments\" must be an array", line);
  for (const json &sj : segs) {
    Segment seg;
    seg.start_frame = Field<std::size_t>(sj, "start", line);
    seg.end_frame = Field<std::size_t>(sj, "end", line);
    seg.labels = Field<std::vector<int>>(sj, "labels", line);
    if (seg.start_frame >= seg.end_frame || seg.end_frame > u.num_frames()) {
      throw ParseError("segment [" + std::to_string(seg.start_frame) + ", " +
                           std::to_string(seg.end_frame) + ") outside " +
                           std::to_string(u.num_frames()) + " frames",
                       line);
    }
    for (int l : seg.labels) {
      if (l < 1 || l > h.vocab_size) {
        throw ParseError("label " + std::to_string(l) + " outside 1.." +
                             std::to_string(h.vocab_size),
                         line);
      }
    }
    u.segments.push_back(std::move(seg));
  }
  return u;
}

}  // namespace

Dataset ReadDataset(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  Dataset d;
  std::string text;
  int line = 0;
  bool have_header = false;
  std::set<std::string> finished;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty() && in.peek() == std::char_traits<char>::eof()) break;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error &e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    if (!j.is_object()) throw ParseError("line is not a JSON object", line);
    if (!have_header) {
      if (!j.contains("schema")) throw ParseError("missing header line", line);
      DatasetHeader &h = d.header;
      h.schema = Field<int>(j, "schema", line);
      h.feature_dim = Field<int>(j, "feature_dim", line);
      h.frame_ms = Field<double>(j, "frame_ms", line);
      h.vocab_size = Field<int>(j, "vocab_size", line);
      if (h.schema != 1) {
        throw ParseError("unsupported schema " + std::to_string(h.schema), line);
      }
      if (h.feature_dim < 1 || h.vocab_size < 1 || !(h.frame_ms > 0.0)) {
        throw ParseError("header values must be positive", line);
      }
      have_header = true;
      continue;
    }
    Utterance u = ParseUtterance(j, d.header, line);
    if (d.sessions.empty() || d.sessions.back().session_id != u.session_id) {
      if (!d.sessions.empty()) finished.insert(d.sessions.back().session_id);
      if (finished.count(u.session_id)) {
        throw ParseError("session " + u.session_id + " is not contiguous", line);
      }
      d.sessions.push_back(Session{u.session_id, {}});
    } else if (u.index <= d.sessions.back().utterances.back().index) {
      throw ParseError("utterance index " + std::to_string(u.index) +
                           " is not ascending in session " + u.session_id,
                       line);
    }
    d.sessions.back().utterances.push_back(std::move(u));
  }
  if (!have_header) throw ParseError("missing header line", 1);
  return d;
}

}  // namespace ctxrnnt
