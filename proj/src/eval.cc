#include "ctxrnnt/eval.h"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "ctxrnnt/errors.h"
#include "json.hpp"

namespace ctxrnnt {
namespace {

std::string FormatDouble(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string CsvField(const std::string &s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> SplitCsvLine(const std::string &line, int line_no) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c != '\r') {
      fields.back() += c;
    }
  }
  if (quoted) throw ParseError("unterminated quote", line_no);
  return fields;
}

}  // namespace

DecodeResult GreedyDecodeEncoded(const ModelConfig &config, const Tensor &encodings,
                                 const ContextWindow &window, const Segment &segment,
                                 const ParameterStore &params, Mode mode,
                                 int max_symbols_per_frame) {
  if (max_symbols_per_frame < 1) {
    throw UsageError("max_symbols_per_frame must be at least 1, got " +
                     std::to_string(max_symbols_per_frame));
  }
  if (mode == Mode::kStreaming && window.future_used > 0) {
    throw UsageError("student cannot see future utterances");
  }
  DecodeResult r;
  r.mode = mode;
  r.range = SegmentEncoderRange(window, segment, config.encoder.downsample_factor);
  if (r.range.last >= encodings.rows()) {
    throw UsageError("encodings have " + std::to_string(encodings.rows()) +
                     " rows, segment needs " + std::to_string(r.range.last + 1));
  }
  PredictionStepper stepper(config, params);
  for (std::size_t t = r.range.first; t <= r.range.last; ++t) {
    for (int emitted = 0; emitted < max_symbols_per_frame; ++emitted) {
      std::vector<double> logits = Join(config, encodings.row(t), stepper.output(), params);
      const int best = static_cast<int>(
          std::max_element(logits.begin(), logits.end()) - logits.begin());
      if (best == 0) break;
      r.tokens.push_back(best);
      r.emission_frames.push_back(t);
      stepper.Advance(best);
    }
  }
  return r;
}

DecodeResult GreedyDecode(const ModelConfig &config, const ContextWindow &window,
                          const Segment &segment, const ParameterStore &params,
                          Mode mode, int max_symbols_per_frame) {
  if (mode == Mode::kStreaming && window.future_used > 0) {
    throw UsageError("student cannot see future utterances");
  }
  Tensor enc = Encode(config, window.features, mode, params);
  return GreedyDecodeEncoded(config, enc, window, segment, params, mode,
                             max_symbols_per_frame);
}

double ErrorCounts::rate() const {
  if (reference_length == 0) {
    throw UsageError("error rate is undefined for an empty reference");
  }
  return static_cast<double>(errors()) / static_cast<double>(reference_length);
}

ErrorCounts AlignTokens(std::span<const int> hyp, std::span<const int> ref) {
  const std::size_t n = ref.size(), m = hyp.size();
  // cost[i][j]: edit distance between ref[0..i) and hyp[0..j).
  std::vector<std::size_t> cost((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t & {
    return cost[i * (m + 1) + j];
  };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1] ? 1 : 0);
      at(i, j) = std::min({sub, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  ErrorCounts c;
  c.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        at(i, j) == at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1] ? 1 : 0)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

double WordErrorRate(std::span<const int> hypothesis, std::span<const int> reference) {
  return AlignTokens(hypothesis, reference).rate();
}

double LastTokenLatencyMs(const DecodeResult &result, double frame_ms,
                          int downsample_factor) {
  if (result.emission_frames.empty()) {
    throw UsageError("latency is undefined for an empty hypothesis");
  }
  const double delta = static_cast<double>(result.emission_frames.back()) -
                       static_cast<double>(result.range.last);
  return delta * frame_ms * downsample_factor;
}

EvalReport Evaluate(const ModelConfig &config, const ParameterStore &params,
                    std::span<const Session> sessions, const EvalOptions &options) {
  if (options.mode == Mode::kStreaming && options.future > 0) {
    throw UsageError("student cannot see future utterances");
  }
  EvalReport report;
  report.mode = options.mode;
  report.past = options.past;
  report.future = options.future;
  const int d = config.encoder.downsample_factor;
  for (const Session &s : sessions) {
    for (std::size_t i = 0; i < s.utterances.size(); ++i) {
      const Utterance &u = s.utterances[i];
      ContextWindow w =
          options.mode == Mode::kStreaming
              ? StudentWindow(s.utterances, i, options.past, options.separator_frames)
              : BuildContextWindow(s.utterances, i, options.past, options.future,
                                   options.separator_frames);
      Tensor enc = Encode(config, w.features, options.mode, params);
      for (std::size_t k = 0; k < u.segments.size(); ++k) {
        const Segment &seg = u.segments[k];
        DecodeResult dr = GreedyDecodeEncoded(config, enc, w, seg, params, options.mode,
                                              options.max_symbols_per_frame);
        SegmentRow row;
        row.session_id = s.session_id;
        row.utterance = u.index;
        row.segment = static_cast<int>(k);
        row.reference = seg.labels;
        row.hypothesis = dr.tokens;
        row.errors = AlignTokens(dr.tokens, seg.labels).errors();
        if (!dr.tokens.empty()) row.latency_ms = LastTokenLatencyMs(dr, options.frame_ms, d);
        report.rows.push_back(std::move(row));
      }
    }
  }
  Aggregate(report);
  return report;
}

void Aggregate(EvalReport &report) {
  report.segments = report.rows.size();
  report.total_errors = 0;
  report.total_reference = 0;
  report.empty_hypotheses = 0;
  double latency_sum = 0.0;
  std::size_t latency_n = 0;
  for (const SegmentRow &r : report.rows) {
    report.total_errors += r.errors;
    report.total_reference += r.reference.size();
    if (r.latency_ms) {
      latency_sum += *r.latency_ms;
      ++latency_n;
    } else {
      ++report.empty_hypotheses;
    }
  }
  report.wer = report.total_reference == 0
                   ? 0.0
                   : static_cast<double>(report.total_errors) / report.total_reference;
  report.ael_ms = latency_n == 0 ? 0.0 : latency_sum / latency_n;
}

RelativeMetrics CompareReports(const EvalReport &baseline, const EvalReport &candidate) {
  if (baseline.segments != candidate.segments) {
    throw UsageError("reports cover different segment sets (" +
                     std::to_string(baseline.segments) + " vs " +
                     std::to_string(candidate.segments) + " segments)");
  }
  if (!baseline.rows.empty() && !candidate.rows.empty()) {
    for (std::size_t i = 0; i < baseline.rows.size(); ++i) {
      const SegmentRow &a = baseline.rows[i], &b = candidate.rows[i];
      if (a.session_id != b.session_id || a.utterance != b.utterance ||
          a.segment != b.segment || a.reference != b.reference) {
        throw UsageError("reports cover different segment sets (row " +
                         std::to_string(i) + ")");
      }
    }
  }
  if (!(baseline.wer > 0.0)) {
    throw UsageError("rWERR is undefined for a baseline WER of zero");
  }
  RelativeMetrics m;
  m.rwerr_pct = 100.0 * (baseline.wer - candidate.wer) / baseline.wer;
  m.raelr_ms = baseline.ael_ms - candidate.ael_ms;
  return m;
}

void WriteReportCsv(const EvalReport &r, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot open " + path.string() + " for writing");
  out << "# latency_reference=" << kLatencyReference << '\n';
  out << kReportHeader << '\n';
  out << CsvField(r.run_id) << ',' << ModeName(r.mode) << ',' << r.past << ','
      << r.future << ',' << FormatDouble(r.beta) << ',' << CsvField(r.checkpoint) << ','
      << r.segments << ',' << FormatDouble(r.wer) << ',' << FormatDouble(r.ael_ms)
      << '\n';
  if (!out.flush()) throw UsageError("failed writing " + path.string());
}

EvalReport ReadReportCsv(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != kReportHeader) {
        throw ParseError("expected report header '" + std::string(kReportHeader) + "'",
                         line_no);
      }
      header_seen = true;
      continue;
    }
    auto f = SplitCsvLine(line, line_no);
    if (f.size() != 9) {
      throw ParseError("expected 9 fields, got " + std::to_string(f.size()), line_no);
    }
    EvalReport r;
    try {
      r.run_id = f[0];
      r.mode = ParseMode(f[1]);
      r.past = std::stoi(f[2]);
      r.future = std::stoi(f[3]);
      r.beta = std::stod(f[4]);
      r.checkpoint = f[5];
      r.segments = std::stoul(f[6]);
      r.wer = std::stod(f[7]);
      r.ael_ms = std::stod(f[8]);
    } catch (const std::exception &e) {
      throw ParseError(std::string("bad report field: ") + e.what(), line_no);
    }
    return r;
  }
  throw ParseError(header_seen ? "report has no data row" : "missing report header",
                   line_no + 1);
}

void WriteReportDetail(const EvalReport &r, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot open " + path.string() + " for writing");
  out << nlohmann::json{{"run_id", r.run_id},
                        {"mode", ModeName(r.mode)},
                        {"past", r.past},
                        {"future", r.future},
                        {"latency_reference", kLatencyReference},
                        {"empty_hypotheses", r.empty_hypotheses}}
             .dump()
      << '\n';
  for (const SegmentRow &row : r.rows) {
    nlohmann::json j{{"session_id", row.session_id},
                     {"utterance", row.utterance},
                     {"segment", row.segment},
                     {"reference", row.reference},
                     {"hypothesis", row.hypothesis},
                     {"errors", row.errors}};
    j["latency_ms"] = row.latency_ms ? nlohmann::json(*row.latency_ms) : nlohmann::json();
    out << j.dump() << '\n';
  }
}

}  // namespace ctxrnnt
