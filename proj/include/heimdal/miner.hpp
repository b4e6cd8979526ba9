#pragma once

// Training segments of exactly R frames mined around keyword occurrences:
// one positive (keyword fully inside, ending on a label-1 frame) and three
// negative kinds (ending inside the keyword, starting inside it, or lying
// wholly after it).

#include <array>
#include <cstdio>
#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "heimdal/alignment.hpp"
#include "heimdal/audio.hpp"
#include "heimdal/mfcc.hpp"
#include "heimdal/random.hpp"

namespace heimdal {

enum class SegmentKind { Positive, Neg1, Neg2, Neg3 };

inline std::string to_string(SegmentKind k) {
  switch (k) {
    case SegmentKind::Positive: return "positive";
    case SegmentKind::Neg1: return "neg1";
    case SegmentKind::Neg2: return "neg2";
    case SegmentKind::Neg3: return "neg3";
  }
  return "?";
}

struct Segment {
  std::string utt_id;
  SegmentKind kind = SegmentKind::Positive;
  int start = 0;  // may be negative (left padding)
  int end = 0;    // inclusive; may exceed the last frame (right padding)
  int label = 0;
  double offset = 0;  // (end - S) / R, positives only
  int left_pad = 0;
  int right_pad = 0;
};

// Inclusive index range; empty when lo > hi.
struct IndexRange {
  int lo, hi;
  bool empty() const { return lo > hi; }
  int size() const { return empty() ? 0 : hi - lo + 1; }
};

inline constexpr int kNegativesPerUtterance = 20;
inline constexpr std::array<int, 3> kNegativeQuota = {7, 7, 6};

// End frames f with label(f) = 1, f >= E and f - R + 1 <= S.
inline std::vector<int> positive_ends(const std::vector<int>& labels, const KeywordSpan& span, int R) {
  std::vector<int> out;
  const int last = std::min(static_cast<int>(labels.size()) - 1, span.S + R - 1);
  for (int f = span.E; f <= last; ++f)
    if (labels[f] == 1) out.push_back(f);
  return out;
}

// Kind 1: segment end. Kind 2 and 3: segment start. Kind-2 windows must
// also reach past E, which only binds when R is shorter than the keyword.
inline IndexRange negative_range(const Alignment& a, const KeywordSpec& kw, const KeywordSpan& span, int kind, int R) {
  const int k = static_cast<int>(kw.phones.size());
  switch (kind) {
    case 1: return {span.S, a.phones[span.first_phone + k - 2].end};
    case 2: return {std::max(a.phones[span.first_phone + 1].start, span.E - R + 2), span.E};
    case 3: return {span.E_hat + 1, a.total_frames() - 1};
  }
  throw UsageError("negative kind must be 1, 2 or 3");
}

namespace detail {

inline Segment window(const std::string& utt, SegmentKind kind, int start, int R, int total) {
  Segment s;
  s.utt_id = utt;
  s.kind = kind;
  s.start = start;
  s.end = start + R - 1;
  s.left_pad = std::max(0, -s.start);
  s.right_pad = std::max(0, s.end - (total - 1));
  return s;
}

}  // namespace detail

inline std::optional<Segment> mine_positive(const Alignment& a, const std::vector<int>& labels, const KeywordSpan& span,
                                            int R, Rng& rng) {
  const std::vector<int> ends = positive_ends(labels, span, R);
  if (ends.empty()) return std::nullopt;
  const int e = ends[uniform_int(rng, 0, static_cast<int>(ends.size()) - 1)];
  Segment s = detail::window(a.utt_id, SegmentKind::Positive, e - R + 1, R, a.total_frames());
  s.label = 1;
  s.offset = static_cast<double>(e - span.S) / R;
  return s;
}

inline std::optional<Segment> mine_negative(const Alignment& a, const KeywordSpec& kw, const KeywordSpan& span, int R,
                                            int kind, Rng& rng) {
  const IndexRange r = negative_range(a, kw, span, kind, R);
  if (r.empty()) return std::nullopt;
  const int idx = uniform_int(rng, r.lo, r.hi);
  const int start = kind == 1 ? idx - R + 1 : idx;
  const SegmentKind k = kind == 1 ? SegmentKind::Neg1 : kind == 2 ? SegmentKind::Neg2 : SegmentKind::Neg3;
  return detail::window(a.utt_id, k, start, R, a.total_frames());
}

// Shifts the quota of unavailable kinds onto available ones, round-robin from
// kind 1.
inline std::array<int, 3> allocate_negatives(const std::array<bool, 3>& available) {
  std::array<int, 3> q{};
  int spare = 0;
  for (int i = 0; i < 3; ++i) (available[i] ? q[i] : spare) += kNegativeQuota[i];
  if (std::none_of(available.begin(), available.end(), [](bool b) { return b; })) return {0, 0, 0};
  for (int i = 0; spare > 0; i = (i + 1) % 3)
    if (available[i]) {
      ++q[i];
      --spare;
    }
  return q;
}

inline int kind_for_slot(const std::array<int, 3>& quota, int n) {
  for (int k = 0, acc = 0; k < 3; ++k) {
    acc += quota[k];
    if (n < acc) return k + 1;
  }
  return 3;
}

struct MinedUtterance {
  std::vector<Segment> segments;
  bool positive_skipped = false;
};

// One positive and twenty negatives, each around an occurrence drawn
// uniformly. Utterances without the keyword give twenty random windows.
inline MinedUtterance mine_utterance(const Alignment& a, const KeywordSpec& kw, int R, Rng& rng) {
  MinedUtterance out;
  const int total = a.total_frames();
  if (total == 0) return out;
  const auto spans = find_keyword_spans(a, kw);
  if (spans.empty()) {
    for (int i = 0; i < kNegativesPerUtterance; ++i)
      out.segments.push_back(detail::window(a.utt_id, SegmentKind::Neg3, uniform_int(rng, 0, total - 1), R, total));
    return out;
  }
  const std::vector<int> labels = frame_labels(a, kw);
  auto pick = [&]() -> const KeywordSpan& { return spans[uniform_int(rng, 0, static_cast<int>(spans.size()) - 1)]; };

  if (auto p = mine_positive(a, labels, pick(), R, rng)) out.segments.push_back(*p);
  else out.positive_skipped = true;

  // The n-th negative takes the kind whose quota slot n falls in.
  for (int n = 0; n < kNegativesPerUtterance; ++n) {
    const KeywordSpan& span = pick();
    std::array<bool, 3> available{};
    for (int k = 1; k <= 3; ++k) available[k - 1] = !negative_range(a, kw, span, k, R).empty();
    const std::array<int, 3> q = allocate_negatives(available);
    out.segments.push_back(*mine_negative(a, kw, span, R, kind_for_slot(q, n), rng));
  }
  return out;
}

struct MinedBatch {
  std::vector<Segment> segments;
  std::vector<std::string> skipped_positive;  // utterances without an admissible positive
};

inline MinedBatch compose_batch(const std::vector<const Alignment*>& utterances, const KeywordSpec& kw, int R, Rng& rng) {
  MinedBatch batch;
  for (const Alignment* a : utterances) {
    MinedUtterance m = mine_utterance(*a, kw, R, rng);
    if (m.positive_skipped) batch.skipped_positive.push_back(a->utt_id);
    batch.segments.insert(batch.segments.end(), m.segments.begin(), m.segments.end());
  }
  return batch;
}

// Feature columns used for out-of-range frames: the features of silence, or
// of white noise at -30 dBFS.
struct PadSource {
  std::vector<float> silence;  // 16 values
  FeatureMatrix noise;          // [16, bank]
};

inline constexpr double kPadNoiseDbfs = -30.0;

inline PadSource make_pad_source(std::uint64_t seed = 0x9ad, int bank = 64) {
  PadSource p;
  AudioBuffer quiet;
  quiet.samples.assign(kFrameLength, 0.0f);
  const FeatureMatrix s = mfcc(quiet);
  p.silence.assign(s.values().begin(), s.values().end());
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, std::pow(10.0, kPadNoiseDbfs / 20.0));
  AudioBuffer n;
  n.samples.resize(static_cast<std::size_t>(kFrameLength + (bank - 1) * kFrameHop));
  for (float& v : n.samples) v = static_cast<float>(gauss(rng));
  p.noise = mfcc(n);
  return p;
}

// [16, R] features of a segment; padding picks silence or noise by coin flip.
inline FeatureMatrix segment_features(const FeatureMatrix& features, const Segment& s, const PadSource& pad, Rng& rng) {
  const int rows = features.dim(0), total = features.dim(1), len = s.end - s.start + 1;
  FeatureMatrix out({rows, len});
  const bool use_noise = (s.left_pad > 0 || s.right_pad > 0) && coin_flip(rng);
  for (int j = 0; j < len; ++j) {
    const int t = s.start + j;
    if (t >= 0 && t < total) {
      for (int r = 0; r < rows; ++r) out(r, j) = features(r, t);
    } else if (use_noise) {
      const int col = uniform_int(rng, 0, pad.noise.dim(1) - 1);
      for (int r = 0; r < rows; ++r) out(r, j) = pad.noise(r, col);
    } else {
      for (int r = 0; r < rows; ++r) out(r, j) = pad.silence[r];
    }
  }
  return out;
}

inline constexpr const char* kManifestHeader =
    "utt_id\tkind\tstart_frame\tend_frame\tlabel\toffset_target\tleft_pad\tright_pad";

inline void write_manifest(std::ostream& out, const std::vector<Segment>& segments) {
  out << kManifestHeader << '\n';
  char offset[32];
  for (const Segment& s : segments) {
    if (s.label == 1) std::snprintf(offset, sizeof offset, "%.6f", s.offset);
    else std::snprintf(offset, sizeof offset, "NA");
    out << s.utt_id << '\t' << to_string(s.kind) << '\t' << s.start << '\t' << s.end << '\t' << s.label << '\t'
        << offset << '\t' << s.left_pad << '\t' << s.right_pad << '\n';
  }
}

}  // namespace heimdal
