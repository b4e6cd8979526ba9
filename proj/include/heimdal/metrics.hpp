#pragma once

// Trigger decoding, TP/FA/FR matching, DET sweep and IOU-vs-TPR localization
// curves.
//
// Events are decoded once per utterance at a base threshold; the DET sweep
// then keeps the events whose peak score reaches each swept threshold. That
// makes FA counts non-increasing and FR counts non-decreasing in the
// threshold by construction.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "heimdal/errors.hpp"
#include "heimdal/streaming.hpp"

namespace heimdal {

inline constexpr int kMergeGap = 5;
inline constexpr double kBaseThreshold = 0.3;

struct TriggerEvent {
  long peak_frame = 0;
  double peak_score = 0;
  long predicted_start = 0;
  long predicted_end = 0;  // == peak_frame
  long run_start = 0;      // first frame of the (merged) run

  bool operator==(const TriggerEvent&) const = default;
};

struct TruthWindow {
  long S = 0, E = 0;
  bool operator==(const TruthWindow&) const = default;
};

// Runs of frames with detection >= threshold; runs whose gap is shorter than
// `merge_gap` frames are joined. The event sits at the run's maximum (earliest
// on ties) and reaches back round(offset * R) frames.
inline std::vector<TriggerEvent> decode_events(const std::vector<ScoredFrame>& frames, double threshold,
                                               int receptive_field, int merge_gap = kMergeGap) {
  if (receptive_field < 1) throw PreconditionError("decode: receptive field must be >= 1");
  std::vector<TriggerEvent> events;
  const ScoredFrame* peak = nullptr;
  long last_above = 0, first = 0;
  auto close = [&] {
    if (!peak) return;
    TriggerEvent e;
    e.peak_frame = peak->frame;
    e.peak_score = peak->detection;
    e.predicted_end = peak->frame;
    const long back = std::lround(peak->offset * receptive_field);
    e.predicted_start = std::clamp(peak->frame - back, 0L, peak->frame);
    e.run_start = first;
    events.push_back(e);
    peak = nullptr;
  };
  for (const ScoredFrame& f : frames) {
    if (!(f.detection >= threshold)) continue;
    if (peak && f.frame - last_above - 1 >= merge_gap) close();
    if (!peak) first = f.frame;
    if (!peak || f.detection > peak->detection) peak = &f;
    last_above = f.frame;
  }
  close();
  return events;
}

// The event re-anchored where its run first reaches `threshold`: the trigger
// fires at that frame and the offset predicted there gives the start.
// `frames` is the contiguous track the event was decoded from.
inline TriggerEvent localize_at(const TriggerEvent& e, const std::vector<ScoredFrame>& frames, double threshold,
                                int receptive_field) {
  if (frames.empty()) throw PreconditionError("localize: empty score track");
  const long base = frames.front().frame;
  if (e.run_start < base || e.peak_frame - base >= static_cast<long>(frames.size()))
    throw PreconditionError("localize: event outside the score track");
  TriggerEvent out = e;
  for (long t = e.run_start; t <= e.peak_frame; ++t) {
    const ScoredFrame& f = frames[t - base];
    if (f.detection < threshold) continue;
    out.predicted_end = f.frame;
    out.predicted_start = std::clamp(f.frame - std::lround(f.offset * receptive_field), 0L, f.frame);
    break;
  }
  return out;
}

inline long window_overlap(long a0, long a1, long b0, long b1) { return std::max(0L, std::min(a1, b1) - std::max(a0, b0) + 1); }

inline bool overlaps(const TriggerEvent& e, const TruthWindow& t) {
  return window_overlap(e.predicted_start, e.predicted_end, t.S, t.E) > 0;
}

// Inclusive-frame intersection over union.
inline double iou(long a0, long a1, long b0, long b1) {
  const long inter = window_overlap(a0, a1, b0, b1);
  const long uni = (a1 - a0 + 1) + (b1 - b0 + 1) - inter;
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

struct TruePositive {
  TriggerEvent event;
  TruthWindow truth;
};

struct MatchResult {
  std::vector<TruePositive> tp;
  std::vector<TriggerEvent> fa;
  std::vector<TruthWindow> fr;
};

namespace detail {

// Higher score first, then earlier peak, then earlier start.
inline bool stronger(const TriggerEvent& a, const TriggerEvent& b) {
  if (a.peak_score != b.peak_score) return a.peak_score > b.peak_score;
  if (a.peak_frame != b.peak_frame) return a.peak_frame < b.peak_frame;
  return a.predicted_start < b.predicted_start;
}

}  // namespace detail

// Each truth is a TP through its strongest overlapping event; other events
// overlapping a truth are dropped. Events overlapping no truth are FAs.
inline MatchResult match(const std::vector<TriggerEvent>& events, const std::vector<TruthWindow>& truths) {
  MatchResult r;
  for (const TruthWindow& t : truths) {
    const TriggerEvent* best = nullptr;
    for (const TriggerEvent& e : events)
      if (overlaps(e, t) && (!best || detail::stronger(e, *best))) best = &e;
    if (best) r.tp.push_back({*best, t});
    else r.fr.push_back(t);
  }
  for (const TriggerEvent& e : events)
    if (std::none_of(truths.begin(), truths.end(), [&](const TruthWindow& t) { return overlaps(e, t); }))
      r.fa.push_back(e);
  std::sort(r.fa.begin(), r.fa.end(), [](const TriggerEvent& a, const TriggerEvent& b) {
    return a.peak_frame != b.peak_frame ? a.peak_frame < b.peak_frame : detail::stronger(a, b);
  });
  return r;
}

inline std::vector<TriggerEvent> events_at(const std::vector<TriggerEvent>& events, double threshold) {
  std::vector<TriggerEvent> kept;
  for (const TriggerEvent& e : events)
    if (e.peak_score >= threshold) kept.push_back(e);
  return kept;
}

// Decoded events of one utterance plus its keyword windows (empty for
// negatives). `frames` is kept when events are to be re-localized.
struct ScoredUtterance {
  std::string utt_id;
  std::vector<TriggerEvent> events;
  std::vector<TruthWindow> truths;
  std::vector<ScoredFrame> frames;
};

struct DetPoint {
  double threshold = 0;
  double frr = 0;
  double fa_per_hour = 0;
  long false_rejects = 0, false_accepts = 0;
};

struct DetCurve {
  std::vector<DetPoint> points;  // threshold descending, FA/hr ascending
  long positives = 0;
  double negative_hours = 0;
};

inline DetPoint det_point(const std::vector<ScoredUtterance>& positives, const std::vector<ScoredUtterance>& negatives,
                          double negative_hours, double threshold) {
  DetPoint p;
  p.threshold = threshold;
  long truths = 0;
  for (const ScoredUtterance& u : positives) {
    const MatchResult m = match(events_at(u.events, threshold), u.truths);
    p.false_rejects += static_cast<long>(m.fr.size());
    truths += static_cast<long>(u.truths.size());
  }
  for (const ScoredUtterance& u : negatives) p.false_accepts += static_cast<long>(events_at(u.events, threshold).size());
  p.frr = static_cast<double>(p.false_rejects) / truths;
  p.fa_per_hour = p.false_accepts / negative_hours;
  return p;
}

// One point per distinct event peak score, plus a sentinel above every peak
// where nothing triggers.
inline DetCurve det_curve(const std::vector<ScoredUtterance>& positives, const std::vector<ScoredUtterance>& negatives,
                          double negative_hours) {
  if (!(negative_hours > 0)) throw PreconditionError("det curve: negative hours must be > 0");
  DetCurve c;
  c.negative_hours = negative_hours;
  for (const ScoredUtterance& u : positives) c.positives += static_cast<long>(u.truths.size());
  if (c.positives == 0) throw PreconditionError("det curve: no positive keyword windows, FRR undefined");

  std::vector<double> thresholds;
  for (const auto* set : {&positives, &negatives})
    for (const ScoredUtterance& u : *set)
      for (const TriggerEvent& e : u.events) thresholds.push_back(e.peak_score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.insert(thresholds.begin(), std::numeric_limits<double>::infinity());
  for (double t : thresholds) c.points.push_back(det_point(positives, negatives, negative_hours, t));
  return c;
}

struct OperatingPoint {
  DetPoint point;              // lowest threshold with FA/hr <= target
  double interpolated_frr = 0;  // FRR linearly interpolated at exactly the target FA/hr
};

// Linear interpolation along the lower envelope of the curve; targets beyond
// the last point take its FRR.
inline OperatingPoint operating_point(const DetCurve& c, double fa_per_hour) {
  if (c.points.empty()) throw PreconditionError("operating point: empty DET curve");
  OperatingPoint op;
  std::size_t at = 0;
  for (std::size_t i = 0; i < c.points.size(); ++i)
    if (c.points[i].fa_per_hour <= fa_per_hour) at = i;
  op.point = c.points[at];
  op.interpolated_frr = op.point.frr;
  if (at + 1 < c.points.size()) {
    const DetPoint& lo = c.points[at];
    const DetPoint& hi = c.points[at + 1];
    const double w = (fa_per_hour - lo.fa_per_hour) / (hi.fa_per_hour - lo.fa_per_hour);
    op.interpolated_frr = lo.frr + w * (hi.frr - lo.frr);
  }
  return op;
}

struct IouCurve {
  std::vector<double> tau, tpr;
  double auc = 0;
};

inline constexpr int kIouSteps = 100;

inline IouCurve iou_tpr_curve(const std::vector<TruePositive>& tps, long total_positives) {
  if (total_positives <= 0) throw PreconditionError("iou curve: total positives must be > 0");
  std::vector<double> ious;
  for (const TruePositive& t : tps)
    ious.push_back(iou(t.event.predicted_start, t.event.predicted_end, t.truth.S, t.truth.E));
  IouCurve c;
  for (int k = 0; k <= kIouSteps; ++k) {
    const double tau = static_cast<double>(k) / kIouSteps;
    // Compare on the integer grid so that tau = 0.6 keeps an IOU of exactly 9/15.
    const long hits = std::count_if(ious.begin(), ious.end(), [&](double v) { return v * kIouSteps >= k - 1e-9; });
    c.tau.push_back(tau);
    c.tpr.push_back(static_cast<double>(hits) / total_positives);
  }
  for (int k = 1; k <= kIouSteps; ++k) c.auc += 0.5 * (c.tpr[k] + c.tpr[k - 1]) * (c.tau[k] - c.tau[k - 1]);
  return c;
}

// True positives of all positive utterances at one threshold.
inline std::vector<TruePositive> true_positives(const std::vector<ScoredUtterance>& positives, double threshold) {
  std::vector<TruePositive> out;
  for (const ScoredUtterance& u : positives) {
    const MatchResult m = match(events_at(u.events, threshold), u.truths);
    out.insert(out.end(), m.tp.begin(), m.tp.end());
  }
  return out;
}

// As true_positives, with each TP localized at its first crossing of
// `threshold` rather than at its peak.
inline std::vector<TruePositive> localized_true_positives(const std::vector<ScoredUtterance>& positives, double threshold,
                                                          int receptive_field) {
  std::vector<TruePositive> out;
  for (const ScoredUtterance& u : positives)
    for (TruePositive& tp : match(events_at(u.events, threshold), u.truths).tp) {
      tp.event = localize_at(tp.event, u.frames, threshold, receptive_field);
      out.push_back(tp);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Output.

inline void write_det_csv(std::ostream& out, const DetCurve& c) {
  out << "threshold,frr,fa_per_hour\n";
  char line[96];
  for (const DetPoint& p : c.points) {
    std::snprintf(line, sizeof line, "%.9g,%.9g,%.9g\n", p.threshold, p.frr, p.fa_per_hour);
    out << line;
  }
}

inline void write_iou_csv(std::ostream& out, const IouCurve& c) {
  out << "tau,tpr\n";
  char line[64];
  for (std::size_t i = 0; i < c.tau.size(); ++i) {
    std::snprintf(line, sizeof line, "%.2f,%.9g\n", c.tau[i], c.tpr[i]);
    out << line;
  }
}

// Minimal line plot. x and y are data coordinates; axes span their ranges.
inline void write_svg_plot(std::ostream& out, const std::vector<double>& x, const std::vector<double>& y,
                           const std::string& x_label, const std::string& y_label) {
  const double w = 480, h = 360, m = 50;
  double x_max = 1e-12, y_max = 1e-12;
  for (double v : x)
    if (std::isfinite(v)) x_max = std::max(x_max, v);
  for (double v : y)
    if (std::isfinite(v)) y_max = std::max(y_max, v);
  char buf[128];
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  std::snprintf(buf, sizeof buf, "<path d=\"M%g %g V%g H%g\" fill=\"none\" stroke=\"black\"/>\n", m, m, h - m, w - m);
  out << buf;
  out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) continue;
    std::snprintf(buf, sizeof buf, "%.2f,%.2f ", m + (w - 2 * m) * x[i] / x_max, h - m - (h - 2 * m) * y[i] / y_max);
    out << buf;
  }
  out << "\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">", w / 2, h - 12);
  out << buf << x_label << " (max " << x_max << ")</text>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"14\" y=\"%g\" transform=\"rotate(-90 14 %g)\" text-anchor=\"middle\">", h / 2,
                h / 2);
  out << buf << y_label << " (max " << y_max << ")</text>\n</svg>\n";
}

inline void write_det_svg(std::ostream& out, const DetCurve& c) {
  std::vector<double> x, y;
  for (const DetPoint& p : c.points) {
    x.push_back(p.fa_per_hour);
    y.push_back(100 * p.frr);
  }
  write_svg_plot(out, x, y, "FA/hr", "FRR %");
}

inline void write_iou_svg(std::ostream& out, const IouCurve& c) { write_svg_plot(out, c.tau, c.tpr, "IOU", "TPR"); }

}  // namespace heimdal
