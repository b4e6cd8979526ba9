#pragma once

// Corpus loading and the evaluation run shared by the CLI and the acceptance
// binary.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "heimdal/alignment.hpp"
#include "heimdal/audio.hpp"
#include "heimdal/metrics.hpp"
#include "heimdal/mfcc.hpp"
#include "heimdal/streaming.hpp"
#include "heimdal/synth.hpp"
#include "heimdal/trainer.hpp"

namespace heimdal {

// Runs body(i) for i in [0, n) on up to `jobs` threads; the first exception
// is rethrown after all workers stop.
template <typename F>
void parallel_for(std::size_t n, int jobs, F&& body) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(jobs, static_cast<int>(n)); ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Sorted *.wav paths of a directory.
inline std::vector<std::filesystem::path> list_wavs(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// A corpus directory as written by generate().
struct Corpus {
  std::filesystem::path root;
  KeywordSpec keyword;
  std::vector<ManifestRow> rows;
  std::map<std::string, Alignment> alignments;

  std::filesystem::path wav(const ManifestRow& r) const { return root / "wav" / r.split / (r.utt_id + ".wav"); }
};

inline Corpus open_corpus(const std::filesystem::path& root) {
  Corpus c;
  c.root = root;
  c.keyword = load_keyword((root / "keyword.txt").string());
  c.rows = load_corpus_manifest((root / "manifest.tsv").string());
  for (Alignment& a : load_alignments((root / "alignments.tsv").string())) {
    const std::string id = a.utt_id;
    c.alignments.emplace(id, std::move(a));
  }
  for (const ManifestRow& r : c.rows)
    if (!c.alignments.count(r.utt_id)) throw FormatError("corpus: no alignment for " + r.utt_id);
  return c;
}

inline TrainUtterance load_train_utterance(const std::filesystem::path& wav, const Alignment& a, bool keep_audio) {
  AudioBuffer audio = load_wav(wav.string());
  TrainUtterance u{a, mfcc(audio), std::nullopt};
  if (u.features.dim(1) != a.total_frames())
    throw FormatError(wav.string() + ": " + std::to_string(u.features.dim(1)) + " feature frames but alignment has " +
                      std::to_string(a.total_frames()));
  if (keep_audio) u.audio = std::move(audio);
  return u;
}

inline TrainData load_train_data(const Corpus& c, const std::string& split = "train", bool keep_audio = false,
                                 int jobs = 1) {
  std::vector<const ManifestRow*> rows;
  for (const ManifestRow& r : c.rows)
    if (r.split == split) rows.push_back(&r);
  if (rows.empty()) throw FormatError("corpus has no '" + split + "' utterances");
  TrainData d;
  d.keyword = c.keyword;
  d.utterances.resize(rows.size());
  parallel_for(rows.size(), jobs, [&](std::size_t i) {
    d.utterances[i] = load_train_utterance(c.wav(*rows[i]), c.alignments.at(rows[i]->utt_id), keep_audio);
  });
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalInput {
  std::string utt_id;
  FeatureMatrix features;
  double seconds = 0;
  std::vector<TruthWindow> truths;
};

inline std::vector<TruthWindow> truth_windows(const Alignment& a, const KeywordSpec& kw) {
  std::vector<TruthWindow> out;
  for (const KeywordSpan& s : find_keyword_spans(a, kw)) out.push_back({s.S, s.E});
  return out;
}

// Featurizes every WAV of `dir`. With `alignments`, each utterance must have
// one and its keyword windows become the truths.
inline std::vector<EvalInput> load_eval_inputs(const std::filesystem::path& dir, const std::map<std::string, Alignment>* alignments,
                                               const KeywordSpec* keyword, int jobs = 1) {
  const auto wavs = list_wavs(dir);
  std::vector<EvalInput> out(wavs.size());
  parallel_for(wavs.size(), jobs, [&](std::size_t i) {
    const AudioBuffer a = load_wav(wavs[i].string());
    EvalInput& e = out[i];
    e.utt_id = wavs[i].stem().string();
    e.features = mfcc(a);
    e.seconds = a.seconds();
    if (alignments) {
      const auto it = alignments->find(e.utt_id);
      if (it == alignments->end()) throw FormatError("no alignment for " + e.utt_id);
      e.truths = truth_windows(it->second, *keyword);
    }
  });
  return out;
}

struct EvalReport {
  DetCurve det;
  OperatingPoint op;
  IouCurve iou;
  double target_fa_per_hour = 0;
  std::size_t positive_utterances = 0, negative_utterances = 0;
};

// Scores every frame of the utterance. The stream is primed with R - 1
// columns of the silence fill used for training-time padding, so frame t is
// scored on the window ending at t even when t < R - 1.
inline std::vector<ScoredFrame> score_frames(const std::shared_ptr<const Network<float>>& net,
                                             const FeatureMatrix& features) {
  static const PadSource pad = make_pad_source();
  const int lead = net->receptive_field() - 1, rows = features.dim(0), T = features.dim(1);
  if (rows != static_cast<int>(pad.silence.size()))
    throw FormatError("features have " + std::to_string(rows) + " rows, expected " + std::to_string(pad.silence.size()));
  FeatureMatrix primed({rows, lead + T});
  for (int r = 0; r < rows; ++r) {
    for (int t = 0; t < lead; ++t) primed(r, t) = pad.silence[r];
    for (int t = 0; t < T; ++t) primed(r, lead + t) = features(r, t);
  }
  std::vector<ScoredFrame> frames = stream_file<float>(net, primed);
  for (ScoredFrame& f : frames) f.frame -= lead;
  return frames;
}

inline ScoredUtterance score_utterance(const std::shared_ptr<const Network<float>>& net, const EvalInput& in,
                                       double base_threshold = kBaseThreshold) {
  ScoredUtterance u{in.utt_id, {}, in.truths, score_frames(net, in.features)};
  u.events = decode_events(u.frames, base_threshold, net->receptive_field());
  return u;
}

inline EvalReport evaluate(const std::shared_ptr<const Network<float>>& net, const std::vector<EvalInput>& positives,
                           const std::vector<EvalInput>& negatives, double target_fa_per_hour, int jobs = 1) {
  if (positives.empty()) throw FormatError("evaluation needs at least one positive utterance");
  if (negatives.empty()) throw FormatError("evaluation needs at least one negative utterance");
  std::vector<ScoredUtterance> pos(positives.size()), neg(negatives.size());
  parallel_for(positives.size() + negatives.size(), jobs, [&](std::size_t i) {
    if (i < positives.size()) pos[i] = score_utterance(net, positives[i]);
    else neg[i - positives.size()] = score_utterance(net, negatives[i - positives.size()]);
  });
  double hours = 0;
  for (const EvalInput& e : negatives) hours += e.seconds / 3600;
  for (const ScoredUtterance& u : neg)
    if (!u.truths.empty()) throw FormatError("negative utterance " + u.utt_id + " contains the keyword");

  EvalReport r;
  r.target_fa_per_hour = target_fa_per_hour;
  r.positive_utterances = positives.size();
  r.negative_utterances = negatives.size();
  r.det = det_curve(pos, neg, hours);
  r.op = operating_point(r.det, target_fa_per_hour);
  r.iou = iou_tpr_curve(localized_true_positives(pos, r.op.point.threshold, net->receptive_field()), r.det.positives);
  return r;
}

}  // namespace heimdal
