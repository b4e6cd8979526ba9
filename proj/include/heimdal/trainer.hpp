#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "heimdal/audio.hpp"
#include "heimdal/loss.hpp"
#include "heimdal/miner.hpp"
#include "heimdal/model.hpp"

namespace heimdal {

// ---------------------------------------------------------------------------
// Optimizer.

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  std::map<std::string, Tensor<double>> m, v;
};

// One bias-corrected Adam update of every parameter named in `grads`.
inline void adam_step(AdamState& state, WeightStore<float>& params, const WeightStore<float>& grads, double lr) {
  ++state.step;
  const double c1 = 1 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor<float>& p = params.at(name);
    require_same_shape(p, g, "adam " + name);
    Tensor<double>& m = state.m.try_emplace(name, g.dims()).first->second;
    Tensor<double>& v = state.v.try_emplace(name, g.dims()).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      m[i] = state.beta1 * m[i] + (1 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1 - state.beta2) * gi * gi;
      p[i] = static_cast<float>(p[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps));
    }
  }
}

inline constexpr double kBaseLearningRate = 0.01;
inline constexpr int kScheduleEpochs = 100;

inline double cosine_lr(double epoch, double base_lr = kBaseLearningRate, double total = kScheduleEpochs) {
  if (total <= 0 || epoch < 0 || epoch > total)
    throw PreconditionError("cosine schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(total) + "]");
  return std::max(0.0, 0.5 * base_lr * (1 + std::cos(std::numbers::pi * epoch / total)));
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainUtterance {
  Alignment alignment;
  FeatureMatrix features;            // cached [16, T]
  std::optional<AudioBuffer> audio;  // needed only for augmentation
};

struct TrainData {
  std::vector<TrainUtterance> utterances;
  KeywordSpec keyword;
  std::vector<AudioBuffer> noise;  // optional clips for additive-noise augmentation
};

struct TrainOptions {
  int epochs = kScheduleEpochs;
  int batch_utterances = 64;
  double lr = kBaseLearningRate;
  double gamma = kFocalGamma;
  std::uint64_t seed = 0;
  bool augment = false;  // time-domain gain/noise, then featurize; needs audio
  double gain_min_db = kMinGainDb, gain_max_db = kMaxGainDb;
  double noise_probability = 0.5;
  double snr_min_db = 5, snr_max_db = 30;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0, mean_cls_loss = 0, mean_offset_loss = 0;
  std::size_t segments = 0;
};

inline void write_epoch_log_header(std::ostream& out) { out << "epoch,lr,mean_loss,mean_cls_loss,mean_offset_loss\n"; }

inline void write_epoch_log_row(std::ostream& out, const EpochLog& e) {
  char line[160];
  std::snprintf(line, sizeof line, "%d,%.8g,%.8g,%.8g,%.8g\n", e.epoch, e.lr, e.mean_loss, e.mean_cls_loss,
                e.mean_offset_loss);
  out << line;
}

struct TrainResult {
  WeightStore<float> weights;
  std::vector<EpochLog> log;
  std::vector<std::string> skipped_positive;  // first epoch only
};

// Random streams derived from the seed, one per concern, so toggling one
// (e.g. augmentation) leaves the others unchanged.
enum class TrainStream : std::uint64_t { Init = 0, Shuffle, Mining, Padding, Dropout, Augment };

inline std::uint64_t stream_seed(std::uint64_t seed, TrainStream s) {
  return derive_seed(seed, static_cast<std::uint64_t>(s));
}

namespace detail {

inline FeatureMatrix augmented_features(const TrainUtterance& u, const TrainData& data, const TrainOptions& opt,
                                        Rng& rng) {
  if (!u.audio) throw ConfigError("augmentation needs audio for utterance " + u.alignment.utt_id);
  AudioBuffer a = apply_gain_db(*u.audio, uniform_real(rng, opt.gain_min_db, opt.gain_max_db));
  if (!data.noise.empty() && uniform_real(rng, 0, 1) < opt.noise_probability) {
    const AudioBuffer& n = data.noise[uniform_int(rng, 0, static_cast<int>(data.noise.size()) - 1)];
    a = mix_noise(a, n, uniform_real(rng, opt.snr_min_db, opt.snr_max_db));
  }
  FeatureMatrix f = mfcc(a);
  if (f.dim(1) != u.features.dim(1))
    throw FormatError("augmented features of " + u.alignment.utt_id + " changed frame count");
  return f;
}

}  // namespace detail

// Each epoch shuffles the utterances, mines 1 + 20 segments per utterance in
// batches of `batch_utterances`, and takes one Adam step per batch at the
// epoch's cosine learning rate. `on_epoch` sees the weights after each epoch.
inline TrainResult train(const TrainData& data, const ModelConfig& config, const TrainOptions& opt,
                         const std::function<void(const EpochLog&, const WeightStore<float>&)>& on_epoch = {},
                         std::optional<WeightStore<float>> initial = std::nullopt) {
  if (data.utterances.empty()) throw ConfigError("training set is empty");
  if (opt.epochs < 1 || opt.batch_utterances < 1) throw ConfigError("epochs and batch size must be >= 1");
  Network<float> net(config, initial ? std::move(*initial) : build(config, stream_seed(opt.seed, TrainStream::Init)));
  const int R = net.receptive_field();
  for (const TrainUtterance& u : data.utterances)
    if (u.features.rank() != 2 || u.features.dim(0) != config.input_freq)
      throw FormatError("features of " + u.alignment.utt_id + " are " + shape_string(u.features.dims()) + ", expected " +
                        std::to_string(config.input_freq) + " rows");
  Rng shuffle_rng(stream_seed(opt.seed, TrainStream::Shuffle));
  Rng mine_rng(stream_seed(opt.seed, TrainStream::Mining));
  Rng pad_rng(stream_seed(opt.seed, TrainStream::Padding));
  Rng dropout_rng(stream_seed(opt.seed, TrainStream::Dropout));
  Rng augment_rng(stream_seed(opt.seed, TrainStream::Augment));
  const PadSource pad = make_pad_source();
  AdamState adam;
  TrainResult result;

  std::vector<std::size_t> order(data.utterances.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = cosine_lr(epoch, opt.lr, opt.epochs);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch_utterances) {
      const std::size_t b1 = std::min(order.size(), b0 + opt.batch_utterances);
      std::vector<const Alignment*> alignments;
      std::map<std::string, FeatureMatrix> augmented;
      std::map<std::string, const FeatureMatrix*> features;
      for (std::size_t i = b0; i < b1; ++i) {
        const TrainUtterance& u = data.utterances[order[i]];
        alignments.push_back(&u.alignment);
        if (opt.augment) {
          const FeatureMatrix& f = augmented[u.alignment.utt_id] = detail::augmented_features(u, data, opt, augment_rng);
          features[u.alignment.utt_id] = &f;
        } else {
          features[u.alignment.utt_id] = &u.features;
        }
      }
      const MinedBatch batch = compose_batch(alignments, data.keyword, R, mine_rng);
      if (epoch == 0)
        result.skipped_positive.insert(result.skipped_positive.end(), batch.skipped_positive.begin(),
                                       batch.skipped_positive.end());
      if (batch.segments.empty()) continue;

      const int n = static_cast<int>(batch.segments.size());
      Tensor<float> inputs({n, 1, config.input_freq, R});
      std::vector<int> labels(n);
      std::vector<double> targets(n);
      for (int i = 0; i < n; ++i) {
        const Segment& s = batch.segments[i];
        const FeatureMatrix seg = segment_features(*features.at(s.utt_id), s, pad, pad_rng);
        std::copy(seg.values().begin(), seg.values().end(), &inputs(i, 0, 0, 0));
        labels[i] = s.label;
        targets[i] = s.label == 1 ? s.offset : 0.0;
      }

      ForwardCache<float> cache;
      const ModelOutput<float> out = net.forward(inputs, Mode::Train, &dropout_rng, &cache);
      const BatchLoss loss = batch_loss(out.detection, out.offset, labels, targets, opt.gamma);
      const WeightStore<float> grads = net.backward(cache, loss.grad_detection, loss.grad_offset);
      adam_step(adam, net.mutable_weights(), grads, log.lr);

      log.mean_loss += loss.mean * n;
      log.mean_cls_loss += loss.mean_cls * n;
      log.mean_offset_loss += loss.mean_offset * n;
      log.segments += n;
    }
    if (log.segments > 0) {
      log.mean_loss /= log.segments;
      log.mean_cls_loss /= log.segments;
      log.mean_offset_loss /= log.segments;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log, net.weights());
  }
  result.weights = net.weights();
  return result;
}

}  // namespace heimdal
