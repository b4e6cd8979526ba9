#pragma once

// Frame-at-a-time inference. Every temporal operator keeps a ring of the
// columns it still needs; everything along frequency is recomputed per frame.
// Each output element accumulates in the same order as the batch forward, so
// streamed scores match Network::infer exactly.

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "heimdal/errors.hpp"
#include "heimdal/model.hpp"

namespace heimdal {

struct StreamOutput {
  double detection;  // sigmoid of the detection logit
  double offset;
};

struct ScoredFrame {
  long frame;  // index of the last input frame of the window
  double detection;
  double offset;
};

namespace detail {

// Fixed-capacity history of [channels x freq] columns.
template <typename S>
class ColumnRing {
 public:
  ColumnRing() = default;
  ColumnRing(int channels, int freq, int capacity)
      : channels_(channels), freq_(freq), capacity_(capacity),
        data_(static_cast<std::size_t>(capacity) * channels * freq) {}

  int capacity() const { return capacity_; }
  bool full() const { return count_ == capacity_; }
  std::size_t footprint() const { return data_.size(); }
  void clear() {
    count_ = 0;
    head_ = 0;
  }

  // [1, C, F, capacity + 1]: the stored history followed by `column`.
  Tensor<S> window(const Tensor<S>& column) const {
    const int len = capacity_ + 1;
    Tensor<S> w({1, channels_, freq_, len});
    const int cf = channels_ * freq_;
    for (int k = 0; k < capacity_; ++k) {
      const S* src = slot((head_ + k) % capacity_);
      for (int i = 0; i < cf; ++i) w[static_cast<std::size_t>(i) * len + k] = src[i];
    }
    for (int i = 0; i < cf; ++i) w[static_cast<std::size_t>(i) * len + capacity_] = column[i];
    return w;
  }

  // Oldest stored column, [1, C, F, 1].
  Tensor<S> oldest() const {
    Tensor<S> c({1, channels_, freq_, 1});
    const S* src = slot(head_);
    for (int i = 0; i < channels_ * freq_; ++i) c[i] = src[i];
    return c;
  }

  void push(const Tensor<S>& column) {
    if (capacity_ == 0) return;
    const int pos = (head_ + count_) % capacity_;
    S* dst = data_.data() + static_cast<std::size_t>(pos) * channels_ * freq_;
    for (int i = 0; i < channels_ * freq_; ++i) dst[i] = column[i];
    if (count_ < capacity_) ++count_;
    else head_ = (head_ + 1) % capacity_;
  }

 private:
  const S* slot(int k) const { return data_.data() + static_cast<std::size_t>(k) * channels_ * freq_; }

  int channels_ = 0, freq_ = 0, capacity_ = 0;
  int count_ = 0, head_ = 0;
  std::vector<S> data_;
};

}  // namespace detail

template <typename S = float>
class StreamState {
 public:
  explicit StreamState(std::shared_ptr<const Network<S>> net) : net_(std::move(net)) {
    if (!net_) throw UsageError("stream: no network");
    if (has_time_stride(net_->config())) throw ConfigError("stream: temporal stride > 1 is not supported");
    for (const StageSpec& s : net_->stages()) {
      Slot slot;
      switch (s.kind) {
        case LayerKind::Conv:
        case LayerKind::Head:
          slot.input = detail::ColumnRing<S>(s.in_channels, s.in_freq, s.dilation * (s.kernel_t - 1));
          break;
        case LayerKind::Transition:
        case LayerKind::Broadcast:
          slot.input = detail::ColumnRing<S>(s.out_channels, 1, s.dilation * (kBlockTimeKernel - 1));
          slot.skip = detail::ColumnRing<S>(s.out_channels, s.out_freq, s.dilation);
          if (s.kind == LayerKind::Broadcast)
            slot.residual = detail::ColumnRing<S>(s.in_channels, s.in_freq, s.dilation);
          break;
      }
      slots_.push_back(std::move(slot));
    }
  }

  StreamState(const ModelConfig& config, WeightStore<S> weights)
      : StreamState(std::make_shared<const Network<S>>(config, std::move(weights))) {}

  int receptive_field() const { return net_->receptive_field(); }
  int warmup() const { return net_->receptive_field() - 1; }
  long frames_consumed() const { return frames_; }

  // Total buffered values; fixed at construction.
  std::size_t capacity() const {
    std::size_t n = 0;
    for (const Slot& s : slots_) n += s.input.footprint() + s.skip.footprint() + s.residual.footprint();
    return n;
  }

  void reset() {
    for (Slot& s : slots_) {
      s.input.clear();
      s.skip.clear();
      s.residual.clear();
    }
    frames_ = 0;
  }

  std::optional<StreamOutput> push_frame(std::span<const S> column) {
    const int freq = net_->config().input_freq;
    if (static_cast<int>(column.size()) != freq)
      throw ShapeError("stream: feature column has " + std::to_string(column.size()) + " values, expected " +
                       std::to_string(freq));
    ++frames_;
    Tensor<S> h({1, 1, freq, 1});
    for (int f = 0; f < freq; ++f) h[f] = column[f];

    const auto& stages = net_->stages();
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const StageSpec& s = stages[i];
      Slot& slot = slots_[i];
      switch (s.kind) {
        case LayerKind::Conv: {
          const bool ready = slot.input.full();
          Tensor<S> w = ready ? slot.input.window(h) : Tensor<S>();
          slot.input.push(h);
          if (!ready) return std::nullopt;
          const Tensor<S> y = conv2d_forward(w, net_->param(s.name + ".conv.weight"), nullptr, stage_conv_spec(s));
          h = relu(norm(s.name + ".bn", y));
          break;
        }
        case LayerKind::Transition:
        case LayerKind::Broadcast: {
          if (auto y = block(s, slot, h)) h = std::move(*y);
          else return std::nullopt;
          break;
        }
        case LayerKind::Head: {
          const bool ready = slot.input.full();
          Tensor<S> w = ready ? slot.input.window(h) : Tensor<S>();
          slot.input.push(h);
          if (!ready) return std::nullopt;
          const ConvSpec spec = stage_conv_spec(s);
          const Tensor<S> det =
              conv2d_forward(w, net_->param(s.name + ".detect.weight"), &net_->param(s.name + ".detect.bias"), spec);
          const Tensor<S> off =
              conv2d_forward(w, net_->param(s.name + ".offset.weight"), &net_->param(s.name + ".offset.bias"), spec);
          return StreamOutput{static_cast<double>(sigmoid(det[0])), static_cast<double>(off[0])};
        }
      }
    }
    return std::nullopt;
  }

  // Pushes `frames` columns of a [freq, T] matrix starting at column `first`.
  std::vector<ScoredFrame> push_frames(const Tensor<S>& features, int first, int frames) {
    require_rank(features, 2, "stream features");
    std::vector<ScoredFrame> out;
    std::vector<S> column(features.dim(0));
    for (int t = first; t < first + frames; ++t) {
      for (int f = 0; f < features.dim(0); ++f) column[f] = features[static_cast<std::size_t>(f) * features.dim(1) + t];
      if (auto o = push_frame(std::span<const S>(column))) out.push_back({frames_ - 1, o->detection, o->offset});
    }
    return out;
  }

 private:
  struct Slot {
    detail::ColumnRing<S> input;     // temporal conv history
    detail::ColumnRing<S> skip;      // delayed f2 output
    detail::ColumnRing<S> residual;  // delayed block input (broadcast blocks)
  };

  Tensor<S> norm(const std::string& p, const Tensor<S>& x) const {
    return batchnorm_infer(x, net_->param(p + ".scale"), net_->param(p + ".shift"), net_->param(p + ".running_mean"),
                           net_->param(p + ".running_var"));
  }

  std::optional<Tensor<S>> block(const StageSpec& s, Slot& slot, const Tensor<S>& x) const {
    const bool transition = s.kind == LayerKind::Transition;
    const Tensor<S> v =
        transition ? relu(norm(s.name + ".pw_bn", conv2d_forward(x, net_->param(s.name + ".pw.weight"), nullptr,
                                                                 pointwise_spec())))
                   : x;
    const Tensor<S> b = subspectral_norm_infer(
        conv2d_forward(v, net_->param(s.name + ".freq_dw.weight"), nullptr,
                       block_freq_conv_spec(s.out_channels, s.freq_stride)),
        net_->param(s.name + ".ssn.scale"), net_->param(s.name + ".ssn.shift"), net_->param(s.name + ".ssn.running_mean"),
        net_->param(s.name + ".ssn.running_var"), net_->config().subspectral_groups);
    const Tensor<S> pooled = freq_avgpool(b);

    const bool ready = slot.input.full();
    Tensor<S> w, b_old, x_old;
    if (ready) {
      w = slot.input.window(pooled);
      b_old = slot.skip.oldest();
      if (!transition) x_old = slot.residual.oldest();
    }
    slot.input.push(pooled);
    slot.skip.push(b);
    if (!transition) slot.residual.push(x);
    if (!ready) return std::nullopt;

    const Tensor<S> q =
        conv2d_forward(w, net_->param(s.name + ".time_dw.weight"), nullptr, block_time_conv_spec(s.out_channels, s.dilation));
    const Tensor<S> u = conv2d_forward(swish(norm(s.name + ".time_bn", q)), net_->param(s.name + ".mix.weight"), nullptr,
                                       pointwise_spec());
    Tensor<S> skip = transition ? b_old : x_old + b_old;
    return relu(freq_broadcast_add(u, skip));
  }

  std::shared_ptr<const Network<S>> net_;
  std::vector<Slot> slots_;
  long frames_ = 0;
};

template <typename S = float>
StreamState<S> stream_new(const WeightStore<S>& weights, const ModelConfig& config) {
  try {
    return StreamState<S>(config, weights);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("weights do not match config: ") + e.what());
  }
}

// Scores every full window of a [freq, T] feature matrix; T - R + 1 entries
// (none when T < R).
template <typename S = float>
std::vector<ScoredFrame> stream_file(std::shared_ptr<const Network<S>> net, const Tensor<S>& features) {
  StreamState<S> state(std::move(net));
  return state.push_frames(features, 0, features.dim(1));
}

}  // namespace heimdal
