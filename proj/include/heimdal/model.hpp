#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "heimdal/model_config.hpp"
#include "heimdal/ops.hpp"
#include "heimdal/weights.hpp"

namespace heimdal {

// Both tensors are [batch, 1, 1, L'] with L' = T - R + 1.
template <typename S>
struct ModelOutput {
  Tensor<S> detection;  // logits
  Tensor<S> offset;     // start offset, normalized by the receptive field
};

template <typename S>
struct StageCache {
  Tensor<S> input;
  // conv stages: bn/pre; transition blocks also use pw_bn/pw_pre
  BatchNormCache<S> bn;
  Tensor<S> pre;
  BatchNormCache<S> pw_bn;
  Tensor<S> pw_pre;
  Tensor<S> block_in;  // input of the frequency depthwise conv
  BatchNormCache<S> ssn;
  Tensor<S> pooled;
  BatchNormCache<S> time_bn;
  Tensor<S> time_norm;
  Tensor<S> activated;
  std::vector<S> dropout_mask;
};

template <typename S>
struct ForwardCache {
  std::vector<StageCache<S>> stages;
  std::uint64_t version = 0;
  bool valid = false;
};

template <typename S>
class Network {
 public:
  Network(ModelConfig config, WeightStore<S> weights)
      : config_(std::move(config)), stages_(resolve_stages(config_)), weights_(std::move(weights)) {
    validate_weights(weights_, config_);
    rf_ = heimdal::receptive_field(config_);
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<StageSpec>& stages() const { return stages_; }
  const WeightStore<S>& weights() const { return weights_; }
  // Any mutation invalidates outstanding forward caches.
  WeightStore<S>& mutable_weights() {
    ++version_;
    return weights_;
  }
  int receptive_field() const { return rf_; }

  // Infer mode; running statistics are used and nothing is mutated.
  ModelOutput<S> infer(const Tensor<S>& x) const {
    check_input(x);
    Tensor<S> h = x;
    ModelOutput<S> out;
    for (const StageSpec& s : stages_) {
      switch (s.kind) {
        case LayerKind::Conv: h = conv_infer(s, h); break;
        case LayerKind::Transition:
        case LayerKind::Broadcast: h = block_infer(s, h); break;
        case LayerKind::Head: out = head_forward(s, h); break;
      }
    }
    return out;
  }

  // Train mode normalizes with batch statistics (updating the running
  // estimates) and applies channel dropout drawn from `rng`.
  ModelOutput<S> forward(const Tensor<S>& x, Mode mode, Rng* rng = nullptr, ForwardCache<S>* cache = nullptr) {
    if (mode == Mode::Infer) {
      if (cache) *cache = ForwardCache<S>{};
      return infer(x);
    }
    check_input(x);
    ++version_;
    ForwardCache<S> local;
    ForwardCache<S>& c = cache ? *cache : local;
    c.stages.assign(stages_.size(), StageCache<S>{});
    Tensor<S> h = x;
    ModelOutput<S> out;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const StageSpec& s = stages_[i];
      StageCache<S>& sc = c.stages[i];
      switch (s.kind) {
        case LayerKind::Conv: h = conv_train(s, h, sc); break;
        case LayerKind::Transition:
        case LayerKind::Broadcast: h = block_train(s, h, rng, sc); break;
        case LayerKind::Head:
          sc.input = h;
          out = head_forward(s, h);
          break;
      }
    }
    c.version = version_;
    c.valid = true;
    return out;
  }

  // Gradients of every trainable tensor given output gradients shaped like
  // the forward outputs.
  WeightStore<S> backward(const ForwardCache<S>& cache, const Tensor<S>& grad_detection,
                          const Tensor<S>& grad_offset) const {
    if (!cache.valid || cache.version != version_ || cache.stages.size() != stages_.size())
      throw UsageError("backward called with a stale or empty forward cache");
    WeightStore<S> grads;
    Tensor<S> g;
    for (std::size_t k = stages_.size(); k-- > 0;) {
      const StageSpec& s = stages_[k];
      const StageCache<S>& sc = cache.stages[k];
      switch (s.kind) {
        case LayerKind::Head: g = head_backward(s, sc, grad_detection, grad_offset, grads); break;
        case LayerKind::Conv: g = conv_backward(s, sc, g, grads); break;
        case LayerKind::Transition:
        case LayerKind::Broadcast: g = block_backward(s, sc, g, grads); break;
      }
    }
    return grads;
  }

  const Tensor<S>& param(const std::string& name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw FormatError("missing tensor '" + name + "'");
    return it->second;
  }

 private:
  Tensor<S>& mutable_param(const std::string& name) { return weights_.at(name); }

  void check_input(const Tensor<S>& x) const {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != config_.input_freq)
      throw ShapeError("model input must be [N,1," + std::to_string(config_.input_freq) + ",T], got " +
                       shape_string(x.dims()));
    if (x.dim(3) < rf_)
      throw PreconditionError("input of " + std::to_string(x.dim(3)) + " frames is shorter than the receptive field " +
                              std::to_string(rf_));
  }

  // -- conv + BN + ReLU --------------------------------------------------

  Tensor<S> conv_infer(const StageSpec& s, const Tensor<S>& x) const {
    const Tensor<S> y = conv2d_forward(x, param(s.name + ".conv.weight"), nullptr, stage_conv_spec(s));
    return relu(norm_infer(s.name + ".bn", y));
  }

  Tensor<S> conv_train(const StageSpec& s, const Tensor<S>& x, StageCache<S>& c) {
    c.input = x;
    const Tensor<S> y = conv2d_forward(x, param(s.name + ".conv.weight"), nullptr, stage_conv_spec(s));
    c.pre = norm_train(s.name + ".bn", y, &c.bn);
    return relu(c.pre);
  }

  Tensor<S> conv_backward(const StageSpec& s, const StageCache<S>& c, const Tensor<S>& gy, WeightStore<S>& grads) const {
    const Tensor<S> g_pre = relu_backward(gy, c.pre);
    const Tensor<S> g_conv = norm_backward(s.name + ".bn", g_pre, c.bn, grads);
    ConvGrads<S> cg = conv2d_backward(g_conv, c.input, param(s.name + ".conv.weight"), stage_conv_spec(s));
    grads[s.name + ".conv.weight"] = std::move(cg.weight);
    return std::move(cg.input);
  }

  // -- transition / broadcast blocks --------------------------------------
  //
  //   f2(v) = SSN(freq_dw(v))
  //   f1(b) = dropout(mix(swish(BN(time_dw(avgpool_f(b))))))
  //   broadcast:  y = relu(trim(x) + trim(f2(x)) + bcast(f1(f2(x))))
  //   transition: v = relu(BN(pw(x)));  y = relu(trim(f2(v)) + bcast(f1(f2(v))))

  Tensor<S> block_infer(const StageSpec& s, const Tensor<S>& x) const {
    const bool transition = s.kind == LayerKind::Transition;
    const Tensor<S> v =
        transition ? relu(norm_infer(s.name + ".pw_bn", conv2d_forward(x, param(s.name + ".pw.weight"), nullptr,
                                                                       pointwise_spec())))
                   : x;
    const Tensor<S> b = subspectral_norm_infer(
        conv2d_forward(v, param(s.name + ".freq_dw.weight"), nullptr, block_freq_conv_spec(s.out_channels, s.freq_stride)),
        param(s.name + ".ssn.scale"), param(s.name + ".ssn.shift"), param(s.name + ".ssn.running_mean"),
        param(s.name + ".ssn.running_var"), config_.subspectral_groups);
    const Tensor<S> q = conv2d_forward(freq_avgpool(b), param(s.name + ".time_dw.weight"), nullptr,
                                       block_time_conv_spec(s.out_channels, s.dilation));
    const Tensor<S> u =
        conv2d_forward(swish(norm_infer(s.name + ".time_bn", q)), param(s.name + ".mix.weight"), nullptr, pointwise_spec());
    Tensor<S> skip = time_trim(b, s.dilation, s.dilation);
    if (!transition) skip = time_trim(x, s.dilation, s.dilation) + skip;
    return relu(freq_broadcast_add(u, skip));
  }

  Tensor<S> block_train(const StageSpec& s, const Tensor<S>& x, Rng* rng, StageCache<S>& c) {
    const bool transition = s.kind == LayerKind::Transition;
    c.input = x;
    if (transition) {
      const Tensor<S> w = conv2d_forward(x, param(s.name + ".pw.weight"), nullptr, pointwise_spec());
      c.pw_pre = norm_train(s.name + ".pw_bn", w, &c.pw_bn);
      c.block_in = relu(c.pw_pre);
    } else {
      c.block_in = x;
    }
    const Tensor<S> a = conv2d_forward(c.block_in, param(s.name + ".freq_dw.weight"), nullptr,
                                       block_freq_conv_spec(s.out_channels, s.freq_stride));
    const Tensor<S> b =
        subspectral_norm(a, param(s.name + ".ssn.scale"), param(s.name + ".ssn.shift"),
                         mutable_param(s.name + ".ssn.running_mean"), mutable_param(s.name + ".ssn.running_var"),
                         config_.subspectral_groups, Mode::Train, &c.ssn);
    c.pooled = freq_avgpool(b);
    const Tensor<S> q = conv2d_forward(c.pooled, param(s.name + ".time_dw.weight"), nullptr,
                                       block_time_conv_spec(s.out_channels, s.dilation));
    c.time_norm = norm_train(s.name + ".time_bn", q, &c.time_bn);
    c.activated = swish(c.time_norm);
    const Tensor<S> u = conv2d_forward(c.activated, param(s.name + ".mix.weight"), nullptr, pointwise_spec());
    const Tensor<S> ud = channel_dropout(u, config_.dropout, Mode::Train, rng, &c.dropout_mask);
    Tensor<S> skip = time_trim(b, s.dilation, s.dilation);
    if (!transition) skip = time_trim(x, s.dilation, s.dilation) + skip;
    c.pre = freq_broadcast_add(ud, skip);
    return relu(c.pre);
  }

  Tensor<S> block_backward(const StageSpec& s, const StageCache<S>& c, const Tensor<S>& gy, WeightStore<S>& grads) const {
    const bool transition = s.kind == LayerKind::Transition;
    const int d = s.dilation;
    const Tensor<S> g_pre = relu_backward(gy, c.pre);
    const Tensor<S> g_u = channel_dropout_backward(freq_broadcast_backward(g_pre), c.dropout_mask);
    ConvGrads<S> mix = conv2d_backward(g_u, c.activated, param(s.name + ".mix.weight"), pointwise_spec());
    grads[s.name + ".mix.weight"] = std::move(mix.weight);
    const Tensor<S> g_norm = swish_backward(mix.input, c.time_norm);
    const Tensor<S> g_q = norm_backward(s.name + ".time_bn", g_norm, c.time_bn, grads);
    ConvGrads<S> tdw = conv2d_backward(g_q, c.pooled, param(s.name + ".time_dw.weight"),
                                       block_time_conv_spec(s.out_channels, d));
    grads[s.name + ".time_dw.weight"] = std::move(tdw.weight);
    Tensor<S> g_b = time_trim_backward(g_pre, d, d);
    g_b += freq_avgpool_backward(tdw.input, g_b.dim(2));
    NormGrads<S> ssn = subspectral_norm_backward(g_b, c.ssn, param(s.name + ".ssn.scale"));
    grads[s.name + ".ssn.scale"] = std::move(ssn.scale);
    grads[s.name + ".ssn.shift"] = std::move(ssn.shift);
    ConvGrads<S> fdw = conv2d_backward(ssn.input, c.block_in, param(s.name + ".freq_dw.weight"),
                                       block_freq_conv_spec(s.out_channels, s.freq_stride));
    grads[s.name + ".freq_dw.weight"] = std::move(fdw.weight);
    if (!transition) {
      Tensor<S> g_x = std::move(fdw.input);
      g_x += time_trim_backward(g_pre, d, d);
      return g_x;
    }
    const Tensor<S> g_w = norm_backward(s.name + ".pw_bn", relu_backward(fdw.input, c.pw_pre), c.pw_bn, grads);
    ConvGrads<S> pw = conv2d_backward(g_w, c.input, param(s.name + ".pw.weight"), pointwise_spec());
    grads[s.name + ".pw.weight"] = std::move(pw.weight);
    return std::move(pw.input);
  }

  // -- head ---------------------------------------------------------------

  ModelOutput<S> head_forward(const StageSpec& s, const Tensor<S>& x) const {
    const ConvSpec spec = stage_conv_spec(s);
    return {conv2d_forward(x, param(s.name + ".detect.weight"), &param(s.name + ".detect.bias"), spec),
            conv2d_forward(x, param(s.name + ".offset.weight"), &param(s.name + ".offset.bias"), spec)};
  }

  Tensor<S> head_backward(const StageSpec& s, const StageCache<S>& c, const Tensor<S>& g_det, const Tensor<S>& g_off,
                          WeightStore<S>& grads) const {
    const ConvSpec spec = stage_conv_spec(s);
    ConvGrads<S> det = conv2d_backward(g_det, c.input, param(s.name + ".detect.weight"), spec);
    ConvGrads<S> off = conv2d_backward(g_off, c.input, param(s.name + ".offset.weight"), spec);
    grads[s.name + ".detect.weight"] = std::move(det.weight);
    grads[s.name + ".detect.bias"] = std::move(det.bias);
    grads[s.name + ".offset.weight"] = std::move(off.weight);
    grads[s.name + ".offset.bias"] = std::move(off.bias);
    Tensor<S> g = std::move(det.input);
    g += off.input;
    return g;
  }

  // -- norm helpers ---------------------------------------------------------

  Tensor<S> norm_infer(const std::string& p, const Tensor<S>& x) const {
    return batchnorm_infer(x, param(p + ".scale"), param(p + ".shift"), param(p + ".running_mean"),
                           param(p + ".running_var"));
  }

  Tensor<S> norm_train(const std::string& p, const Tensor<S>& x, BatchNormCache<S>* cache) {
    return batchnorm_train(x, param(p + ".scale"), param(p + ".shift"), mutable_param(p + ".running_mean"),
                           mutable_param(p + ".running_var"), cache);
  }

  Tensor<S> norm_backward(const std::string& p, const Tensor<S>& gy, const BatchNormCache<S>& cache,
                          WeightStore<S>& grads) const {
    NormGrads<S> g = batchnorm_backward(gy, cache, param(p + ".scale"));
    grads[p + ".scale"] = std::move(g.scale);
    grads[p + ".shift"] = std::move(g.shift);
    return std::move(g.input);
  }

  ModelConfig config_;
  std::vector<StageSpec> stages_;
  WeightStore<S> weights_;
  int rf_ = 0;
  std::uint64_t version_ = 1;
};

// Stacks feature windows [16 x R] into a [N, 1, 16, R] batch.
template <typename S>
Tensor<S> stack_windows(const std::vector<Tensor<S>>& windows) {
  if (windows.empty()) throw ShapeError("stack_windows: empty batch");
  const Shape& d = windows.front().dims();
  if (d.size() != 2) throw ShapeError("stack_windows: windows must be [freq, time]");
  Tensor<S> out({static_cast<int>(windows.size()), 1, d[0], d[1]});
  std::size_t k = 0;
  for (const auto& w : windows) {
    if (w.dims() != d) throw ShapeError("stack_windows: ragged batch");
    std::copy(w.storage().begin(), w.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(k));
    k += w.size();
  }
  return out;
}

}  // namespace heimdal
