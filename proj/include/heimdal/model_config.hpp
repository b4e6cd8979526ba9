#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "heimdal/errors.hpp"
#include "heimdal/ops.hpp"

namespace heimdal {

enum class LayerKind { Conv, Transition, Broadcast, Head };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Transition: return "transition";
    case LayerKind::Broadcast: return "broadcast";
    case LayerKind::Head: return "head";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::Conv;
  if (s == "transition") return LayerKind::Transition;
  if (s == "broadcast") return LayerKind::Broadcast;
  if (s == "head") return LayerKind::Head;
  throw ConfigError("unknown layer kind '" + s + "'");
}

// One row of the architecture table. Conv and Head rows carry explicit
// kernel and frequency padding; blocks use the fixed 3x1 / 1x3 kernels.
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int out_channels = 1;
  int repeat = 1;
  int freq_stride = 1;
  int time_dilation = 1;
  int time_stride = 1;
  int kernel_f = 1, kernel_t = 1;
  int pad_f = 0, pad_t = 0;
};

struct ModelConfig {
  std::string name;
  int input_freq = 16;
  int subspectral_groups = 2;
  double dropout = 0.1;
  std::vector<LayerSpec> layers;
};

// Block kernels.
constexpr int kBlockFreqKernel = 3;
constexpr int kBlockTimeKernel = 3;

// A LayerSpec with repeats expanded and channel/frequency extents resolved.
struct StageSpec {
  LayerKind kind;
  std::string name;
  int in_channels, out_channels;
  int in_freq, out_freq;
  int kernel_f, kernel_t;
  int pad_f;
  int freq_stride;
  int time_stride;
  int dilation;
  int time_shrink;  // frames removed from the time axis by this stage
};

inline ConvSpec stage_conv_spec(const StageSpec& s) {
  ConvSpec c;
  c.kernel_f = s.kernel_f;
  c.kernel_t = s.kernel_t;
  c.stride_f = s.freq_stride;
  c.stride_t = s.time_stride;
  c.dilation_t = s.dilation;
  c.pad_f = s.pad_f;
  return c;
}

inline ConvSpec block_freq_conv_spec(int channels, int freq_stride) {
  ConvSpec c;
  c.kernel_f = kBlockFreqKernel;
  c.pad_f = kBlockFreqKernel / 2;
  c.stride_f = freq_stride;
  c.groups = channels;
  return c;
}

inline ConvSpec block_time_conv_spec(int channels, int dilation) {
  ConvSpec c;
  c.kernel_t = kBlockTimeKernel;
  c.dilation_t = dilation;
  c.groups = channels;
  return c;
}

inline ConvSpec pointwise_spec() { return ConvSpec{}; }

// Expands repeats and propagates channel and frequency extents. Throws
// ConfigError naming the offending layer index.
inline std::vector<StageSpec> resolve_stages(const ModelConfig& config) {
  if (config.layers.empty()) throw ConfigError("model config '" + config.name + "' has no layers");
  if (config.input_freq < 1) throw ConfigError("input_freq must be >= 1");
  if (config.subspectral_groups < 1) throw ConfigError("subspectral_groups must be >= 1");
  if (config.dropout < 0 || config.dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  std::vector<StageSpec> stages;
  int channels = 1, freq = config.input_freq;
  bool seen_head = false;
  for (std::size_t li = 0; li < config.layers.size(); ++li) {
    const LayerSpec& l = config.layers[li];
    auto fail = [&](const std::string& msg) {
      throw ConfigError("layer " + std::to_string(li) + " (" + to_string(l.kind) + "): " + msg);
    };
    if (seen_head) fail("no layer may follow the head");
    if (l.repeat < 1) fail("repeat must be >= 1");
    if (l.time_dilation < 1) fail("time_dilation must be >= 1");
    if (l.freq_stride < 1 || l.time_stride < 1) fail("strides must be >= 1");
    if (l.out_channels < 1) fail("out_channels must be >= 1");
    if (l.pad_t != 0) fail("time padding is not allowed");
    if (l.pad_f < 0) fail("frequency padding must be >= 0");
    if (l.kind == LayerKind::Head && l.repeat != 1) fail("head cannot repeat");
    for (int r = 0; r < l.repeat; ++r) {
      StageSpec s{};
      s.kind = l.kind;
      s.name = "s" + std::string(stages.size() < 10 ? "0" : "") + std::to_string(stages.size());
      s.in_channels = channels;
      s.out_channels = l.out_channels;
      s.in_freq = freq;
      s.freq_stride = l.freq_stride;
      s.time_stride = 1;
      s.dilation = l.time_dilation;
      switch (l.kind) {
        case LayerKind::Conv:
        case LayerKind::Head:
          if (l.kernel_f < 1 || l.kernel_t < 1) fail("kernel extents must be >= 1");
          s.kernel_f = l.kernel_f;
          s.kernel_t = l.kernel_t;
          s.pad_f = l.pad_f;
          s.time_stride = l.time_stride;
          if (l.kind == LayerKind::Head) {
            if (l.out_channels != 1) fail("head convolutions have exactly one output channel each");
            if (l.time_stride != 1) fail("head time stride must be 1");
          }
          s.out_freq = conv_out_extent(freq, s.kernel_f, s.pad_f, 1, s.freq_stride);
          s.time_shrink = s.dilation * (s.kernel_t - 1);
          break;
        case LayerKind::Transition:
        case LayerKind::Broadcast:
          if (l.time_stride != 1) fail("blocks have no time stride");
          if (l.kind == LayerKind::Broadcast && l.out_channels != channels)
            fail("broadcast block must keep " + std::to_string(channels) + " channels");
          if (l.kind == LayerKind::Broadcast && l.freq_stride != 1) fail("broadcast block has no frequency stride");
          s.kernel_f = kBlockFreqKernel;
          s.kernel_t = kBlockTimeKernel;
          s.pad_f = kBlockFreqKernel / 2;
          s.out_freq = conv_out_extent(freq, s.kernel_f, s.pad_f, 1, s.freq_stride);
          s.time_shrink = s.dilation * (s.kernel_t - 1);
          if (s.out_freq % config.subspectral_groups != 0)
            fail("frequency extent " + std::to_string(s.out_freq) + " not divisible by " +
                 std::to_string(config.subspectral_groups) + " subspectral groups");
          break;
      }
      if (s.out_freq < 1) fail("frequency extent collapses to " + std::to_string(s.out_freq));
      if (l.kind == LayerKind::Head) {
        if (s.out_freq != 1) fail("head must reduce frequency to 1, got " + std::to_string(s.out_freq));
        seen_head = true;
      }
      channels = l.out_channels;
      freq = s.out_freq;
      stages.push_back(s);
    }
  }
  if (!seen_head) throw ConfigError("model config '" + config.name + "' has no head layer");
  return stages;
}

// Input frames that influence one output frame: 1 + sum of dilation*(k-1)
// scaled by the product of preceding time strides.
inline int receptive_field(const ModelConfig& config) {
  int rf = 1, jump = 1;
  for (const StageSpec& s : resolve_stages(config)) {
    rf += jump * s.time_shrink;
    jump *= s.time_stride;
  }
  return rf;
}

inline bool has_time_stride(const ModelConfig& config) {
  for (const StageSpec& s : resolve_stages(config))
    if (s.time_stride != 1) return true;
  return false;
}

struct StageShape {
  std::string name;
  LayerKind kind;
  Shape input;   // [C, F, T]
  Shape output;  // [C, F, T]
};

// Per-stage extents for an input of `frames` time steps.
inline std::vector<StageShape> shape_ledger(const ModelConfig& config, int frames) {
  std::vector<StageShape> out;
  int t = frames;
  for (const StageSpec& s : resolve_stages(config)) {
    StageShape row{s.name, s.kind, {s.in_channels, s.in_freq, t}, {}};
    int tout = conv_out_extent(t, s.kernel_t, 0, s.dilation, s.time_stride);
    if (tout <= 0)
      throw ShapeError("input of " + std::to_string(frames) + " frames too short at stage " + s.name);
    const int cout = s.kind == LayerKind::Head ? 2 : s.out_channels;
    row.output = {cout, s.out_freq, tout};
    out.push_back(row);
    t = tout;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Presets.

namespace detail {
inline LayerSpec conv_layer(int c, int kf, int kt, int pf, int sf) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.out_channels = c;
  l.kernel_f = kf;
  l.kernel_t = kt;
  l.pad_f = pf;
  l.freq_stride = sf;
  return l;
}
inline LayerSpec block_layer(LayerKind k, int c, int n, int sf, int d) {
  LayerSpec l;
  l.kind = k;
  l.out_channels = c;
  l.repeat = n;
  l.freq_stride = sf;
  l.time_dilation = d;
  return l;
}
inline LayerSpec head_layer(int kf) {
  LayerSpec l;
  l.kind = LayerKind::Head;
  l.out_channels = 1;
  l.kernel_f = kf;
  l.kernel_t = 1;
  return l;
}
}  // namespace detail

// 16x131 input -> 2x1x1 output; dilation schedule 1,1,2,2,4,4,8,8,4,4.
inline ModelConfig heimdal_13k() {
  using detail::block_layer;
  using detail::conv_layer;
  constexpr auto T = LayerKind::Transition;
  constexpr auto B = LayerKind::Broadcast;
  ModelConfig c;
  c.name = "heimdal-13k";
  c.layers = {
      conv_layer(12, 5, 5, 2, 2),
      block_layer(T, 16, 1, 1, 1),
      block_layer(B, 16, 1, 1, 1),
      block_layer(T, 16, 1, 2, 2),
      block_layer(B, 16, 1, 1, 2),
      block_layer(T, 32, 1, 1, 4),
      block_layer(B, 32, 3, 1, 4),
      block_layer(T, 16, 1, 1, 8),
      block_layer(B, 16, 3, 1, 8),
      block_layer(T, 16, 1, 1, 4),
      block_layer(B, 16, 1, 1, 4),
      conv_layer(16, 3, 3, 0, 1),
      conv_layer(8, 1, 1, 0, 1),
      detail::head_layer(2),
  };
  return c;
}

// Reduced receptive field (35 frames) and width for desk-scale training.
inline ModelConfig heimdal_lite() {
  using detail::block_layer;
  using detail::conv_layer;
  constexpr auto T = LayerKind::Transition;
  constexpr auto B = LayerKind::Broadcast;
  ModelConfig c;
  c.name = "heimdal-lite";
  c.layers = {
      conv_layer(8, 5, 5, 2, 2),
      block_layer(T, 8, 1, 1, 1),
      block_layer(B, 8, 1, 1, 1),
      block_layer(T, 12, 1, 2, 2),
      block_layer(B, 12, 1, 1, 2),
      block_layer(T, 12, 1, 1, 4),
      block_layer(B, 12, 1, 1, 4),
      conv_layer(12, 3, 3, 0, 1),
      conv_layer(8, 1, 1, 0, 1),
      detail::head_layer(2),
  };
  return c;
}

inline std::vector<std::string> preset_names() { return {"heimdal-13k", "heimdal-lite"}; }

inline bool is_preset(const std::string& name) {
  for (const auto& n : preset_names())
    if (n == name) return true;
  return false;
}

inline ModelConfig preset(const std::string& name) {
  if (name == "heimdal-13k") return heimdal_13k();
  if (name == "heimdal-lite") return heimdal_lite();
  throw ConfigError("unknown model preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// JSON.

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : c.layers) {
    nlohmann::json j{{"kind", to_string(l.kind)}, {"out_channels", l.out_channels}};
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Head) {
      j["kernel"] = {l.kernel_f, l.kernel_t};
      j["padding"] = {l.pad_f, l.pad_t};
    }
    if (l.repeat != 1) j["repeat"] = l.repeat;
    if (l.freq_stride != 1) j["freq_stride"] = l.freq_stride;
    if (l.time_stride != 1) j["time_stride"] = l.time_stride;
    if (l.time_dilation != 1) j["time_dilation"] = l.time_dilation;
    layers.push_back(j);
  }
  return {{"name", c.name},
          {"input_freq", c.input_freq},
          {"subspectral_groups", c.subspectral_groups},
          {"dropout", c.dropout},
          {"layers", layers}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.name = j.value("name", std::string("custom"));
    c.input_freq = j.value("input_freq", 16);
    c.subspectral_groups = j.value("subspectral_groups", 2);
    c.dropout = j.value("dropout", 0.1);
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
      l.out_channels = lj.at("out_channels").get<int>();
      l.repeat = lj.value("repeat", 1);
      l.freq_stride = lj.value("freq_stride", 1);
      l.time_stride = lj.value("time_stride", 1);
      l.time_dilation = lj.value("time_dilation", 1);
      if (lj.contains("kernel")) {
        l.kernel_f = lj["kernel"].at(0).get<int>();
        l.kernel_t = lj["kernel"].at(1).get<int>();
      } else if (l.kind == LayerKind::Conv || l.kind == LayerKind::Head) {
        throw ConfigError(std::string(to_string(l.kind)) + " layer requires an explicit kernel");
      }
      if (lj.contains("padding")) {
        l.pad_f = lj["padding"].at(0).get<int>();
        l.pad_t = lj["padding"].at(1).get<int>();
      }
      c.layers.push_back(l);
    }
    resolve_stages(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

// Accepts a preset name or a path to a JSON config file.
inline ModelConfig load_model_config(const std::string& name_or_path) {
  if (is_preset(name_or_path)) return preset(name_or_path);
  std::ifstream in(name_or_path);
  if (!in) throw IoError("cannot open model config '" + name_or_path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse model config '" + name_or_path + "': " + e.what());
  }
  return config_from_json(j);
}

}  // namespace heimdal
