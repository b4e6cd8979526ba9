#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "heimdal/model_config.hpp"
#include "heimdal/random.hpp"
#include "heimdal/tensor.hpp"

namespace heimdal {

// Named parameter and running-statistic tensors. std::map keeps iteration
// (and therefore serialization) order canonical.
template <typename S>
using WeightStore = std::map<std::string, Tensor<S>>;

enum class ParamInit { Kaiming, Zero, One };

struct ParamSpec {
  std::string name;
  Shape dims;
  ParamInit init;
  int fan_in = 1;
  bool trainable = true;
};

inline bool is_running_stat(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".running_mean") || ends_with(".running_var");
}

namespace detail {
inline void add_conv(std::vector<ParamSpec>& out, const std::string& name, Shape dims, bool bias) {
  const int fan_in = dims[1] * dims[2] * dims[3];
  out.push_back({name + ".weight", dims, ParamInit::Kaiming, fan_in});
  if (bias) out.push_back({name + ".bias", {dims[0]}, ParamInit::Zero});
}
inline void add_norm(std::vector<ParamSpec>& out, const std::string& name, int slots) {
  out.push_back({name + ".scale", {slots}, ParamInit::One});
  out.push_back({name + ".shift", {slots}, ParamInit::Zero});
  out.push_back({name + ".running_mean", {slots}, ParamInit::Zero, 1, false});
  out.push_back({name + ".running_var", {slots}, ParamInit::One, 1, false});
}
}  // namespace detail

inline std::vector<ParamSpec> parameter_specs(const ModelConfig& config) {
  std::vector<ParamSpec> out;
  for (const StageSpec& s : resolve_stages(config)) {
    const std::string& p = s.name;
    const int c = s.out_channels;
    switch (s.kind) {
      case LayerKind::Conv:
        detail::add_conv(out, p + ".conv", {c, s.in_channels, s.kernel_f, s.kernel_t}, false);
        detail::add_norm(out, p + ".bn", c);
        break;
      case LayerKind::Transition:
        detail::add_conv(out, p + ".pw", {c, s.in_channels, 1, 1}, false);
        detail::add_norm(out, p + ".pw_bn", c);
        [[fallthrough]];
      case LayerKind::Broadcast:
        detail::add_conv(out, p + ".freq_dw", {c, 1, kBlockFreqKernel, 1}, false);
        detail::add_norm(out, p + ".ssn", c * config.subspectral_groups);
        detail::add_conv(out, p + ".time_dw", {c, 1, 1, kBlockTimeKernel}, false);
        detail::add_norm(out, p + ".time_bn", c);
        detail::add_conv(out, p + ".mix", {c, c, 1, 1}, false);
        break;
      case LayerKind::Head:
        detail::add_conv(out, p + ".detect", {1, s.in_channels, s.kernel_f, s.kernel_t}, true);
        detail::add_conv(out, p + ".offset", {1, s.in_channels, s.kernel_f, s.kernel_t}, true);
        break;
    }
  }
  return out;
}

// Trainable parameter count (running statistics excluded).
inline std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const ParamSpec& p : parameter_specs(config))
    if (p.trainable) n += shape_size(p.dims);
  return n;
}

// Kaiming-uniform kernels (bound sqrt(6/fan_in)), zero biases and shifts,
// unit scales, running statistics (0, 1).
template <typename S = float>
WeightStore<S> build(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  WeightStore<S> store;
  for (const ParamSpec& p : parameter_specs(config)) {
    Tensor<S> t(p.dims);
    switch (p.init) {
      case ParamInit::Kaiming: {
        const double bound = std::sqrt(6.0 / p.fan_in);
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.values()) v = static_cast<S>(dist(rng));
        break;
      }
      case ParamInit::Zero: break;
      case ParamInit::One: t.fill(S(1)); break;
    }
    store.emplace(p.name, std::move(t));
  }
  return store;
}

// Throws FormatError when names or shapes disagree with the config.
template <typename S>
void validate_weights(const WeightStore<S>& store, const ModelConfig& config) {
  const auto specs = parameter_specs(config);
  for (const ParamSpec& p : specs) {
    auto it = store.find(p.name);
    if (it == store.end()) throw FormatError("weights missing tensor '" + p.name + "' required by " + config.name);
    if (it->second.dims() != p.dims)
      throw FormatError("tensor '" + p.name + "' has shape " + shape_string(it->second.dims()) + ", config " +
                        config.name + " expects " + shape_string(p.dims));
  }
  if (store.size() != specs.size())
    throw FormatError("weights hold " + std::to_string(store.size()) + " tensors, config " + config.name +
                      " expects " + std::to_string(specs.size()));
}

template <typename U, typename S>
WeightStore<U> cast_store(const WeightStore<S>& store) {
  WeightStore<U> out;
  for (const auto& [k, v] : store) out.emplace(k, v.template cast<U>());
  return out;
}

// ---------------------------------------------------------------------------
// Weight file: "HMDL", u32 version, u32 count, then per tensor u16 name
// length, name bytes, u8 ndim, u32 dims[ndim], f32 values. Little-endian.

constexpr std::uint32_t kWeightFileVersion = 1;

namespace detail {
static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated file while reading " + what);
  return v;
}
}  // namespace detail

inline void save_weights(const WeightStore<float>& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write weight file '" + path + "'");
  os.write("HMDL", 4);
  detail::write_pod<std::uint32_t>(os, kWeightFileVersion);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name.substr(0, 32));
    detail::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.dims()) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing weight file '" + path + "'");
}

inline WeightStore<float> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open weight file '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated weight file '" + path + "'");
  if (std::memcmp(magic, "HMDL", 4) != 0) throw FormatError("'" + path + "' is not a weight file (bad magic)");
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kWeightFileVersion)
    throw FormatError("unsupported weight file version " + std::to_string(version) + " (expected " +
                      std::to_string(kWeightFileVersion) + ")");
  const auto count = detail::read_pod<std::uint32_t>(is, "tensor count");
  WeightStore<float> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_pod<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated file while reading tensor name");
    const auto ndim = detail::read_pod<std::uint8_t>(is, "rank of " + name);
    Shape dims;
    for (int d = 0; d < ndim; ++d) {
      const auto e = detail::read_pod<std::uint32_t>(is, "dims of " + name);
      if (e > (1u << 28)) throw FormatError("implausible extent in tensor " + name);
      dims.push_back(static_cast<int>(e));
    }
    std::vector<float> values(shape_size(dims));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float))))
      throw FormatError("truncated file while reading values of " + name);
    if (!store.emplace(name, Tensor<float>(dims, std::move(values))).second)
      throw FormatError("duplicate tensor name '" + name + "'");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after last tensor in '" + path + "'");
  return store;
}

inline WeightStore<float> load_weights(const std::string& path, const ModelConfig& config) {
  WeightStore<float> store = load_weights(path);
  validate_weights(store, config);
  return store;
}

}  // namespace heimdal
