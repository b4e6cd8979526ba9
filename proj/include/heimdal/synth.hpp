#pragma once

// Synthetic keyword corpus. Each phone is a block of band-limited noise or a
// tone chord in its own frequency band; feature frame t owns the 1600 samples
// centred in its analysis window, so alignments are exact by construction.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "heimdal/alignment.hpp"
#include "heimdal/audio.hpp"
#include "heimdal/errors.hpp"
#include "heimdal/mfcc.hpp"
#include "heimdal/random.hpp"

namespace heimdal {

inline const std::string kSilence = "sil";

struct PhoneRecipe {
  std::string symbol;
  enum class Kind { Noise, Chord } kind = Kind::Noise;
  double lo_hz = 0, hi_hz = 0;  // occupied band
  std::vector<double> tones;    // Chord only
};

inline std::vector<PhoneRecipe> default_inventory() {
  using K = PhoneRecipe::Kind;
  return {
      {"A", K::Noise, 250, 500, {}},
      {"B", K::Chord, 650, 1050, {700, 850, 1000}},
      {"C", K::Noise, 1300, 1700, {}},
      {"D", K::Noise, 2200, 2800, {}},
      {"X", K::Noise, 3300, 4000, {}},
      {"F", K::Chord, 4500, 5500, {4600, 5000, 5400}},
      {"G", K::Noise, 6000, 7000, {}},
  };
}

struct SynthSpec {
  std::uint64_t seed = 1;
  std::vector<std::string> keyword = {"A", "B", "C"};
  std::vector<std::vector<std::string>> confusables = {{"A", "B", "D"}, {"X", "B", "C"}};
  int train_utterances = 500;
  double train_keyword_fraction = 0.5;
  int test_positive = 200;
  double test_negative_seconds = 1860;  // at least half an hour
  double negative_utterance_seconds = 30;
  int min_phone_frames = 2, max_phone_frames = 4;
  double noise_floor_db = -60;  // dBFS, white
  double level_min_db = -26, level_max_db = -14;
};

inline void validate(const SynthSpec& s) {
  if (s.keyword.size() < 3) throw ConfigError("synth: keyword needs at least 3 phones");
  if (s.min_phone_frames < 1 || s.max_phone_frames < s.min_phone_frames)
    throw ConfigError("synth: phone duration range must satisfy 1 <= min <= max");
  if (s.train_utterances < 0 || s.test_positive < 0 || s.test_negative_seconds < 0)
    throw ConfigError("synth: counts must be >= 0");
  if (s.negative_utterance_seconds < 2) throw ConfigError("synth: negative utterances must be >= 2 s");
  if (s.train_keyword_fraction < 0 || s.train_keyword_fraction > 1)
    throw ConfigError("synth: train_keyword_fraction must be in [0, 1]");
  std::map<std::string, int> known;
  for (const PhoneRecipe& r : default_inventory()) known[r.symbol] = 1;
  auto check = [&](const std::vector<std::string>& seq) {
    for (const std::string& p : seq)
      if (!known.count(p)) throw ConfigError("synth: unknown phone '" + p + "'");
  };
  check(s.keyword);
  for (const auto& c : s.confusables) {
    check(c);
    if (c == s.keyword) throw ConfigError("synth: a confusable equals the keyword");
  }
}

inline SynthSpec parse_synth_spec(const nlohmann::json& j) {
  SynthSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "keyword") s.keyword = KeywordSpec::parse(value.get<std::string>()).phones;
      else if (key == "confusables") {
        s.confusables.clear();
        for (const auto& c : value) s.confusables.push_back(KeywordSpec::parse(c.get<std::string>()).phones);
      } else if (key == "train_utterances") s.train_utterances = value.get<int>();
      else if (key == "train_keyword_fraction") s.train_keyword_fraction = value.get<double>();
      else if (key == "test_positive") s.test_positive = value.get<int>();
      else if (key == "test_negative_seconds") s.test_negative_seconds = value.get<double>();
      else if (key == "negative_utterance_seconds") s.negative_utterance_seconds = value.get<double>();
      else if (key == "min_phone_frames") s.min_phone_frames = value.get<int>();
      else if (key == "max_phone_frames") s.max_phone_frames = value.get<int>();
      else if (key == "noise_floor_db") s.noise_floor_db = value.get<double>();
      else if (key == "level_min_db") s.level_min_db = value.get<double>();
      else if (key == "level_max_db") s.level_max_db = value.get<double>();
      else throw ConfigError("synth spec: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  validate(s);
  return s;
}

inline SynthSpec load_synth_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return parse_synth_spec(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline std::string join_phones(const std::vector<std::string>& p) {
  std::string out;
  for (const std::string& s : p) out += (out.empty() ? "" : " ") + s;
  return out;
}

inline nlohmann::json to_json(const SynthSpec& s) {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& v : s.confusables) c.push_back(join_phones(v));
  return {{"seed", s.seed},
          {"keyword", join_phones(s.keyword)},
          {"confusables", c},
          {"train_utterances", s.train_utterances},
          {"train_keyword_fraction", s.train_keyword_fraction},
          {"test_positive", s.test_positive},
          {"test_negative_seconds", s.test_negative_seconds},
          {"negative_utterance_seconds", s.negative_utterance_seconds},
          {"min_phone_frames", s.min_phone_frames},
          {"max_phone_frames", s.max_phone_frames},
          {"noise_floor_db", s.noise_floor_db},
          {"level_min_db", s.level_min_db},
          {"level_max_db", s.level_max_db}};
}

// ---------------------------------------------------------------------------
// Rendering.

// Sample range [first, last) owned by frames [start, end] of a T-frame
// utterance; the edge frames also own the lead-in and tail.
inline std::pair<long, long> frame_samples(int start, int end, int total_frames) {
  const long first = start == 0 ? 0 : static_cast<long>(start) * kFrameHop + (kFrameLength - kFrameHop) / 2;
  const long last = end == total_frames - 1 ? static_cast<long>(total_frames - 1) * kFrameHop + kFrameLength
                                            : static_cast<long>(end) * kFrameHop + (kFrameLength + kFrameHop) / 2;
  return {first, last};
}

inline long samples_for_frames(int frames) { return frames == 0 ? 0 : static_cast<long>(frames - 1) * kFrameHop + kFrameLength; }

namespace detail {

inline constexpr int kNoiseComponents = 24;
inline constexpr int kRampSamples = 160;

// Adds a sum of unit-power-normalized sinusoids to out[first, last).
inline void render_phone(std::vector<float>& out, long first, long last, const PhoneRecipe& r, double rms, Rng& rng) {
  std::vector<double> freqs;
  if (r.kind == PhoneRecipe::Kind::Chord) {
    for (double f : r.tones) freqs.push_back(f * uniform_real(rng, 0.99, 1.01));
  } else {
    for (int k = 0; k < kNoiseComponents; ++k) freqs.push_back(uniform_real(rng, r.lo_hz, r.hi_hz));
  }
  // each sinusoid has power a^2 / 2
  const double a = rms * std::sqrt(2.0 / freqs.size());
  const long n = last - first;
  std::vector<double> acc(n, 0.0);
  for (double f : freqs) {
    const std::complex<double> step = std::polar(1.0, 2 * std::numbers::pi * f / kSampleRate);
    std::complex<double> z = std::polar(a, uniform_real(rng, 0, 2 * std::numbers::pi));
    for (long i = 0; i < n; ++i) {
      acc[i] += z.imag();
      z *= step;
    }
  }
  const long ramp = std::min<long>(kRampSamples, n / 2);
  for (long i = 0; i < n; ++i) {
    double g = 1;
    if (i < ramp) g = 0.5 - 0.5 * std::cos(std::numbers::pi * (i + 0.5) / ramp);
    else if (n - 1 - i < ramp) g = 0.5 - 0.5 * std::cos(std::numbers::pi * (n - i - 0.5) / ramp);
    out[first + i] += static_cast<float>(g * acc[i]);
  }
}

}  // namespace detail

// A phone sequence with per-phone frame counts; `sil` renders as the noise
// floor only.
struct PhoneScript {
  std::vector<std::string> phones;
  std::vector<int> frames;
};

inline AudioBuffer render(const PhoneScript& script, const SynthSpec& spec, Rng& rng, Alignment* alignment = nullptr) {
  std::map<std::string, PhoneRecipe> inventory;
  for (const PhoneRecipe& r : default_inventory()) inventory[r.symbol] = r;
  int total = 0;
  for (int f : script.frames) total += f;
  AudioBuffer a;
  a.samples.assign(samples_for_frames(total), 0.0f);
  const double level = uniform_real(rng, spec.level_min_db, spec.level_max_db);
  int t = 0;
  for (std::size_t i = 0; i < script.phones.size(); ++i) {
    const int start = t, end = t + script.frames[i] - 1;
    t = end + 1;
    if (alignment) alignment->phones.push_back({script.phones[i], start, end});
    if (script.phones[i] == kSilence) continue;
    const auto it = inventory.find(script.phones[i]);
    if (it == inventory.end()) throw ConfigError("synth: unknown phone '" + script.phones[i] + "'");
    const auto [first, last] = frame_samples(start, end, total);
    const double rms = std::pow(10.0, (level + uniform_real(rng, -3, 3)) / 20);
    detail::render_phone(a.samples, first, last, it->second, rms, rng);
  }
  std::normal_distribution<double> noise(0.0, std::pow(10.0, spec.noise_floor_db / 20));
  for (float& s : a.samples) s += static_cast<float>(noise(rng));
  return a;
}

// ---------------------------------------------------------------------------
// Utterance scripts.

namespace detail {

inline bool contains_sequence(const std::vector<std::string>& seq, const std::vector<std::string>& pattern) {
  return std::search(seq.begin(), seq.end(), pattern.begin(), pattern.end()) != seq.end();
}

inline std::vector<std::string> filler_word(const SynthSpec& spec, Rng& rng) {
  const std::vector<PhoneRecipe> inv = default_inventory();
  for (;;) {
    std::vector<std::string> w;
    for (int k = uniform_int(rng, 2, 4); k > 0; --k) w.push_back(inv[uniform_int(rng, 0, static_cast<int>(inv.size()) - 1)].symbol);
    if (!contains_sequence(w, spec.keyword)) return w;
  }
}

class ScriptBuilder {
 public:
  ScriptBuilder(const SynthSpec& spec, Rng& rng) : spec_(spec), rng_(rng) {}

  void silence(int lo, int hi) { push(kSilence, uniform_int(rng_, lo, hi)); }

  void word(const std::vector<std::string>& phones) {
    if (!script_.phones.empty()) silence(1, 4);
    for (const std::string& p : phones) push(p, uniform_int(rng_, spec_.min_phone_frames, spec_.max_phone_frames));
  }

  int frames() const { return frames_; }
  PhoneScript finish() {
    silence(3, 8);
    return script_;
  }

 private:
  void push(const std::string& p, int n) {
    // adjacent equal symbols would merge into one alignment span
    if (!script_.phones.empty() && script_.phones.back() == p) {
      script_.frames.back() += n;
    } else {
      script_.phones.push_back(p);
      script_.frames.push_back(n);
    }
    frames_ += n;
  }

  const SynthSpec& spec_;
  Rng& rng_;
  PhoneScript script_;
  int frames_ = 0;
};

}  // namespace detail

// Short utterance; with `keyword`, exactly one occurrence between up to two
// filler words on each side; otherwise fillers and, half of the time, one
// confusable.
inline PhoneScript short_script(const SynthSpec& spec, bool keyword, Rng& rng) {
  detail::ScriptBuilder b(spec, rng);
  b.silence(3, 8);
  for (int k = uniform_int(rng, 0, 2); k > 0; --k) b.word(detail::filler_word(spec, rng));
  if (keyword) b.word(spec.keyword);
  else if (!spec.confusables.empty() && coin_flip(rng))
    b.word(spec.confusables[uniform_int(rng, 0, static_cast<int>(spec.confusables.size()) - 1)]);
  for (int k = uniform_int(rng, 0, 2); k > 0; --k) b.word(detail::filler_word(spec, rng));
  return b.finish();
}

// Long keyword-free utterance of about `seconds`, with every confusable at
// least once and about a third of the words confusable.
inline PhoneScript negative_script(const SynthSpec& spec, double seconds, Rng& rng) {
  detail::ScriptBuilder b(spec, rng);
  b.silence(3, 8);
  const int target = static_cast<int>(seconds * kSampleRate / kFrameHop);
  std::vector<std::vector<std::string>> pending = spec.confusables;
  std::shuffle(pending.begin(), pending.end(), rng);
  while (b.frames() < target - 12 || !pending.empty()) {
    if (!pending.empty() && uniform_real(rng, 0, 1) < 0.35) {
      b.word(pending.back());
      pending.pop_back();
    } else if (!spec.confusables.empty() && uniform_real(rng, 0, 1) < 0.3) {
      b.word(spec.confusables[uniform_int(rng, 0, static_cast<int>(spec.confusables.size()) - 1)]);
    } else {
      b.word(detail::filler_word(spec, rng));
    }
  }
  return b.finish();
}

// ---------------------------------------------------------------------------
// Corpus.

struct SynthUtterance {
  std::string split;  // train, test_pos, test_neg
  bool contains_keyword = false;
  Alignment alignment;
  AudioBuffer audio;
};

inline const std::vector<std::string> kSplits = {"train", "test_pos", "test_neg"};

inline int negative_utterance_count(const SynthSpec& spec) {
  return static_cast<int>(std::ceil(spec.test_negative_seconds / spec.negative_utterance_seconds - 1e-9));
}

inline int utterance_count(const SynthSpec& spec) {
  return spec.train_utterances + spec.test_positive + negative_utterance_count(spec);
}

// Utterance `index` of the corpus in manifest order; each has its own
// derived random stream.
inline SynthUtterance synth_utterance(const SynthSpec& spec, int index) {
  if (index < 0 || index >= utterance_count(spec)) throw PreconditionError("synth: utterance index out of range");
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const KeywordSpec kw{spec.keyword};
  SynthUtterance u;
  char id[32];
  PhoneScript script;
  if (index < spec.train_utterances) {
    u.split = "train";
    // keyword-bearing utterances are spread evenly over the training split
    const int before = static_cast<int>(std::floor(index * spec.train_keyword_fraction));
    const int upto = static_cast<int>(std::floor((index + 1) * spec.train_keyword_fraction));
    u.contains_keyword = upto > before;
    std::snprintf(id, sizeof id, "train_%05d", index);
    script = short_script(spec, u.contains_keyword, rng);
  } else if (index < spec.train_utterances + spec.test_positive) {
    u.split = "test_pos";
    u.contains_keyword = true;
    std::snprintf(id, sizeof id, "test_pos_%05d", index - spec.train_utterances);
    script = short_script(spec, true, rng);
  } else {
    u.split = "test_neg";
    const int k = index - spec.train_utterances - spec.test_positive;
    std::snprintf(id, sizeof id, "test_neg_%05d", k);
    const double remaining = spec.test_negative_seconds - k * spec.negative_utterance_seconds;
    script = negative_script(spec, std::min(spec.negative_utterance_seconds, std::max(remaining, 2.0)), rng);
  }
  u.alignment.utt_id = id;
  u.audio = render(script, spec, rng, &u.alignment);
  const std::size_t found = find_keyword_spans(u.alignment, kw).size();
  if (found != (u.contains_keyword ? 1u : 0u))
    throw Error("synth: " + u.alignment.utt_id + " has " + std::to_string(found) + " keyword occurrences");
  return u;
}

struct ManifestRow {
  std::string utt_id, split;
  bool contains_keyword = false;
};

inline constexpr const char* kCorpusManifestHeader = "utt_id\tsplit\tcontains_keyword";

inline std::vector<ManifestRow> load_corpus_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  int n = 0;
  while (std::getline(in, line) && (++n, line.rfind('#', 0) == 0)) {
  }
  if (line != kCorpusManifestHeader) throw FormatError(path + ": missing manifest header");
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    ManifestRow r;
    int flag = -1;
    if (!(fields >> r.utt_id >> r.split >> flag) || (flag != 0 && flag != 1))
      throw FormatError(path + ":" + std::to_string(n) + ": expected utt_id, split, 0/1");
    r.contains_keyword = flag == 1;
    rows.push_back(r);
  }
  return rows;
}

// Writes wav/<split>/<utt_id>.wav, alignments.tsv, manifest.tsv, keyword.txt
// and spec.json under `out_dir`.
inline std::vector<ManifestRow> generate(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  validate(spec);
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const std::string& s : kSplits) {
    fs::create_directories(out_dir / "wav" / s, ec);
    if (ec) throw IoError("cannot create " + (out_dir / "wav" / s).string() + ": " + ec.message());
  }
  std::vector<ManifestRow> rows;
  std::vector<Alignment> alignments;
  for (int i = 0; i < utterance_count(spec); ++i) {
    const SynthUtterance u = synth_utterance(spec, i);
    save_wav((out_dir / "wav" / u.split / (u.alignment.utt_id + ".wav")).string(), u.audio);
    rows.push_back({u.alignment.utt_id, u.split, u.contains_keyword});
    alignments.push_back(u.alignment);
  }
  auto open = [&](const char* name) {
    std::ofstream f(out_dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (out_dir / name).string());
    return f;
  };
  {
    std::ofstream f = open("alignments.tsv");
    write_alignments(f, alignments);
  }
  {
    std::ofstream f = open("manifest.tsv");
    f << "# seed: " << spec.seed << "\n" << kCorpusManifestHeader << "\n";
    for (const ManifestRow& r : rows) f << r.utt_id << '\t' << r.split << '\t' << (r.contains_keyword ? 1 : 0) << '\n';
  }
  open("keyword.txt") << join_phones(spec.keyword) << "\n";
  open("spec.json") << to_json(spec).dump(2) << "\n";
  return rows;
}

}  // namespace heimdal
