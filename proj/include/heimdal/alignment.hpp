#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "heimdal/errors.hpp"

namespace heimdal {

struct PhoneSpan {
  std::string phone;
  int start;  // inclusive, feature frames
  int end;    // inclusive
};

// Contiguous phone spans covering frames [0, total_frames).
struct Alignment {
  std::string utt_id;
  std::vector<PhoneSpan> phones;

  int total_frames() const { return phones.empty() ? 0 : phones.back().end + 1; }
};

struct KeywordSpec {
  std::vector<std::string> phones;

  static KeywordSpec parse(const std::string& text) {
    KeywordSpec kw;
    std::istringstream in(text);
    for (std::string p; in >> p;) kw.phones.push_back(p);
    if (kw.phones.size() < 2) throw ConfigError("keyword needs at least 2 phones, got " + std::to_string(kw.phones.size()));
    return kw;
  }
};

inline KeywordSpec load_keyword(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return KeywordSpec::parse(ss.str());
}

struct KeywordSpan {
  int S;         // first frame of the first keyword phone
  int E;         // last frame of the final keyword phone
  int E_hat;     // E extended by the final phone's run length, capped
  int last_run;  // frames of the final keyword phone
  int first_phone;  // index into Alignment::phones
};

inline constexpr int kMaxExtension = 5;

inline void validate_alignment(const Alignment& a) {
  int expect = 0;
  for (std::size_t i = 0; i < a.phones.size(); ++i) {
    const PhoneSpan& p = a.phones[i];
    if (p.start != expect || p.end < p.start)
      throw FormatError("alignment " + a.utt_id + ": span " + std::to_string(i) + " (" + p.phone + " " +
                        std::to_string(p.start) + "-" + std::to_string(p.end) + ") is not contiguous from frame " +
                        std::to_string(expect));
    expect = p.end + 1;
  }
}

// Non-overlapping occurrences of the keyword's phone sequence, left to right.
inline std::vector<KeywordSpan> find_keyword_spans(const Alignment& a, const KeywordSpec& kw) {
  std::vector<KeywordSpan> out;
  const std::size_t k = kw.phones.size();
  const int total = a.total_frames();
  for (std::size_t i = 0; k > 0 && i + k <= a.phones.size();) {
    bool match = true;
    for (std::size_t j = 0; j < k && match; ++j) match = a.phones[i + j].phone == kw.phones[j];
    if (!match) {
      ++i;
      continue;
    }
    const PhoneSpan& last = a.phones[i + k - 1];
    KeywordSpan s;
    s.S = a.phones[i].start;
    s.E = last.end;
    s.last_run = last.end - last.start + 1;
    s.E_hat = std::min(s.E + std::min(s.last_run, kMaxExtension), total - 1);
    s.first_phone = static_cast<int>(i);
    out.push_back(s);
    i += k;
  }
  return out;
}

// 1 on the final keyword phone of every occurrence and its extension frames.
inline std::vector<int> frame_labels(const Alignment& a, const KeywordSpec& kw) {
  std::vector<int> labels(a.total_frames(), 0);
  for (const KeywordSpan& s : find_keyword_spans(a, kw))
    for (int f = s.E - s.last_run + 1; f <= s.E_hat; ++f) labels[f] = 1;
  return labels;
}

// TSV: utt_id, phone, start_frame, end_frame; header row required, '#' lines
// skipped. Rows of one utterance must be consecutive.
inline std::vector<Alignment> parse_alignments(std::istream& in, const std::string& what = "alignments") {
  std::vector<Alignment> out;
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
    const std::string where = what + ":" + std::to_string(lineno);
    if (!header) {
      if (cols != std::vector<std::string>{"utt_id", "phone", "start_frame", "end_frame"})
        throw FormatError(where + ": expected header 'utt_id\\tphone\\tstart_frame\\tend_frame'");
      header = true;
      continue;
    }
    if (cols.size() != 4) throw FormatError(where + ": expected 4 columns, got " + std::to_string(cols.size()));
    PhoneSpan p;
    p.phone = cols[1];
    try {
      std::size_t used = 0;
      p.start = std::stoi(cols[2], &used);
      if (used != cols[2].size()) throw std::invalid_argument("start");
      p.end = std::stoi(cols[3], &used);
      if (used != cols[3].size()) throw std::invalid_argument("end");
    } catch (const std::exception&) {
      throw FormatError(where + ": frame indices must be integers");
    }
    if (out.empty() || out.back().utt_id != cols[0]) {
      for (const Alignment& a : out)
        if (a.utt_id == cols[0]) throw FormatError(where + ": rows of " + cols[0] + " are not consecutive");
      out.push_back({cols[0], {}});
    }
    out.back().phones.push_back(p);
  }
  if (!header) throw FormatError(what + ": missing header row");
  for (const Alignment& a : out) validate_alignment(a);
  return out;
}

inline std::vector<Alignment> load_alignments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_alignments(in, path);
}

inline void write_alignments(std::ostream& out, const std::vector<Alignment>& all) {
  out << "utt_id\tphone\tstart_frame\tend_frame\n";
  for (const Alignment& a : all)
    for (const PhoneSpan& p : a.phones) out << a.utt_id << '\t' << p.phone << '\t' << p.start << '\t' << p.end << '\n';
}

}  // namespace heimdal
