#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "heimdal/miner.hpp"
#include "oracles.hpp"

using namespace heimdal;
using namespace heimdal::testing;

namespace {

// Keyword over frames 10-24 with the final phone on 22-24; 40 frames total.
Alignment toy() {
  return alignment_of("toy", {{"sil", 10}, {"h", 2}, {"EY", 2}, {"s", 3}, {"EE", 3}, {"r", 2}, {"ee", 3}, {"sil", 15}});
}

}  // namespace

TEST(Keyword, ToySpanLabelsAndRanges) {
  const Alignment a = toy();
  const auto spans = find_keyword_spans(a, kHeySiri);
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spans[0].S, 10);
  EXPECT_EQ(spans[0].E, 24);
  EXPECT_EQ(spans[0].E_hat, 27);
  EXPECT_EQ(spans[0].last_run, 3);

  const auto labels = frame_labels(a, kHeySiri);
  std::set<int> ones;
  for (int f = 0; f < static_cast<int>(labels.size()); ++f)
    if (labels[f]) ones.insert(f);
  EXPECT_EQ(ones, (std::set<int>{22, 23, 24, 25, 26, 27}));

  EXPECT_EQ(positive_ends(labels, spans[0], 30), (std::vector<int>{24, 25, 26, 27}));
  EXPECT_TRUE(positive_ends(labels, spans[0], 10).empty());
  const int R = 30;
  IndexRange r = negative_range(a, kHeySiri, spans[0], 1, R);
  EXPECT_EQ(r.lo, 10);
  EXPECT_EQ(r.hi, 21);
  r = negative_range(a, kHeySiri, spans[0], 2, R);
  EXPECT_EQ(r.lo, 12);
  EXPECT_EQ(r.hi, 24);
  r = negative_range(a, kHeySiri, spans[0], 3, R);
  EXPECT_EQ(r.lo, 28);
  EXPECT_EQ(r.hi, 39);
}

TEST(Keyword, PositiveOffset) {
  const Alignment a = toy();
  const auto span = find_keyword_spans(a, kHeySiri)[0];
  const auto labels = frame_labels(a, kHeySiri);
  Rng rng(1);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) {
    const auto s = mine_positive(a, labels, span, 30, rng);
    ASSERT_TRUE(s);
    seen.insert(s->end);
    if (s->end == 24) {
      EXPECT_NEAR(s->offset, 14.0 / 30, 1e-6);
      EXPECT_EQ(s->start, -5);
      EXPECT_EQ(s->left_pad, 5);
    }
  }
  EXPECT_EQ(seen, (std::set<int>{24, 25, 26, 27}));
  EXPECT_FALSE(mine_positive(a, labels, span, 10, rng));
}

TEST(Keyword, NonMatchesAndMultiplicity) {
  const Alignment reversed = alignment_of("r", {{"ee", 2}, {"r", 2}, {"EE", 2}, {"s", 2}, {"EY", 2}, {"h", 2}});
  EXPECT_TRUE(find_keyword_spans(reversed, kHeySiri).empty());

  const Alignment twice = alignment_of("t", {{"h", 1}, {"EY", 1}, {"s", 1}, {"EE", 1}, {"r", 1}, {"ee", 2}, {"sil", 4},
                                      {"h", 1}, {"EY", 1}, {"s", 1}, {"EE", 1}, {"r", 1}, {"ee", 1}, {"sil", 2}});
  const auto spans = find_keyword_spans(twice, kHeySiri);
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spans[0].S, 0);
  EXPECT_EQ(spans[1].S, 11);

  const Alignment steel = alignment_of("steel", {{"s", 2}, {"t", 2}, {"ee", 3}, {"ee", 2}, {"l", 2}});
  for (int v : frame_labels(steel, kHeySiri)) EXPECT_EQ(v, 0);
  EXPECT_TRUE(frame_labels(Alignment{"empty", {}}, kHeySiri).empty());
  EXPECT_THROW(KeywordSpec::parse("ee"), ConfigError);
}

TEST(Miner, AdmissibleSetsMatchExhaustiveEnumeration) {
  Rng rng(7);
  int checked = 0;
  for (int i = 0; checked < 40; ++i) {
    const Alignment a = random_toy(rng, i);
    const auto spans = find_keyword_spans(a, kHeySiri);
    const auto labels = frame_labels(a, kHeySiri);
    for (const KeywordSpan& span : spans) {
      for (int R : {5, 9, 17, 30}) {
        const Admissible ref = enumerate(a, span, R);
        const auto ends = positive_ends(labels, span, R);
        EXPECT_EQ(std::set<int>(ends.begin(), ends.end()), ref.positive_ends) << a.utt_id << " R=" << R;
        EXPECT_EQ(range_set(negative_range(a, kHeySiri, span, 1, R)), ref.neg1_ends) << a.utt_id;
        EXPECT_EQ(range_set(negative_range(a, kHeySiri, span, 2, R)), ref.neg2_starts) << a.utt_id;
        EXPECT_EQ(range_set(negative_range(a, kHeySiri, span, 3, R)), ref.neg3_starts) << a.utt_id;
      }
      ++checked;
    }
  }
  EXPECT_GE(checked, 20);
}

TEST(Miner, StructuralInvariantsOnMinedSegments) {
  Rng rng(8);
  std::size_t mined = 0;
  for (int i = 0; mined < 10000; ++i) {
    const Alignment a = random_toy(rng, i);
    const auto spans = find_keyword_spans(a, kHeySiri);
    const auto labels = frame_labels(a, kHeySiri);
    const int R = uniform_int(rng, 5, 30), total = a.total_frames();
    const MinedUtterance m = mine_utterance(a, kHeySiri, R, rng);
    EXPECT_EQ(m.segments.size(), spans.empty() || m.positive_skipped ? 20u : 21u);
    for (const Segment& s : m.segments) {
      ++mined;
      EXPECT_EQ(s.end - s.start + 1, R);
      EXPECT_EQ(s.left_pad, std::max(0, -s.start));
      EXPECT_EQ(s.right_pad, std::max(0, s.end - (total - 1)));
      auto fits = [&](auto pred) { return std::any_of(spans.begin(), spans.end(), pred); };
      switch (s.kind) {
        case SegmentKind::Positive:
          EXPECT_EQ(s.label, 1);
          EXPECT_EQ(labels[s.end], 1);
          EXPECT_TRUE(fits([&](const KeywordSpan& k) {
            // keyword inside, and end - d*R recovers S exactly
            return s.start <= k.S && s.end >= k.E && std::abs(s.end - s.offset * R - k.S) < 1e-9;
          }));
          EXPECT_GE(s.offset, 0.0);
          EXPECT_LE(s.offset, (R - 1.0) / R);
          break;
        case SegmentKind::Neg1:
          EXPECT_EQ(s.label, 0);
          EXPECT_TRUE(fits([&](const KeywordSpan& k) { return s.end >= k.S && s.end < k.E; }));
          break;
        case SegmentKind::Neg2:
          EXPECT_EQ(s.label, 0);
          EXPECT_TRUE(fits([&](const KeywordSpan& k) { return s.end > k.E && s.start > k.S && s.start <= k.E; }));
          break;
        case SegmentKind::Neg3:
          EXPECT_EQ(s.label, 0);
          if (!spans.empty()) {
            EXPECT_TRUE(fits([&](const KeywordSpan& k) { return s.start > k.E_hat; }));
          }
          EXPECT_LT(s.start, total);
          break;
      }
    }
  }
}

TEST(Miner, QuotaAndReallocation) {
  EXPECT_EQ(allocate_negatives({true, true, true}), (std::array<int, 3>{7, 7, 6}));
  EXPECT_EQ(allocate_negatives({true, true, false}), (std::array<int, 3>{10, 10, 0}));
  EXPECT_EQ(allocate_negatives({false, true, true}), (std::array<int, 3>{0, 11, 9}));

  // keyword at the very end: no room after it
  const Alignment tail = alignment_of("tail", {{"sil", 6}, {"h", 2}, {"EY", 2}, {"s", 2}, {"EE", 2}, {"r", 2}, {"ee", 3}});
  Rng rng(9);
  const MinedUtterance m = mine_utterance(tail, kHeySiri, 20, rng);
  std::map<SegmentKind, int> count;
  for (const Segment& s : m.segments) ++count[s.kind];
  EXPECT_EQ(count[SegmentKind::Positive], 1);
  EXPECT_EQ(count[SegmentKind::Neg1], 10);
  EXPECT_EQ(count[SegmentKind::Neg2], 10);
  EXPECT_EQ(count[SegmentKind::Neg3], 0);
}

TEST(Miner, BatchOf64Utterances) {
  std::vector<Alignment> store;
  Rng gen(10);
  for (int i = 0; i < 64; ++i) {
    std::vector<std::pair<std::string, int>> runs = {{"sil", uniform_int(gen, 0, 5) + 1}};
    for (const auto& p : kHeySiri.phones) runs.push_back({p, uniform_int(gen, 2, 4)});
    runs.push_back({"sil", uniform_int(gen, 10, 30)});
    store.push_back(alignment_of("utt" + std::to_string(i), runs));
  }
  std::vector<const Alignment*> batch;
  for (const auto& a : store) batch.push_back(&a);
  Rng rng(11);
  const MinedBatch b = compose_batch(batch, kHeySiri, 35, rng);
  EXPECT_EQ(b.segments.size(), 1344u);
  EXPECT_EQ(std::count_if(b.segments.begin(), b.segments.end(), [](const Segment& s) { return s.label == 1; }), 64);
  EXPECT_TRUE(b.skipped_positive.empty());

  Rng again(11);
  std::ostringstream x, y;
  write_manifest(x, b.segments);
  write_manifest(y, compose_batch(batch, kHeySiri, 35, again).segments);
  EXPECT_EQ(x.str(), y.str());
}

TEST(Miner, KeywordFreeUtterance) {
  const Alignment a = alignment_of("none", {{"sil", 5}, {"t", 3}, {"ee", 4}, {"sil", 8}});
  Rng rng(12);
  const MinedUtterance m = mine_utterance(a, kHeySiri, 9, rng);
  EXPECT_EQ(m.segments.size(), 20u);
  for (const Segment& s : m.segments) {
    EXPECT_EQ(s.label, 0);
    EXPECT_EQ(s.kind, SegmentKind::Neg3);
  }
}

TEST(Manifest, Format) {
  Segment p{"u1", SegmentKind::Positive, -5, 24, 1, 14.0 / 30, 5, 0};
  Segment n{"u1", SegmentKind::Neg2, 12, 41, 0, 0, 0, 2};
  std::ostringstream out;
  write_manifest(out, {p, n});
  EXPECT_EQ(out.str(),
            "utt_id\tkind\tstart_frame\tend_frame\tlabel\toffset_target\tleft_pad\tright_pad\n"
            "u1\tpositive\t-5\t24\t1\t0.466667\t5\t0\n"
            "u1\tneg2\t12\t41\t0\tNA\t0\t2\n");
}

TEST(SegmentFeatures, PaddingColumns) {
  const PadSource pad = make_pad_source();
  ASSERT_EQ(pad.silence.size(), 16u);
  FeatureMatrix f({16, 10});
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(i);
  const Segment s{"u", SegmentKind::Positive, -3, 6, 1, 0, 3, 0};
  int silence = 0, noise = 0;
  Rng rng(13);
  for (int trial = 0; trial < 40; ++trial) {
    const FeatureMatrix x = segment_features(f, s, pad, rng);
    ASSERT_EQ(x.dim(1), 10);
    for (int j = 3; j < 10; ++j)
      for (int r = 0; r < 16; ++r) EXPECT_EQ(x(r, j), f(r, j - 3));
    bool is_silence = true;
    for (int j = 0; j < 3; ++j)
      for (int r = 0; r < 16; ++r) is_silence = is_silence && x(r, j) == pad.silence[r];
    (is_silence ? silence : noise)++;
  }
  EXPECT_GT(silence, 0);
  EXPECT_GT(noise, 0);
}

TEST(AlignmentFile, ParseAndErrors) {
  std::istringstream good(
      "# comment\nutt_id\tphone\tstart_frame\tend_frame\na\tsil\t0\t3\na\tee\t4\t5\nb\tsil\t0\t1\n");
  const auto all = parse_alignments(good);
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].total_frames(), 6);
  std::ostringstream round;
  write_alignments(round, all);
  std::istringstream back(round.str());
  EXPECT_EQ(parse_alignments(back).size(), 2u);

  std::istringstream no_header("a\tsil\t0\t3\n");
  EXPECT_THROW(parse_alignments(no_header), FormatError);
  std::istringstream gap("utt_id\tphone\tstart_frame\tend_frame\na\tsil\t0\t3\na\tee\t5\t6\n");
  EXPECT_THROW(parse_alignments(gap), FormatError);
  std::istringstream bad_int("utt_id\tphone\tstart_frame\tend_frame\na\tsil\t0\tx\n");
  EXPECT_THROW(parse_alignments(bad_int), FormatError);
}
