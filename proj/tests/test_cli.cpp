#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "heimdal/audio.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("heimdal_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "spec.json")
        << R"({"seed": 3, "train_utterances": 8, "test_positive": 3, "test_negative_seconds": 24, "negative_utterance_seconds": 12})";
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static Outcome run(const std::string& args) {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string(HEIMDAL_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  static std::string path(const std::string& rel) { return (dir_ / rel).string(); }

  static void ensure_corpus() {
    if (fs::exists(dir_ / "corpus" / "manifest.tsv")) return;
    ASSERT_EQ(run("synth --spec " + path("spec.json") + " --out " + path("corpus")).code, 0);
  }

  static void ensure_weights() {
    ensure_corpus();
    if (fs::exists(dir_ / "w.hmdl")) return;
    const Outcome r = run("train --config heimdal-lite --data " + path("corpus") + " --out " + path("w.hmdl") +
                      " --epochs 2 --batch 4 --seed 5");
    ASSERT_EQ(r.code, 0) << r.err;
  }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, InspectCanonical) {
  const Outcome r = run("inspect --config heimdal-13k");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("receptive_field: 131\n"), std::string::npos);
  EXPECT_NE(r.out.find("parameters: 14870\n"), std::string::npos);
  EXPECT_NE(r.out.find("2x  1x   1"), std::string::npos) << r.out;
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("inspect").code, 1);
  EXPECT_EQ(run("inspect --config no-such-preset").code, 1);
  EXPECT_EQ(run("mine --align " + path("missing.tsv") + " --keyword \"A B C\" --rf 35 --out x --seed 1").code, 1);
  EXPECT_EQ(run("featurize --wav a --out b --noise c").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, SynthAndMineEchoSeedAndAreDeterministic) {
  ensure_corpus();
  EXPECT_EQ(slurp(dir_ / "corpus" / "manifest.tsv").rfind("# seed: 3\n", 0), 0u);
  const std::string base = "mine --align " + path("corpus/alignments.tsv") + " --keyword \"A B C\" --rf 35 --seed 4 --out ";
  const Outcome a = run(base + path("seg_a.tsv"));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(run(base + path("seg_b.tsv")).code, 0);
  const std::string manifest = slurp(dir_ / "seg_a.tsv");
  EXPECT_EQ(manifest, slurp(dir_ / "seg_b.tsv"));
  EXPECT_EQ(manifest.rfind("# seed: 4\nutt_id\tkind\t", 0), 0u);
  // 13 utterances with 20 negatives each; 4 train and 3 test utterances add a positive
  EXPECT_NE(a.out.find("segments: 267\npositives: 7\n"), std::string::npos) << a.out;
}

TEST_F(Cli, FeaturizeWritesOneFilePerWav) {
  ensure_corpus();
  const Outcome r = run("featurize --wav " + path("corpus/wav/test_pos") + " --out " + path("feat") + " --gain-db -6");
  ASSERT_EQ(r.code, 0) << r.err;
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "feat")) files += e.path().extension() == ".hmft";
  EXPECT_EQ(files, 3);
  EXPECT_EQ(run("featurize --wav " + path("corpus/wav/test_pos") + " --out " + path("feat") + " --gain-db 20").code, 1);
}

TEST_F(Cli, TrainEvalStream) {
  ensure_weights();
  EXPECT_EQ(slurp(dir_ / "w.hmdl.log.csv").rfind("# seed: 5\nepoch,lr,", 0), 0u);
  const Outcome e = run("eval --weights " + path("w.hmdl") + " --pos " + path("corpus/wav/test_pos") + " --neg " +
                    path("corpus/wav/test_neg") + " --op-fa-per-hr 12 --out " + path("eval"));
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("auc: "), std::string::npos);
  EXPECT_EQ(slurp(dir_ / "eval" / "det.csv").rfind("threshold,frr,fa_per_hour\n", 0), 0u);
  EXPECT_EQ(slurp(dir_ / "eval" / "iou.csv").rfind("tau,tpr\n", 0), 0u);
  EXPECT_TRUE(fs::exists(dir_ / "eval" / "det.svg"));

  fs::create_directories(dir_ / "empty");
  const Outcome empty = run("eval --weights " + path("w.hmdl") + " --pos " + path("empty") + " --neg " +
                        path("corpus/wav/test_neg") + " --align " + path("corpus/alignments.tsv") + " --keyword \"A B C\"");
  EXPECT_EQ(empty.code, 2);
  EXPECT_NE(empty.err.find("positive"), std::string::npos) << empty.err;

  // 2 s of audio is shorter than the 35-frame receptive field
  heimdal::AudioBuffer shortie;
  shortie.samples.assign(2 * heimdal::kSampleRate, 0.01f);
  heimdal::save_wav(path("short.wav"), shortie);
  const Outcome s = run("stream --weights " + path("w.hmdl") + " --wav " + path("short.wav") + " --threshold 0.5");
  EXPECT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(s.out, "time_s\tscore\tpredicted_start_s\n");

  const Outcome full = run("stream --weights " + path("w.hmdl") + " --wav " + path("corpus/wav/test_neg/test_neg_00000.wav") +
                       " --threshold 0");
  EXPECT_EQ(full.code, 0) << full.err;
  EXPECT_GT(std::count(full.out.begin(), full.out.end(), '\n'), 1);

  const Outcome bad = run("stream --weights " + path("corpus/keyword.txt") + " --config heimdal-lite --wav " + path("short.wav"));
  EXPECT_EQ(bad.code, 2);
}
