// heimdal: synthetic corpus, features, mining, training, evaluation and
// streaming detection from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 data or format error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "heimdal/pipeline.hpp"

namespace fs = std::filesystem;
using namespace heimdal;

namespace {

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

// A preset name or an existing JSON file; anything else is a usage error.
ModelConfig config_arg(const std::string& name_or_path) {
  if (!is_preset(name_or_path) && !fs::is_regular_file(name_or_path))
    throw UsageError("--config '" + name_or_path + "' is neither a preset nor a file");
  return load_model_config(name_or_path);
}

fs::path config_sidecar(const fs::path& weights) { return fs::path(weights.string() + ".config.json"); }

// Weights plus the config written next to them by `train`, unless given.
std::shared_ptr<const Network<float>> load_network(const std::string& weights, const std::string& config) {
  const std::string source = config.empty() ? config_sidecar(weights).string() : config;
  if (config.empty() && !fs::exists(source))
    throw UsageError("no --config given and " + source + " does not exist");
  const ModelConfig c = config_arg(source);
  return std::make_shared<const Network<float>>(c, load_weights(weights, c));
}

// Frame t is reported at the centre of its analysis window.
double frame_seconds(long t) {
  return (static_cast<double>(t) * kFrameHop + kFrameLength / 2.0) / kSampleRate;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

void run_synth(const SynthArgs& a) {
  SynthSpec spec = a.spec.empty() ? SynthSpec{} : load_synth_spec(a.spec);
  if (a.seed) spec.seed = *a.seed;
  const auto rows = generate(spec, a.out);
  std::size_t keyword = 0;
  for (const ManifestRow& r : rows) keyword += r.contains_keyword;
  std::printf("# seed: %llu\nutterances: %zu\nwith_keyword: %zu\nout: %s\n",
              static_cast<unsigned long long>(spec.seed), rows.size(), keyword, a.out.c_str());
}

struct FeaturizeArgs {
  std::string wav, out, noise;
  double gain_db = 0, snr_db = 0;
  std::uint64_t seed = 0;
  int jobs = 1;
};

void run_featurize(const FeaturizeArgs& a) {
  if (a.gain_db < kMinGainDb || a.gain_db > kMaxGainDb)
    throw UsageError("--gain-db must be in [" + std::to_string(kMinGainDb) + ", " + std::to_string(kMaxGainDb) + "]");
  const auto wavs = list_wavs(a.wav);
  std::vector<AudioBuffer> noise;
  if (!a.noise.empty()) {
    for (const fs::path& p : list_wavs(a.noise)) noise.push_back(load_wav(p.string()));
    if (noise.empty()) throw FormatError("no noise clips in " + a.noise);
  }
  fs::create_directories(a.out);
  parallel_for(wavs.size(), a.jobs, [&](std::size_t i) {
    AudioBuffer audio = apply_gain_db(load_wav(wavs[i].string()), a.gain_db);
    if (!noise.empty()) {
      // noise clip chosen per file from its own stream, independent of --jobs
      Rng rng(derive_seed(a.seed, i));
      audio = mix_noise(audio, noise[uniform_int(rng, 0, static_cast<int>(noise.size()) - 1)], a.snr_db);
    }
    save_features((fs::path(a.out) / (wavs[i].stem().string() + ".hmft")).string(), mfcc(audio));
  });
  std::printf("# seed: %llu\nfeaturized: %zu\n", static_cast<unsigned long long>(a.seed), wavs.size());
}

struct MineArgs {
  std::string align, keyword, out;
  int rf = 0;
  std::uint64_t seed = 0;
};

void run_mine(const MineArgs& a) {
  if (a.rf < 1) throw UsageError("--rf must be >= 1");
  const KeywordSpec kw = KeywordSpec::parse(a.keyword);
  const auto alignments = load_alignments(a.align);
  std::vector<const Alignment*> ptrs;
  for (const Alignment& al : alignments) ptrs.push_back(&al);
  Rng rng(a.seed);
  const MinedBatch batch = compose_batch(ptrs, kw, a.rf, rng);
  std::ofstream out = open_output(a.out);
  out << "# seed: " << a.seed << "\n";
  write_manifest(out, batch.segments);
  std::size_t positives = 0;
  for (const Segment& s : batch.segments) positives += s.label == 1;
  std::printf("# seed: %llu\nutterances: %zu\nsegments: %zu\npositives: %zu\nskipped_positive: %zu\n",
              static_cast<unsigned long long>(a.seed), alignments.size(), batch.segments.size(), positives,
              batch.skipped_positive.size());
}

struct InspectArgs {
  std::string config;
  int frames = 0;
};

void run_inspect(const InspectArgs& a) {
  const ModelConfig c = config_arg(a.config);
  const int R = receptive_field(c);
  const int T = a.frames > 0 ? a.frames : R;
  std::printf("config: %s\nreceptive_field: %d\nparameters: %zu\ninput: 1x%dx%d\n", c.name.c_str(), R,
              parameter_count(c), c.input_freq, T);
  for (const StageShape& s : shape_ledger(c, T))
    std::printf("%-8s %-10s %3dx%3dx%4d -> %3dx%3dx%4d\n", s.name.c_str(), to_string(s.kind), s.input[0], s.input[1],
                s.input[2], s.output[0], s.output[1], s.output[2]);
}

struct TrainArgs {
  std::string config, data, out, log, init, noise;
  int epochs = kScheduleEpochs, batch = 64, jobs = 1;
  double lr = kBaseLearningRate;
  std::uint64_t seed = 0;
  bool augment = false;
};

void run_train(const TrainArgs& a) {
  const ModelConfig config = config_arg(a.config);
  const Corpus corpus = open_corpus(a.data);
  TrainData data = load_train_data(corpus, "train", a.augment, a.jobs);
  if (!a.noise.empty())
    for (const fs::path& p : list_wavs(a.noise)) data.noise.push_back(load_wav(p.string()));
  TrainOptions opt;
  opt.epochs = a.epochs;
  opt.batch_utterances = a.batch;
  opt.lr = a.lr;
  opt.seed = a.seed;
  opt.augment = a.augment;
  std::optional<WeightStore<float>> initial;
  if (!a.init.empty()) initial = load_weights(a.init, config);

  const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.csv") : fs::path(a.log);
  std::ofstream log = open_output(log_path);
  log << "# seed: " << a.seed << "\n";
  write_epoch_log_header(log);
  const TrainResult r = train(
      data, config, opt,
      [&](const EpochLog& e, const WeightStore<float>&) {
        write_epoch_log_row(log, e);
        log.flush();
        std::fprintf(stderr, "epoch %d/%d lr %.6f loss %.6f\n", e.epoch + 1, opt.epochs, e.lr, e.mean_loss);
      },
      initial);
  open_output(a.out).close();
  save_weights(r.weights, a.out);
  open_output(config_sidecar(a.out)) << to_json(config).dump(2) << "\n";
  std::printf("# seed: %llu\nutterances: %zu\nepochs: %d\nfinal_loss: %.6f\nskipped_positive: %zu\nweights: %s\n",
              static_cast<unsigned long long>(a.seed), data.utterances.size(), opt.epochs, r.log.back().mean_loss,
              r.skipped_positive.size(), a.out.c_str());
}

struct EvalArgs {
  std::string weights, config, pos, neg, align, keyword, out = "eval";
  double op = 12;
  int jobs = 1;
};

// Looks for alignments.tsv and keyword.txt in `dir` and its ancestors.
fs::path find_upwards(fs::path dir, const std::string& name) {
  for (dir = fs::absolute(dir); !dir.empty(); dir = dir.parent_path()) {
    if (fs::exists(dir / name)) return dir / name;
    if (dir == dir.root_path()) break;
  }
  throw UsageError("cannot find " + name + " above the positive directory; pass it explicitly");
}

void run_eval(const EvalArgs& a) {
  if (!(a.op > 0)) throw UsageError("--op-fa-per-hr must be > 0");
  const auto net = load_network(a.weights, a.config);
  const fs::path align = a.align.empty() ? find_upwards(a.pos, "alignments.tsv") : fs::path(a.align);
  const KeywordSpec kw = a.keyword.empty() ? load_keyword(find_upwards(a.pos, "keyword.txt").string())
                                           : KeywordSpec::parse(a.keyword);
  std::map<std::string, Alignment> alignments;
  for (Alignment& al : load_alignments(align.string())) {
    const std::string id = al.utt_id;
    alignments.emplace(id, std::move(al));
  }
  const auto pos = load_eval_inputs(a.pos, &alignments, &kw, a.jobs);
  if (pos.empty()) throw FormatError("no WAV files in positive directory " + a.pos);
  const auto neg = load_eval_inputs(a.neg, nullptr, nullptr, a.jobs);
  if (neg.empty()) throw FormatError("no WAV files in negative directory " + a.neg);
  const EvalReport r = evaluate(net, pos, neg, a.op, a.jobs);

  const fs::path out(a.out);
  {
    std::ofstream f = open_output(out / "det.csv");
    write_det_csv(f, r.det);
  }
  {
    std::ofstream f = open_output(out / "det.svg");
    write_det_svg(f, r.det);
  }
  {
    std::ofstream f = open_output(out / "iou.csv");
    write_iou_csv(f, r.iou);
  }
  {
    std::ofstream f = open_output(out / "iou.svg");
    write_iou_svg(f, r.iou);
  }
  char summary[512];
  std::snprintf(summary, sizeof summary,
                "positives: %ld\nnegative_hours: %.4f\noperating_fa_per_hr: %g\nthreshold: %.6f\nfa_per_hr: %.4f\n"
                "frr: %.6f\nfrr_interpolated: %.6f\nauc: %.6f\n",
                r.det.positives, r.det.negative_hours, a.op, r.op.point.threshold, r.op.point.fa_per_hour,
                r.op.point.frr, r.op.interpolated_frr, r.iou.auc);
  open_output(out / "summary.txt") << summary;
  std::fputs(summary, stdout);
}

struct StreamArgs {
  std::string weights, config, wav;
  double threshold = 0.5;
  bool prime = false;
};

void run_stream(const StreamArgs& a) {
  if (!(a.threshold >= 0 && a.threshold <= 1)) throw UsageError("--threshold must be in [0, 1]");
  const auto net = load_network(a.weights, a.config);
  const FeatureMatrix f = mfcc(load_wav(a.wav));
  const auto frames = a.prime ? score_frames(net, f) : stream_file<float>(net, f);
  std::printf("time_s\tscore\tpredicted_start_s\n");
  const int R = net->receptive_field();
  for (const TriggerEvent& peak : decode_events(frames, a.threshold, R)) {
    const TriggerEvent e = localize_at(peak, frames, a.threshold, R);
    std::printf("%.3f\t%.6f\t%.3f\n", frame_seconds(e.predicted_end), e.peak_score, frame_seconds(e.predicted_start));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming wake-word detection and localization toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic keyword corpus");
  s->add_option("--spec", synth.spec, "Corpus spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Override the spec seed");

  FeaturizeArgs feat;
  auto* f = app.add_subcommand("featurize", "Compute MFCC feature files for a directory of WAVs");
  f->add_option("--wav", feat.wav, "Input WAV directory")->required();
  f->add_option("--out", feat.out, "Output directory")->required();
  f->add_option("--gain-db", feat.gain_db, "Gain applied before featurization");
  auto* noise = f->add_option("--noise", feat.noise, "Directory of noise WAVs to mix in");
  auto* snr = f->add_option("--snr-db", feat.snr_db, "Signal-to-noise ratio for --noise");
  noise->needs(snr);
  snr->needs(noise);
  auto* fseed = f->add_option("--seed", feat.seed, "Seed for noise clip selection");
  noise->needs(fseed);
  f->add_option("--jobs", feat.jobs, "Worker threads")->check(CLI::PositiveNumber);

  MineArgs mine;
  auto* m = app.add_subcommand("mine", "Mine one positive and twenty negative segments per utterance");
  m->add_option("--align", mine.align, "Alignment TSV")->required()->check(CLI::ExistingFile);
  m->add_option("--keyword", mine.keyword, "Keyword phone sequence, e.g. \"A B C\"")->required();
  m->add_option("--rf", mine.rf, "Receptive field in frames")->required();
  m->add_option("--out", mine.out, "Segment manifest TSV")->required();
  m->add_option("--seed", mine.seed, "Random seed")->required();

  InspectArgs inspect;
  auto* i = app.add_subcommand("inspect", "Print receptive field, per-stage shapes and parameter count");
  i->add_option("--config", inspect.config, "Preset name or config JSON")->required();
  i->add_option("--frames", inspect.frames, "Input frames for the shape listing (default: receptive field)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on the train split of a corpus directory");
  t->add_option("--config", tr.config, "Preset name or config JSON")->required();
  t->add_option("--data", tr.data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", tr.out, "Output weights file")->required();
  t->add_option("--epochs", tr.epochs, "Epochs")->check(CLI::PositiveNumber);
  t->add_option("--seed", tr.seed, "Random seed")->required();
  t->add_option("--batch", tr.batch, "Utterances per step")->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.lr, "Base learning rate");
  t->add_option("--log", tr.log, "Epoch log CSV (default: <out>.log.csv)");
  t->add_option("--init", tr.init, "Start from these weights")->check(CLI::ExistingFile);
  t->add_flag("--augment", tr.augment, "Time-domain gain (and noise with --noise) before featurization");
  t->add_option("--noise", tr.noise, "Noise WAV directory for augmentation")->check(CLI::ExistingDirectory);
  t->add_option("--jobs", tr.jobs, "Threads for loading audio")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "DET curve, FRR at an operating point and IOU-vs-TPR");
  e->add_option("--weights", ev.weights, "Weights file")->required()->check(CLI::ExistingFile);
  e->add_option("--config", ev.config, "Model config (default: <weights>.config.json)");
  e->add_option("--pos", ev.pos, "Directory of keyword WAVs")->required();
  e->add_option("--neg", ev.neg, "Directory of keyword-free WAVs")->required();
  e->add_option("--op-fa-per-hr", ev.op, "Operating point in false accepts per hour");
  e->add_option("--align", ev.align, "Alignment TSV (default: found above --pos)");
  e->add_option("--keyword", ev.keyword, "Keyword phones (default: keyword.txt above --pos)");
  e->add_option("--out", ev.out, "Output directory for CSV and SVG files");
  e->add_option("--jobs", ev.jobs, "Worker threads")->check(CLI::PositiveNumber);

  StreamArgs st;
  auto* sm = app.add_subcommand("stream", "Print trigger events for one WAV file");
  sm->add_option("--weights", st.weights, "Weights file")->required()->check(CLI::ExistingFile);
  sm->add_option("--config", st.config, "Model config (default: <weights>.config.json)");
  sm->add_option("--wav", st.wav, "Input WAV")->required();
  sm->add_option("--threshold", st.threshold, "Detection threshold");
  sm->add_flag("--prime", st.prime, "Prime the stream with R - 1 silence frames");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*s) run_synth(synth);
    else if (*f) run_featurize(feat);
    else if (*m) run_mine(mine);
    else if (*i) run_inspect(inspect);
    else if (*t) run_train(tr);
    else if (*e) run_eval(ev);
    else if (*sm) run_stream(st);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}
