// framegen: corpus generation, training, sampling, evaluation and latency
// benchmarking. Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical
// failure.

#include "framegen/bench.hpp"
#include "framegen/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace framegen;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4;

struct Common {
  std::string config;
  std::vector<std::string> set;
};

RunConfig base_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_config(c.config);
  apply_overrides(rc, c.set);
  return rc;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory '" + dir + "'");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write '" + path + "'");
  return f;
}

Container read_checkpoint(const std::string& path) {
  try {
    return Container::read(path, kCheckpointMagic);
  } catch (const FormatError& e) {
    throw DataError(e.what());
  }
}

// Config stored in a checkpoint plus command-line overrides; the dataset is
// regenerated from it and checked against the stored statistics.
struct Loaded {
  RunConfig rc;
  Dataset ds;
  Model<float> model;
  int stage = 1;
};

Loaded load_for_sampling(const std::string& path, const std::vector<std::string>& set) {
  Container c = read_checkpoint(path);
  Loaded l;
  l.rc = checkpoint_config(c);
  apply_overrides(l.rc, set);
  std::cerr << "regenerating corpus (" << l.rc.data.clips << " clips)\n";
  l.ds = generate_dataset(l.rc.data);
  l.model = load_sampling_model(c, l.rc, l.ds);
  l.stage = checkpoint_stage(c);
  return l;
}

HeadMode parse_mode(const std::string& s) {
  try {
    return head_mode_from_string(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void set_mode(Loaded& l, const std::string& mode, int nfe) {
  const HeadMode m = parse_mode(mode);
  if (m == HeadMode::ect && l.stage != 2) throw ConfigError("consistency sampling needs a stage-2 checkpoint");
  set_sampling(l.rc, m, nfe);
  l.rc.validate();
}

std::vector<Frame> render_frames(const SceneSpec& s, const Dataset& ds) { return render(s, ds.cfg.toy).frames; }

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, int clips, int frames, std::uint64_t seed, const std::string& out) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_config(c.config);
  rc.data.clips = clips;
  rc.data.frames = frames;
  rc.data.seed = seed;
  apply_overrides(rc, c.set);
  ensure_dir(out);
  Dataset ds = generate_dataset(rc.data);
  const std::string manifest = corpus_manifest(ds);
  open_out(out + "/manifest.jsonl") << manifest;
  open_out(out + "/config.txt") << rc.to_text();
  Container corpus = make_corpus(ds, rc);
  try {
    corpus.write(out + "/corpus.frd");
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  const double err = verify_corpus(Container::read(out + "/corpus.frd", kDataMagic), ds);
  std::cout << "{\"clips\":" << ds.clips.size() << ",\"manifest_hash\":\"" << hex64(fnv1a(manifest))
            << "\",\"config_hash\":\"" << rc.run_hash() << "\",\"roundtrip_error\":" << err << "}\n";
  return kOk;
}

int cmd_train(int stage, const Common& c, const std::string& resume, const std::string& init, const std::string& out) {
  RunConfig rc = base_config(c);
  ensure_dir(out);
  Dataset ds = generate_dataset(rc.data);
  const TrainConfig& tc = stage == 1 ? rc.stage1 : rc.stage2;
  TrainState<float> s;
  if (!resume.empty()) {
    Container ck = read_checkpoint(resume);
    if (checkpoint_stage(ck) != stage)
      throw ConfigError("--resume checkpoint is from stage " + std::to_string(checkpoint_stage(ck)));
    s = load_train_state(ck, rc, ds, tc);
  } else if (stage == 1) {
    s = fresh_stage1(rc, ds);
  } else {
    if (init.empty()) throw ConfigError("train-stage2 needs --init <stage-1 checkpoint> or --resume");
    s = stage2_from_checkpoint(read_checkpoint(init), rc, ds);
  }
  const std::string tag = "stage" + std::to_string(stage);
  std::ofstream log(out + "/" + tag + "_loss.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError("cannot write the loss log in '" + out + "'");
  open_out(out + "/" + tag + "_config.txt") << rc.to_text();
  std::cerr << tag << ": " << s.iter << " -> " << tc.iterations << " iterations, " << s.student.parameter_count()
            << " parameters\n";
  run_stage(s, rc, ds, tc, out + "/" + tag + ".frc", &log);
  std::cout << "{\"stage\":" << stage << ",\"iterations\":" << s.iter << ",\"checkpoint\":\"" << out << "/" << tag
            << ".frc\",\"config_hash\":\"" << rc.run_hash() << "\"}\n";
  return kOk;
}

struct SampleArgs {
  std::string checkpoint, mode = "diffusion", rope = "none", out = "sample_out";
  int clip = 0, nfe = 59, frames = 0;
  long rope_target = 0, swa = 0;
  double omega = -1.0;
  std::uint64_t seed = 11;
};

int cmd_sample(const Common& c, const SampleArgs& a) {
  Loaded l = load_for_sampling(a.checkpoint, c.set);
  set_mode(l, a.mode, a.nfe);
  if (a.omega >= 0.0) l.rc.sampler.omega = a.omega;
  l.rc.rope.mode = rope_mode_from_string(a.rope);
  l.rc.rope.swa_window = a.swa;
  if (a.clip < 0 || a.clip >= static_cast<int>(l.ds.clips.size()))
    throw ConfigError("--clip must index the corpus (0.." + std::to_string(l.ds.clips.size() - 1) + ")");
  SceneSpec spec = l.ds.clips[static_cast<size_t>(a.clip)].spec;
  if (a.frames > 0) spec.n_frames = a.frames;
  l.rc.rope.n_target = a.rope_target > 0 ? a.rope_target : std::max<long>(l.rc.n_train(), 2L * spec.n_frames);
  l.rc.validate();
  const RopeConfig rope = l.rc.rope_config();
  const SamplerConfig sc = l.rc.sampler_config();
  ensure_dir(a.out);
  GenerationSession<float> session(l.model, sc, rope, a.seed, l.ds);
  GenerationResult r;
  try {
    r = session.run(render_frames(spec, l.ds));
  } catch (const std::length_error& e) {
    throw ConfigError(e.what());
  }
  if (!r.latents.allFinite()) throw NumericalError("sampling produced non-finite latents");
  write_waveform(a.out + "/waveform.frw", r.waveform);
  {
    auto f = open_out(a.out + "/latents.csv");
    f.precision(9);
    const Mat<double> raw = l.ds.destandardize(r.latents);
    for (Index i = 0; i < raw.rows(); ++i)
      for (Index j = 0; j < raw.cols(); ++j) f << raw(i, j) << (j + 1 < raw.cols() ? "," : "\n");
  }
  open_out(a.out + "/manifest.jsonl") << generation_manifest(r, sc);
  std::cout << "{\"frames\":" << r.latents.rows() << ",\"mode\":\"" << to_string(sc.mode) << "\",\"nfe\":" << sc.nfe()
            << ",\"omega\":" << sc.omega << ",\"rope\":\"" << to_string(rope.mode) << "\",\"config_hash\":\""
            << l.rc.run_hash() << "\"}\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, split = "test", metrics = "mmd,frechet,nll,lag,period", mode = "diffusion", out;
  int nfe = 59;
  bool oracle = false;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  Loaded l = load_for_sampling(a.checkpoint, c.set);
  set_mode(l, a.mode, a.nfe);
  if (a.split != "train" && a.split != "test") throw ConfigError("--split must be train or test");
  std::set<std::string> want;
  std::stringstream ss(a.metrics);
  for (std::string m; std::getline(ss, m, ',');) {
    if (m != "mmd" && m != "frechet" && m != "nll" && m != "lag" && m != "period") throw ConfigError("unknown metric '" + m + "'");
    want.insert(m);
  }
  std::vector<EvalClip> clips, periodic;
  for (const ClipRecord* r : l.ds.select(a.split)) {
    EvalClip e{r->spec, r->latents, r->events, r->tokens};
    (r->family == "periodic" ? periodic : clips).push_back(e);
  }
  if (clips.empty()) throw DataError("split '" + a.split + "' has no random-family clips");
  const ToyProcess& toy = l.ds.cfg.toy;
  l.rc.sampler.omega = l.rc.eval.omega;
  const SamplerConfig sc = l.rc.sampler_config();
  const RopeConfig rope = l.rc.rope_config();
  auto generate = [&](const std::vector<EvalClip>& cl, std::uint64_t seed) {
    if (!a.oracle) return generate_eval<float>(l.model, l.ds, sc, rope, cl, seed);
    Rng rng(seed);
    std::vector<Mat<double>> out;
    for (const auto& e : cl) {
      Mat<double> x(e.latents.rows(), e.latents.cols());
      Vec<double> prev = Vec<double>::Zero(x.cols());
      for (Index i = 0; i < x.rows(); ++i) {
        prev = oracle_sample(toy, prev, e.events.active(i), rng);
        x.row(i) = prev.transpose();
      }
      out.push_back(std::move(x));
    }
    return out;
  };
  MetricReport rep;
  rep.config_hash = l.rc.run_hash();
  auto gen = generate(clips, l.rc.sample_seed);
  DistributionEval d = distribution_eval(toy, gen, clips, l.rc.eval.pairs_per_clip, l.rc.eval.permutations, l.rc.eval.seed);
  if (want.count("mmd")) {
    rep.mmd2 = d.mmd.mmd2;
    rep.mmd_p = d.mmd.p_value;
  }
  if (want.count("frechet")) rep.frechet = d.frechet.distance;
  if (want.count("nll")) rep.oracle_nll = d.oracle_nll;
  if (want.count("lag")) rep.event_lag = generated_event_lag(toy, gen, clips);
  if (want.count("period") && !periodic.empty())
    rep.period_error = mean_period_error(toy, generate(periodic, l.rc.sample_seed + 7), periodic, 0, l.ds.cfg.frames);
  const std::string line = rep.json();
  std::cout << line << "\n";
  if (!a.out.empty()) open_out(a.out) << line << "\n";
  return kOk;
}

struct BenchArgs {
  std::string checkpoint, mode = "diffusion", csv, out;
  int clips = 53, nfe = 59, warmup = 3;
};

int cmd_bench(const Common& c, const BenchArgs& a) {
  if (a.clips < a.warmup + 1)
    throw ConfigError("bench-latency needs at least " + std::to_string(a.warmup + 1) + " clips (" +
                      std::to_string(a.warmup) + " warm-up + 1)");
  Loaded l = load_for_sampling(a.checkpoint, c.set);
  set_mode(l, a.mode, a.nfe);
  std::vector<std::vector<Frame>> frames;
  for (int i = 0; i < a.clips; ++i) frames.push_back(render_frames(random_scene(900001ull + static_cast<std::uint64_t>(i), l.ds.cfg), l.ds));
  ModelWorkload<float> w(l.model, l.rc.sampler_config(), l.rc.rope_config(), l.ds, std::move(frames), l.rc.sample_seed);
  LatencyReport r = measure_latency(w, static_cast<size_t>(a.clips), a.warmup);
  r.nfe = l.rc.sampler_config().nfe();
  r.config_hash = l.rc.run_hash();
  if (r.coarse_clock) std::cerr << "warning: clock resolution is coarser than 0.1 ms\n";
  if (!a.csv.empty()) {
    auto f = open_out(a.csv);
    r.write_csv(f);
  }
  std::cout << r.json() << "\n";
  if (!a.out.empty()) open_out(a.out) << r.json() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"frame-level online video-to-audio generation on a synthetic toy task"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config, "key = value configuration file");
    s->add_option("--set", common.set, "override one key (key=value), repeatable");
  };

  int g_clips = 512, g_frames = 32;
  std::uint64_t g_seed = 1;
  std::string g_out = "data";
  auto* gen = app.add_subcommand("gen-data", "generate the toy corpus, manifest and oracle latents");
  add_common(gen);
  gen->add_option("--clips", g_clips, "number of clips");
  gen->add_option("--frames", g_frames, "frames per clip");
  gen->add_option("--seed", g_seed, "corpus seed");
  gen->add_option("--out", g_out, "output directory");

  std::string t_resume, t_init, t_out = "run";
  auto* t1 = app.add_subcommand("train-stage1", "diffusion pretraining");
  auto* t2 = app.add_subcommand("train-stage2", "consistency tuning from a stage-1 checkpoint");
  for (auto* s : {t1, t2}) {
    add_common(s);
    s->add_option("--resume", t_resume, "continue from a checkpoint of the same stage");
    s->add_option("--out", t_out, "output directory");
  }
  t2->add_option("--init", t_init, "stage-1 checkpoint to start from");

  SampleArgs sa;
  auto* smp = app.add_subcommand("sample", "generate audio for one corpus clip");
  smp->add_option("--set", common.set, "override one key (key=value), repeatable");
  smp->add_option("--checkpoint", sa.checkpoint, "checkpoint file")->required();
  smp->add_option("--clip", sa.clip, "corpus clip index");
  smp->add_option("--frames", sa.frames, "render the clip's scene with this many frames");
  smp->add_option("--mode", sa.mode, "diffusion | ect");
  smp->add_option("--nfe", sa.nfe, "head evaluations per token (diffusion: 2N-1, ect: 1, 2, 4)");
  smp->add_option("--omega", sa.omega, "guidance scale");
  smp->add_option("--rope", sa.rope, "none | pi | ntk");
  smp->add_option("--rope-target", sa.rope_target, "extended context in positions");
  smp->add_option("--swa", sa.swa, "sliding attention window (0 = off)");
  smp->add_option("--seed", sa.seed, "sampling seed");
  smp->add_option("--out", sa.out, "output directory");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "metric battery on a corpus split");
  ev->add_option("--set", common.set, "override one key (key=value), repeatable");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  ev->add_option("--split", ea.split, "train | test");
  ev->add_option("--metrics", ea.metrics, "comma list of mmd, frechet, nll, lag, period");
  ev->add_option("--mode", ea.mode, "diffusion | ect");
  ev->add_option("--nfe", ea.nfe, "head evaluations per token");
  ev->add_flag("--oracle", ea.oracle, "score oracle resamples instead of the model");
  ev->add_option("--out", ea.out, "also write the report line here");

  BenchArgs ba;
  auto* bn = app.add_subcommand("bench-latency", "per-frame token and waveform latency");
  bn->add_option("--set", common.set, "override one key (key=value), repeatable");
  bn->add_option("--checkpoint", ba.checkpoint, "checkpoint file")->required();
  bn->add_option("--clips", ba.clips, "clips including warm-up");
  bn->add_option("--warmup", ba.warmup, "warm-up clips");
  bn->add_option("--mode", ba.mode, "diffusion | ect");
  bn->add_option("--nfe", ba.nfe, "head evaluations per token");
  bn->add_option("--csv", ba.csv, "per-frame latency CSV");
  bn->add_option("--out", ba.out, "also write the report line here");

  auto* ref = app.add_subcommand("config-reference", "print every configuration key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_gen_data(common, g_clips, g_frames, g_seed, g_out);
    if (*t1) return cmd_train(1, common, t_resume, "", t_out);
    if (*t2) return cmd_train(2, common, t_resume, t_init, t_out);
    if (*smp) return cmd_sample(common, sa);
    if (*ev) return cmd_eval(common, ea);
    if (*bn) return cmd_bench(common, ba);
    if (*ref) {
      std::cout << config_reference();
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::length_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  }
  return kOk;
}
