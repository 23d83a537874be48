#pragma once

// Line-based key = value run configuration. Every knob has a documented key;
// unknown keys are rejected. The model hash covers the keys that fix the
// parameter shapes and data geometry; the run hash covers everything.

#include "framegen/dataset.hpp"
#include "framegen/model.hpp"
#include "framegen/sampler.hpp"
#include "framegen/training.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct EvalConfig {
  int clips = 512;  // fresh test scenes for distribution metrics
  int pairs_per_clip = 4;
  int permutations = 200;
  int contexts = 100;
  int samples = 256;
  int periodic_scenes = 32;
  double omega = 1.0;  // guidance for metrics scored against the oracle
  std::uint64_t seed = 2024;
};

struct BenchConfig {
  int clips = 53;
  int warmup = 3;
};

struct RunConfig {
  DataConfig data;
  int agg_dim = 32, agg_heads = 2, agg_out = 64;
  int d_model = 64, depth = 4, heads = 4;
  int head_width = 128, head_blocks = 3, fourier = 64;
  double sigma_data = kSigmaData;
  std::uint64_t init_seed = 1;
  RopeConfig rope;  // n_train = 0 selects 2 * data.frames
  TrainConfig stage1 = default_stage1(), stage2 = default_stage2();
  SamplerConfig sampler;
  int cm_nfe = 4;
  std::uint64_t sample_seed = 11;
  EvalConfig eval;
  BenchConfig bench;

  static TrainConfig default_stage1() {
    TrainConfig t;
    t.stage = 1;
    t.iterations = 20000;
    t.total_iterations = 20000;
    t.adam.lr = 1e-3;
    t.ema_rate = 0.995;
    t.noise = NoiseSamplerCfg::stage1();
    t.log_every = 250;
    t.seed = 101;
    return t;
  }

  static TrainConfig default_stage2() {
    TrainConfig t;
    t.stage = 2;
    t.iterations = 10000;
    t.total_iterations = 10000;
    t.adam.lr = 1e-4;
    t.ema_rate = 0.993;
    t.noise = NoiseSamplerCfg::stage2();
    t.preset = EctPreset::cf;
    t.log_every = 250;
    t.seed = 202;
    return t;
  }

  RunConfig() { rope.n_train = 0, rope.n_target = 0; }

  long n_train() const { return rope.n_train > 0 ? rope.n_train : 2L * data.frames; }

  // Inference-time rope: training window plus the requested extension.
  RopeConfig rope_config() const {
    RopeConfig r = rope;
    r.n_train = n_train();
    r.n_target = rope.n_target > 0 ? rope.n_target : r.n_train;
    return r;
  }

  SamplerConfig sampler_config() const {
    SamplerConfig s = sampler;
    if (s.mode == HeadMode::ect) s.cm_ts = cm_schedule(cm_nfe);
    return s;
  }

  // Needs the dataset for the vision feature width (PCA components).
  ModelConfig model_config(const Dataset& ds) const {
    ModelConfig m;
    m.agg = ds.aggregator_geometry();
    m.agg.dim = agg_dim;
    m.agg.heads = agg_heads;
    m.agg.out_dim = agg_out;
    m.backbone.c_x = ds.cfg.toy.latent_dim();
    m.backbone.d_model = d_model;
    m.backbone.depth = depth;
    m.backbone.heads = heads;
    m.head.width = head_width;
    m.head.blocks = head_blocks;
    m.head.fourier = fourier;
    m.head.sigma_data = sigma_data;
    m.rope = rope;
    m.rope.n_train = m.rope.n_target = n_train();
    m.rope.mode = RopeMode::none;
    m.rope.swa_window = 0;
    m.sync();
    return m;
  }

  void validate() const;
  std::string to_text() const;
  std::string model_hash() const;
  std::string run_hash() const { return hex64(fnv1a(to_text())); }
};

namespace config_detail {

struct Field {
  std::string key;
  std::string doc;
  bool model;  // part of the model hash
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string fmt(long long v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }

template <class I>
I parse_int(const std::string& key, const std::string& s) {
  I v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("config: " + key + ": expected an integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& key, const std::string& s) {
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError("config: " + key + ": expected a number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config: " + key + ": expected true|false, got '" + s + "'");
}

template <class Get>
Field int_field(std::string key, std::string doc, bool model, Get ref) {
  return {key, std::move(doc), model, [ref](const RunConfig& c) { return fmt(static_cast<long long>(ref(const_cast<RunConfig&>(c)))); },
          [ref, key](RunConfig& c, const std::string& s) {
            auto& r = ref(c);
            r = parse_int<std::remove_reference_t<decltype(r)>>(key, s);
          }};
}

template <class Get>
Field real_field(std::string key, std::string doc, bool model, Get ref) {
  return {key, std::move(doc), model, [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& s) { ref(c) = parse_double(key, s); }};
}

template <class Get>
Field bool_field(std::string key, std::string doc, bool model, Get ref) {
  return {key, std::move(doc), model, [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& s) { ref(c) = parse_bool(key, s); }};
}

inline void add_train_fields(std::vector<Field>& f, const std::string& p, TrainConfig RunConfig::*tc, bool stage2) {
  auto T = [tc](RunConfig& c) -> TrainConfig& { return c.*tc; };
  f.push_back(int_field(p + ".iterations", "optimizer steps", false, [T](RunConfig& c) -> long& { return T(c).iterations; }));
  f.push_back(int_field(p + ".batch", "clips per step", false, [T](RunConfig& c) -> int& { return T(c).batch; }));
  f.push_back(int_field(p + ".draws", "noise draws per token", false, [T](RunConfig& c) -> int& { return T(c).draws; }));
  f.push_back(real_field(p + ".lr", "AdamW learning rate", false, [T](RunConfig& c) -> double& { return T(c).adam.lr; }));
  f.push_back(real_field(p + ".beta1", "AdamW beta1", false, [T](RunConfig& c) -> double& { return T(c).adam.beta1; }));
  f.push_back(real_field(p + ".beta2", "AdamW beta2", false, [T](RunConfig& c) -> double& { return T(c).adam.beta2; }));
  f.push_back(real_field(p + ".weight_decay", "decoupled weight decay", false, [T](RunConfig& c) -> double& { return T(c).adam.weight_decay; }));
  f.push_back(real_field(p + ".grad_clip", "global gradient-norm clip (<= 0 disables)", false, [T](RunConfig& c) -> double& { return T(c).adam.clip; }));
  f.push_back(real_field(p + ".ema_rate", stage2 ? "teacher EMA rate" : "sampling EMA rate", false, [T](RunConfig& c) -> double& { return T(c).ema_rate; }));
  f.push_back(real_field(p + ".dropout", "residual dropout", false, [T](RunConfig& c) -> double& { return T(c).dropout; }));
  f.push_back(real_field(p + ".cfg_dropout", "probability of nulling a clip's vision", false, [T](RunConfig& c) -> double& { return T(c).cfg_dropout; }));
  f.push_back(real_field(p + ".p_mean", "log-normal noise mean", false, [T](RunConfig& c) -> double& { return T(c).noise.p_mean; }));
  f.push_back(real_field(p + ".p_std", "log-normal noise std", false, [T](RunConfig& c) -> double& { return T(c).noise.p_std; }));
  f.push_back(int_field(p + ".seed", "training rng seed", false, [T](RunConfig& c) -> std::uint64_t& { return T(c).seed; }));
  f.push_back(int_field(p + ".log_every", "loss log interval", false, [T](RunConfig& c) -> long& { return T(c).log_every; }));
  f.push_back(int_field(p + ".checkpoint_every", "checkpoint interval (0 = end only)", false, [T](RunConfig& c) -> long& { return T(c).checkpoint_every; }));
  if (stage2) {
    f.push_back(int_field(p + ".total_iterations", "horizon of the gap schedule", false, [T](RunConfig& c) -> long& { return T(c).total_iterations; }));
    f.push_back({p + ".preset", "gap schedule preset cf|in", false,
                 [T](const RunConfig& c) { return std::string(T(const_cast<RunConfig&>(c)).preset == EctPreset::cf ? "cf" : "in"); },
                 [T](RunConfig& c, const std::string& s) {
                   if (s == "cf") T(c).preset = EctPreset::cf;
                   else if (s == "in") T(c).preset = EctPreset::in;
                   else throw ConfigError("config: stage2.preset: expected cf|in, got '" + s + "'");
                 }});
    f.push_back(real_field(p + ".huber_nu", "pseudo-Huber constant", false, [T](RunConfig& c) -> double& { return T(c).huber_nu; }));
    f.push_back(bool_field(p + ".head_only", "backbone frozen in stage 2", false, [T](RunConfig& c) -> bool& { return T(c).head_only; }));
  }
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> f;
    f.push_back(int_field("data.clips", "corpus size", true, [](RunConfig& c) -> int& { return c.data.clips; }));
    f.push_back(int_field("data.frames", "frames per clip (training window)", true, [](RunConfig& c) -> int& { return c.data.frames; }));
    f.push_back(int_field("data.seed", "corpus seed", true, [](RunConfig& c) -> std::uint64_t& { return c.data.seed; }));
    f.push_back(real_field("data.periodic_fraction", "share of periodic scenes", true, [](RunConfig& c) -> double& { return c.data.periodic_fraction; }));
    f.push_back(real_field("data.test_fraction", "test share per family", true, [](RunConfig& c) -> double& { return c.data.test_fraction; }));
    f.push_back(real_field("data.target_cev", "PCA explained-variance target", true, [](RunConfig& c) -> double& { return c.data.target_cev; }));
    f.push_back(int_field("data.pca_fit_frames", "frames used for the PCA fit", true, [](RunConfig& c) -> int& { return c.data.pca_fit_frames; }));
    f.push_back(int_field("data.height", "frame height", true, [](RunConfig& c) -> int& { return c.data.height; }));
    f.push_back(int_field("data.width", "frame width", true, [](RunConfig& c) -> int& { return c.data.width; }));
    f.push_back(int_field("data.min_period", "shortest periodic interval", true, [](RunConfig& c) -> int& { return c.data.min_period; }));
    f.push_back(int_field("data.max_period", "longest periodic interval", true, [](RunConfig& c) -> int& { return c.data.max_period; }));
    f.push_back(real_field("data.min_rate", "lowest Bernoulli rate", true, [](RunConfig& c) -> double& { return c.data.min_rate; }));
    f.push_back(real_field("data.max_rate", "highest Bernoulli rate", true, [](RunConfig& c) -> double& { return c.data.max_rate; }));
    f.push_back(real_field("toy.beta", "latent decay", true, [](RunConfig& c) -> double& { return c.data.toy.beta; }));
    f.push_back(real_field("toy.sigma_n", "innovation std", true, [](RunConfig& c) -> double& { return c.data.toy.sigma_n; }));
    f.push_back(real_field("toy.amplitude", "pattern amplitude", true, [](RunConfig& c) -> double& { return c.data.toy.amplitude; }));
    f.push_back(int_field("toy.hop", "samples per channel per frame", true, [](RunConfig& c) -> int& { return c.data.toy.hop; }));
    f.push_back(int_field("toy.patterns", "number of event patterns", true, [](RunConfig& c) -> int& { return c.data.toy.n_patterns; }));
    f.push_back(int_field("grid.h", "patch rows", true, [](RunConfig& c) -> int& { return c.data.grid.grid_h; }));
    f.push_back(int_field("grid.w", "patch columns", true, [](RunConfig& c) -> int& { return c.data.grid.grid_w; }));
    f.push_back(int_field("agg.dim", "aggregator width", true, [](RunConfig& c) -> int& { return c.agg_dim; }));
    f.push_back(int_field("agg.heads", "aggregator heads", true, [](RunConfig& c) -> int& { return c.agg_heads; }));
    f.push_back(int_field("agg.out", "vision token width c_v", true, [](RunConfig& c) -> int& { return c.agg_out; }));
    f.push_back(int_field("model.d_model", "backbone width", true, [](RunConfig& c) -> int& { return c.d_model; }));
    f.push_back(int_field("model.depth", "backbone layers", true, [](RunConfig& c) -> int& { return c.depth; }));
    f.push_back(int_field("model.heads", "backbone heads", true, [](RunConfig& c) -> int& { return c.heads; }));
    f.push_back(int_field("model.head_width", "head MLP width", true, [](RunConfig& c) -> int& { return c.head_width; }));
    f.push_back(int_field("model.head_blocks", "head residual blocks", true, [](RunConfig& c) -> int& { return c.head_blocks; }));
    f.push_back(int_field("model.fourier", "noise-level features", true, [](RunConfig& c) -> int& { return c.fourier; }));
    f.push_back(real_field("model.sigma_data", "latent std assumed by preconditioning", true, [](RunConfig& c) -> double& { return c.sigma_data; }));
    f.push_back(int_field("model.init_seed", "parameter init seed", true, [](RunConfig& c) -> std::uint64_t& { return c.init_seed; }));
    f.push_back(real_field("rope.base", "rotary base", true, [](RunConfig& c) -> double& { return c.rope.base; }));
    f.push_back(int_field("rope.n_train", "training positions (0 = 2 * data.frames)", true, [](RunConfig& c) -> long& { return c.rope.n_train; }));
    f.push_back({"rope.mode", "context extension none|pi|ntk", false,
                 [](const RunConfig& c) { return std::string(to_string(c.rope.mode)); },
                 [](RunConfig& c, const std::string& s) {
                   try {
                     c.rope.mode = rope_mode_from_string(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(std::string("config: rope.mode: ") + e.what());
                   }
                 }});
    f.push_back(int_field("rope.n_target", "inference positions (0 = n_train)", false, [](RunConfig& c) -> long& { return c.rope.n_target; }));
    f.push_back(int_field("rope.swa_window", "sliding attention window (0 = off)", false, [](RunConfig& c) -> long& { return c.rope.swa_window; }));
    add_train_fields(f, "stage1", &RunConfig::stage1, false);
    add_train_fields(f, "stage2", &RunConfig::stage2, true);
    f.push_back(real_field("sampler.omega", "guidance scale", false, [](RunConfig& c) -> double& { return c.sampler.omega; }));
    f.push_back({"sampler.mode", "head sampler diffusion|ect", false,
                 [](const RunConfig& c) { return std::string(to_string(c.sampler.mode)); },
                 [](RunConfig& c, const std::string& s) {
                   try {
                     c.sampler.mode = head_mode_from_string(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(std::string("config: sampler.mode: ") + e.what());
                   }
                 }});
    f.push_back(int_field("sampler.heun_steps", "Heun solver steps", false, [](RunConfig& c) -> int& { return c.sampler.heun_steps; }));
    f.push_back(int_field("sampler.nfe", "consistency evaluations 1|2|4", false, [](RunConfig& c) -> int& { return c.cm_nfe; }));
    f.push_back(bool_field("sampler.shared_noise", "reuse the first noise draw", false, [](RunConfig& c) -> bool& { return c.sampler.shared_noise; }));
    f.push_back(bool_field("sampler.head_cfg", "guidance inside the head", false, [](RunConfig& c) -> bool& { return c.sampler.head_cfg; }));
    f.push_back(bool_field("sampler.guide_audio_positions", "guide the audio-position half of z", false, [](RunConfig& c) -> bool& { return c.sampler.guide_audio_positions; }));
    f.push_back(bool_field("sampler.streaming_decode", "decode each frame as it is generated", false, [](RunConfig& c) -> bool& { return c.sampler.streaming_decode; }));
    f.push_back(int_field("sampler.seed", "sampling seed", false, [](RunConfig& c) -> std::uint64_t& { return c.sample_seed; }));
    f.push_back(int_field("eval.clips", "fresh test scenes", false, [](RunConfig& c) -> int& { return c.eval.clips; }));
    f.push_back(int_field("eval.pairs_per_clip", "transition pairs drawn per clip", false, [](RunConfig& c) -> int& { return c.eval.pairs_per_clip; }));
    f.push_back(int_field("eval.permutations", "MMD permutation count", false, [](RunConfig& c) -> int& { return c.eval.permutations; }));
    f.push_back(int_field("eval.contexts", "conditional-match contexts", false, [](RunConfig& c) -> int& { return c.eval.contexts; }));
    f.push_back(int_field("eval.samples", "samples per context", false, [](RunConfig& c) -> int& { return c.eval.samples; }));
    f.push_back(int_field("eval.periodic_scenes", "scenes for cadence analysis", false, [](RunConfig& c) -> int& { return c.eval.periodic_scenes; }));
    f.push_back(real_field("eval.omega", "guidance scale for oracle-referenced metrics", false, [](RunConfig& c) -> double& { return c.eval.omega; }));
    f.push_back(int_field("eval.seed", "evaluation seed", false, [](RunConfig& c) -> std::uint64_t& { return c.eval.seed; }));
    f.push_back(int_field("bench.clips", "latency clips including warm-up", false, [](RunConfig& c) -> int& { return c.bench.clips; }));
    f.push_back(int_field("bench.warmup", "warm-up clips", false, [](RunConfig& c) -> int& { return c.bench.warmup; }));
    return f;
  }();
  return f;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace config_detail

inline void RunConfig::validate() const {
  try {
    data.validate();
    rope_config().validate();
    stage1.noise.validate();
    stage2.noise.validate();
    sampler_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (d_model % heads || (d_model / heads) % 2) throw ConfigError("config: model.d_model must split into even-width heads");
  if (agg_dim % agg_heads) throw ConfigError("config: agg.dim must be divisible by agg.heads");
  if (head_width <= 0 || head_blocks <= 0 || fourier <= 0 || fourier % 2) throw ConfigError("config: bad head geometry");
  if (data.grid.grid_h % 2 || data.grid.grid_w % 2) throw ConfigError("config: grid must be even");
  if (!(sigma_data > 0.0)) throw ConfigError("config: model.sigma_data must be positive");
  for (const TrainConfig* t : {&stage1, &stage2}) {
    if (t->iterations < 0 || t->batch <= 0 || t->draws <= 0) throw ConfigError("config: bad iteration/batch/draw counts");
    if (!(t->ema_rate >= 0.0 && t->ema_rate <= 1.0)) throw ConfigError("config: ema_rate must lie in [0, 1]");
    if (!(t->adam.lr > 0.0)) throw ConfigError("config: learning rate must be positive");
    if (!(t->cfg_dropout >= 0.0 && t->cfg_dropout <= 1.0) || !(t->dropout >= 0.0 && t->dropout < 1.0))
      throw ConfigError("config: dropout rates must lie in [0, 1)");
  }
  if (!(eval.omega >= 0.0)) throw ConfigError("config: eval.omega must be >= 0");
  if (stage2.total_iterations <= 0) throw ConfigError("config: stage2.total_iterations must be positive");
  if (bench.warmup < 0 || bench.clips < bench.warmup + 1) throw ConfigError("config: bench.clips must exceed bench.warmup");
}

inline std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& f : config_detail::fields()) os << f.key << " = " << f.get(*this) << "\n";
  return os.str();
}

inline std::string RunConfig::model_hash() const {
  std::string s;
  for (const auto& f : config_detail::fields())
    if (f.model) s += f.key + "=" + f.get(*this) + "\n";
  return hex64(fnv1a(s));
}

// Documented key list, one "key  # doc" line each.
inline std::string config_reference() {
  std::ostringstream os;
  RunConfig d;
  for (const auto& f : config_detail::fields()) os << f.key << " = " << f.get(d) << "  # " << f.doc << "\n";
  return os.str();
}

inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  throw ConfigError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  std::set<std::string> seen;
  int ln = 0;
  while (std::getline(is, line)) {
    ++ln;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(ln) + ": expected key = value");
    const std::string key = config_detail::trim(line.substr(0, eq)), value = config_detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(ln) + ": duplicate key '" + key + "'");
    try {
      apply_setting(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(ln) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Applies "key=value" overrides in order, then validates.
inline void apply_overrides(RunConfig& rc, const std::vector<std::string>& set) {
  for (const auto& kv : set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(rc, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
  }
  rc.validate();
}

}  // namespace framegen
