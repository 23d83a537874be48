#pragma once

// Training-state checkpoints and corpus files.

#include "framegen/config.hpp"
#include "framegen/container.hpp"

#include <sstream>
#include <string>

namespace framegen {

namespace ckpt_detail {

inline void put_model(Container& c, const std::string& group, Model<float>& m) {
  for (auto& [name, v] : m.parameters()) c.add_f32(group + "/" + name, v->value());
}

inline void get_model(const Container& c, const std::string& group, Model<float>& m) {
  for (auto& [name, v] : m.parameters()) {
    Mat<float> w = c.get_f32(group + "/" + name);
    if (w.rows() != v->rows() || w.cols() != v->cols()) throw FormatError("checkpoint: shape mismatch at " + group + "/" + name);
    v->mutable_value() = std::move(w);
  }
}

inline std::string rng_text(const Rng& r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

inline Rng rng_from_text(const std::string& s) {
  Rng r;
  std::istringstream is(s);
  is >> r;
  if (!is) throw FormatError("checkpoint: corrupt rng state");
  return r;
}

}  // namespace ckpt_detail

// Sampling weights are the EMA group in both stages; in Stage 2 it is stored
// under "teacher" since the same weights serve as the consistency target.
inline const char* ema_group(int stage) { return stage == 1 ? "ema" : "teacher"; }

inline Container make_checkpoint(TrainState<float>& s, const RunConfig& rc, const Dataset& ds) {
  Container c(kCheckpointMagic);
  c.add_string("meta/config", rc.to_text());
  c.add_string("meta/model_hash", rc.model_hash());
  c.add_string("meta/run_hash", rc.run_hash());
  c.add_string("state/stage", std::to_string(s.stage));
  c.add_string("state/iter", std::to_string(s.iter));
  c.add_string("state/opt_steps", std::to_string(s.opt.steps()));
  c.add_string("state/rng", ckpt_detail::rng_text(s.rng));
  c.add_f64_raw("data/stats_mean", ds.stats.mean.data(), static_cast<size_t>(ds.stats.mean.size()));
  c.add_f64_raw("data/stats_scale", &ds.stats.scale, 1);
  c.add_string("data/pca_fingerprint", hex64(ds.pca.fingerprint()));
  ckpt_detail::put_model(c, "student", s.student);
  ckpt_detail::put_model(c, ema_group(s.stage), s.ema);
  auto refs = param_refs(s.student);
  auto& m1 = s.opt.first_moments();
  auto& m2 = s.opt.second_moments();
  if (!m1.empty()) {
    for (size_t i = 0; i < refs.size(); ++i) {
      c.add_f32("adam_m/" + refs[i].name, m1[i]);
      c.add_f32("adam_v/" + refs[i].name, m2[i]);
    }
  }
  return c;
}

// Rejects checkpoints written under a different model/data configuration or
// against a corpus with different statistics.
inline void check_compatible(const Container& c, const RunConfig& rc, const Dataset& ds) {
  const std::string h = c.get_string("meta/model_hash");
  if (h != rc.model_hash())
    throw ConfigError("checkpoint: model hash " + h + " does not match the configuration (" + rc.model_hash() + ")");
  const auto mean = c.get_f64_raw("data/stats_mean");
  const auto scale = c.get_f64_raw("data/stats_scale");
  if (mean.size() != static_cast<size_t>(ds.stats.mean.size()) || scale.size() != 1 || scale[0] != ds.stats.scale ||
      !std::equal(mean.begin(), mean.end(), ds.stats.mean.data()) ||
      c.get_string("data/pca_fingerprint") != hex64(ds.pca.fingerprint()))
    throw DataError("checkpoint: corpus statistics differ from the regenerated dataset");
}

inline TrainState<float> load_train_state(const Container& c, const RunConfig& rc, const Dataset& ds,
                                          const TrainConfig& tc) {
  check_compatible(c, rc, ds);
  TrainState<float> s(rc.model_config(ds), tc, rc.init_seed);
  s.stage = std::stoi(c.get_string("state/stage"));
  if (s.stage != 1 && s.stage != 2) throw FormatError("checkpoint: bad stage");
  s.iter = std::stol(c.get_string("state/iter"));
  s.rng = ckpt_detail::rng_from_text(c.get_string("state/rng"));
  ckpt_detail::get_model(c, "student", s.student);
  ckpt_detail::get_model(c, ema_group(s.stage), s.ema);
  s.opt = AdamW<float>(tc.adam);
  auto refs = param_refs(s.student);
  s.opt.init(refs);
  if (c.has("adam_m/" + refs.front().name)) {
    for (size_t i = 0; i < refs.size(); ++i) {
      s.opt.first_moments()[i] = c.get_f32("adam_m/" + refs[i].name);
      s.opt.second_moments()[i] = c.get_f32("adam_v/" + refs[i].name);
    }
  }
  s.opt.set_steps(std::stol(c.get_string("state/opt_steps")));
  return s;
}

// Sampling weights of a checkpoint.
inline Model<float> load_sampling_model(const Container& c, const RunConfig& rc, const Dataset& ds) {
  check_compatible(c, rc, ds);
  Model<float> m(rc.model_config(ds), rc.init_seed);
  ckpt_detail::get_model(c, ema_group(std::stoi(c.get_string("state/stage"))), m);
  return m;
}

inline int checkpoint_stage(const Container& c) { return std::stoi(c.get_string("state/stage")); }

// ---------------------------------------------------------------------------
// Corpus file: config, statistics and per-clip oracle latents / events.

inline Container make_corpus(const Dataset& ds, const RunConfig& rc) {
  Container c(kDataMagic);
  c.add_string("meta/config", rc.to_text());
  c.add_string("meta/model_hash", rc.model_hash());
  c.add_f64_raw("data/stats_mean", ds.stats.mean.data(), static_cast<size_t>(ds.stats.mean.size()));
  c.add_f64_raw("data/stats_scale", &ds.stats.scale, 1);
  c.add_string("data/pca_fingerprint", hex64(ds.pca.fingerprint()));
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    const std::string p = "clip/" + std::to_string(i) + "/";
    c.add_f32(p + "latents", ds.clips[i].latents.cast<float>());
    const auto& e = ds.clips[i].events.e;
    c.add_bytes(p + "events", std::vector<std::uint8_t>(e.data(), e.data() + e.size()));
  }
  return c;
}

inline std::string corpus_manifest(const Dataset& ds) {
  std::ostringstream os;
  os.precision(17);
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    const auto& c = ds.clips[i];
    os << "{\"clip\":" << i << ",\"family\":\"" << c.family << "\",\"split\":\"" << c.split << "\",\"seed\":" << c.spec.seed
       << ",\"frames\":" << c.spec.n_frames << ",\"emitters\":[";
    for (size_t k = 0; k < c.spec.emitters.size(); ++k) {
      const auto& e = c.spec.emitters[k];
      os << (k ? "," : "") << "{\"pattern\":" << e.pattern_id << ",\"position\":" << e.position << ",\"rate\":" << e.rate
         << ",\"period\":" << e.period << ",\"phase\":" << e.phase << "}";
    }
    os << "],\"events\":" << c.events.e.cast<int>().sum() << "}\n";
  }
  return os.str();
}

// Checks a stored corpus against a regeneration from the same config: oracle
// latents must survive waveform synthesis and analysis to within tol.
inline double verify_corpus(const Container& c, const Dataset& ds, double tol = 1e-6) {
  FrameCodec codec(ds.cfg.toy.channels, ds.cfg.toy.hop);
  double worst = 0.0;
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    const std::string p = "clip/" + std::to_string(i) + "/";
    Mat<double> stored = c.get_f32(p + "latents").cast<double>();
    const auto& ev = c.get_bytes(p + "events");
    const auto& e = ds.clips[i].events.e;
    if (ev.size() != static_cast<size_t>(e.size()) || !std::equal(ev.begin(), ev.end(), e.data()))
      throw DataError("corpus: event track of clip " + std::to_string(i) + " differs from regeneration");
    CodecStats id = CodecStats::identity(codec.latent_dim());
    AudioLatentSeq seq;
    seq.latents = ds.clips[i].latents.cast<float>();
    Mat<double> re = codec.encode(codec.decode(seq, id), id).latents.cast<double>();
    if (re.rows() != stored.rows() || re.cols() != stored.cols())
      throw DataError("corpus: shape mismatch in clip " + std::to_string(i));
    worst = std::max(worst, (re - stored).cwiseAbs().maxCoeff());
  }
  if (worst > tol) throw DataError("corpus: regenerated latents differ from stored ones by " + std::to_string(worst));
  return worst;
}

}  // namespace framegen
