#pragma once

// Stage drivers and run plumbing shared by the CLI and the acceptance suite.

#include "framegen/checkpoint.hpp"
#include "framegen/evaluation.hpp"

#include <ostream>
#include <string>

namespace framegen {

// Runs a stage to tc.iterations, writing `path` every checkpoint_every steps
// and at the end, and one JSON loss line per log_every steps to `log`.
inline void run_stage(TrainState<float>& s, const RunConfig& rc, const Dataset& ds, const TrainConfig& tc,
                      const std::string& path, std::ostream* log) {
  const auto data = ds.tensors("train");
  auto on_log = [&](long it, const LossBreakdown& l) {
    if (!std::isfinite(l.loss)) throw NumericalError("training: non-finite loss at iteration " + std::to_string(it));
    if (log) *log << loss_record(it, l) << "\n" << std::flush;
  };
  auto on_ckpt = [&](const TrainState<float>& st) {
    if (!path.empty()) make_checkpoint(const_cast<TrainState<float>&>(st), rc, ds).write(path);
  };
  train<float>(s, data, tc, on_log, on_ckpt);
  if (!path.empty()) make_checkpoint(s, rc, ds).write(path);
}

inline TrainState<float> fresh_stage1(const RunConfig& rc, const Dataset& ds) {
  return TrainState<float>(rc.model_config(ds), rc.stage1, rc.init_seed);
}

// Stage-2 state from a stage-1 checkpoint.
inline TrainState<float> stage2_from_checkpoint(const Container& c, const RunConfig& rc, const Dataset& ds) {
  if (checkpoint_stage(c) != 1) throw ConfigError("stage 2 must start from a stage-1 checkpoint");
  TrainState<float> s1 = load_train_state(c, rc, ds, rc.stage1);
  return TrainState<float>::from_stage1(s1, rc.stage2);
}

inline RunConfig checkpoint_config(const Container& c) { return parse_config(c.get_string("meta/config")); }

// Head sampler selection by evaluation count: diffusion takes 2N - 1, the
// consistency path takes 1, 2 or 4.
inline void set_sampling(RunConfig& rc, HeadMode mode, int nfe) {
  rc.sampler.mode = mode;
  if (mode == HeadMode::diffusion) {
    if (nfe < 3 || nfe % 2 == 0) throw ConfigError("diffusion sampling needs an odd NFE >= 3 (2N - 1), got " + std::to_string(nfe));
    rc.sampler.heun_steps = (nfe + 1) / 2;
  } else {
    try {
      cm_schedule(nfe);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    rc.cm_nfe = nfe;
  }
}

}  // namespace framegen
