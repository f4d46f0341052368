#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "sepm/audio.hpp"
#include "sepm/checkpoint.hpp"
#include "sepm/metrics.hpp"
#include "sepm/separator.hpp"

namespace sepm {

enum class DecayPolicy { ManualEpoch, PlateauDetector };

struct TrainConfig {
  double lr = 15e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;
  double gamma = 0.98;
  DecayPolicy decay_policy = DecayPolicy::PlateauDetector;
  std::int64_t decay_start_epoch = -1;  // ManualEpoch trigger; -1 = never
  std::int64_t plateau_window = 5;      // epochs
  double plateau_delta_db = 0.1;        // minimum improvement to count as progress
  std::int64_t batch_size = 1;          // >1 is supported but experimental
  std::int64_t max_steps = 1000;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
  std::int64_t epoch_steps = 1000;    // synthetic data has no natural epoch
  double clamp_db = 30.0;
  bool deterministic = false;  // zero the wall-clock column in the metrics file

  void validate() const {
    if (lr <= 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || adam_eps <= 0)
      throw ConfigError("TrainConfig: bad optimizer settings");
    if (clip_norm <= 0) throw ConfigError("TrainConfig: clip_norm must be > 0");
    if (gamma <= 0 || gamma > 1) throw ConfigError("TrainConfig: gamma must be in (0, 1]");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (max_steps < 0) throw ConfigError("TrainConfig: max_steps must be >= 0");
    if (epoch_steps < 1) throw ConfigError("TrainConfig: epoch_steps must be >= 1");
    if (plateau_window < 1) throw ConfigError("TrainConfig: plateau_window must be >= 1");
    if (weight_decay < 0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
  }
};

struct DataPipeConfig {
  MixRanges ranges;
  SourceKind kind_a = SourceKind::HarmonicVoice;
  SourceKind kind_b = SourceKind::FilteredNoise;
  double duration_s = 1.0;
  std::uint64_t data_seed = 0;
  std::int64_t fixed_mixtures = 0;  // >0: cycle a fixed pool of this many items
  std::string manifest_path;        // optional explicit item list
  std::int64_t prefetch = 0;        // bounded queue capacity; 0 = synchronous
};

inline ManifestEntry entry_for_item(const DataPipeConfig& d,
                                    const std::vector<ManifestEntry>& manifest,
                                    std::int64_t item_index) {
  if (!manifest.empty()) return manifest[static_cast<std::size_t>(item_index) % manifest.size()];
  ManifestEntry e;
  const std::int64_t pool = d.fixed_mixtures > 0 ? item_index % d.fixed_mixtures : item_index;
  e.seed = Rng::derive(d.data_seed, static_cast<std::uint64_t>(pool));
  e.duration_s = d.duration_s;
  e.kind_a = d.kind_a;
  e.kind_b = d.kind_b;
  return e;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay
// ---------------------------------------------------------------------------

template <typename T>
struct AdamWState {
  std::int64_t step_count = 0;
  std::vector<Array<T>> m, v;  // aligned with the parameter registry
};

template <typename T>
AdamWState<T> init_adamw(const NamedParams<T>& params) {
  AdamWState<T> st;
  for (const auto& [name, t] : params) {
    st.m.emplace_back(t.shape());
    st.v.emplace_back(t.shape());
  }
  return st;
}

// Decay is applied to the parameter before the moment update lands:
//   p *= (1 - lr*wd);  p -= lr * mhat / (sqrt(vhat) + eps)
template <typename T>
void adamw_step(NamedParams<T>& params, AdamWState<T>& st, const TrainConfig& cfg, double lr) {
  if (st.m.size() != params.size()) throw ConfigError("adamw_step: state/registry mismatch");
  st.step_count += 1;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(st.step_count)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(st.step_count)));
  const T lr_t = static_cast<T>(lr);
  const T eps = static_cast<T>(cfg.adam_eps);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (!t.has_grad()) continue;
    const auto& g = t.grad();
    for (auto gv : g)
      if (!std::isfinite(static_cast<double>(gv)))
        throw NumericError("adamw_step: non-finite gradient in '" + name + "'");
    auto& p = t.values_mut();
    T* mp = st.m[i].ptr();
    T* vp = st.v[i].ptr();
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      mp[j] = b1 * mp[j] + (T(1) - b1) * g[j];
      vp[j] = b2 * vp[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = mp[j] / bc1;
      const T vhat = vp[j] / bc2;
      p[j] -= lr_t * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Scales all gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
template <typename T>
double clip_grad_norm(NamedParams<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (auto g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (auto& g : t.grad_mut()) g *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Schedule and loop state
// ---------------------------------------------------------------------------

struct TrainState {
  std::int64_t step = 0;   // completed optimizer steps
  std::int64_t epoch = 0;  // completed epochs
  std::int64_t decay_trigger_epoch = -1;
  std::vector<double> epoch_losses;  // mean loss per completed epoch
  double epoch_accum = 0.0;
  std::int64_t epoch_accum_count = 0;
  std::int64_t adam_steps = 0;  // mirrors AdamWState.step_count for resume
};

inline double scheduled_lr(const TrainConfig& cfg, const TrainState& st) {
  if (st.decay_trigger_epoch < 0) return cfg.lr;
  const auto epochs_past = static_cast<double>(st.epoch - st.decay_trigger_epoch);
  return cfg.lr * std::pow(cfg.gamma, epochs_past < 0 ? 0.0 : epochs_past);
}

// Called once per completed epoch, after epoch_losses gained its new entry.
inline void update_decay_trigger(const TrainConfig& cfg, TrainState& st) {
  if (st.decay_trigger_epoch >= 0) return;
  if (cfg.decay_policy == DecayPolicy::ManualEpoch) {
    if (cfg.decay_start_epoch >= 0 && st.epoch >= cfg.decay_start_epoch)
      st.decay_trigger_epoch = st.epoch;
    return;
  }
  const auto w = static_cast<std::size_t>(cfg.plateau_window);
  if (st.epoch_losses.size() < w + 1) return;
  const double then = st.epoch_losses[st.epoch_losses.size() - 1 - w];
  const double now = st.epoch_losses.back();
  if (then - now < cfg.plateau_delta_db) st.decay_trigger_epoch = st.epoch;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hexf(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

inline double unhexf(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

template <typename T>
std::vector<std::pair<std::string, Array<T>>> optimizer_tensors(const NamedParams<T>& params,
                                                                const AdamWState<T>& opt) {
  std::vector<std::pair<std::string, Array<T>>> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.emplace_back("opt.m." + params[i].first, opt.m[i]);
    out.emplace_back("opt.v." + params[i].first, opt.v[i]);
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> state_kv(const TrainConfig& cfg,
                                                                 const TrainState& st) {
  std::ostringstream losses;
  for (std::size_t i = 0; i < st.epoch_losses.size(); ++i)
    losses << (i ? "," : "") << hexf(st.epoch_losses[i]);
  return {
      {"trainer.step", std::to_string(st.step)},
      {"trainer.epoch", std::to_string(st.epoch)},
      {"trainer.decay_trigger_epoch", std::to_string(st.decay_trigger_epoch)},
      {"trainer.epoch_accum", hexf(st.epoch_accum)},
      {"trainer.epoch_accum_count", std::to_string(st.epoch_accum_count)},
      {"trainer.adam_steps", std::to_string(st.adam_steps)},
      {"trainer.epoch_losses", losses.str()},
      {"trainer.seed", std::to_string(cfg.seed)},
  };
}

template <typename T>
TrainState state_from_checkpoint(const LoadedCheckpoint<T>& ck) {
  TrainState st;
  st.step = parse_i64(ck.extra_value("trainer.step", "0"), "trainer.step");
  st.epoch = parse_i64(ck.extra_value("trainer.epoch", "0"), "trainer.epoch");
  st.decay_trigger_epoch =
      parse_i64(ck.extra_value("trainer.decay_trigger_epoch", "-1"), "trainer.decay_trigger_epoch");
  st.epoch_accum = unhexf(ck.extra_value("trainer.epoch_accum", "0x0p+0"));
  st.epoch_accum_count =
      parse_i64(ck.extra_value("trainer.epoch_accum_count", "0"), "trainer.epoch_accum_count");
  st.adam_steps = parse_i64(ck.extra_value("trainer.adam_steps", "0"), "trainer.adam_steps");
  const std::string losses = ck.extra_value("trainer.epoch_losses", "");
  std::istringstream ls(losses);
  std::string item;
  while (std::getline(ls, item, ','))
    if (!item.empty()) st.epoch_losses.push_back(unhexf(item));
  return st;
}

}  // namespace detail

template <typename T>
struct TrainRun {
  TrainState state;
  SeparatorWeights<T> model;
  std::string final_checkpoint;
  std::string metrics_path;
};

// One optimization run: mix -> forward -> permutation-invariant loss ->
// backward -> clip -> AdamW -> schedule. Appends one metrics line per step:
// step loss grad_norm lr wall_ms (tab separated).
template <typename T>
TrainRun<T> train(const SeparatorConfig& model_cfg, const TrainConfig& cfg,
                  const DataPipeConfig& data, const std::string& out_dir,
                  const std::string& resume_path = "") {
  model_cfg.validate();
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string metrics_path = (fs::path(out_dir) / "metrics.tsv").string();
  const std::string final_path = (fs::path(out_dir) / "ckpt_final.sepm").string();

  TrainRun<T> run;
  run.metrics_path = metrics_path;
  run.final_checkpoint = final_path;

  AdamWState<T> opt;
  if (!resume_path.empty()) {
    auto ck = load_checkpoint<T>(resume_path);
    if (!(ck.cfg == model_cfg))
      throw DataError("resume checkpoint was trained with a different model config");
    run.model = load_separator<T>(ck);
    run.state = detail::state_from_checkpoint(ck);
    opt = init_adamw(run.model.params);
    opt.step_count = run.state.adam_steps;
    for (std::size_t i = 0; i < run.model.params.size(); ++i) {
      opt.m[i] = ck.require("opt.m." + run.model.params[i].first);
      opt.v[i] = ck.require("opt.v." + run.model.params[i].first);
    }
  } else {
    run.model = build_separator<T>(model_cfg, cfg.seed);
    opt = init_adamw(run.model.params);
  }

  std::vector<ManifestEntry> manifest;
  if (!data.manifest_path.empty()) manifest = read_manifest_file(data.manifest_path);

  auto gen = [&](std::int64_t item) {
    return make_training_mix<T>(entry_for_item(data, manifest, item), data.ranges,
                                model_cfg.sample_rate);
  };
  std::unique_ptr<MixPrefetcher<T>> prefetch;
  if (data.prefetch > 0 && cfg.max_steps > run.state.step) {
    const std::int64_t first_item = run.state.step * cfg.batch_size;
    prefetch = std::make_unique<MixPrefetcher<T>>(
        [&gen, first_item](std::int64_t i) { return gen(first_item + i); }, data.prefetch);
  }

  std::ofstream metrics(metrics_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw DataError("cannot open metrics file: " + metrics_path);
  metrics.precision(10);

  auto save = [&](const std::string& path) {
    save_checkpoint<T>(path, model_cfg, run.model.params,
                       detail::optimizer_tensors(run.model.params, opt),
                       detail::state_kv(cfg, run.state));
  };

  if (run.state.step >= cfg.max_steps) {
    save(final_path);
    return run;
  }

  for (std::int64_t step = run.state.step + 1; step <= cfg.max_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<T> loss;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      MixResult<T> mix = prefetch ? prefetch->next() : gen((step - 1) * cfg.batch_size + b);
      const std::int64_t l = mix.mixture.length();
      Tensor<T> x = Tensor<T>::from({1, l}, mix.mixture.samples);
      Tensor<T> est = separator_forward(run.model, x);
      std::vector<Tensor<T>> est_rows;
      for (std::int64_t s = 0; s < model_cfg.n_sources; ++s) est_rows.push_back(row(est, s));
      std::vector<Tensor<T>> refs = {Tensor<T>::from({l}, mix.ref_a.samples),
                                     Tensor<T>::from({l}, mix.ref_b.samples)};
      auto upit = upit_loss<T>(est_rows, refs, static_cast<T>(cfg.clamp_db));
      loss = b == 0 ? upit.loss : add(loss, upit.loss);
    }
    if (cfg.batch_size > 1) loss = mul_scalar(loss, static_cast<T>(1.0 / cfg.batch_size));

    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) {
      save((fs::path(out_dir) / "ckpt_abort.sepm").string());
      throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                         "; state saved to ckpt_abort.sepm");
    }

    for (auto& [name, t] : run.model.params) t.zero_grad();
    backward(loss);
    const double grad_norm = clip_grad_norm(run.model.params, cfg.clip_norm);
    const double lr_now = scheduled_lr(cfg, run.state);
    adamw_step(run.model.params, opt, cfg, lr_now);

    run.state.step = step;
    run.state.adam_steps = opt.step_count;
    run.state.epoch_accum += loss_value;
    run.state.epoch_accum_count += 1;
    if (run.state.epoch_accum_count >= cfg.epoch_steps) {
      run.state.epoch_losses.push_back(run.state.epoch_accum /
                                       static_cast<double>(run.state.epoch_accum_count));
      run.state.epoch_accum = 0.0;
      run.state.epoch_accum_count = 0;
      run.state.epoch += 1;
      update_decay_trigger(cfg, run.state);
    }

    const auto t1 = std::chrono::steady_clock::now();
    const double wall_ms =
        cfg.deterministic
            ? 0.0
            : std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(t1 - t0).count();
    metrics << step << "\t" << loss_value << "\t" << grad_norm << "\t" << lr_now << "\t"
            << wall_ms << "\n";
    metrics.flush();

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.max_steps) {
      std::ostringstream name;
      name << "ckpt_step" << step << ".sepm";
      save((fs::path(out_dir) / name.str()).string());
    }
  }

  save(final_path);
  return run;
}

}  // namespace sepm
