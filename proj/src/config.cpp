#include "sepm/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "sepm/checkpoint.hpp"
#include "sepm/strutil.hpp"

namespace sepm {

namespace {

struct KeyDef {
  ConfigKeyInfo info;
  std::function<void(AppConfig&, const std::string&)> set;
};

DecayPolicy parse_decay_policy(const std::string& s) {
  if (s == "manual-epoch") return DecayPolicy::ManualEpoch;
  if (s == "plateau-detector") return DecayPolicy::PlateauDetector;
  throw ConfigError("decay_policy must be manual-epoch or plateau-detector, got '" + s + "'");
}

std::vector<KeyDef> build_key_table() {
  std::vector<KeyDef> defs;

  auto add = [&](std::string section, std::string key, std::string default_value,
                 std::string desc, std::function<void(AppConfig&, const std::string&)> set) {
    defs.push_back({{std::move(section), std::move(key), std::move(default_value),
                     std::move(desc)},
                    std::move(set)});
  };

  // [model] -- shares names and setters with the checkpoint manifest
  const char* model_desc[] = {
      "total Bamba stages (odd: encoder, bottleneck, decoder); SepMamba uses 5",
      "channel width of the first and last stage (S: 64, M: 128)",
      "Mamba blocks per stage, both branches together (S: 8, M: 6)",
      "down/upsampling conv kernel (SepMamba: 16)",
      "down/upsampling conv stride (SepMamba: 2)",
      "separated sources (2)",
      "restrict Mamba blocks to past context (convs keep their lookahead)",
      "waveform sample rate in Hz (8000)",
      "Mamba inner width factor (calibrated: 2)",
      "per-channel SSM state size (calibrated: 8)",
      "depthwise conv width inside each Mamba block (calibrated: 4)",
      "low-rank width of the step-size projection; 0 = ceil(dim/16)",
      "optional pre-block RMS normalization",
      "ablation: recombine the two directions after every block",
      "learned per-channel feedthrough inside the scan",
  };
  std::size_t di = 0;
  for (const auto& f : separator_config_fields()) {
    SeparatorConfig dflt;
    add("model", f.name, f.get(dflt), model_desc[di++],
        [&f](AppConfig& c, const std::string& v) { f.set(c.model, v); });
  }

  // [train]
  add("train", "lr", "0.00015", "initial learning rate (SepMamba recipe: 15e-5)",
      [](AppConfig& c, const std::string& v) { c.train.lr = parse_f64(v, "lr"); });
  add("train", "weight_decay", "0.1", "decoupled AdamW weight decay",
      [](AppConfig& c, const std::string& v) { c.train.weight_decay = parse_f64(v, "weight_decay"); });
  add("train", "beta1", "0.9", "AdamW first-moment coefficient",
      [](AppConfig& c, const std::string& v) { c.train.beta1 = parse_f64(v, "beta1"); });
  add("train", "beta2", "0.999", "AdamW second-moment coefficient",
      [](AppConfig& c, const std::string& v) { c.train.beta2 = parse_f64(v, "beta2"); });
  add("train", "adam_eps", "1e-08", "AdamW denominator epsilon",
      [](AppConfig& c, const std::string& v) { c.train.adam_eps = parse_f64(v, "adam_eps"); });
  add("train", "clip_norm", "5", "global gradient-norm ceiling",
      [](AppConfig& c, const std::string& v) { c.train.clip_norm = parse_f64(v, "clip_norm"); });
  add("train", "gamma", "0.98", "per-epoch LR decay factor once triggered (0.98-0.99)",
      [](AppConfig& c, const std::string& v) { c.train.gamma = parse_f64(v, "gamma"); });
  add("train", "decay_policy", "plateau-detector", "manual-epoch or plateau-detector",
      [](AppConfig& c, const std::string& v) { c.train.decay_policy = parse_decay_policy(v); });
  add("train", "decay_start_epoch", "-1", "epoch to start decay (manual policy; -1 = never)",
      [](AppConfig& c, const std::string& v) {
        c.train.decay_start_epoch = parse_i64(v, "decay_start_epoch");
      });
  add("train", "plateau_window", "5", "epochs without progress before decay starts",
      [](AppConfig& c, const std::string& v) {
        c.train.plateau_window = parse_i64(v, "plateau_window");
      });
  add("train", "plateau_delta_db", "0.1", "minimum per-window loss improvement (dB)",
      [](AppConfig& c, const std::string& v) {
        c.train.plateau_delta_db = parse_f64(v, "plateau_delta_db");
      });
  add("train", "batch_size", "1", "mixtures per step (1 per the recipe; >1 experimental)",
      [](AppConfig& c, const std::string& v) { c.train.batch_size = parse_i64(v, "batch_size"); });
  add("train", "max_steps", "1000", "optimizer steps to run",
      [](AppConfig& c, const std::string& v) { c.train.max_steps = parse_i64(v, "max_steps"); });
  add("train", "seed", "0", "model init seed",
      [](AppConfig& c, const std::string& v) {
        c.train.seed = static_cast<std::uint64_t>(parse_i64(v, "seed"));
      });
  add("train", "checkpoint_every", "0", "periodic checkpoint interval (0 = final only)",
      [](AppConfig& c, const std::string& v) {
        c.train.checkpoint_every = parse_i64(v, "checkpoint_every");
      });
  add("train", "epoch_steps", "1000", "steps per synthetic epoch",
      [](AppConfig& c, const std::string& v) { c.train.epoch_steps = parse_i64(v, "epoch_steps"); });
  add("train", "clamp_db", "30", "loss threshold: loss >= -clamp_db",
      [](AppConfig& c, const std::string& v) { c.train.clamp_db = parse_f64(v, "clamp_db"); });
  add("train", "deterministic", "false", "zero wall-clock fields in the metrics file",
      [](AppConfig& c, const std::string& v) {
        c.train.deterministic = parse_bool(v, "deterministic");
      });
  add("train", "precision", "f32", "f32 or f64 (f64 for verification runs)",
      [](AppConfig& c, const std::string& v) {
        if (v == "f32")
          c.precision = Precision::F32;
        else if (v == "f64")
          c.precision = Precision::F64;
        else
          throw ConfigError("precision must be f32 or f64, got '" + v + "'");
      });

  // [data]
  add("data", "kind_a", "harmonic-voice-like",
      "first source kind: harmonic-voice-like, filtered-noise, chirp",
      [](AppConfig& c, const std::string& v) { c.data.kind_a = parse_source_kind(v); });
  add("data", "kind_b", "filtered-noise", "second source kind",
      [](AppConfig& c, const std::string& v) { c.data.kind_b = parse_source_kind(v); });
  add("data", "duration_s", "1", "source duration per mixture (seconds)",
      [](AppConfig& c, const std::string& v) { c.data.duration_s = parse_f64(v, "duration_s"); });
  add("data", "data_seed", "0", "root seed for the mixture stream",
      [](AppConfig& c, const std::string& v) {
        c.data.data_seed = static_cast<std::uint64_t>(parse_i64(v, "data_seed"));
      });
  add("data", "fixed_mixtures", "0", "cycle a fixed pool of this many mixtures (0 = stream)",
      [](AppConfig& c, const std::string& v) {
        c.data.fixed_mixtures = parse_i64(v, "fixed_mixtures");
      });
  add("data", "manifest", "", "optional manifest file: seed<TAB>duration<TAB>kind_a<TAB>kind_b",
      [](AppConfig& c, const std::string& v) { c.data.manifest_path = v; });
  add("data", "snr_lo", "-2.5", "mixing SNR lower bound (dB)",
      [](AppConfig& c, const std::string& v) { c.data.ranges.snr_lo = parse_f64(v, "snr_lo"); });
  add("data", "snr_hi", "2.5", "mixing SNR upper bound (dB)",
      [](AppConfig& c, const std::string& v) { c.data.ranges.snr_hi = parse_f64(v, "snr_hi"); });
  add("data", "speed_lo", "0.95", "speed perturbation lower bound",
      [](AppConfig& c, const std::string& v) { c.data.ranges.speed_lo = parse_f64(v, "speed_lo"); });
  add("data", "speed_hi", "1.05", "speed perturbation upper bound",
      [](AppConfig& c, const std::string& v) { c.data.ranges.speed_hi = parse_f64(v, "speed_hi"); });
  add("data", "prefetch", "0", "bounded queue of pre-generated mixtures (0 = synchronous)",
      [](AppConfig& c, const std::string& v) { c.data.prefetch = parse_i64(v, "prefetch"); });

  // [bench]
  add("bench", "seconds", "4", "audio length used for timing and memory figures",
      [](AppConfig& c, const std::string& v) { c.bench.seconds = parse_f64(v, "seconds"); });
  add("bench", "repeats", "10", "timed forward passes",
      [](AppConfig& c, const std::string& v) {
        c.bench.repeats = static_cast<int>(parse_i64(v, "repeats"));
      });
  add("bench", "warmup", "1", "untimed warmup passes",
      [](AppConfig& c, const std::string& v) {
        c.bench.warmup = static_cast<int>(parse_i64(v, "warmup"));
      });
  add("bench", "profile", "true", "run timed passes (analytic columns are always computed)",
      [](AppConfig& c, const std::string& v) { c.bench.profile = parse_bool(v, "profile"); });

  return defs;
}

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = build_key_table();
  return defs;
}

}  // namespace

const std::vector<ConfigKeyInfo>& config_key_table() {
  static const std::vector<ConfigKeyInfo> infos = [] {
    std::vector<ConfigKeyInfo> out;
    for (const auto& d : key_defs()) out.push_back(d.info);
    return out;
  }();
  return infos;
}

AppConfig parse_config_text(const std::string& text, const std::string& origin) {
  AppConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      section = t.substr(1, t.size() - 2);
      bool known = false;
      for (const auto& d : key_defs()) known = known || d.info.section == section;
      if (!known)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown section [" + section +
                          "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (section.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key +
                        "' outside any [section]");
    bool found = false;
    for (const auto& d : key_defs()) {
      if (d.info.section == section && d.info.key == key) {
        d.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + section + "." +
                        key + "'");
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

AppConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config_text(os.str(), path);
}

std::string config_help_text() {
  std::ostringstream os;
  os << "Config file keys (key = value under each [section]):\n";
  std::string section;
  for (const auto& k : config_key_table()) {
    if (k.section != section) {
      section = k.section;
      os << "\n[" << section << "]\n";
    }
    os << "  " << k.key << " = " << (k.default_value.empty() ? "(empty)" : k.default_value)
       << "\n      " << k.description << "\n";
  }
  return os.str();
}

std::string default_config_text() {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_key_table()) {
    if (k.section != section) {
      section = k.section;
      os << (section == "model" ? "" : "\n") << "[" << section << "]\n";
    }
    os << k.key << " = " << k.default_value << "\n";
  }
  return os.str();
}

SeparatorConfig preset_model(const std::string& name) {
  SeparatorConfig cfg;  // defaults are the S parameterization
  if (name == "s" || name == "S") return cfg;
  if (name == "m" || name == "M") {
    cfg.base_dim = 128;
    cfg.blocks_per_stage = 6;
    return cfg;
  }
  if (name == "tiny") {
    cfg.n_stages = 3;
    cfg.base_dim = 16;
    cfg.blocks_per_stage = 2;
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "' (expected s, m, or tiny)");
}

}  // namespace sepm
