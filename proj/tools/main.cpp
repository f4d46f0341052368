#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "sepm/bench.hpp"
#include "sepm/checkpoint.hpp"
#include "sepm/config.hpp"
#include "sepm/streaming.hpp"
#include "sepm/trainer.hpp"
#include "sepm/verify.hpp"

// Exit codes: 0 ok, 2 usage/config, 3 data/checkpoint, 4 numerical failure.

namespace {

using namespace sepm;

struct TrainArgs {
  std::string config_path;
  std::string resume;
  std::string out_dir = "train_out";
  std::int64_t seed = -1;
  std::int64_t steps = -1;
};

template <typename T>
int run_train(AppConfig cfg, const TrainArgs& args) {
  auto run = train<T>(cfg.model, cfg.train, cfg.data, args.out_dir, args.resume);
  std::cout << "trained to step " << run.state.step << "\n";
  std::cout << "checkpoint: " << run.final_checkpoint << "\n";
  std::cout << "metrics: " << run.metrics_path << "\n";
  return 0;
}

int cmd_train(const TrainArgs& args) {
  AppConfig cfg = parse_config_file(args.config_path);
  if (args.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(args.seed);
  if (args.steps >= 0) cfg.train.max_steps = args.steps;
  if (cfg.precision == Precision::F64) return run_train<double>(std::move(cfg), args);
  return run_train<float>(std::move(cfg), args);
}

struct SeparateArgs {
  std::string checkpoint;
  std::string input;
  std::string out_prefix = "sep";
  std::vector<std::string> refs;
  bool pcm16 = false;
};

template <typename T>
int run_separate(const SeparateArgs& args) {
  auto w = load_separator<T>(args.checkpoint, /*requires_grad=*/false);
  bool downmixed = false;
  AudioBuffer<T> in = wav_read<T>(args.input, &downmixed);
  if (downmixed) std::cerr << "warning: multichannel input downmixed to mono\n";
  if (in.sample_rate != w.cfg.sample_rate) {
    std::cerr << "warning: resampling " << in.sample_rate << " Hz input to model rate "
              << w.cfg.sample_rate << " Hz\n";
    in = resample(in, w.cfg.sample_rate);
  }
  if (in.length() < w.cfg.kernel_size) throw DataError("input shorter than the model kernel");

  Tensor<T> x = Tensor<T>::from({1, in.length()}, in.samples);
  Tensor<T> est = separator_forward(w, x);

  std::vector<AudioBuffer<T>> outs;
  for (std::int64_t s = 0; s < w.cfg.n_sources; ++s) {
    AudioBuffer<T> buf;
    buf.sample_rate = w.cfg.sample_rate;
    buf.samples.assign(est.values().begin() + s * in.length(),
                       est.values().begin() + (s + 1) * in.length());
    const std::string path = args.out_prefix + "_src" + std::to_string(s + 1) + ".wav";
    wav_write(path, buf, args.pcm16 ? WavEncoding::Pcm16 : WavEncoding::Float32);
    std::cout << path << "\n";
    outs.push_back(std::move(buf));
  }

  if (!args.refs.empty()) {
    if (static_cast<std::int64_t>(args.refs.size()) != w.cfg.n_sources)
      throw ConfigError("expected " + std::to_string(w.cfg.n_sources) + " --ref files");
    std::vector<Tensor<T>> est_rows, ref_rows;
    for (std::int64_t s = 0; s < w.cfg.n_sources; ++s) {
      AudioBuffer<T> ref = wav_read<T>(args.refs[static_cast<std::size_t>(s)]);
      if (ref.sample_rate != w.cfg.sample_rate) ref = resample(ref, w.cfg.sample_rate);
      if (ref.length() != in.length())
        throw DataError("reference length does not match the mixture");
      ref_rows.push_back(Tensor<T>::from({in.length()}, ref.samples));
      est_rows.push_back(Tensor<T>::from({in.length()}, outs[static_cast<std::size_t>(s)].samples));
    }
    Tensor<T> mix = Tensor<T>::from({in.length()}, in.samples);
    const double si = si_sdr_improvement<T>(est_rows, ref_rows, mix);
    std::cerr << "si_sdri_db " << si << "\n";
  }
  return 0;
}

int cmd_separate(const SeparateArgs& args) {
  // honor the stored precision
  const auto probe = load_checkpoint<float>(args.checkpoint);
  if (probe.stored_dtype == "f64") return run_separate<double>(args);
  return run_separate<float>(args);
}

struct BenchArgs {
  std::string config_path;
  std::string preset;
  std::string checkpoint;
  double seconds = 4.0;
  int repeats = 10;
  int warmup = 1;
  std::string format = "markdown";
  bool skip_profile = false;
};

int cmd_bench(const BenchArgs& args) {
  SeparatorConfig model;
  std::string name = "model";
  bool profile = !args.skip_profile;
  double seconds = args.seconds;
  int repeats = args.repeats;
  int warmup = args.warmup;

  if (!args.preset.empty()) {
    model = preset_model(args.preset);
    name = args.preset;
  } else if (!args.checkpoint.empty()) {
    model = load_checkpoint<float>(args.checkpoint).cfg;
    name = std::filesystem::path(args.checkpoint).stem().string();
  } else if (!args.config_path.empty()) {
    AppConfig cfg = parse_config_file(args.config_path);
    model = cfg.model;
    seconds = cfg.bench.seconds;
    repeats = cfg.bench.repeats;
    warmup = cfg.bench.warmup;
    profile = profile && cfg.bench.profile;
    name = std::filesystem::path(args.config_path).stem().string();
  } else {
    throw ConfigError("bench needs --config, --preset or --checkpoint");
  }

  ComputeReport row;
  if (profile) {
    auto w = build_separator<float>(model, 0, /*requires_grad=*/false);
    row = make_report<float>(name, model, &w, seconds, repeats, warmup);
  } else {
    row = make_report<float>(name, model, nullptr, seconds);
  }
  const ReportFormat fmt = args.format == "tsv" ? ReportFormat::Tsv : ReportFormat::Markdown;
  if (args.format != "tsv" && args.format != "markdown")
    throw ConfigError("format must be tsv or markdown");
  std::cout << emit_report({row}, fmt);
  return 0;
}

struct VerifyArgs {
  std::string suite = "all";
  std::int64_t seed = 0;
  int cases = 20;
};

int cmd_verify(const VerifyArgs& args) {
  VerifyResult res;
  const auto seed = static_cast<std::uint64_t>(args.seed);
  if (args.suite == "scan")
    res = verify_scan(seed, args.cases);
  else if (args.suite == "grads")
    res = verify_grads(seed);
  else if (args.suite == "causality")
    res = verify_causality(seed);
  else if (args.suite == "metrics")
    res = verify_metrics(seed, args.cases);
  else if (args.suite == "all")
    res = verify_all(seed);
  else
    throw ConfigError("unknown suite '" + args.suite + "' (scan, grads, causality, metrics, all)");

  for (const auto& [name, pass] : res.checks)
    std::cout << (pass ? "PASS " : "FAIL ") << name << "\n";
  if (!res.ok()) {
    std::cerr << "verification failed\n";
    return 4;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sepm: Mamba U-Net speech separation at the waveform level"};
  app.require_subcommand(1);
  app.footer("Environment: SEPM_THREADS sets the intra-op worker count (default 1).\n\n" +
             sepm::config_help_text());

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "optimize a model per a config file");
  train_cmd->add_option("config", train_args.config_path, "config file path")->required();
  train_cmd->add_option("--resume", train_args.resume, "checkpoint to continue from");
  train_cmd->add_option("--out-dir", train_args.out_dir, "output directory");
  train_cmd->add_option("--seed", train_args.seed, "override [train] seed");
  train_cmd->add_option("--steps", train_args.steps, "override [train] max_steps");

  SeparateArgs sep_args;
  auto* sep_cmd = app.add_subcommand("separate", "split a mixture wav into source estimates");
  sep_cmd->add_option("checkpoint", sep_args.checkpoint, "trained checkpoint")->required();
  sep_cmd->add_option("input", sep_args.input, "input wav (mono, model sample rate)")->required();
  sep_cmd->add_option("--out-prefix", sep_args.out_prefix, "prefix for <prefix>_srcN.wav");
  sep_cmd->add_option("--ref", sep_args.refs,
                      "reference wavs (repeat per source) to report SI-SDRi on stderr");
  sep_cmd->add_flag("--pcm16", sep_args.pcm16, "write 16-bit PCM instead of float32");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "parameter, MAC, timing and memory report");
  bench_cmd->add_option("--config", bench_args.config_path, "config file");
  bench_cmd->add_option("--preset", bench_args.preset, "s, m or tiny");
  bench_cmd->add_option("--checkpoint", bench_args.checkpoint, "read the model config from here");
  bench_cmd->add_option("--seconds", bench_args.seconds, "timed audio length");
  bench_cmd->add_option("--repeats", bench_args.repeats, "timed passes");
  bench_cmd->add_option("--warmup", bench_args.warmup, "untimed warmup passes");
  bench_cmd->add_option("--format", bench_args.format, "markdown or tsv");
  bench_cmd->add_flag("--skip-profile", bench_args.skip_profile,
                      "analytic columns only (no forward passes)");

  VerifyArgs verify_args;
  auto* verify_cmd = app.add_subcommand("verify", "run the numerical property suites");
  verify_cmd->add_option("--suite", verify_args.suite, "scan, grads, causality, metrics or all");
  verify_cmd->add_option("--seed", verify_args.seed, "suite seed");
  verify_cmd->add_option("--cases", verify_args.cases, "random cases for scan/metrics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(train_args);
    if (*sep_cmd) return cmd_separate(sep_args);
    if (*bench_cmd) return cmd_bench(bench_args);
    if (*verify_cmd) return cmd_verify(verify_args);
  } catch (const sepm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const sepm::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const sepm::NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
