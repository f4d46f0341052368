// Acceptance harness: one pass/fail line per criterion, nonzero exit on any
// failure. Run with no arguments for the full battery, or pass criterion
// numbers to run a subset (e.g. "acceptance 3 5").

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sepm/audio.hpp"
#include "sepm/bench.hpp"
#include "sepm/config.hpp"
#include "sepm/metrics.hpp"
#include "sepm/streaming.hpp"
#include "sepm/trainer.hpp"
#include "sepm/verify.hpp"

using namespace sepm;
namespace fs = std::filesystem;

namespace {

#ifndef SEPM_BIN_PATH
#define SEPM_BIN_PATH ""
#endif

struct Outcome {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Outcome> results;

void report(int id, bool pass, const std::string& detail) {
  results.push_back({id, pass, detail});
  std::printf("criterion %2d %s — %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string pct(double actual, double target) {
  std::ostringstream os;
  os.precision(2);
  os << std::fixed << 100.0 * (actual - target) / target << "%";
  return os.str();
}

struct CliRun {
  int code;
  std::string out;
};

CliRun run_cli(const std::string& args) {
  const fs::path dir = fs::temp_directory_path() / "sepm_acceptance";
  fs::create_directories(dir);
  static int counter = 0;
  const fs::path out = dir / ("cli_out" + std::to_string(counter++));
  const std::string cmd = std::string(SEPM_BIN_PATH) + " " + args + " >" + out.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream in(out);
  std::ostringstream os;
  os << in.rdbuf();
  return {WEXITSTATUS(raw), os.str()};
}

// --------------------------------------------------------------------------
// 1. parameter-count reproduction (with the calibration grid)
// --------------------------------------------------------------------------
void criterion_params() {
  const double target_s = 7.2e6, target_m = 22e6;

  // grid search over the documented calibration set
  double best_dev = 1e9;
  std::int64_t be = 0, bn = 0, bk = 0;
  for (std::int64_t e : {1, 2, 3})
    for (std::int64_t n : {8, 16, 32})
      for (std::int64_t k : {3, 4}) {
        SeparatorConfig s = preset_model("s"), m = preset_model("m");
        s.expand = m.expand = e;
        s.n_state = m.n_state = n;
        s.d_conv = m.d_conv = k;
        const double dev = std::abs(static_cast<double>(count_params(s)) - target_s) / target_s +
                           std::abs(static_cast<double>(count_params(m)) - target_m) / target_m;
        if (dev < best_dev) {
          best_dev = dev;
          be = e;
          bn = n;
          bk = k;
        }
      }
  const SeparatorConfig def;
  const bool grid_matches_defaults = be == def.expand && bn == def.n_state && bk == def.d_conv;

  // the shipped defaults, through the CLI as a user would see them
  auto rs = run_cli("bench --preset s --skip-profile --format tsv");
  auto rm = run_cli("bench --preset m --skip-profile --format tsv");
  bool ok = rs.code == 0 && rm.code == 0 && grid_matches_defaults;
  double ps = 0, pm = 0;
  if (ok) {
    ps = static_cast<double>(parse_report_tsv(rs.out)[0].params);
    pm = static_cast<double>(parse_report_tsv(rm.out)[0].params);
    ok = std::abs(ps - target_s) / target_s < 0.10 && std::abs(pm - target_m) / target_m < 0.10;
  }
  std::ostringstream os;
  os << "params S=" << ps << " (" << pct(ps, target_s) << " vs 7.2M), M=" << pm << " ("
     << pct(pm, target_m) << " vs 22M); calibration grid picks expand=" << be << " n_state=" << bn
     << " d_conv=" << bk << (grid_matches_defaults ? " (= shipped defaults)" : " (MISMATCH)");
  report(1, ok, os.str());
}

// --------------------------------------------------------------------------
// 2. GMAC/s reproduction
// --------------------------------------------------------------------------
void criterion_gmac() {
  auto rs = run_cli("bench --preset s --skip-profile --format tsv");
  auto rm = run_cli("bench --preset m --skip-profile --format tsv");
  bool ok = rs.code == 0 && rm.code == 0;
  double gs = 0, gm = 0;
  if (ok) {
    gs = parse_report_tsv(rs.out)[0].gmac_per_s;
    gm = parse_report_tsv(rm.out)[0].gmac_per_s;
    ok = std::abs(gs - 12.46) / 12.46 < 0.15 && std::abs(gm - 37.0) / 37.0 < 0.15;
  }
  std::ostringstream os;
  os << "GMAC/s S=" << gs << " (" << pct(gs, 12.46) << " vs 12.46), M=" << gm << " ("
     << pct(gm, 37.0) << " vs 37.0), tolerance 15%";
  report(2, ok, os.str());
}

// --------------------------------------------------------------------------
// 3. scan equivalence over 100 random cases
// --------------------------------------------------------------------------
void criterion_scan() {
  auto res = verify_scan(2024, 100);
  std::string detail = "100 random cases (L<=1024, d<=16, N<=16):";
  for (const auto& [name, pass] : res.checks)
    if (name.find("parallel == sequential") != std::string::npos)
      detail += " [" + name + (pass ? " ok]" : " FAILED]");
  report(3, res.ok(), detail);
}

// --------------------------------------------------------------------------
// 4. gradient correctness
// --------------------------------------------------------------------------
void criterion_grads() {
  auto res = verify_grads(99);
  std::string detail = "finite differences (f64, step 1e-5, rel err < 1e-5):";
  for (const auto& [name, pass] : res.checks) detail += pass ? " ok" : " FAILED(" + name + ")";
  report(4, res.ok(), detail);
}

// --------------------------------------------------------------------------
// 5. causality window
// --------------------------------------------------------------------------
void criterion_causality() {
  auto res = verify_causality(7);
  std::string detail;
  for (const auto& [name, pass] : res.checks)
    detail += (detail.empty() ? "" : "; ") + name + (pass ? "" : " FAILED");
  report(5, res.ok(), detail);
}

// --------------------------------------------------------------------------
// 6. metric properties
// --------------------------------------------------------------------------
void criterion_metrics() {
  auto res = verify_metrics(11, 100);
  std::string detail;
  for (const auto& [name, pass] : res.checks)
    detail += (detail.empty() ? "" : "; ") + name + (pass ? "" : " FAILED");
  report(6, res.ok(), detail);
}

// --------------------------------------------------------------------------
// 7. overfit drill
// --------------------------------------------------------------------------
void criterion_overfit(std::int64_t steps) {
  SeparatorConfig model = preset_model("tiny");  // base_dim 16, 3 stages, 2 blocks/stage
  TrainConfig tc;
  tc.max_steps = steps;
  tc.lr = 2e-3;
  tc.weight_decay = 0.01;
  tc.seed = 1;
  tc.epoch_steps = 250;
  tc.deterministic = true;
  DataPipeConfig dc;
  dc.duration_s = 0.5;
  dc.fixed_mixtures = 8;
  dc.data_seed = 42;

  const std::string dir = (fs::temp_directory_path() / "sepm_acceptance_overfit").string();
  fs::remove_all(dir);
  auto run = train<float>(model, tc, dc, dir);

  double mean_si = 0.0;
  for (std::int64_t item = 0; item < dc.fixed_mixtures; ++item) {
    auto mix = make_training_mix<float>(entry_for_item(dc, {}, item), dc.ranges,
                                        model.sample_rate);
    const std::int64_t l = mix.mixture.length();
    auto est = separator_forward(run.model, Tensor<float>::from({1, l}, mix.mixture.samples));
    const double si = si_sdr_improvement<float>(
        {row(est, 0), row(est, 1)},
        {Tensor<float>::from({l}, mix.ref_a.samples), Tensor<float>::from({l}, mix.ref_b.samples)},
        Tensor<float>::from({l}, mix.mixture.samples));
    mean_si += si;
  }
  mean_si /= static_cast<double>(dc.fixed_mixtures);
  fs::remove_all(dir);
  std::ostringstream os;
  os << "overfit drill: mean SI-SDRi " << mean_si << " dB after " << steps
     << " steps on 8 fixed mixtures (threshold 10 dB)";
  report(7, mean_si > 10.0, os.str());
}

// --------------------------------------------------------------------------
// 8. streaming equivalence
// --------------------------------------------------------------------------
void criterion_streaming() {
  SeparatorConfig cfg;
  cfg.n_stages = 3;
  cfg.base_dim = 8;
  cfg.blocks_per_stage = 2;
  cfg.kernel_size = 16;
  cfg.stride = 2;
  cfg.n_state = 4;
  cfg.causal = true;
  auto w = build_separator<float>(cfg, 5, false);
  Rng rng(6);
  const std::int64_t l = 4096;
  auto x = Tensor<float>::randn({1, l}, rng);
  auto batch = separator_forward(w, x);

  auto st = make_stream_state<float>(cfg);
  std::vector<float> streamed[2];
  const std::int64_t chunk = 256;
  for (std::int64_t off = 0; off < l; off += chunk) {
    Array<float> frame({1, chunk});
    std::copy_n(x.values().data() + off, chunk, frame.ptr());
    auto out = forward_streaming(w, frame, st);
    for (int c = 0; c < 2; ++c)
      for (std::int64_t t = 0; t < out.dim(1); ++t)
        streamed[c].push_back(out.ptr()[c * out.dim(1) + t]);
  }
  const std::int64_t lambda = lookahead_samples(cfg);
  double worst = 0.0;
  bool length_ok = static_cast<std::int64_t>(streamed[0].size()) == l - lambda;
  for (int c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < streamed[c].size(); ++t)
      worst = std::max(worst, std::abs(static_cast<double>(streamed[c][t]) -
                                       static_cast<double>(batch.values()[c * l + t])));
  std::ostringstream os;
  os << "streaming vs batch over " << l << " samples in " << (l / chunk) << " chunks: max|diff| "
     << worst << " (< 1e-5) outside the final " << lambda << "-sample lookahead window";
  report(8, length_ok && worst < 1e-5, os.str());
}

// --------------------------------------------------------------------------
// 9. byte-identical training runs through the CLI
// --------------------------------------------------------------------------
void criterion_determinism() {
  const fs::path dir = fs::temp_directory_path() / "sepm_acceptance_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "c.cfg");
    cfg << "[model]\nn_stages = 3\nbase_dim = 4\nblocks_per_stage = 2\nkernel_size = 6\n"
           "stride = 2\nn_state = 2\nd_conv = 2\n"
           "[train]\nmax_steps = 50\nlr = 0.001\nprecision = f64\ndeterministic = true\nseed = 3\n"
           "[data]\nduration_s = 0.04\nfixed_mixtures = 4\n";
  }
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  };
  const std::string base = "SEPM_THREADS=1 " + std::string(SEPM_BIN_PATH) + " train " +
                           (dir / "c.cfg").string() + " --out-dir ";
  const int c1 = std::system((base + (dir / "r1").string() + " >/dev/null 2>&1").c_str());
  const int c2 = std::system((base + (dir / "r2").string() + " >/dev/null 2>&1").c_str());
  const std::string m1 = slurp(dir / "r1" / "metrics.tsv");
  const std::string m2 = slurp(dir / "r2" / "metrics.tsv");
  const bool ok = WEXITSTATUS(c1) == 0 && WEXITSTATUS(c2) == 0 && !m1.empty() && m1 == m2;
  std::ostringstream os;
  os << "two 50-step f64 single-thread runs: metrics files " << (m1 == m2 ? "byte-identical" : "DIFFER")
     << " (" << m1.size() << " bytes)";
  report(9, ok, os.str());
  fs::remove_all(dir);
}

// --------------------------------------------------------------------------
// 10. dynamic mixing over 1000 specs
// --------------------------------------------------------------------------
void criterion_mixing() {
  double worst_snr = 0.0;
  bool bitwise = true;
  MixRanges ranges;
  for (int i = 0; i < 1000; ++i) {
    ManifestEntry e;
    e.seed = 5000 + static_cast<std::uint64_t>(i);
    e.duration_s = 0.12;
    e.kind_a = SourceKind::HarmonicVoice;
    e.kind_b = i % 3 == 0 ? SourceKind::Chirp : SourceKind::FilteredNoise;
    auto r = make_training_mix<double>(e, ranges, 8000);
    worst_snr = std::max(worst_snr, std::abs(measured_snr_db(r.ref_a, r.ref_b) - r.spec.snr_db));
    for (std::int64_t t = 0; t < r.mixture.length(); ++t)
      bitwise = bitwise && r.mixture.samples[static_cast<std::size_t>(t)] ==
                               r.ref_a.samples[static_cast<std::size_t>(t)] +
                                   r.ref_b.samples[static_cast<std::size_t>(t)];
  }
  std::ostringstream os;
  os << "1000 sampled mixes: worst |measured - target| SNR " << worst_snr
     << " dB (< 0.01), mixture == ref_a + ref_b " << (bitwise ? "bitwise" : "VIOLATED");
  report(10, worst_snr < 0.01 && bitwise, os.str());
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  std::int64_t overfit_steps = 2000;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a.rfind("--overfit-steps=", 0) == 0)
      overfit_steps = std::atoll(a.c_str() + 16);
    else
      selected.insert(std::atoi(a.c_str()));
  }
  auto want = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  if (want(1)) criterion_params();
  if (want(2)) criterion_gmac();
  if (want(3)) criterion_scan();
  if (want(4)) criterion_grads();
  if (want(5)) criterion_causality();
  if (want(6)) criterion_metrics();
  if (want(7)) criterion_overfit(overfit_steps);
  if (want(8)) criterion_streaming();
  if (want(9)) criterion_determinism();
  if (want(10)) criterion_mixing();

  int failures = 0;
  for (const auto& r : results) failures += r.pass ? 0 : 1;
  std::printf("%d/%zu criteria passed\n", static_cast<int>(results.size()) - failures,
              results.size());
  return failures;
}
