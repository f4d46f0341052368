#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sepm/metrics.hpp"
#include "sepm/separator.hpp"
#include "sepm/ssm.hpp"

namespace sepm {

// Self-checking property suites behind `verify`. Each check reports one
// pass/fail line; a suite passes iff all its checks do.

struct VerifyResult {
  std::vector<std::pair<std::string, bool>> checks;

  bool ok() const {
    for (const auto& [name, pass] : checks)
      if (!pass) return false;
    return true;
  }
  void add(const std::string& name, bool pass) { checks.emplace_back(name, pass); }
  void merge(const VerifyResult& other) {
    checks.insert(checks.end(), other.checks.begin(), other.checks.end());
  }
};

// Test-fixture hook: lets a mutation be injected into the quantity under
// test so the suite can be shown to catch a planted defect.
enum class ScanMutation { None, FlipDiscretizationSign };

namespace verify_detail {

inline std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

template <typename T>
struct RawScan {
  Tensor<T> x, a_log, b, c, delta, dsk;
};

template <typename T>
RawScan<T> random_scan_case(std::int64_t d, std::int64_t l, std::int64_t n, Rng& rng) {
  RawScan<T> in;
  in.x = Tensor<T>::randn({d, l}, rng);
  Array<T> alog({d, n});
  for (auto& v : alog.data) v = static_cast<T>(rng.uniform(-1.0, 1.5));
  in.a_log = Tensor<T>::from_array(std::move(alog));
  in.b = Tensor<T>::randn({n, l}, rng);
  in.c = Tensor<T>::randn({n, l}, rng);
  Array<T> dl({d, l});
  for (auto& v : dl.data) v = static_cast<T>(std::exp(rng.uniform(std::log(1e-3), std::log(0.5))));
  in.delta = Tensor<T>::from_array(std::move(dl));
  in.dsk = Tensor<T>::randn({d}, rng);
  return in;
}

// compact central-difference checker (the test suites have a richer one;
// this one serves the runtime self-check command)
inline double max_rel_err_fd(const std::function<Tensor<double>()>& build_loss,
                             std::vector<Tensor<double>> leaves, double step = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  backward(build_loss());
  std::vector<std::vector<double>> analytic;
  for (auto& t : leaves)
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.values().size(), 0.0));
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& vals = leaves[li].values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + step;
      const double lp = build_loss().item();
      vals[i] = keep - step;
      const double lm = build_loss().item();
      vals[i] = keep;
      const double fd = (lp - lm) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[li][i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

inline SeparatorConfig verify_toy(bool causal) {
  SeparatorConfig c;
  c.n_stages = 3;
  c.base_dim = 4;
  c.blocks_per_stage = 2;
  c.kernel_size = 6;
  c.stride = 2;
  c.n_state = 2;
  c.d_conv = 3;
  c.causal = causal;
  return c;
}

}  // namespace verify_detail

// Parallel-vs-sequential scan equivalence plus discretization spot checks.
inline VerifyResult verify_scan(std::uint64_t seed, int cases = 20,
                                ScanMutation mutation = ScanMutation::None) {
  using verify_detail::random_scan_case;
  VerifyResult res;
  Rng rng(seed);

  double worst32 = 0.0, worst64 = 0.0;
  for (int i = 0; i < cases; ++i) {
    const std::int64_t l = rng.uniform_int(1, 1024);
    const std::int64_t d = rng.uniform_int(1, 16);
    const std::int64_t n = rng.uniform_int(1, 16);
    {
      auto in = random_scan_case<double>(d, l, n, rng);
      auto ys = ssm_scan(in.x, in.a_log, in.b, in.c, in.delta, in.dsk, ScanAlgo::Sequential);
      auto yp = ssm_scan(in.x, in.a_log, in.b, in.c, in.delta, in.dsk, ScanAlgo::Parallel);
      for (std::int64_t j = 0; j < ys.numel(); ++j)
        worst64 = std::max(worst64, std::abs(ys.values()[j] - yp.values()[j]));
    }
    {
      auto in = random_scan_case<float>(d, l, n, rng);
      auto ys = ssm_scan(in.x, in.a_log, in.b, in.c, in.delta, in.dsk, ScanAlgo::Sequential);
      auto yp = ssm_scan(in.x, in.a_log, in.b, in.c, in.delta, in.dsk, ScanAlgo::Parallel);
      for (std::int64_t j = 0; j < ys.numel(); ++j)
        worst32 = std::max(worst32, std::abs(static_cast<double>(ys.values()[j]) -
                                             static_cast<double>(yp.values()[j])));
    }
  }
  {
    std::ostringstream name;
    name << "scan: parallel == sequential, f32 max|diff| " << verify_detail::sci(worst32)
         << " < 1e-5 over " << cases << " cases";
    res.add(name.str(), worst32 < 1e-5);
  }
  {
    std::ostringstream name;
    name << "scan: parallel == sequential, f64 max|diff| " << verify_detail::sci(worst64) << " < 1e-10";
    res.add(name.str(), worst64 < 1e-10);
  }

  // closed-form discretization checks (the mutation hook flips the sign of
  // the candidate exponent so a planted defect must fail here)
  double worst_disc = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double a = -std::exp(rng.uniform(-2.0, 1.0));
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.5)));
    const double b = rng.normal();
    auto [abar_t, bbar_t] = discretize(Tensor<double>::scalar(a), Tensor<double>::scalar(b),
                                       Tensor<double>::scalar(dt));
    double abar = abar_t.item();
    double bbar = bbar_t.item();
    if (mutation == ScanMutation::FlipDiscretizationSign) abar = std::exp(-dt * a);
    const double abar_ref = std::exp(dt * a);
    const double z = dt * a;
    const double bbar_ref = (std::abs(z) < 1e-4 ? 1.0 : std::expm1(z) / z) * dt * b;
    worst_disc = std::max(worst_disc, std::abs(abar - abar_ref));
    worst_disc = std::max(worst_disc, std::abs(bbar - bbar_ref));
  }
  res.add("scan: zero-order-hold closed forms, max|err| " + verify_detail::sci(worst_disc),
          worst_disc < 1e-12);

  // streaming step equals the batch scan bit for bit
  {
    Rng prng(seed + 1);
    auto p = init_ssm_params<double>(3, 4, 1, prng);
    auto x = Tensor<double>::randn({3, 64}, prng);
    auto batch = scan_sequential(p, x);
    Array<double> h({3, 4});
    std::vector<double> xt(3), yt(3);
    bool exact = true;
    for (std::int64_t t = 0; t < 64; ++t) {
      for (std::int64_t ch = 0; ch < 3; ++ch) xt[ch] = x.values()[ch * 64 + t];
      scan_step(p, xt.data(), h, yt.data());
      for (std::int64_t ch = 0; ch < 3; ++ch) exact = exact && yt[ch] == batch.y.values()[ch * 64 + t];
    }
    res.add("scan: streaming step reproduces the batch scan bit-for-bit", exact);
  }
  return res;
}

// Finite-difference gradient checks on the scan, a conv, a Mamba stack and
// the permutation-invariant loss end to end.
inline VerifyResult verify_grads(std::uint64_t seed) {
  using verify_detail::max_rel_err_fd;
  VerifyResult res;
  Rng rng(seed);
  const double tol = 1e-5;

  {
    auto p = init_ssm_params<double>(3, 3, 2, rng);
    auto x = Tensor<double>::randn({3, 10}, rng, 1.0, true);
    const double err = max_rel_err_fd(
        [&] {
          auto r = scan_sequential(p, x);
          return sum(mul(r.y, r.y));
        },
        {p.a_log, p.w_b, p.w_c, p.w_dt_lo, p.w_dt, p.dt_bias, p.d_skip, x});
    res.add("grads: scan parameters, max rel err " + verify_detail::sci(err), err < tol);
  }
  {
    auto x = Tensor<double>::randn({2, 12}, rng, 1.0, true);
    auto w = Tensor<double>::randn({3, 2, 5}, rng, 1.0, true);
    const double err = max_rel_err_fd(
        [&] {
          auto y = conv1d(x, w, 2, PadMode::SameCentered);
          return sum(mul(y, y));
        },
        {x, w});
    res.add("grads: conv weights, max rel err " + verify_detail::sci(err), err < tol);
  }
  {
    BambaStackConfig cfg;
    cfg.n_blocks_per_branch = 1;
    cfg.bidirectional = true;
    cfg.block.d_model = 3;
    cfg.block.expand = 2;
    cfg.block.n_state = 2;
    cfg.block.d_conv = 2;
    auto w = init_bamba_stack<double>(cfg, rng);
    auto x = Tensor<double>::randn({3, 6}, rng, 1.0, true);
    NamedParams<double> reg;
    append_bamba_params("st", w, cfg, reg);
    std::vector<Tensor<double>> leaves;
    for (auto& [name, t] : reg) leaves.push_back(t);
    leaves.push_back(x);
    const double err = max_rel_err_fd(
        [&] {
          auto y = bamba_forward(cfg, w, x);
          return sum(mul(y, y));
        },
        leaves);
    res.add("grads: Bamba stack, max rel err " + verify_detail::sci(err), err < tol);
  }
  {
    // The loss gradient is defined away from permutation ties, the clamp and
    // activation kinks. Ties and clamping are screened analytically; a probe
    // that straddles a ReLU kink (common at init, where activations sit near
    // the 1e-5 step size) shows up as a localized FD mismatch and gets a
    // deterministic reroll. A wrong gradient fails at every seed.
    auto cfg = verify_detail::verify_toy(false);
    cfg.base_dim = 2;
    cfg.kernel_size = 4;
    cfg.d_conv = 2;
    const std::int64_t l = 16;
    double err = 1e9;
    int attempts = 0;
    for (std::uint64_t attempt = 0; attempt < 8 && err >= tol; ++attempt) {
      ++attempts;
      auto w = build_separator<double>(cfg, seed + attempt);
      Rng drng(seed + 2 + attempt);
      auto mix = Tensor<double>::randn({1, l}, drng);
      auto est0 = separator_forward(w, mix);
      auto row_rms = [&](std::int64_t r) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < l; ++i) {
          const double v = est0.values()[r * l + i];
          acc += v * v;
        }
        return std::sqrt(acc / static_cast<double>(l));
      };
      std::vector<double> r1v(l), r2v(l);
      const double s1 = 0.3 * row_rms(0), s2 = 0.4 * row_rms(1);
      for (std::int64_t i = 0; i < l; ++i) {
        r1v[i] = est0.values()[0 * l + i] + s1 * drng.normal();
        r2v[i] = est0.values()[1 * l + i] + s2 * drng.normal();
      }
      auto r1 = Tensor<double>::from({l}, r1v);
      auto r2 = Tensor<double>::from({l}, r2v);
      auto e1 = row(est0, 0), e2 = row(est0, 1);
      const double ident = (-si_sdr(e1, r1).item() - si_sdr(e2, r2).item()) / 2.0;
      const double swapped = (-si_sdr(e2, r1).item() - si_sdr(e1, r2).item()) / 2.0;
      const double scores[4] = {si_sdr(e1, r1).item(), si_sdr(e2, r2).item(),
                                si_sdr(e2, r1).item(), si_sdr(e1, r2).item()};
      bool away_from_clamp = true;
      for (double s : scores) away_from_clamp = away_from_clamp && std::abs(s) < 28.0;
      if (std::abs(ident - swapped) <= 0.5 || !away_from_clamp) continue;
      std::vector<Tensor<double>> leaves;
      for (auto& [name, t] : w.params) leaves.push_back(t);
      err = max_rel_err_fd(
          [&] {
            auto est = separator_forward(w, mix);
            return upit_loss<double>({row(est, 0), row(est, 1)}, {r1, r2}).loss;
          },
          leaves);
    }
    res.add("grads: separation loss end-to-end on a toy model, max rel err " +
                verify_detail::sci(err) + " (" + std::to_string(attempts) + " seed attempt(s))",
            err < tol);
  }
  return res;
}

// Causal lookahead probe: empirical window == analytic formula, and the
// non-causal model reacts far outside that window.
inline VerifyResult verify_causality(std::uint64_t seed) {
  VerifyResult res;
  {
    auto cfg = verify_detail::verify_toy(true);
    auto w = build_separator<double>(cfg, seed);
    Rng rng(seed + 1);
    const std::int64_t l = 96;
    const std::int64_t lambda = lookahead_samples(cfg);
    auto x = Tensor<double>::randn({1, l}, rng);
    auto y0 = separator_forward(w, x);
    std::int64_t observed = -1;
    bool bounded = true;
    for (std::int64_t p = 16; p < l - 4; ++p) {
      auto xv = x.values();
      xv[p] += 1.0;
      auto y1 = separator_forward(w, Tensor<double>::from({1, l}, xv));
      for (std::int64_t t = 0; t < l; ++t)
        for (std::int64_t c = 0; c < cfg.n_sources; ++c)
          if (y1.values()[c * l + t] != y0.values()[c * l + t]) {
            observed = std::max(observed, p - t);
            bounded = bounded && (p - t <= lambda);
          }
    }
    res.add("causality: no output sees past t + " + std::to_string(lambda), bounded);
    res.add("causality: empirical lookahead " + std::to_string(observed) + " == analytic " +
                std::to_string(lambda),
            observed == lambda);
  }
  {
    auto cfg = verify_detail::verify_toy(false);
    auto w = build_separator<double>(cfg, seed + 3);
    Rng rng(seed + 4);
    const std::int64_t l = 512;
    auto x = Tensor<double>::randn({1, l}, rng);
    auto y0 = separator_forward(w, x);
    auto xv = x.values();
    xv[l - 8] += 1.0;
    auto y1 = separator_forward(w, Tensor<double>::from({1, l}, xv));
    bool felt = false;
    for (std::int64_t c = 0; c < cfg.n_sources; ++c)
      if (y1.values()[c * l + 8] != y0.values()[c * l + 8]) felt = true;
    res.add("causality: non-causal config reacts far beyond the causal window", felt);
  }
  return res;
}

// Scale invariance, permutation invariance, clamp floor and assignment
// optimality of the separation metrics.
inline VerifyResult verify_metrics(std::uint64_t seed, int cases = 100) {
  VerifyResult res;
  Rng rng(seed);

  double worst_scale = 0.0;
  for (int i = 0; i < 10; ++i) {
    auto ref = Tensor<double>::randn({500}, rng);
    auto noise = Tensor<double>::randn({500}, rng);
    std::vector<double> est(500);
    for (int j = 0; j < 500; ++j) est[j] = ref.values()[j] + 0.4 * noise.values()[j];
    const double base = si_sdr(Tensor<double>::from({500}, est), ref).item();
    for (double c : {0.1, 10.0}) {
      std::vector<double> scaled(500);
      for (int j = 0; j < 500; ++j) scaled[j] = c * est[j];
      worst_scale = std::max(
          worst_scale, std::abs(si_sdr(Tensor<double>::from({500}, scaled), ref).item() - base));
    }
  }
  res.add("metrics: scale invariance drift " + verify_detail::sci(worst_scale) + " dB < 1e-6",
          worst_scale < 1e-6);

  bool perm_ok = true, clamp_ok = true, assign_ok = true;
  for (int i = 0; i < cases; ++i) {
    const std::int64_t l = 200;
    auto r1 = Tensor<double>::randn({l}, rng);
    auto r2 = Tensor<double>::randn({l}, rng);
    auto e1 = Tensor<double>::randn({l}, rng);
    auto e2 = Tensor<double>::randn({l}, rng);
    auto a = upit_loss<double>({e1, e2}, {r1, r2});
    auto b = upit_loss<double>({e2, e1}, {r1, r2});
    perm_ok = perm_ok && std::abs(a.loss.item() - b.loss.item()) < 1e-12;
    clamp_ok = clamp_ok && a.loss.item() >= -30.0;
    // independent exhaustive assignment oracle
    auto pair_term = [&](const Tensor<double>& e, const Tensor<double>& r) {
      return std::max(-si_sdr(e, r).item(), -30.0);
    };
    const double ident = (pair_term(e1, r1) + pair_term(e2, r2)) / 2.0;
    const double swapped = (pair_term(e2, r1) + pair_term(e1, r2)) / 2.0;
    const bool expect_swap = swapped < ident;
    assign_ok = assign_ok && (a.permutation == (expect_swap ? std::vector<std::size_t>{1, 0}
                                                            : std::vector<std::size_t>{0, 1}));
    assign_ok = assign_ok && std::abs(a.loss.item() - std::min(ident, swapped)) < 1e-12;
  }
  res.add("metrics: permutation invariance over " + std::to_string(cases) + " cases", perm_ok);
  res.add("metrics: loss clamped at -30 dB", clamp_ok);
  res.add("metrics: assignment equals exhaustive enumeration", assign_ok);

  {
    Rng r2(seed + 1);
    auto ref = Tensor<double>::randn({1000}, r2);
    const auto v = upit_loss<double>({ref, ref}, {ref, ref});
    res.add("metrics: perfect reconstruction clamps to exactly -30",
            v.loss.item() == -30.0 && v.pair_metrics[0].clamped);
  }
  return res;
}

inline VerifyResult verify_all(std::uint64_t seed) {
  VerifyResult res;
  res.merge(verify_scan(seed));
  res.merge(verify_grads(seed));
  res.merge(verify_causality(seed));
  res.merge(verify_metrics(seed));
  return res;
}

}  // namespace sepm
