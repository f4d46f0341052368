#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sepm/metrics.hpp"
#include "testutil.hpp"

using namespace sepm;

namespace {

Tensor<double> randn_sig(std::int64_t l, Rng& rng, bool rg = false) {
  return Tensor<double>::randn({l}, rng, 1.0, rg);
}

// plain-array ratio oracle, fully independent of the tensor path
double si_sdr_oracle(const std::vector<double>& est, const std::vector<double>& ref) {
  const double eps = 1e-8;
  double dot = 0, rr = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    dot += est[i] * ref[i];
    rr += ref[i] * ref[i];
  }
  const double alpha = dot / (rr + eps);
  double tt = 0, ee = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double t = alpha * ref[i];
    tt += t * t;
    const double e = t - est[i];
    ee += e * e;
  }
  return 10.0 * std::log10((tt + eps) / (ee + eps));
}

}  // namespace

TEST_CASE("perfect reconstruction is eps-bounded large and clamps to 30") {
  Rng rng(50);
  auto ref = randn_sig(4096, rng);
  auto v = si_sdr(ref, ref).item();
  CHECK(v > 50.0);
  CHECK(std::isfinite(v));
  auto r = upit_loss<double>({ref, ref}, {ref, ref});
  CHECK(r.loss.item() == doctest::Approx(-30.0));
  CHECK(r.pair_metrics[0].clamped);
  CHECK(r.pair_metrics[0].value_db == doctest::Approx(30.0));
}

TEST_CASE("orthogonal estimate is eps-bounded large-negative") {
  const std::int64_t l = 64;
  std::vector<double> ref(l, 0.0), est(l, 0.0);
  for (std::int64_t i = 0; i < l; i += 2) {
    ref[i] = 1.0;      // even support
    est[i + 1] = 1.0;  // odd support, exactly orthogonal
  }
  auto v = si_sdr(Tensor<double>::from({l}, est), Tensor<double>::from({l}, ref)).item();
  CHECK(v < -50.0);
  CHECK(std::isfinite(v));
}

TEST_CASE("constructed 10 dB case") {
  // est = ref + w with w orthogonal to ref and ||w||^2 = ||ref||^2 / 10:
  // alpha = 1, error = w, ratio = 10 -> 10.0 dB
  Rng rng(51);
  const std::int64_t l = 2048;
  auto ref = randn_sig(l, rng);
  auto noise = randn_sig(l, rng);
  // orthogonalize and rescale
  double dot = 0, rr = 0;
  for (std::int64_t i = 0; i < l; ++i) {
    dot += noise.values()[i] * ref.values()[i];
    rr += ref.values()[i] * ref.values()[i];
  }
  std::vector<double> w(l);
  double ww = 0;
  for (std::int64_t i = 0; i < l; ++i) {
    w[i] = noise.values()[i] - (dot / rr) * ref.values()[i];
    ww += w[i] * w[i];
  }
  const double scale = std::sqrt(rr / 10.0 / ww);
  std::vector<double> est(l);
  for (std::int64_t i = 0; i < l; ++i) est[i] = ref.values()[i] + scale * w[i];
  auto v = si_sdr(Tensor<double>::from({l}, est), ref).item();
  CHECK(v == doctest::Approx(10.0).epsilon(1e-6));
}

TEST_CASE("zero reference is rejected") {
  auto est = Tensor<double>::from({4}, {1, 2, 3, 4});
  auto ref = Tensor<double>::zeros({4});
  CHECK_THROWS_AS(si_sdr(est, ref), NumericError);
}

TEST_CASE("scale invariance across 0.1 / 1 / 10") {
  Rng rng(52);
  auto ref = randn_sig(4000, rng);
  auto noise = randn_sig(4000, rng);
  std::vector<double> est(4000);
  for (std::int64_t i = 0; i < 4000; ++i) est[i] = ref.values()[i] + 0.3 * noise.values()[i];
  const double base = si_sdr(Tensor<double>::from({4000}, est), ref).item();
  for (double c : {0.1, 10.0}) {
    std::vector<double> scaled(4000);
    for (std::int64_t i = 0; i < 4000; ++i) scaled[i] = c * est[i];
    const double v = si_sdr(Tensor<double>::from({4000}, scaled), ref).item();
    CHECK(std::abs(v - base) < 1e-6);
  }
}

TEST_CASE("si_sdr matches the independent oracle") {
  Rng rng(53);
  for (int rep = 0; rep < 20; ++rep) {
    auto ref = randn_sig(333, rng);
    auto est = randn_sig(333, rng);
    CHECK(si_sdr(est, ref).item() ==
          doctest::Approx(si_sdr_oracle(est.values(), ref.values())).epsilon(1e-10));
  }
}

TEST_CASE("upit: swapped estimates recover the swap") {
  Rng rng(54);
  auto a = randn_sig(1024, rng);
  auto b = randn_sig(1024, rng);
  auto r = upit_loss<double>({b, a}, {a, b});
  CHECK(r.loss.item() == doctest::Approx(-30.0));
  CHECK(r.permutation == std::vector<std::size_t>{1, 0});
}

TEST_CASE("upit equals exhaustive enumeration on random cases") {
  Rng rng(55);
  for (int rep = 0; rep < 100; ++rep) {
    const std::int64_t l = 200;
    auto r1 = randn_sig(l, rng);
    auto r2 = randn_sig(l, rng);
    auto e1 = randn_sig(l, rng);
    auto e2 = randn_sig(l, rng);
    auto res = upit_loss<double>({e1, e2}, {r1, r2});
    // oracle: enumerate both assignments with the plain-array ratio
    const double id = (std::max(-si_sdr_oracle(e1.values(), r1.values()), -30.0) +
                       std::max(-si_sdr_oracle(e2.values(), r2.values()), -30.0)) /
                      2.0;
    const double sw = (std::max(-si_sdr_oracle(e2.values(), r1.values()), -30.0) +
                       std::max(-si_sdr_oracle(e1.values(), r2.values()), -30.0)) /
                      2.0;
    const double best = std::min(id, sw);
    CHECK(res.loss.item() == doctest::Approx(best).epsilon(1e-10));
    const std::vector<std::size_t> expect =
        id <= sw ? std::vector<std::size_t>{0, 1} : std::vector<std::size_t>{1, 0};
    CHECK(res.permutation == expect);
    CHECK(res.loss.item() >= -30.0);
  }
}

TEST_CASE("upit is invariant to permuting the estimates") {
  Rng rng(56);
  auto r1 = randn_sig(400, rng);
  auto r2 = randn_sig(400, rng);
  auto e1 = randn_sig(400, rng);
  auto e2 = randn_sig(400, rng);
  auto a = upit_loss<double>({e1, e2}, {r1, r2});
  auto b = upit_loss<double>({e2, e1}, {r1, r2});
  CHECK(a.loss.item() == doctest::Approx(b.loss.item()).epsilon(1e-12));
}

TEST_CASE("upit count mismatch") {
  Rng rng(57);
  auto r1 = randn_sig(16, rng);
  CHECK_THROWS_AS(upit_loss<double>({r1}, {r1, r1}), ShapeError);
}

TEST_CASE("upit gradient flows only through the selected assignment") {
  Rng rng(58);
  const std::int64_t l = 64;
  auto r1 = randn_sig(l, rng);
  auto r2 = randn_sig(l, rng);
  // noisy estimates keep the ratio below the clamp and away from ties
  std::vector<double> e1(l), e2(l);
  for (std::int64_t i = 0; i < l; ++i) {
    e1[i] = r1.values()[i] + 0.5 * r2.values()[i];
    e2[i] = r2.values()[i] - 0.4 * r1.values()[i];
  }
  auto t1 = Tensor<double>::from({l}, e1, true);
  auto t2 = Tensor<double>::from({l}, e2, true);
  auto res = testutil::gradcheck(
      [&] { return upit_loss<double>({t1, t2}, {r1, r2}).loss; },
      {{"e1", t1}, {"e2", t2}});
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("improvement metrics") {
  Rng rng(59);
  const std::int64_t l = 2000;
  auto r1 = randn_sig(l, rng);
  auto r2 = randn_sig(l, rng);
  std::vector<double> mixv(l);
  for (std::int64_t i = 0; i < l; ++i) mixv[i] = r1.values()[i] + r2.values()[i];
  auto mix = Tensor<double>::from({l}, mixv);

  SUBCASE("no processing gives exactly zero improvement") {
    CHECK(si_sdr_improvement<double>({mix, mix}, {r1, r2}, mix) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(sdr_improvement<double>({mix, mix}, {r1, r2}, mix) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("perfect separation reaches the eps-bounded ceiling minus baseline") {
    const double si = si_sdr_improvement<double>({r1, r2}, {r1, r2}, mix);
    const double ceiling = (si_sdr(r1, r1).item() + si_sdr(r2, r2).item()) / 2.0;
    const double baseline = (si_sdr(mix, r1).item() + si_sdr(mix, r2).item()) / 2.0;
    CHECK(si == doctest::Approx(ceiling - baseline).epsilon(1e-10));
    CHECK(si > 40.0);
  }
  SUBCASE("synthetic case with known ratios") {
    // estimates equal to references plus scaled orthogonalized noise of known
    // power; improvement must match the hand-computed value
    auto mk_est = [&](const Tensor<double>& ref, double ratio_db, Rng& r) {
      auto noise = randn_sig(l, r);
      double dot = 0, rr = 0;
      for (std::int64_t i = 0; i < l; ++i) {
        dot += noise.values()[i] * ref.values()[i];
        rr += ref.values()[i] * ref.values()[i];
      }
      std::vector<double> w(l);
      double ww = 0;
      for (std::int64_t i = 0; i < l; ++i) {
        w[i] = noise.values()[i] - (dot / rr) * ref.values()[i];
        ww += w[i] * w[i];
      }
      const double target_pow = rr / std::pow(10.0, ratio_db / 10.0);
      const double s = std::sqrt(target_pow / ww);
      std::vector<double> est(l);
      for (std::int64_t i = 0; i < l; ++i) est[i] = ref.values()[i] + s * w[i];
      return Tensor<double>::from({l}, est);
    };
    auto e1 = mk_est(r1, 12.0, rng);
    auto e2 = mk_est(r2, 8.0, rng);
    const double baseline = (si_sdr(mix, r1).item() + si_sdr(mix, r2).item()) / 2.0;
    const double si = si_sdr_improvement<double>({e1, e2}, {r1, r2}, mix);
    CHECK(si == doctest::Approx((12.0 + 8.0) / 2.0 - baseline).epsilon(1e-6));
  }
}

TEST_CASE("sdr is not scale invariant but si_sdr is") {
  Rng rng(60);
  auto ref = randn_sig(500, rng);
  std::vector<double> est(500);
  for (std::int64_t i = 0; i < 500; ++i) est[i] = 2.0 * ref.values()[i];
  auto t = Tensor<double>::from({500}, est);
  CHECK(si_sdr(t, ref).item() > 50.0);
  CHECK(sdr(t, ref).item() == doctest::Approx(0.0).epsilon(1e-6));  // ||ref||^2/||ref||^2
}
