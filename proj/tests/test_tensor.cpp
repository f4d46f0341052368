#include <doctest.h>

#include <cmath>
#include <vector>

#include "sepm/tensor.hpp"
#include "testutil.hpp"

using namespace sepm;
using testutil::gradcheck;

namespace {

// Brute-force oracles, independent of the library kernels.

std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::int64_t m, std::int64_t k, std::int64_t n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::vector<double> conv1d_oracle(const std::vector<double>& x, std::int64_t cin, std::int64_t l,
                                  const std::vector<double>& w, std::int64_t cout, std::int64_t k,
                                  std::int64_t stride, std::int64_t pad_left, std::int64_t pad_right) {
  const std::int64_t lout = (l + pad_left + pad_right - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(cout * lout), 0.0);
  auto xat = [&](std::int64_t c, std::int64_t t) -> double {
    if (t < 0 || t >= l) return 0.0;
    return x[c * l + t];
  };
  for (std::int64_t o = 0; o < cout; ++o)
    for (std::int64_t i = 0; i < lout; ++i)
      for (std::int64_t c = 0; c < cin; ++c)
        for (std::int64_t j = 0; j < k; ++j)
          y[o * lout + i] += w[(o * cin + c) * k + j] * xat(c, i * stride + j - pad_left);
  return y;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("matmul identity and scalar") {
  auto i2 = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto v = Tensor<double>::from({2, 1}, {3, 4});
  auto r = matmul(i2, v);
  CHECK(r.values() == std::vector<double>{3, 4});

  auto a = Tensor<double>::from({1, 1}, {2});
  auto b = Tensor<double>::from({1, 1}, {3});
  CHECK(matmul(a, b).item() == doctest::Approx(6.0));
}

TEST_CASE("matmul random case matches triple-loop oracle") {
  Rng rng(7);
  auto a = Tensor<double>::randn({3, 4}, rng);
  auto b = Tensor<double>::randn({4, 2}, rng);
  auto c = matmul(a, b);
  auto expect = matmul_oracle(a.values(), b.values(), 3, 4, 2);
  CHECK(testutil::max_abs_diff(c.values(), expect) < 1e-14);
}

TEST_CASE("matmul shape error names both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("conv1d identity kernel") {
  auto x = Tensor<double>::from({1, 4}, {1, 2, 3, 4});
  auto w = Tensor<double>::from({1, 1, 1}, {1});
  auto y = conv1d(x, w, 1, PadMode::Valid);
  CHECK(y.values() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("conv1d strided box kernel") {
  auto x = Tensor<double>::from({1, 4}, {1, 1, 1, 1});
  auto w = Tensor<double>::from({1, 1, 2}, {1, 1});
  auto y = conv1d(x, w, 2, PadMode::Valid);
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y.values() == std::vector<double>{2, 2});
}

TEST_CASE("conv1d random case matches nested-loop oracle") {
  Rng rng(11);
  const std::int64_t cin = 2, cout = 3, k = 16, stride = 2, l = 64;
  auto x = Tensor<double>::randn({cin, l}, rng);
  auto w = Tensor<double>::randn({cout, cin, k}, rng);
  SUBCASE("valid") {
    auto y = conv1d(x, w, stride, PadMode::Valid);
    auto expect = conv1d_oracle(x.values(), cin, l, w.values(), cout, k, stride, 0, 0);
    CHECK(testutil::max_abs_diff(y.values(), expect) < 1e-12);
  }
  SUBCASE("same-left") {
    auto y = conv1d(x, w, stride, PadMode::SameLeft);
    auto expect = conv1d_oracle(x.values(), cin, l, w.values(), cout, k, stride, k - 1, 0);
    CHECK(y.dim(1) == l / stride);
    CHECK(testutil::max_abs_diff(y.values(), expect) < 1e-12);
  }
  SUBCASE("same-centered") {
    auto y = conv1d(x, w, stride, PadMode::SameCentered);
    auto expect = conv1d_oracle(x.values(), cin, l, w.values(), cout, k, stride, (k - stride) / 2,
                                (k - stride) - (k - stride) / 2);
    CHECK(y.dim(1) == l / stride);
    CHECK(testutil::max_abs_diff(y.values(), expect) < 1e-12);
  }
}

TEST_CASE("conv1d empty-output error") {
  auto x = Tensor<double>::zeros({1, 3});
  auto w = Tensor<double>::zeros({1, 1, 8});
  CHECK_THROWS_AS(conv1d(x, w, 1, PadMode::Valid), ShapeError);
}

TEST_CASE("conv_transpose1d stride-1 identity kernel") {
  auto x = Tensor<double>::from({1, 5}, {1, 2, 3, 4, 5});
  auto w = Tensor<double>::from({1, 1, 1}, {1});
  auto y = conv_transpose1d(x, w, 1, 0, 5);
  CHECK(y.values() == x.values());
}

TEST_CASE("down-then-up restores length") {
  Rng rng(3);
  const std::int64_t l = 16000, k = 16, s = 2;
  auto x = Tensor<double>::randn({1, l}, rng);
  auto w = Tensor<double>::randn({1, 1, k}, rng, 0.1);
  auto down = conv1d(x, w, s, PadMode::SameCentered);
  CHECK(down.dim(1) == l / s);
  auto wt = Tensor<double>::randn({1, 1, k}, rng, 0.1);
  auto up = conv_transpose1d(down, wt, s, (k - s) / 2, l);
  CHECK(up.dim(1) == l);
}

TEST_CASE("conv / conv_transpose adjoint identity") {
  // <conv(x), y> == <x, conv_transpose(y)> with shared weights, exact up to
  // f64 roundoff.
  Rng rng(5);
  for (std::int64_t stride : {1, 2, 4}) {
    const std::int64_t cin = 3, cout = 2, k = 16, l = 128;
    auto x = Tensor<double>::randn({cin, l}, rng);
    auto w = Tensor<double>::randn({cout, cin, k}, rng);
    for (auto mode : {PadMode::Valid, PadMode::SameLeft, PadMode::SameCentered}) {
      auto cx = conv1d(x, w, stride, mode);
      const std::int64_t lout = cx.dim(1);
      auto y = Tensor<double>::randn({cout, lout}, rng);
      const double lhs = dot(cx.values(), y.values());
      // conv w [C_out x C_in x K] is already the adjoint's [C_in_t x C_out_t x K]
      auto wt = Tensor<double>::from({cout, cin, k}, w.values());
      const std::int64_t pl = detail::conv_padding(mode, l, k, stride).left;
      auto xt = conv_transpose1d(y, wt, stride, pl, l);
      const double rhs = dot(x.values(), xt.values());
      CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST_CASE("elementwise basics") {
  auto x = Tensor<double>::from({3}, {-1, 0, 2});
  CHECK(relu(x).values() == std::vector<double>{0, 0, 2});

  // silu(1) = 1/(1+e^-1); frozen closed form
  auto s = silu(Tensor<double>::scalar(1.0));
  CHECK(s.item() == doctest::Approx(0.7310585786300049).epsilon(1e-12));

  Rng rng(2);
  auto t = Tensor<double>::randn({2, 5}, rng);
  auto ff = flip_time(flip_time(t));
  CHECK(ff.values() == t.values());
}

TEST_CASE("broadcast add and failure") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({1, 2}, {10, 20});
  auto c = add(a, b);
  CHECK(c.values() == std::vector<double>{11, 22, 13, 24});

  auto s = Tensor<double>::scalar(5.0);
  CHECK(mul(a, s).values() == std::vector<double>{5, 10, 15, 20});

  auto bad = Tensor<double>::from({3}, {1, 2, 3});
  CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("backward basics") {
  Rng rng(4);
  SUBCASE("loss = sum(w*x) -> grad w == x") {
    auto x = Tensor<double>::randn({5}, rng);
    auto w = Tensor<double>::randn({5}, rng, 1.0, true);
    auto loss = sum(mul(w, x));
    backward(loss);
    CHECK(testutil::max_abs_diff(w.grad(), x.values()) == 0.0);
  }
  SUBCASE("loss = sum(w^2)/2 -> grad w == w") {
    auto w = Tensor<double>::randn({7}, rng, 1.0, true);
    auto loss = mul_scalar(sum(mul(w, w)), 0.5);
    backward(loss);
    CHECK(testutil::max_abs_diff(w.grad(), w.values()) < 1e-15);
  }
  SUBCASE("non-scalar loss rejected") {
    auto w = Tensor<double>::randn({3}, rng, 1.0, true);
    CHECK_THROWS_AS(backward(mul(w, w)), ShapeError);
  }
}

TEST_CASE("finite-difference check for every op") {
  Rng rng(21);
  const double tol = 1e-6;

  auto check = [&](const char* name, const std::function<Tensor<double>()>& f,
                   std::vector<std::pair<std::string, Tensor<double>>> leaves) {
    auto res = gradcheck(f, std::move(leaves));
    INFO(name, " worst: ", res.worst);
    CHECK(res.max_rel_err < tol);
  };

  auto x = Tensor<double>::randn({2, 6}, rng, 1.0, true);
  auto y = Tensor<double>::randn({2, 6}, rng, 1.0, true);
  auto s = Tensor<double>::randn({1, 6}, rng, 1.0, true);
  auto sc = Tensor<double>::scalar(0.7, true);

  check("add", [&] { return sum(add(x, y)); }, {{"x", x}, {"y", y}});
  check("add bcast", [&] { return sum(mul(add(x, s), x)); }, {{"x", x}, {"s", s}});
  check("add scalar-tensor", [&] { return sum(mul(add(x, sc), x)); }, {{"x", x}, {"sc", sc}});
  check("sub", [&] { return sum(mul(sub(x, y), y)); }, {{"x", x}, {"y", y}});
  check("mul", [&] { return sum(mul(x, y)); }, {{"x", x}, {"y", y}});
  check("neg", [&] { return sum(mul(neg(x), y)); }, {{"x", x}});

  auto ypos = Tensor<double>::rand_uniform({2, 6}, rng, 0.5, 2.0, true);
  check("div", [&] { return sum(div(x, ypos)); }, {{"x", x}, {"ypos", ypos}});
  check("log", [&] { return sum(log_(ypos)); }, {{"ypos", ypos}});

  // keep relu/cmax inputs away from the kink
  auto xoff = Tensor<double>::rand_uniform({2, 6}, rng, 0.2, 1.5, true);
  auto xneg = Tensor<double>::rand_uniform({2, 6}, rng, -1.5, -0.2, true);
  check("relu+", [&] { return sum(relu(xoff)); }, {{"xoff", xoff}});
  check("relu-", [&] { return sum(relu(xneg)); }, {{"xneg", xneg}});
  check("cmax", [&] { return sum(cmax(x, 0.1)); }, {{"x", x}});

  check("sigmoid", [&] { return sum(sigmoid(x)); }, {{"x", x}});
  check("silu", [&] { return sum(silu(x)); }, {{"x", x}});
  check("exp", [&] { return sum(exp_(x)); }, {{"x", x}});
  check("softplus", [&] { return sum(softplus(x)); }, {{"x", x}});
  check("mul_scalar", [&] { return sum(mul_scalar(x, 1.7)); }, {{"x", x}});
  check("add_scalar", [&] { return sum(mul(add_scalar(x, 0.3), x)); }, {{"x", x}});
  check("flip_time", [&] { return sum(mul(flip_time(x), y)); }, {{"x", x}, {"y", y}});
  check("row", [&] { return sum(mul(row(x, 1), row(y, 0))); }, {{"x", x}, {"y", y}});
  check("pad_last", [&] { return sum(mul(pad_last(x, 2, 3), pad_last(y, 2, 3))); },
        {{"x", x}, {"y", y}});
  check("crop_last", [&] { return sum(mul(crop_last(x, 1, 4), crop_last(y, 1, 4))); },
        {{"x", x}, {"y", y}});
  check("stack_rows", [&] {
    auto st = stack_rows<double>({row(x, 0), row(y, 1)});
    return sum(mul(st, st));
  }, {{"x", x}, {"y", y}});

  auto a34 = Tensor<double>::randn({3, 4}, rng, 1.0, true);
  auto b42 = Tensor<double>::randn({4, 2}, rng, 1.0, true);
  check("matmul", [&] { return sum(matmul(a34, b42)); }, {{"a", a34}, {"b", b42}});

  auto cx = Tensor<double>::randn({2, 12}, rng, 1.0, true);
  auto cw = Tensor<double>::randn({3, 2, 4}, rng, 1.0, true);
  for (auto mode : {PadMode::Valid, PadMode::SameLeft, PadMode::SameCentered}) {
    check("conv1d", [&, mode] {
      auto out = conv1d(cx, cw, 2, mode);
      return sum(mul(out, out));
    }, {{"cx", cx}, {"cw", cw}});
  }
  auto dwx = Tensor<double>::randn({4, 10}, rng, 1.0, true);
  auto dww = Tensor<double>::randn({4, 1, 3}, rng, 1.0, true);
  check("depthwise conv", [&] {
    auto out = conv1d(dwx, dww, 1, PadMode::SameLeft, 4);
    return sum(mul(out, out));
  }, {{"dwx", dwx}, {"dww", dww}});

  auto tx = Tensor<double>::randn({3, 6}, rng, 1.0, true);
  auto tw = Tensor<double>::randn({3, 2, 4}, rng, 1.0, true);
  check("conv_transpose1d", [&] {
    auto out = conv_transpose1d(tx, tw, 2, 1, 12);
    return sum(mul(out, out));
  }, {{"tx", tx}, {"tw", tw}});

  auto bias = Tensor<double>::randn({2}, rng, 1.0, true);
  check("add_channel_bias", [&] {
    auto out = add_channel_bias(x, bias);
    return sum(mul(out, out));
  }, {{"x", x}, {"bias", bias}});

  auto gain = Tensor<double>::rand_uniform({2}, rng, 0.5, 1.5, true);
  check("rmsnorm", [&] {
    auto out = rmsnorm_channels(x, gain);
    return sum(mul(out, out));
  }, {{"x", x}, {"gain", gain}});

  check("sum-of-sums", [&] {
    auto t = add(mul(x, y), mul_scalar(x, 0.5));
    return sum(mul(t, t));
  }, {{"x", x}, {"y", y}});
}

TEST_CASE("grad accumulates across backward calls") {
  auto w = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto l1 = sum(mul(w, w));
  backward(l1);
  auto g1 = w.grad();
  auto l2 = sum(mul(w, w));
  backward(l2);
  CHECK(w.grad()[0] == doctest::Approx(2 * g1[0]));
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("determinism: same seed, same bits") {
  Rng r1(99), r2(99);
  auto a = Tensor<float>::randn({64}, r1);
  auto b = Tensor<float>::randn({64}, r2);
  CHECK(a.values() == b.values());
}
