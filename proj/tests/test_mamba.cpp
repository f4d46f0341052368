#include <doctest.h>

#include <cmath>

#include "sepm/mamba.hpp"
#include "testutil.hpp"

using namespace sepm;

namespace {

MambaBlockConfig tiny_block(std::int64_t d = 4) {
  MambaBlockConfig c;
  c.d_model = d;
  c.expand = 2;
  c.n_state = 3;
  c.d_conv = 3;
  return c;
}

}  // namespace

TEST_CASE("zero out-projection reduces the block to the identity") {
  Rng rng(31);
  auto cfg = tiny_block();
  auto w = init_mamba_block<double>(cfg, rng);
  std::fill(w.w_out.values_mut().begin(), w.w_out.values_mut().end(), 0.0);
  auto x = Tensor<double>::randn({cfg.d_model, 16}, rng);
  auto y = mamba_block_forward(cfg, w, x);
  CHECK(y.values() == x.values());
}

TEST_CASE("block preserves shape for any length") {
  Rng rng(32);
  auto cfg = tiny_block();
  auto w = init_mamba_block<double>(cfg, rng);
  for (std::int64_t l : {1, 2, 7, 33}) {
    auto x = Tensor<double>::randn({cfg.d_model, l}, rng);
    auto y = mamba_block_forward(cfg, w, x);
    CHECK(y.shape() == Shape{cfg.d_model, l});
  }
}

TEST_CASE("block rejects wrong width") {
  Rng rng(33);
  auto cfg = tiny_block(4);
  auto w = init_mamba_block<double>(cfg, rng);
  auto x = Tensor<double>::randn({5, 8}, rng);
  CHECK_THROWS_AS(mamba_block_forward(cfg, w, x), ConfigError);
}

TEST_CASE("causal block: future perturbation leaves the past untouched") {
  Rng rng(34);
  auto cfg = tiny_block();
  cfg.causal_conv = true;
  auto w = init_mamba_block<double>(cfg, rng);
  const std::int64_t l = 24, cut = 11;
  auto x = Tensor<double>::randn({cfg.d_model, l}, rng);
  auto y0 = mamba_block_forward(cfg, w, x);
  auto xv = x.values();
  for (std::int64_t c = 0; c < cfg.d_model; ++c)
    for (std::int64_t t = cut; t < l; ++t) xv[c * l + t] += 2.5;
  auto y1 = mamba_block_forward(cfg, w, Tensor<double>::from({cfg.d_model, l}, xv));
  for (std::int64_t c = 0; c < cfg.d_model; ++c)
    for (std::int64_t t = 0; t < cut; ++t) CHECK(y0.values()[c * l + t] == y1.values()[c * l + t]);
}

TEST_CASE("bidirectional stack sees both directions") {
  Rng rng(35);
  BambaStackConfig cfg;
  cfg.n_blocks_per_branch = 1;
  cfg.bidirectional = true;
  cfg.block = tiny_block();
  auto w = init_bamba_stack<double>(cfg, rng);
  const std::int64_t l = 20, probe = 10;
  auto x = Tensor<double>::randn({cfg.block.d_model, l}, rng);
  auto y0 = bamba_forward(cfg, w, x);

  auto bump = [&](std::int64_t t) {
    auto xv = x.values();
    xv[0 * l + t] += 1.0;
    return bamba_forward(cfg, w, Tensor<double>::from({cfg.block.d_model, l}, xv));
  };
  // output at `probe` must react to a change in its past and in its future
  auto y_past = bump(2);
  auto y_future = bump(l - 2);
  bool past_felt = false, future_felt = false;
  for (std::int64_t c = 0; c < cfg.block.d_model; ++c) {
    if (y_past.values()[c * l + probe] != y0.values()[c * l + probe]) past_felt = true;
    if (y_future.values()[c * l + probe] != y0.values()[c * l + probe]) future_felt = true;
  }
  CHECK(past_felt);
  CHECK(future_felt);
}

TEST_CASE("causal stack: two un-reversed branches, strictly causal") {
  Rng rng(36);
  BambaStackConfig cfg;
  cfg.n_blocks_per_branch = 2;
  cfg.bidirectional = false;
  cfg.block = tiny_block();
  cfg.block.causal_conv = true;
  auto w = init_bamba_stack<double>(cfg, rng);
  const std::int64_t l = 24, cut = 9;
  auto x = Tensor<double>::randn({cfg.block.d_model, l}, rng);
  auto y0 = bamba_forward(cfg, w, x);
  auto xv = x.values();
  for (std::int64_t c = 0; c < cfg.block.d_model; ++c)
    for (std::int64_t t = cut; t < l; ++t) xv[c * l + t] -= 1.25;
  auto y1 = bamba_forward(cfg, w, Tensor<double>::from({cfg.block.d_model, l}, xv));
  for (std::int64_t c = 0; c < cfg.block.d_model; ++c)
    for (std::int64_t t = 0; t < cut; ++t) CHECK(y0.values()[c * l + t] == y1.values()[c * l + t]);

  // and it equals the manual composition: branch1(x) + branch2(x)
  Tensor<double> a = x, b = x;
  for (auto& blk : w.fwd) a = mamba_block_forward(cfg.block, blk, a);
  for (auto& blk : w.rev) b = mamba_block_forward(cfg.block, blk, b);
  auto manual = add(a, b);
  CHECK(testutil::max_abs_diff(y0.values(), manual.values()) == 0.0);
}

TEST_CASE("bamba equals manual composition with explicit flips") {
  Rng rng(37);
  BambaStackConfig cfg;
  cfg.n_blocks_per_branch = 2;
  cfg.bidirectional = true;
  cfg.block = tiny_block();
  auto w = init_bamba_stack<double>(cfg, rng);
  auto x = Tensor<double>::randn({cfg.block.d_model, 18}, rng);
  auto y = bamba_forward(cfg, w, x);
  Tensor<double> a = x;
  for (auto& blk : w.fwd) a = mamba_block_forward(cfg.block, blk, a);
  Tensor<double> b = flip_time(x);
  for (auto& blk : w.rev) b = mamba_block_forward(cfg.block, blk, b);
  auto manual = add(a, flip_time(b));
  CHECK(testutil::max_abs_diff(y.values(), manual.values()) == 0.0);
}

TEST_CASE("tied branches give time-reversal symmetry") {
  Rng rng(38);
  BambaStackConfig cfg;
  cfg.n_blocks_per_branch = 1;
  cfg.bidirectional = true;
  cfg.block = tiny_block();
  auto w = init_bamba_stack<double>(cfg, rng);
  // tie: copy forward-branch weights into the reverse branch
  auto tie = [](Tensor<double>& dst, const Tensor<double>& src) {
    dst.values_mut() = src.values();
  };
  tie(w.rev[0].w_in_a, w.fwd[0].w_in_a);
  tie(w.rev[0].w_in_b, w.fwd[0].w_in_b);
  tie(w.rev[0].conv_w, w.fwd[0].conv_w);
  tie(w.rev[0].conv_b, w.fwd[0].conv_b);
  tie(w.rev[0].ssm.a_log, w.fwd[0].ssm.a_log);
  tie(w.rev[0].ssm.w_b, w.fwd[0].ssm.w_b);
  tie(w.rev[0].ssm.w_c, w.fwd[0].ssm.w_c);
  tie(w.rev[0].ssm.w_dt_lo, w.fwd[0].ssm.w_dt_lo);
  tie(w.rev[0].ssm.w_dt, w.fwd[0].ssm.w_dt);
  tie(w.rev[0].ssm.dt_bias, w.fwd[0].ssm.dt_bias);
  tie(w.rev[0].ssm.d_skip, w.fwd[0].ssm.d_skip);
  tie(w.rev[0].w_out, w.fwd[0].w_out);

  auto x = Tensor<double>::randn({cfg.block.d_model, 16}, rng);
  auto lhs = bamba_forward(cfg, w, flip_time(x));
  auto rhs = flip_time(bamba_forward(cfg, w, x));
  CHECK(testutil::max_abs_diff(lhs.values(), rhs.values()) == 0.0);
}

TEST_CASE("parameter count matches enumeration") {
  Rng rng(39);
  for (auto cfg : {tiny_block(4), tiny_block(8)}) {
    cfg.rmsnorm = (cfg.d_model == 8);
    auto w = init_mamba_block<double>(cfg, rng);
    NamedParams<double> reg;
    append_mamba_params("blk", w, cfg, reg);
    std::int64_t total = 0;
    for (auto& [name, t] : reg) total += t.numel();
    CHECK(total == mamba_block_param_count(cfg));
  }
  BambaStackConfig scfg;
  scfg.n_blocks_per_branch = 3;
  scfg.block = tiny_block(4);
  auto sw = init_bamba_stack<double>(scfg, rng);
  NamedParams<double> reg;
  append_bamba_params("stage", sw, scfg, reg);
  std::int64_t total = 0;
  for (auto& [name, t] : reg) total += t.numel();
  CHECK(total == bamba_param_count(scfg));
  CHECK(scfg.total_blocks() == 6);
}

TEST_CASE("recombine-per-block ablation differs from default") {
  Rng rng(40);
  BambaStackConfig cfg;
  cfg.n_blocks_per_branch = 2;
  cfg.bidirectional = true;
  cfg.block = tiny_block();
  auto w = init_bamba_stack<double>(cfg, rng);
  auto x = Tensor<double>::randn({cfg.block.d_model, 12}, rng);
  auto y_default = bamba_forward(cfg, w, x);
  cfg.recombine_per_block = true;
  auto y_recombine = bamba_forward(cfg, w, x);
  CHECK(testutil::max_abs_diff(y_default.values(), y_recombine.values()) > 1e-9);
}

TEST_CASE("block gradients match finite differences") {
  Rng rng(41);
  auto cfg = tiny_block(3);
  cfg.n_state = 2;
  cfg.rmsnorm = true;
  auto w = init_mamba_block<double>(cfg, rng);
  auto x = Tensor<double>::randn({cfg.d_model, 6}, rng, 1.0, true);
  auto res = testutil::gradcheck(
      [&] {
        auto y = mamba_block_forward(cfg, w, x);
        return sum(mul(y, y));
      },
      {{"in_a", w.w_in_a},
       {"in_b", w.w_in_b},
       {"conv_w", w.conv_w},
       {"conv_b", w.conv_b},
       {"a_log", w.ssm.a_log},
       {"w_b", w.ssm.w_b},
       {"w_c", w.ssm.w_c},
       {"w_dt_lo", w.ssm.w_dt_lo},
       {"w_dt", w.ssm.w_dt},
       {"dt_bias", w.ssm.dt_bias},
       {"d", w.ssm.d_skip},
       {"out", w.w_out},
       {"gain", w.norm_gain},
       {"x", x}});
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("stack gradients match finite differences") {
  Rng rng(42);
  BambaStackConfig cfg;
  cfg.n_blocks_per_branch = 1;
  cfg.bidirectional = true;
  cfg.block = tiny_block(3);
  cfg.block.n_state = 2;
  auto w = init_bamba_stack<double>(cfg, rng);
  auto x = Tensor<double>::randn({cfg.block.d_model, 5}, rng, 1.0, true);
  NamedParams<double> reg;
  append_bamba_params("st", w, cfg, reg);
  std::vector<std::pair<std::string, Tensor<double>>> leaves(reg.begin(), reg.end());
  leaves.emplace_back("x", x);
  auto res = testutil::gradcheck(
      [&] {
        auto y = bamba_forward(cfg, w, x);
        return sum(mul(y, y));
      },
      leaves);
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-5);
}
