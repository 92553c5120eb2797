#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "vmx/sscan.hpp"

#include "oracles.hpp"

using namespace vmx;
using namespace vmx::oracles;
using vmx::testing::fd_check;
using vmx::testing::random_tensor;
using vmx::testing::weighted_sum;

namespace {

Tensor run(const ScanInputs& in, ScanMode mode, std::vector<std::size_t> order = {}) {
  return selective_scan(in.u, in.delta, in.b, in.c, in.a_log, in.d, mode, std::move(order));
}

}  // namespace

TEST(ScanElement, CompositionIsAssociative) {
  // Dyadic values keep every product and sum exact, so equality is exact.
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    ScanElement e[3];
    for (auto& x : e) x = {static_cast<double>(rng.uniform_int(0, 16)) / 16.0, static_cast<double>(rng.uniform_int(-64, 64)) / 8.0};
    EXPECT_EQ(compose(compose(e[0], e[1]), e[2]), compose(e[0], compose(e[1], e[2])));
  }
  for (int trial = 0; trial < 200; ++trial) {
    ScanElement e[3];
    for (auto& x : e) x = {rng.uniform(), rng.uniform(-1, 1)};
    const auto l = compose(compose(e[0], e[1]), e[2]), r = compose(e[0], compose(e[1], e[2]));
    EXPECT_NEAR(l.decay, r.decay, 1e-15);
    EXPECT_NEAR(l.increment, r.increment, 1e-15);
  }
}

TEST(ScanElement, ParallelPrefixMatchesSequentialForAllLengths) {
  Rng rng(2);
  for (std::size_t n = 0; n <= 300; ++n) {
    std::vector<ScanElement> a(n);
    for (auto& x : a) x = {rng.uniform(), rng.uniform(-1, 1)};
    auto b = a;
    scan_sequential(a);
    scan_parallel(b);
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_NEAR(a[i].decay, b[i].decay, 1e-12) << n;
      ASSERT_NEAR(a[i].increment, b[i].increment, 1e-12) << n;
    }
  }
}

TEST(SelectiveScan, SequentialMatchesRecurrenceOracleExactly) {
  Rng rng(3);
  const auto in = random_scan_inputs(2, 5, 3, 4, rng);
  EXPECT_EQ(run(in, ScanMode::sequential).values(), recurrence_oracle(in));
}

TEST(SelectiveScan, ZeroDecayIsMemoryless) {
  Rng rng(4);
  auto in = random_scan_inputs(1, 6, 2, 3, rng);
  // Huge A makes abar underflow to exactly 0.
  for (double& v : in.a_log.data_mut()) v = 50.0;
  const Tensor y = run(in, ScanMode::parallel);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 2; ++c) {
      double want = 0.0;
      for (std::size_t s = 0; s < 3; ++s) want += in.c[t * 3 + s] * (in.delta[t * 2 + c] * in.b[t * 3 + s] * in.u[t * 2 + c]);
      want += in.d[c] * in.u[t * 2 + c];
      EXPECT_NEAR(y[t * 2 + c], want, 1e-14);
    }
}

TEST(SelectiveScan, ZeroInputGivesZeroOutput) {
  Rng rng(5);
  auto in = random_scan_inputs(1, 7, 3, 2, rng);
  in.u = Tensor(Shape{1, 7, 3}, 0.0);
  const Tensor y = run(in, ScanMode::parallel);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(SelectiveScan, EmptySequenceRejected) {
  Rng rng(6);
  auto in = random_scan_inputs(1, 1, 2, 2, rng);
  in.u = Tensor(Shape{1, 0, 2}, 0.0);
  in.delta = Tensor(Shape{1, 0, 2}, 0.0);
  in.b = in.c = Tensor(Shape{1, 0, 2}, 0.0);
  EXPECT_THROW(run(in, ScanMode::parallel), DimensionError);
  Rng r2(7);
  SsmParams p = SsmParams::make(2, 2, r2);
  EXPECT_THROW(selective_scan_seq(Tensor(Shape{0, 2}, 0.0), p), DimensionError);
}

TEST(SelectiveScan, ParallelMatchesSequentialAcrossLengths) {
  Rng rng(8);
  for (std::size_t len : {1, 2, 3, 5, 8, 64, 256}) {
    double worst = 0.0;
    for (int draw = 0; draw < 20; ++draw) {
      const auto in = random_scan_inputs(1, len, 3, 4, rng);
      const Tensor s = run(in, ScanMode::sequential), p = run(in, ScanMode::parallel);
      for (std::size_t i = 0; i < s.numel(); ++i) worst = std::max(worst, std::abs(s[i] - p[i]));
    }
    EXPECT_LT(worst, 1e-10) << "L=" << len;
  }
}

TEST(SelectiveScan, HighLevelSeqAndParAgree) {
  Rng rng(9);
  SsmParams p = SsmParams::make(4, 3, rng);
  Tensor u = random_tensor({40, 4}, rng);
  const Tensor a = selective_scan_seq(u, p), b = selective_scan_par(u, p);
  ASSERT_EQ(a.shape(), (Shape{40, 4}));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(SelectiveScan, DecaysInUnitIntervalAndStatesBounded) {
  Rng rng(10);
  SsmParams p = SsmParams::make(3, 4, rng);
  for (double v : p.a_log.data()) EXPECT_GT(std::exp(v), 0.0);
  // Constant decay a and increment b: |h| <= |u| * b / (1 - a).
  auto in = random_scan_inputs(1, 200, 1, 1, rng);
  for (double& v : in.delta.data_mut()) v = 0.5;
  for (double& v : in.b.data_mut()) v = 1.0;
  for (double& v : in.c.data_mut()) v = 1.0;
  in.a_log.data_mut()[0] = 0.0;
  in.d.data_mut()[0] = 0.0;
  const double abar = std::exp(-0.5), bbar = 0.5;
  double umax = 0.0;
  for (double v : in.u.data()) umax = std::max(umax, std::abs(v));
  const Tensor y = run(in, ScanMode::parallel);
  for (double v : y.data()) EXPECT_LE(std::abs(v), umax * bbar / (1 - abar) + 1e-12);
}

TEST(SelectiveScan, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    const auto in = random_scan_inputs(2, 7, 2, 3, rng);
    const auto order = scan_path_order(7, 1, ScanPath::row_major_reversed);
    auto r = fd_check(
        [&](const std::vector<Tensor>& p) {
          return weighted_sum(selective_scan(p[0], p[1], p[2], p[3], p[4], p[5], mode, order));
        },
        {in.u, in.delta, in.b, in.c, in.a_log, in.d}, 40, 1e-6);
    EXPECT_LT(r.max_rel, 1e-4);
  }
}

TEST(ScanPaths, OrdersArePermutations) {
  const auto rm = scan_path_order(2, 3, ScanPath::row_major);
  const auto rr = scan_path_order(2, 3, ScanPath::row_major_reversed);
  const auto cm = scan_path_order(2, 3, ScanPath::column_major);
  const auto cr = scan_path_order(2, 3, ScanPath::column_major_reversed);
  EXPECT_EQ(rm, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(rr, (std::vector<std::size_t>{5, 4, 3, 2, 1, 0}));
  EXPECT_EQ(cm, (std::vector<std::size_t>{0, 3, 1, 4, 2, 5}));
  EXPECT_EQ(cr, (std::vector<std::size_t>{5, 2, 4, 1, 3, 0}));
}

namespace {

// Zero every bias and bring the SSM to a state where zero in means zero out.
void zero_biases(VssBlock& b) {
  for (Tensor* t : {&b.in_proj.bias, &b.gate_proj.bias, &b.out_proj.bias, &b.norm.beta})
    for (double& v : t->data_mut()) v = 0.0;
}

Tensor rotate180(const Tensor& x) {
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = x[p * hw + hw - 1 - i];
  return Tensor(x.shape(), std::move(out));
}

}  // namespace

TEST(VssBlock, ZeroInputWithZeroBiasesGivesZero) {
  Rng rng(12);
  VssBlock b = VssBlock::make(4, 3, rng);
  zero_biases(b);
  const Tensor y = vss_block(Tensor(Shape{2, 4, 3, 3}, 0.0), b);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(VssBlock, PreservesShapeAtEveryStageSize) {
  Rng rng(13);
  const std::size_t channels[4] = {16, 32, 64, 128};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t side = 64 >> (i + 1);
    VssBlock b = VssBlock::make(channels[i], 8, rng);
    Tensor x = random_tensor({1, channels[i], side, side}, rng);
    EXPECT_EQ(vss_block(x, b).shape(), x.shape());
  }
}

TEST(VssBlock, RotationPermutesScanPaths) {
  Rng rng(14);
  VssBlock b = VssBlock::make(2, 3, rng);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  const auto a = vss_scan_paths(x, b);
  const auto r = vss_scan_paths(rotate180(x), b);
  // Row-major and its reverse swap under a half turn; so do the two column-major paths.
  const std::size_t partner[4] = {1, 0, 3, 2};
  for (std::size_t k = 0; k < 4; ++k) {
    const Tensor& want = a.paths[partner[k]];
    const Tensor& got = r.paths[k];
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(got[(15 - t) * 2 + c], want[t * 2 + c], 1e-13) << k;
  }
  const Tensor y = vss_block(x, b), yr = vss_block(rotate180(x), b);
  const Tensor back = rotate180(yr);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(back[i], y[i], 1e-12);
}

TEST(VssBlock, GradientMatchesFiniteDifferences) {
  Rng rng(15);
  VssBlock b = VssBlock::make(3, 2, rng);
  // Default steps are ~1e-3, which leaves A_log gradients below FD noise.
  for (double& v : b.ssm.delta_proj.bias.data_mut()) v = 0.5;
  std::vector<Tensor> params;
  b.visit("", [&](const std::string&, Tensor& t, bool) { params.push_back(t); });
  Tensor x = random_tensor({2, 3, 3, 2}, rng);
  params.push_back(x);
  auto r = fd_check([&](const std::vector<Tensor>&) { return weighted_sum(vss_block(x, b)); }, params, 10, 1e-6);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(Downsample, ShapesConstantsAndLayout) {
  Rng rng(16);
  Downsample d = Downsample::make(3, 6, rng);
  Tensor x(Shape{1, 3, 4, 4}, 0.75);
  Tensor y = downsample(x, d);
  ASSERT_EQ(y.shape(), (Shape{1, 6, 2, 2}));
  for (std::size_t o = 0; o < 6; ++o) {
    double want = d.proj.bias[o];
    for (std::size_t i = 0; i < 12; ++i) want += d.proj.weight[o * 12 + i] * 0.75;
    for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(y[o * 4 + p], want, 1e-14);
  }
  EXPECT_THROW(downsample(Tensor(Shape{1, 3, 5, 4}, 0.0), d), DimensionError);
}
