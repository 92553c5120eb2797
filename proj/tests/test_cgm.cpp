#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "vmx/cgm.hpp"

#include "oracles.hpp"

using namespace vmx;
using namespace vmx::oracles;
using vmx::testing::fd_check;
using vmx::testing::random_tensor;
using vmx::testing::weighted_sum;

namespace {

double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Cgm, MatchesStraightLineOracleOnFiftyDraws) {
  Rng rng(21);
  double worst = 0.0;
  for (int draw = 0; draw < 50; ++draw) {
    const std::size_t n = 1 + draw % 3, c = 2 + draw % 5, h = 2 + draw % 4, w = 3 + draw % 3;
    // N = 1 in training mode collapses BN to beta; use running stats instead.
    const bool training = n > 1 && draw % 2 == 0;
    CgmParams p = CgmParams::make(c, 4, rng);
    randomize_biases_and_norms(p, rng);
    Tensor x_ct = random_tensor({n, c, h, w}, rng, -2, 2), x_pet = random_tensor({n, c, h, w}, rng, -2, 2);
    const OracleOut want = oracle(x_ct, x_pet, p, training);
    const CgmOutput got = cgm_forward(x_ct, x_pet, p, training);
    worst = std::max({worst, max_abs_diff(got.y_ct, want.y_ct), max_abs_diff(got.y_pet, want.y_pet),
                      max_abs_diff(got.gates.g_ct, want.g_ct), max_abs_diff(got.gates.g_pet, want.g_pet)});
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Cgm, GatesStrictlyInsideUnitIntervalAndOutputsBounded) {
  Rng rng(22);
  for (int draw = 0; draw < 50; ++draw) {
    CgmParams p = CgmParams::make(4, 4, rng);
    randomize_biases_and_norms(p, rng);
    Tensor x_ct = random_tensor({2, 4, 5, 5}, rng, -3, 3), x_pet = random_tensor({2, 4, 5, 5}, rng, -3, 3);
    const CgmOutput o = cgm_forward(x_ct, x_pet, p, true);
    for (const Tensor* g : {&o.gates.c_ct, &o.gates.c_pet, &o.gates.s_ct, &o.gates.s_pet, &o.gates.g_ct, &o.gates.g_pet})
      for (double v : g->data()) {
        ASSERT_GT(v, 0.0);
        ASSERT_LT(v, 1.0);
      }
    for (auto [x, y] : {std::pair{&x_ct, &o.y_ct}, std::pair{&x_pet, &o.y_pet}})
      for (std::size_t i = 0; i < x->numel(); ++i) {
        const double xv = (*x)[i], yv = (*y)[i];
        ASSERT_LE(std::abs(xv), std::abs(yv));
        ASSERT_LE(std::abs(yv), 2.0 * std::abs(xv));
        ASSERT_EQ(std::signbit(xv), std::signbit(yv));
      }
  }
}

TEST(Cgm, SaturatedChannelGateIsNearIdentity) {
  Rng rng(23);
  CgmParams p = CgmParams::make(6, 4, rng);
  for (CgmBranch* b : {&p.ct, &p.pet}) {
    for (double& v : b->expand.weight.data_mut()) v = 0.0;
    for (double& v : b->expand.bias.data_mut()) v = -30.0;
  }
  Tensor x_ct = random_tensor({2, 6, 4, 4}, rng, -5, 5), x_pet = random_tensor({2, 6, 4, 4}, rng, -5, 5);
  const CgmOutput o = cgm_forward(x_ct, x_pet, p, true);
  EXPECT_LT(max_abs_diff(o.y_ct, x_ct.values()), 1e-3);
  EXPECT_LT(max_abs_diff(o.y_pet, x_pet.values()), 1e-3);
}

TEST(Cgm, ZeroInputGivesZeroOutput) {
  Rng rng(24);
  CgmParams p = CgmParams::make(3, 4, rng);
  randomize_biases_and_norms(p, rng);
  const Tensor z(Shape{2, 3, 4, 4}, 0.0);
  const CgmOutput o = cgm_forward(z, z, p, false);
  for (double v : o.y_ct.data()) EXPECT_EQ(v, 0.0);
  for (double v : o.y_pet.data()) EXPECT_EQ(v, 0.0);
}

TEST(Cgm, ShapeMismatchRejected) {
  Rng rng(25);
  CgmParams p = CgmParams::make(3, 4, rng);
  EXPECT_THROW(cgm_forward(Tensor(Shape{1, 3, 4, 4}, 0.0), Tensor(Shape{1, 3, 4, 5}, 0.0), p, false), DimensionError);
  EXPECT_THROW(cgm_forward(Tensor(Shape{1, 2, 4, 4}, 0.0), Tensor(Shape{1, 2, 4, 4}, 0.0), p, false), DimensionError);
}

TEST(Cgm, ModalitiesAreNotSwapEquivariant) {
  Rng rng(26);
  CgmParams p = CgmParams::make(4, 4, rng);
  randomize_biases_and_norms(p, rng);
  Tensor a = random_tensor({2, 4, 4, 4}, rng), b = random_tensor({2, 4, 4, 4}, rng);
  const CgmOutput o = cgm_forward(a, b, p, false);
  const CgmOutput s = cgm_forward(b, a, p, false);
  EXPECT_GT(max_abs_diff(s.y_ct, o.y_pet.values()), 1e-3);
}

TEST(Cgm, CtOutputDependsOnPetInput) {
  Rng rng(27);
  CgmParams p = CgmParams::make(3, 4, rng);
  Tensor x_ct = random_tensor({2, 3, 4, 4}, rng), x_pet = random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
  backward(weighted_sum(cgm_forward(x_ct, x_pet, p, true).y_ct));
  double norm = 0.0;
  for (double g : x_pet.grad()) norm += g * g;
  EXPECT_GT(std::sqrt(norm), 1e-6);

  Tensor bumped = x_pet.clone();
  bumped.data_mut()[5] += 0.5;
  NoGradGuard guard;
  const Tensor y0 = cgm_forward(x_ct, x_pet, p, false).y_ct, y1 = cgm_forward(x_ct, bumped, p, false).y_ct;
  EXPECT_GT(max_abs_diff(y1, y0.values()), 1e-6);
}

TEST(Cgm, GradientMatchesFiniteDifferences) {
  Rng rng(28);
  CgmParams p = CgmParams::make(3, 4, rng);
  randomize_biases_and_norms(p, rng);
  std::vector<Tensor> inputs{random_tensor({3, 3, 3, 4}, rng), random_tensor({3, 3, 3, 4}, rng)};
  p.visit("", [&](const std::string&, Tensor& t, bool) { inputs.push_back(t); });
  auto r = fd_check(
      [&](const std::vector<Tensor>& in) {
        const CgmOutput o = cgm_forward(in[0], in[1], p, true);
        return add(weighted_sum(o.y_ct, 1), weighted_sum(o.y_pet, 2));
      },
      inputs, 20, 1e-5);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(CgmGateStats, ZeroInitialisedConvsGiveQuarterGates) {
  Rng rng(29);
  CgmParams p = CgmParams::make(4, 4, rng);
  p.visit("", [](const std::string& name, Tensor& t, bool) {
    if (name.find("bn.") == std::string::npos)
      for (double& v : t.data_mut()) v = 0.0;
  });
  const CgmOutput o = cgm_forward(random_tensor({2, 4, 3, 3}, rng), random_tensor({2, 4, 3, 3}, rng), p, true);
  const GateStats s = cgm_gate_stats(o.gates);
  EXPECT_NEAR(s.g_ct.mean, 0.25, 1e-12);
  EXPECT_NEAR(s.g_pet.mean, 0.25, 1e-12);
  EXPECT_NEAR(s.c_ct.mean, 0.5, 1e-12);
  EXPECT_NEAR(s.s_pet.max, 0.5, 1e-12);
}

TEST(CgmGateStats, MatchesDirectReduction) {
  Rng rng(30);
  CgmParams p = CgmParams::make(3, 4, rng);
  randomize_biases_and_norms(p, rng);
  const CgmOutput o = cgm_forward(random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng), p, true);
  const GateStats s = cgm_gate_stats(o.gates);
  for (auto [sum, t] : {std::pair{s.g_ct, &o.gates.g_ct}, std::pair{s.s_pet, &o.gates.s_pet}, std::pair{s.c_ct, &o.gates.c_ct}}) {
    double lo = 1e300, hi = -1e300, acc = 0.0;
    for (double v : t->values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      acc += v;
    }
    EXPECT_EQ(sum.min, lo);
    EXPECT_EQ(sum.max, hi);
    EXPECT_DOUBLE_EQ(sum.mean, acc / static_cast<double>(t->numel()));
    EXPECT_EQ(sum.count, t->numel());
    EXPECT_LE(sum.min, sum.mean);
    EXPECT_LE(sum.mean, sum.max);
  }
}
