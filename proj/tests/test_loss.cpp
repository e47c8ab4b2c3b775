#include <gtest/gtest.h>

#include <cmath>

#include "emcad/loss.hpp"

using namespace emcad;

namespace {

Var<double> logits(std::vector<double> v, bool grad = true) {
    const std::size_t n = v.size();
    return Var<double>(Tensor4<double>({1, 1, 1, n}, std::move(v)), grad);
}

Tensor4<double> target(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor4<double>({1, 1, 1, n}, std::move(v));
}

} // namespace

TEST(Loss, BceMatchesTorchReference) {
    // torch.nn.functional.binary_cross_entropy_with_logits, reduction mean
    auto l = ce_loss(logits({-1, .5, 2, -.3}), target({0, 1, 1, 0}));
    EXPECT_NEAR(l.item(), 0.3671554818024573, 1e-12);
}

TEST(Loss, SoftDiceMatchesReference) {
    auto l = dice_loss(logits({-1, .5, 2, -.3}), target({0, 1, 1, 0}), 1.0);
    EXPECT_NEAR(l.item(), 0.22918402723384312, 1e-12);
}

TEST(Loss, BceStableForLargeLogits) {
    auto l = ce_loss(logits({800, -800}), target({1, 0}));
    EXPECT_NEAR(l.item(), 0.0, 1e-12);
    auto bad = ce_loss(logits({800, -800}), target({0, 1}));
    EXPECT_NEAR(bad.item(), 800.0, 1e-9);
}

TEST(Loss, SoftmaxCrossEntropyAgainstHandComputation) {
    // two pixels, three classes
    Var<double> z(Tensor4<double>({1, 3, 1, 2}, {1, 0, 2, 0, 3, 0}), true);
    auto l = ce_loss(z, target({2, 0}));
    const double p0 = std::log(std::exp(1) + std::exp(2) + std::exp(3)) - 3;
    const double p1 = std::log(std::exp(0) + std::exp(0) + std::exp(0)) - 0;
    EXPECT_NEAR(l.item(), (p0 + p1) / 2, 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    LossConfig cfg;
    const std::vector<double> base = {-1, .5, 2, -.3, .1, 1.2};
    const auto t = target({0, 1, 1, 0, 1, 0});
    auto z = logits(base);
    auto l = segmentation_loss(z, t, cfg);
    backward(l);
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto up = base, dn = base;
        up[i] += 1e-6;
        dn[i] -= 1e-6;
        const double fd = (segmentation_loss(logits(up, false), t, cfg).item() -
                           segmentation_loss(logits(dn, false), t, cfg).item()) / 2e-6;
        EXPECT_NEAR(z.grad()[i], fd, 1e-7) << i;
    }
}

TEST(Loss, DiceIsPooledOverTheBatch) {
    // Batch-level Dice differs from the mean of per-sample Dice.
    Var<double> z(Tensor4<double>({2, 1, 1, 2}, {3, -3, -3, -3}), true);
    Tensor4<double> t({2, 1, 1, 2}, {1, 0, 0, 0});
    const double s = 1 / (1 + std::exp(-3.0)), q = 1 - s;
    const double inter = s, psum = s + 3 * q, tsum = 1;
    EXPECT_NEAR(dice_loss(z, t, 1.0).item(), 1 - (2 * inter + 1) / (psum + tsum + 1), 1e-12);
}

TEST(MutationLoss, FourHeadsGiveFifteenSubsets) {
    Prng p(1);
    std::vector<Var<double>> heads;
    for (std::size_t s : {2, 4, 8, 8}) heads.emplace_back(Tensor4<double>::randn({2, 1, s, s}, p, 1.0), true);
    Tensor4<double> t({2, 1, 8, 8});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = p.uniform() < 0.3;
    auto ml = mutation_loss(heads, t, LossConfig{});
    ASSERT_EQ(ml.report.per_subset.size(), 15u);
    double sum = 0;
    for (std::size_t i = 0; i < 15; ++i) {
        EXPECT_EQ(ml.report.per_subset[i].mask, i + 1);
        sum += ml.report.per_subset[i].value;
    }
    EXPECT_NEAR(ml.report.total, sum, 1e-9);
    EXPECT_EQ(ml.report.per_subset[14].label(), "p1+p2+p3+p4");
    EXPECT_EQ(ml.report.per_subset[4].label(), "p1+p3");

    // Spot-check one subset against a direct evaluation of the averaged logits.
    std::vector<Var<double>> up;
    for (auto& h : heads) up.push_back(ag::upsample_bilinear(h, 8, 8));
    const double direct = segmentation_loss(ag::mean_of<double>({up[1], up[3]}), t, LossConfig{}).item();
    EXPECT_NEAR(ml.report.per_subset[9].value, direct, 1e-12); // mask 0b1010
}

TEST(MutationLoss, SingleHeadIsPlainLoss) {
    auto z = logits({-1, .5, 2, -.3});
    const auto t = target({0, 1, 1, 0});
    auto ml = mutation_loss<double>({z}, t, LossConfig{});
    ASSERT_EQ(ml.report.per_subset.size(), 1u);
    EXPECT_NEAR(ml.report.total, 0.3671554818024573 + 0.22918402723384312, 1e-12);
}

TEST(MutationLoss, IdenticalHeadsScaleByFifteen) {
    const std::vector<double> v = {-1, .5, 2, -.3};
    const auto t = target({0, 1, 1, 0});
    auto ml = mutation_loss<double>({logits(v), logits(v), logits(v), logits(v)}, t, LossConfig{});
    EXPECT_NEAR(ml.report.total, 15 * (0.3671554818024573 + 0.22918402723384312), 1e-10);
}

TEST(MutationLoss, Validation) {
    const auto t = target({0, 1, 1, 0});
    EXPECT_THROW(mutation_loss<double>({}, t, LossConfig{}), ValidationError);
    EXPECT_THROW(mutation_loss<double>({logits({0, 0, 0, 0})}, target({0, 2, 1, 0}), LossConfig{}), ValidationError);
    LossConfig zero;
    zero.w_ce = zero.w_dice = 0;
    EXPECT_THROW(mutation_loss<double>({logits({0, 0, 0, 0})}, t, zero), ValidationError);
    Var<double> two(Tensor4<double>({1, 2, 1, 4}), true);
    EXPECT_THROW(mutation_loss<double>({logits({0, 0, 0, 0}), two}, t, LossConfig{}), ShapeError);
}
