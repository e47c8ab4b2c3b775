#include <gtest/gtest.h>

#include <cmath>

#include "emcad/ops.hpp"
#include "oracles.hpp"

using namespace emcad;

using test_oracles::brute_conv;

TEST(Conv2d, MatchesBruteForceOnRandomGroupedCases) {
    Prng p(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t groups = 1 + p.below(3);
        const std::size_t cin = groups * (1 + p.below(3)), cout = groups * (1 + p.below(3));
        const std::size_t k = 1 + 2 * p.below(3), stride = 1 + p.below(2), pad = p.below(k);
        std::size_t h = k + p.below(5), w = k + p.below(5);
        // keep the output extent integral
        while ((h + 2 * pad - k) % stride) ++h;
        while ((w + 2 * pad - k) % stride) ++w;
        const auto x = Tensor4<double>::randn({1 + p.below(2), cin, h, w}, p, 1.0);
        const auto wt = Tensor4<double>::randn({cout, cin / groups, k, k}, p, 1.0);
        const auto b = Tensor4<double>::randn({1, cout, 1, 1}, p, 1.0);
        const ConvGeometry g{stride, pad, groups, false};
        const auto y = conv2d_forward(x, wt, &b, g);
        const auto ref = brute_conv(x, wt, &b, stride, pad, groups);
        ASSERT_EQ(y.shape(), ref.shape()) << "trial " << trial;
        for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-12) << "trial " << trial;
    }
}

TEST(Conv2d, DepthwiseIsPerChannelCorrelation) {
    Prng p(5);
    const auto x = Tensor4<double>::randn({2, 4, 6, 6}, p, 1.0);
    const auto w = Tensor4<double>::randn({4, 1, 3, 3}, p, 1.0);
    const auto y = conv2d_forward<double>(x, w, nullptr, {1, 1, 4, false});
    const auto ref = brute_conv(x, w, nullptr, 1, 1, 4);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Conv2d, HandComputedValue) {
    // 1x1x3x3 ramp, 2x2 ones kernel, no padding: sums of 2x2 windows.
    Tensor4<double> x({1, 1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});
    Tensor4<double> w({1, 1, 2, 2}, 1.0);
    const auto y = conv2d_forward<double>(x, w, nullptr, {});
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    EXPECT_DOUBLE_EQ(y[0], 8);
    EXPECT_DOUBLE_EQ(y[1], 12);
    EXPECT_DOUBLE_EQ(y[2], 20);
    EXPECT_DOUBLE_EQ(y[3], 24);
}

TEST(Conv2d, ShapeErrors) {
    Tensor4<double> x({1, 3, 5, 5});
    EXPECT_THROW(conv2d_forward<double>(x, Tensor4<double>({4, 3, 3, 3}), nullptr, {1, 0, 2, false}), ShapeError);
    EXPECT_THROW(conv2d_forward<double>(x, Tensor4<double>({4, 2, 3, 3}), nullptr, {}), ShapeError);
    EXPECT_THROW(conv2d_forward<double>(x, Tensor4<double>({4, 3, 2, 2}), nullptr, {2, 0, 1, false}), ShapeError);
    // floor_output drops the incomplete stride instead of failing
    const auto y = conv2d_forward<double>(x, Tensor4<double>({4, 3, 2, 2}), nullptr, {2, 0, 1, true});
    EXPECT_EQ(y.shape(), (Shape{1, 4, 2, 2}));
}

TEST(Conv2d, ThreadCountDoesNotChangeResults) {
    Prng p(8);
    const auto x = Tensor4<float>::randn({4, 6, 9, 9}, p, 1.0);
    const auto w = Tensor4<float>::randn({6, 3, 3, 3}, p, 1.0);
    const auto gy = Tensor4<float>::randn({4, 6, 9, 9}, p, 1.0);
    const ConvGeometry g{1, 1, 2, false};
    set_num_threads(1);
    const auto y1 = conv2d_forward<float>(x, w, nullptr, g);
    Tensor4<float> gw1(w.shape());
    const auto gx1 = conv2d_backward<float>(x, w, g, gy, gw1, nullptr);
    set_num_threads(3);
    const auto y3 = conv2d_forward<float>(x, w, nullptr, g);
    Tensor4<float> gw3(w.shape());
    const auto gx3 = conv2d_backward<float>(x, w, g, gy, gw3, nullptr);
    set_num_threads(1);
    EXPECT_EQ(y1.storage(), y3.storage());
    EXPECT_EQ(gx1.storage(), gx3.storage());
    EXPECT_EQ(gw1.storage(), gw3.storage());
}

TEST(BatchNorm, TrainModeNormalizesAndTracksRunningStats) {
    Tensor4<double> x({2, 1, 1, 2}, {1, 2, 3, 6});
    BatchNormState<double> s(1);
    const auto y = batchnorm_forward(x, s);
    // mean 3, biased var (4 + 1 + 0 + 9) / 4 = 3.5
    const double istd = 1 / std::sqrt(3.5 + 1e-5);
    EXPECT_NEAR(y[0], -2 * istd, 1e-12);
    EXPECT_NEAR(y[3], 3 * istd, 1e-12);
    EXPECT_NEAR(s.running_mean[0], 0.1 * 3, 1e-12);
    // unbiased variance 14 / 3 enters the running estimate
    EXPECT_NEAR(s.running_var[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
    BatchNormState<double> s(2);
    s.mode = Mode::eval;
    s.running_mean[0] = 1;
    s.running_var[0] = 4;
    s.gamma[0] = 2;
    s.beta[0] = 0.5;
    Tensor4<double> x({1, 2, 1, 1}, {5, 3});
    const auto y = batchnorm_forward(x, s);
    EXPECT_NEAR(y[0], 2 * (5 - 1) / std::sqrt(4 + 1e-5) + 0.5, 1e-12);
    EXPECT_NEAR(y[1], 3 / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(BatchNorm, SingleValuePerChannelRejectedInTraining) {
    BatchNormState<double> s(1);
    EXPECT_THROW(batchnorm_forward(Tensor4<double>({1, 1, 1, 1}), s), ShapeError);
}

TEST(Activation, Values) {
    Tensor4<double> x({1, 1, 1, 4}, {-1, 0.5, 3, 7});
    const auto r = activation_forward(x, Activation::relu);
    const auto r6 = activation_forward(x, Activation::relu6);
    const auto s = activation_forward(x, Activation::sigmoid);
    EXPECT_EQ(r.storage(), (std::vector<double>{0, 0.5, 3, 7}));
    EXPECT_EQ(r6.storage(), (std::vector<double>{0, 0.5, 3, 6}));
    EXPECT_NEAR(s[0], 1 / (1 + std::exp(1.0)), 1e-15);
}

TEST(Activation, SoftmaxSumsToOneOverChannels) {
    Prng p(4);
    const auto x = Tensor4<double>::randn({2, 3, 2, 2}, p, 3.0);
    const auto y = activation_forward(x, Activation::softmax_channel);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0;
            for (std::size_t c = 0; c < 3; ++c) s += y.plane(n, c)[i];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
}

TEST(Pooling, GlobalAndChannel) {
    Tensor4<double> x({1, 2, 1, 2}, {1, 5, -2, 4});
    const auto ga = pool_global_forward(x, PoolKind::avg), gm = pool_global_forward(x, PoolKind::max);
    EXPECT_EQ(ga.storage(), (std::vector<double>{3, 1}));
    EXPECT_EQ(gm.storage(), (std::vector<double>{5, 4}));
    const auto ca = channel_pool_forward(x, PoolKind::avg), cm = channel_pool_forward(x, PoolKind::max);
    EXPECT_EQ(ca.storage(), (std::vector<double>{-0.5, 4.5}));
    EXPECT_EQ(cm.storage(), (std::vector<double>{1, 5}));
}

TEST(Upsample, BilinearMatchesAlignCornersFalseReference) {
    // Reference produced with an independent align_corners=false implementation.
    Tensor4<double> x({1, 1, 2, 3}, {0, 1, 2, 3, 4, 5});
    const auto y = upsample_bilinear_forward(x, 4, 5);
    const std::vector<double> ref{0.0,  0.4,  1.0,  1.6,  2.0,  0.75, 1.15, 1.75, 2.35, 2.75,
                                  2.25, 2.65, 3.25, 3.85, 4.25, 3.0,  3.4,  4.0,  4.6,  5.0};
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12) << i;
}

TEST(Upsample, BilinearSameSizeIsIdentityAndShrinkRejected) {
    Prng p(1);
    const auto x = Tensor4<double>::randn({1, 2, 3, 3}, p, 1.0);
    EXPECT_EQ(upsample_bilinear_forward(x, 3, 3).storage(), x.storage());
    EXPECT_THROW(upsample_bilinear_forward(x, 2, 3), ShapeError);
}

TEST(Upsample, Nearest2x) {
    Tensor4<double> x({1, 1, 1, 2}, {1, 2});
    const auto y = upsample_nearest2x_forward(x);
    EXPECT_EQ(y.storage(), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(ChannelShuffle, PermutationAndInverse) {
    // 6 channels, 2 groups: [0 1 2 | 3 4 5] -> 0 3 1 4 2 5
    const auto src = shuffle_permutation(6, 2);
    EXPECT_EQ(src, (std::vector<std::size_t>{0, 3, 1, 4, 2, 5}));
    Prng p(3);
    const auto x = Tensor4<double>::randn({1, 6, 2, 2}, p, 1.0);
    const auto y = permute_channels(x, src);
    EXPECT_EQ(permute_channels_backward(y, src).storage(), x.storage());
}

TEST(Concat, ChannelsAppend) {
    Tensor4<double> a({1, 1, 1, 2}, {1, 2}), b({1, 2, 1, 2}, {3, 4, 5, 6});
    EXPECT_EQ(concat_channels(a, b).storage(), (std::vector<double>{1, 2, 3, 4, 5, 6}));
    EXPECT_THROW(concat_channels(a, Tensor4<double>({1, 1, 2, 2})), ShapeError);
}
