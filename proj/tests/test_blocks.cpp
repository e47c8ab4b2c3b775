#include <gtest/gtest.h>

#include <cmath>

#include "emcad/blocks.hpp"

using namespace emcad;

namespace {

// Closed-form parameter counts for the default block wiring.
std::size_t mscam_params(std::size_t c, const DecoderConfig& cfg) {
    const std::size_t hc = std::max<std::size_t>(c / cfg.cab_reduction, 4);
    const std::size_t cab = 2 * c * hc;
    const std::size_t sab = 2 * cfg.sab_kernel * cfg.sab_kernel + 1;
    const std::size_t h = static_cast<std::size_t>(std::ceil(cfg.mscb_expansion * static_cast<double>(c)));
    std::size_t dw = 0;
    for (std::size_t k : cfg.kernel_scales) dw += h * k * k;
    const std::size_t mscb = c * h + 2 * h + dw + 2 * h + h * c + 2 * c;
    return cab + sab + mscb;
}

std::size_t lgag_params(std::size_t c, std::size_t k) { return 2 * c * k * k + 4 * c + c + 2; }
std::size_t eucb_params(std::size_t cin, std::size_t cout) { return 9 * cin + 2 * cin + cin * cout + cout; }
std::size_t head_params(std::size_t c) { return c + 1; }

std::size_t decoder_params(const DecoderConfig& cfg) {
    const auto& ch = cfg.channels;
    std::size_t n = mscam_params(ch[3], cfg) + head_params(ch[3]);
    for (int s = 2; s >= 0; --s)
        n += eucb_params(ch[s + 1], ch[s]) + lgag_params(ch[s], cfg.lgag_kernel) + mscam_params(ch[s], cfg) +
             head_params(ch[s]);
    return n;
}

StageFeatures<float> features(const std::array<std::size_t, 4>& ch, std::size_t n, std::size_t h, Prng& p) {
    StageFeatures<float> f;
    for (std::size_t i = 0; i < 4; ++i)
        f.x[i] = Var<float>(Tensor4<float>::randn({n, ch[i], h >> i, h >> i}, p, 1.0));
    return f;
}

} // namespace

TEST(Blocks, ParameterCountsMatchClosedForm) {
    DecoderConfig cfg;
    InitConfig init;
    Prng p(1);
    ChannelAttention<float> cab(64, 16, p);
    EXPECT_EQ(parameter_count<float>(cab), 2u * 64 * 4);
    SpatialAttention<float> sab(7, p);
    EXPECT_EQ(parameter_count<float>(sab), 99u);
    MultiScaleAttentionModule<float> mscam(64, cfg, init, p);
    EXPECT_EQ(parameter_count<float>(mscam), mscam_params(64, cfg));
    GroupedAttentionGate<float> lgag(32, 32, cfg, init, p);
    EXPECT_EQ(parameter_count<float>(lgag), lgag_params(32, 3));
    UpConvBlock<float> eucb(64, 32, init, p);
    EXPECT_EQ(parameter_count<float>(eucb), eucb_params(64, 32));
    SegmentationHead<float> sh(32, 1, init, p);
    EXPECT_EQ(parameter_count<float>(sh), 33u);
}

TEST(Blocks, DecoderParameterCountMatchesClosedForm) {
    for (auto ch : {std::array<std::size_t, 4>{32, 64, 160, 256}, std::array<std::size_t, 4>{8, 16, 24, 32}}) {
        DecoderConfig cfg;
        cfg.channels = ch;
        Prng p(2);
        Decoder<float> d(cfg, InitConfig{}, p);
        EXPECT_EQ(parameter_count<float>(d), decoder_params(cfg));
    }
}

TEST(Blocks, AttentionPreservesShapeAndGatesWithinUnitInterval) {
    Prng p(3);
    Var<float> x(Tensor4<float>::randn({2, 16, 5, 7}, p, 1.0));
    ChannelAttention<float> cab(16, 16, p);
    SpatialAttention<float> sab(7, p);
    const auto a = cab.attention(x), s = sab.attention(x);
    EXPECT_EQ(a.shape(), (Shape{2, 16, 1, 1}));
    EXPECT_EQ(s.shape(), (Shape{2, 1, 5, 7}));
    for (float v : a.value().data()) EXPECT_TRUE(v > 0 && v < 1);
    for (float v : s.value().data()) EXPECT_TRUE(v > 0 && v < 1);
    EXPECT_EQ(cab.forward(x).shape(), x.shape());
    EXPECT_EQ(sab.forward(x).shape(), x.shape());
}

TEST(Blocks, MscbResidualOnlyWhenWidthsAgree) {
    DecoderConfig cfg;
    InitConfig init;
    Prng p(4);
    Var<float> x(Tensor4<float>::randn({2, 8, 4, 4}, p, 1.0));
    MultiScaleConvBlock<float> same(8, 8, cfg, init, p);
    MultiScaleConvBlock<float> wider(8, 12, cfg, init, p);
    EXPECT_EQ(same.forward(x).shape(), x.shape());
    EXPECT_EQ(wider.forward(x).shape(), (Shape{2, 12, 4, 4}));

    // With zero BN gammas the branch output is exactly beta = 0, so the
    // residual block must return its input unchanged.
    struct ZeroGamma : ModuleVisitor<float> {
        void parameter(const std::string& name, Var<float>& v) override {
            if (name.find("gamma") != std::string::npos) v.mutable_value().fill(0.f);
        }
    } zg;
    same.visit("", zg);
    EXPECT_EQ(same.forward(x).value().storage(), x.value().storage());
    EXPECT_THROW(same.forward(Var<float>(Tensor4<float>({1, 4, 4, 4}))), ShapeError);
}

TEST(Blocks, LgagUsesGroupedConvolutions) {
    DecoderConfig cfg;
    Prng p(5);
    GroupedAttentionGate<float> lgag(12, 8, cfg, InitConfig{}, p);
    // gcd(12, 8) = 4 groups on the gate branch, gcd(8, 8) = 8 on the skip branch
    EXPECT_EQ(parameter_count<float>(lgag), 8u * 3 * 9 + 8u * 1 * 9 + 4 * 8 + 8 + 2);
    Var<float> g(Tensor4<float>::randn({2, 12, 6, 6}, p, 1.0)), x(Tensor4<float>::randn({2, 8, 6, 6}, p, 1.0));
    EXPECT_EQ(lgag.forward(g, x).shape(), x.shape());
    EXPECT_THROW(lgag.forward(Var<float>(Tensor4<float>({2, 12, 3, 3})), x), ShapeError);
}

TEST(Blocks, EucbDoublesResolution) {
    Prng p(6);
    UpConvBlock<float> eucb(16, 8, InitConfig{}, p);
    Var<float> x(Tensor4<float>::randn({2, 16, 3, 5}, p, 1.0));
    EXPECT_EQ(eucb.forward(x).shape(), (Shape{2, 8, 6, 10}));
}

TEST(Blocks, BinaryHeadStartsAtPrior) {
    Prng p(7);
    InitConfig init;
    init.head_prior = 0.2;
    SegmentationHead<float> sh(4, 1, init, p);
    EXPECT_NEAR(sh.conv().bias().value()[0], std::log(0.2 / 0.8), 1e-6);
    SegmentationHead<float> multi(4, 3, init, p);
    for (float b : multi.conv().bias().value().data()) EXPECT_EQ(b, 0.f);
}

TEST(Decoder, HeadShapesAndOrdering) {
    DecoderConfig cfg;
    cfg.channels = {8, 16, 24, 32};
    Prng p(8);
    Decoder<float> d(cfg, InitConfig{}, p);
    const auto out = d.forward(features(cfg.channels, 2, 16, p));
    EXPECT_EQ(out.p[0].shape(), (Shape{2, 1, 2, 2}));   // deepest
    EXPECT_EQ(out.p[1].shape(), (Shape{2, 1, 4, 4}));
    EXPECT_EQ(out.p[2].shape(), (Shape{2, 1, 8, 8}));
    EXPECT_EQ(out.p[3].shape(), (Shape{2, 1, 16, 16})); // final
}

TEST(Decoder, RejectsMismatchedFeatures) {
    DecoderConfig cfg;
    cfg.channels = {8, 16, 24, 32};
    Prng p(9);
    Decoder<float> d(cfg, InitConfig{}, p);
    auto f = features(cfg.channels, 2, 16, p);
    f.x[2] = Var<float>(Tensor4<float>({2, 20, 4, 4}));
    EXPECT_THROW(d.forward(f), ShapeError);
    auto g = features(cfg.channels, 2, 16, p);
    g.x[1] = Var<float>(Tensor4<float>({2, 16, 6, 6}));
    EXPECT_THROW(d.forward(g), ShapeError);
}

TEST(Decoder, ConfigValidation) {
    DecoderConfig cfg;
    cfg.channels = {32, 32, 64, 128};
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = DecoderConfig{};
    cfg.kernel_scales = {1, 2};
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = DecoderConfig{};
    cfg.kernel_scales.clear();
    EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Decoder, SameSeedSameWeights) {
    DecoderConfig cfg;
    cfg.channels = {8, 16, 24, 32};
    Prng a(11), b(11);
    Decoder<float> d1(cfg, InitConfig{}, a), d2(cfg, InitConfig{}, b);
    auto p1 = named_parameters<float>(d1), p2 = named_parameters<float>(d2);
    ASSERT_EQ(p1.size(), p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        EXPECT_EQ(p1[i].first, p2[i].first);
        EXPECT_EQ(p1[i].second.value().storage(), p2[i].second.value().storage());
    }
}
