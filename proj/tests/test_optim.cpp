#include <gtest/gtest.h>

#include <cmath>

#include "emcad/optim.hpp"

using namespace emcad;

namespace {

NamedParameters<double> one_param(std::vector<double> v) {
    const std::size_t n = v.size();
    return {{"w", Var<double>(Tensor4<double>({1, 1, 1, n}, std::move(v)), true)}};
}

void set_grad(Var<double>& p, const std::vector<double>& g) {
    Tensor4<double> t(p.shape(), g);
    p.node()->accumulate(std::move(t));
}

} // namespace

TEST(AdamW, FirstStepIsSignStepPlusDecay) {
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.1;
    auto params = one_param({1.0, -2.0, 0.5});
    AdamW<double> opt(params, cfg);
    set_grad(params[0].second, {0.3, -4.0, 1e-3});
    opt.step();
    const auto& th = params[0].second.value();
    const double decay = 1 - cfg.lr * cfg.weight_decay;
    // m_hat = g and v_hat = g^2 after one step, so the update is g / (|g| + eps)
    EXPECT_NEAR(th[0], 1.0 * decay - cfg.lr * 0.3 / (0.3 + cfg.eps), 1e-15);
    EXPECT_NEAR(th[1], -2.0 * decay + cfg.lr * 4.0 / (4.0 + cfg.eps), 1e-15);
    EXPECT_NEAR(th[2], 0.5 * decay - cfg.lr * 1e-3 / (1e-3 + cfg.eps), 1e-15);
}

TEST(AdamW, MatchesScalarRecurrence) {
    AdamWConfig cfg;
    cfg.lr = 3e-3;
    cfg.weight_decay = 1e-2;
    auto params = one_param({0.7});
    AdamW<double> opt(params, cfg);
    double theta = 0.7, m = 0, v = 0;
    const double grads[] = {0.5, -0.2, 0.9, 0.0, -1.3};
    for (int t = 1; t <= 5; ++t) {
        const double g = grads[t - 1];
        opt.zero_grad();
        set_grad(params[0].second, {g});
        opt.step();
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double mh = m / (1 - std::pow(cfg.beta1, t)), vh = v / (1 - std::pow(cfg.beta2, t));
        theta = theta * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
        EXPECT_NEAR(params[0].second.value()[0], theta, 1e-14) << t;
    }
    EXPECT_EQ(opt.steps(), 5u);
}

TEST(AdamW, ZeroGradientOnlyDecays) {
    AdamWConfig cfg;
    auto params = one_param({2.0});
    AdamW<double> opt(params, cfg);
    set_grad(params[0].second, {0.0});
    opt.step();
    EXPECT_DOUBLE_EQ(params[0].second.value()[0], 2.0 * (1 - cfg.lr * cfg.weight_decay));
}

TEST(AdamW, NonFiniteGradientThrows) {
    auto params = one_param({1.0, 1.0});
    AdamW<double> opt(params, AdamWConfig{});
    set_grad(params[0].second, {0.1, std::nan("")});
    EXPECT_THROW(opt.step(), NumericError);
    EXPECT_EQ(params[0].second.value().storage(), (std::vector<double>{1.0, 1.0}));
}

TEST(AdamW, ConfigValidation) {
    AdamWConfig c;
    c.lr = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = AdamWConfig{};
    c.beta2 = 1.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = AdamWConfig{};
    c.weight_decay = -1;
    EXPECT_THROW(c.validate(), ValidationError);
}
