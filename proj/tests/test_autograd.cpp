#include <gtest/gtest.h>

#include "emcad/autograd.hpp"

using namespace emcad;

TEST(Autograd, ProductRuleAndFanOut) {
    // y = sum(a * b + a), dy/da = b + 1, dy/db = a
    Var<double> a(Tensor4<double>({1, 1, 1, 2}, {2, 3}), true);
    Var<double> b(Tensor4<double>({1, 1, 1, 2}, {5, 7}), true);
    Var<double> y = ag::add(ag::mul(a, b), a);
    const Tensor4<double> seed({1, 1, 1, 2}, 1.0);
    backward(y, &seed);
    EXPECT_EQ(a.grad().storage(), (std::vector<double>{6, 8}));
    EXPECT_EQ(b.grad().storage(), (std::vector<double>{2, 3}));
}

TEST(Autograd, ScalarRootRequiredWithoutSeed) {
    Var<double> a(Tensor4<double>({1, 1, 1, 2}, 1.0), true);
    EXPECT_THROW(backward(ag::scale(a, 2.0)), ShapeError);
}

TEST(Autograd, NoGradInputsBuildNoGraph) {
    Var<double> a(Tensor4<double>({1, 1, 1, 1}, 1.0));
    Var<double> y = ag::scale(a, 3.0);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Autograd, SumScalarsAndMeanOf) {
    Var<double> a(Tensor4<double>({1, 1, 1, 1}, 2.0), true);
    Var<double> b(Tensor4<double>({1, 1, 1, 1}, 4.0), true);
    Var<double> s = ag::sum_scalars<double>({a, b, a});
    EXPECT_DOUBLE_EQ(s.item(), 8.0);
    backward(s);
    EXPECT_DOUBLE_EQ(a.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(b.grad()[0], 1.0);

    Var<double> c(Tensor4<double>({1, 1, 1, 1}, 2.0), true);
    Var<double> d(Tensor4<double>({1, 1, 1, 1}, 6.0), true);
    Var<double> m = ag::mean_of<double>({c, d});
    EXPECT_DOUBLE_EQ(m.item(), 4.0);
    backward(m);
    EXPECT_DOUBLE_EQ(c.grad()[0], 0.5);
}

TEST(Autograd, ConvBiasGradientIsOutputSum) {
    Prng p(1);
    Var<double> x(Tensor4<double>::randn({2, 2, 4, 4}, p, 1.0), true);
    Var<double> w(Tensor4<double>::randn({3, 2, 3, 3}, p, 1.0), true);
    Var<double> b(Tensor4<double>({1, 3, 1, 1}), true);
    Var<double> y = ag::conv2d(x, w, &b, ConvGeometry{1, 1, 1, false});
    const Tensor4<double> seed(y.shape(), 1.0);
    backward(y, &seed);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(b.grad()[c], 2.0 * 16.0);
}

TEST(PiecewiseTape, ReplayFreezesReluRegions) {
    PiecewiseTape tape;
    Tensor4<double> x({1, 1, 1, 2}, {-1e-9, 1e-9});
    Var<double> v(x, true);
    {
        PiecewiseTape::Scope s(tape, PiecewiseTape::State::record);
        Var<double> y = ag::relu(v);
        EXPECT_EQ(y.value().storage(), (std::vector<double>{0, 1e-9}));
    }
    // Perturb across the kink; replay keeps the recorded regions.
    v.mutable_value()[0] = 1e-3;
    v.mutable_value()[1] = -1e-3;
    {
        PiecewiseTape::Scope s(tape, PiecewiseTape::State::replay);
        Var<double> y = ag::relu(v);
        EXPECT_EQ(y.value().storage(), (std::vector<double>{0, -1e-3}));
    }
}

TEST(PiecewiseTape, StructureMismatchThrows) {
    PiecewiseTape tape;
    Var<double> v(Tensor4<double>({1, 1, 1, 2}, 1.0), true);
    {
        PiecewiseTape::Scope s(tape, PiecewiseTape::State::record);
        ag::relu(v);
    }
    PiecewiseTape::Scope s(tape, PiecewiseTape::State::replay);
    ag::relu(v);
    EXPECT_THROW(ag::relu(v), Error);
}
