#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include <biasnet/ops.hpp>
#include <biasnet/rng.hpp>
#include <biasnet/tensor.hpp>

using namespace biasnet;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor<double> t(std::move(shape));
    for (auto& v : t.storage()) v = rng.uniform(lo, hi);
    return t;
}

// Direct six-loop cross-correlation, summing c, a, b in that order after the bias.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b)
{
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    Tensor<double> out({N, F, H - kh + 1, W - kw + 1});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t i = 0; i + kh <= H; ++i)
                for (std::size_t j = 0; j + kw <= W; ++j) {
                    double acc = b[f];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t a = 0; a < kh; ++a)
                            for (std::size_t q = 0; q < kw; ++q) acc += x.at({n, c, i + a, j + q}) * w.at({f, c, a, q});
                    out.at({n, f, i, j}) = acc;
                }
    return out;
}

} // namespace

TEST(Tensor, ShapeInvariants)
{
    Tensor<double> t({2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_THROW(Tensor<double>({2, 0}), DimensionError);
    EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>(3)), DimensionError);
    EXPECT_THROW(t.at({0, 0}), DimensionError);
    EXPECT_THROW(t.at({2, 0, 0}), DimensionError);
    t.at({1, 2, 3}) = 5.0;
    EXPECT_EQ(t[23], 5.0);
    EXPECT_EQ(t.reshaped({6, 4})[23], 5.0);
    EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
}

TEST(Tensor, DotRejectsMismatch)
{
    auto a = Tensor<double>::vector({1, 2, 3});
    auto b = Tensor<double>::vector({4, 5, 6});
    EXPECT_DOUBLE_EQ(dot(a, b), 32.0);
    EXPECT_THROW(dot(a, Tensor<double>::vector({1, 2})), DimensionError);
}

TEST(Conv2d, ZeroInputGivesBias)
{
    Tensor<double> x({2, 1, 6, 6});
    Tensor<double> w({3, 1, 3, 3}, 0.7);
    Tensor<double> b({3}, 0.3);
    const auto y = conv2d_forward(x, w, b);
    EXPECT_EQ(y.shape(), (Shape{2, 3, 4, 4}));
    for (double v : y.values()) EXPECT_EQ(v, 0.3);
}

TEST(Conv2d, CountsOverlap)
{
    Tensor<double> x({1, 1, 3, 3}, 1.0);
    Tensor<double> w({1, 1, 2, 2}, 1.0);
    const auto y = conv2d_forward(x, w, Tensor<double>({1}));
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (double v : y.values()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, MatchesNaiveOracleExactly)
{
    Rng rng(11);
    {
        const auto x = random_tensor({1, 1, 5, 5}, rng);
        const auto w = random_tensor({2, 1, 3, 3}, rng);
        const auto b = random_tensor({2}, rng);
        EXPECT_EQ(conv2d_forward(x, w, b), naive_conv(x, w, b));
    }
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t C = 1 + rng.below(3), H = 3 + rng.below(6), k = 1 + rng.below(3);
        const auto x = random_tensor({1 + rng.below(3), C, H, H}, rng);
        const auto w = random_tensor({1 + rng.below(4), C, k, k}, rng);
        const auto b = random_tensor({w.dim(0)}, rng);
        EXPECT_EQ(conv2d_forward(x, w, b), naive_conv(x, w, b)) << "trial " << trial;
    }
}

TEST(Conv2d, FloatPathMatchesFloatOracle)
{
    Rng rng(12);
    const auto x = random_tensor({2, 3, 8, 8}, rng);
    const auto w = random_tensor({5, 3, 3, 3}, rng);
    const auto b = random_tensor({5}, rng);
    const auto yf = conv2d_forward(x.cast<float>(), w.cast<float>(), b.cast<float>());
    // float oracle with the same summation order
    const auto xf = x.cast<float>(), wf = w.cast<float>();
    for (std::size_t f = 0; f < 5; ++f)
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 6; ++j) {
                float acc = static_cast<float>(b[f]);
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t a = 0; a < 3; ++a)
                        for (std::size_t q = 0; q < 3; ++q) acc += xf.at({1, c, i + a, j + q}) * wf.at({f, c, a, q});
                EXPECT_EQ(yf.at({1, f, i, j}), acc);
            }
}

TEST(Conv2d, ShapeErrors)
{
    Tensor<double> x({1, 2, 4, 4});
    EXPECT_THROW(conv2d_forward(x, Tensor<double>({1, 3, 3, 3}), Tensor<double>({1})), DimensionError);
    EXPECT_THROW(conv2d_forward(x, Tensor<double>({1, 2, 5, 5}), Tensor<double>({1})), DimensionError);
    EXPECT_THROW(conv2d_forward(x, Tensor<double>({2, 2, 3, 3}), Tensor<double>({1})), DimensionError);
    EXPECT_THROW(conv2d_forward(Tensor<double>({4, 4}), Tensor<double>({1, 1, 3, 3}), Tensor<double>({1})),
                 DimensionError);
}

TEST(Conv2d, BackwardWithoutForwardIsStateError)
{
    ConvCache<double> empty;
    Tensor<double> w({1, 1, 2, 2});
    EXPECT_THROW(conv2d_backward(empty, w, Tensor<double>({1, 1, 2, 2})), StateError);
}

TEST(MaxPool, WindowMax)
{
    Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0.1, 0.2, 0.3, 0.4});
    const auto y = maxpool2(x);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y[0], 0.4);
}

TEST(MaxPool, ConstantInput)
{
    Tensor<double> x({2, 3, 6, 4}, 0.25);
    const auto y = maxpool2(x);
    EXPECT_EQ(y.shape(), (Shape{2, 3, 3, 2}));
    for (double v : y.values()) EXPECT_EQ(v, 0.25);
}

TEST(MaxPool, MatchesWindowScanOracle)
{
    Rng rng(3);
    const auto x = random_tensor({1, 1, 4, 4}, rng);
    PoolCache cache;
    const auto y = maxpool2(x, &cache);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double best = -INFINITY;
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b) best = std::max(best, x.at({0, 0, 2 * i + a, 2 * j + b}));
            EXPECT_EQ(y.at({0, 0, i, j}), best);
        }
    // gradient routes to the argmax only
    Tensor<double> g({1, 1, 2, 2}, 1.0);
    const auto gx = maxpool2_backward(cache, g);
    EXPECT_DOUBLE_EQ(std::accumulate(gx.values().begin(), gx.values().end(), 0.0), 4.0);
    for (std::size_t k = 0; k < 16; ++k)
        if (gx[k] != 0.0) EXPECT_EQ(x[k], y[(k / 4 / 2) * 2 + (k % 4) / 2]);
}

TEST(MaxPool, OddDimensionsRejected)
{
    EXPECT_THROW(maxpool2(Tensor<double>({1, 1, 3, 4})), DimensionError);
    EXPECT_THROW(maxpool2(Tensor<double>({1, 1, 4, 5})), DimensionError);
}

TEST(Dense, IdentityAndBias)
{
    Tensor<double> eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
    Tensor<double> x({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    EXPECT_EQ(dense_forward(x, eye, Tensor<double>({3})), x);
    const auto b = Tensor<double>::vector({0.5, -1.0});
    const auto y = dense_forward(Tensor<double>({4, 3}), Tensor<double>({3, 2}, 9.0), b);
    for (std::size_t n = 0; n < 4; ++n) {
        EXPECT_EQ(y.at({n, 0}), 0.5);
        EXPECT_EQ(y.at({n, 1}), -1.0);
    }
}

TEST(Dense, MatchesHandComputedProducts)
{
    Tensor<double> x({2, 3}, std::vector<double>{1, -2, 0.5, 3, 0, -1});
    Tensor<double> w({3, 2}, std::vector<double>{2, 1, 0.5, -1, 4, 3});
    const auto y = dense_forward(x, w, Tensor<double>::vector({0.1, 0.2}));
    EXPECT_EQ(y.at({0, 0}), 0.1 + 1 * 2 + -2 * 0.5 + 0.5 * 4);
    EXPECT_EQ(y.at({0, 1}), 0.2 + 1 * 1 + -2 * -1 + 0.5 * 3);
    EXPECT_EQ(y.at({1, 0}), 0.1 + 3 * 2 + 0 * 0.5 + -1 * 4);
    EXPECT_EQ(y.at({1, 1}), 0.2 + 3 * 1 + 0 * -1 + -1 * 3);
    EXPECT_THROW(dense_forward(x, Tensor<double>({2, 2}), Tensor<double>({2})), DimensionError);
    EXPECT_THROW(dense_forward(x, w, Tensor<double>({3})), DimensionError);
}

TEST(Tanh, BasicProperties)
{
    const auto y = tanh_apply(Tensor<double>::vector({0.0, 0.7, -0.7, 50.0}));
    EXPECT_EQ(y[0], 0.0);
    EXPECT_EQ(y[1], -y[2]);
    EXPECT_NEAR(y[3], 1.0, 1e-12);
    Rng rng(5);
    const auto r = tanh_apply(random_tensor({1000}, rng, -20, 20));
    for (double v : r.values()) {
        EXPECT_GT(v, -1.0 - 1e-15);
        EXPECT_LT(v, 1.0 + 1e-15);
    }
}

TEST(Tanh, FloatPathCloseToStd)
{
    Rng rng(6);
    Tensor<float> x({4096});
    for (auto& v : x.storage()) v = static_cast<float>(rng.uniform(-6, 6));
    const auto y = tanh_apply(x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], std::tanh(x[i]), 1e-6);
}

TEST(SoftmaxNll, UniformLogits)
{
    const auto r = softmax_nll(Tensor<double>({3, 10}, 0.4), std::vector<Label>{0, 5, 9});
    for (double p : r.probabilities.values()) EXPECT_NEAR(p, 0.1, 1e-15);
    EXPECT_NEAR(r.loss, std::log(10.0), 1e-12);
}

TEST(SoftmaxNll, SaturatedCorrect)
{
    Tensor<double> z({1, 4});
    z[2] = 1000.0;
    const auto r = softmax_nll(z, std::vector<Label>{2});
    EXPECT_NEAR(r.loss, 0.0, 1e-12);
    EXPECT_TRUE(r.probabilities.all_finite());
}

TEST(SoftmaxNll, MatchesLongDoubleOracle)
{
    Rng rng(8);
    const auto z = random_tensor({3, 4}, rng, -5, 5);
    const std::vector<Label> y{1, 3, 0};
    const auto r = softmax_nll(z, y);
    long double loss = 0;
    for (std::size_t n = 0; n < 3; ++n) {
        long double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += std::exp(static_cast<long double>(z.at({n, k})));
        long double row_sum = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const long double p = std::exp(static_cast<long double>(z.at({n, k}))) / s;
            EXPECT_NEAR(r.probabilities.at({n, k}), static_cast<double>(p), 1e-15);
            row_sum += r.probabilities.at({n, k});
        }
        EXPECT_NEAR(static_cast<double>(row_sum), 1.0, 1e-9);
        loss -= std::log(std::exp(static_cast<long double>(z.at({n, y[n]}))) / s);
    }
    EXPECT_NEAR(r.loss, static_cast<double>(loss / 3), 1e-9);
}

TEST(SoftmaxNll, RowsSumToOneEverywhere)
{
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        const auto z = random_tensor({5, 10}, rng, -300, 300);
        const auto r = softmax_nll(z, std::vector<Label>(5, 3));
        for (std::size_t n = 0; n < 5; ++n) {
            double s = 0;
            for (std::size_t k = 0; k < 10; ++k) {
                const double p = r.probabilities.at({n, k});
                EXPECT_GE(p, 0.0);
                EXPECT_LE(p, 1.0);
                s += p;
            }
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(SoftmaxNll, LabelOutOfRange)
{
    EXPECT_THROW(softmax_nll(Tensor<double>({2, 3}), std::vector<Label>{0, 3}), ValueError);
    EXPECT_THROW(softmax_nll(Tensor<double>({2, 3}), std::vector<Label>{0}), DimensionError);
}

TEST(Sgd, Arithmetic)
{
    auto p = Tensor<double>::vector({1.0});
    sgd_step(p, Tensor<double>::vector({1.0}), 0.05);
    EXPECT_DOUBLE_EQ(p[0], 0.95);
    auto q = Tensor<double>::vector({1.0, -2.0});
    const auto before = q;
    sgd_step(q, Tensor<double>::vector({3.0, 4.0}), 0.0);
    EXPECT_EQ(q, before);
    EXPECT_THROW(sgd_step(q, Tensor<double>::vector({1.0}), 0.1), DimensionError);
}

TEST(Sgd, SequentialSemanticsDifferFromSummedStep)
{
    // f(p) = p^4 / 4, gradient p^3: two steps with recomputed gradients vs one
    // step with the sum of gradients evaluated at the start.
    auto grad = [](double p) { return Tensor<double>::vector({p * p * p}); };
    auto p = Tensor<double>::vector({1.5});
    sgd_step(p, grad(p[0]), 0.05);
    sgd_step(p, grad(p[0]), 0.05);
    const double p1 = 1.5 - 0.05 * 1.5 * 1.5 * 1.5;
    EXPECT_DOUBLE_EQ(p[0], p1 - 0.05 * p1 * p1 * p1);
    auto q = Tensor<double>::vector({1.5});
    sgd_step(q, Tensor<double>::vector({2 * 1.5 * 1.5 * 1.5}), 0.05);
    EXPECT_NE(p[0], q[0]);
}

TEST(Init, BiasesZeroAndDeterministic)
{
    Rng a(42), b(42);
    const LayerInit spec{{20, 1, 5, 5}, 25, 125, InitKind::tanh_uniform};
    const auto ta = init_params<double>(spec, a);
    const auto tb = init_params<double>(spec, b);
    EXPECT_EQ(ta, tb);
    const double bound = std::sqrt(6.0 / 150.0);
    for (double v : ta.values()) EXPECT_LE(std::abs(v), bound);
    const auto zb = zero_bias<double>(20);
    for (double v : zb.values()) EXPECT_EQ(v, 0.0);
    Rng c(43);
    EXPECT_NE(init_params<double>(spec, c), ta);
}

TEST(Init, SampleMeanWithinThreeSigma)
{
    Rng rng(2024);
    const LayerInit spec{{100000}, 300, 200, InitKind::tanh_uniform};
    const auto t = init_params<double>(spec, rng);
    const double b = init_bound(spec);
    double mean = 0;
    for (double v : t.values()) mean += v;
    mean /= static_cast<double>(t.size());
    const double sigma_mean = b / std::sqrt(3.0) / std::sqrt(static_cast<double>(t.size()));
    EXPECT_LT(std::abs(mean), 3 * sigma_mean);
}

TEST(Philox, KnownAnswerVectors)
{
    using philox::block;
    EXPECT_EQ(block({0, 0, 0, 0}, {0, 0}), (philox::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    EXPECT_EQ(block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
              (philox::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    EXPECT_EQ(block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
              (philox::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, StreamsAreReproducibleAndDistinct)
{
    Rng a(7), b(7), c(7, 1), d(8);
    std::vector<std::uint32_t> va, vb, vc, vd;
    for (int i = 0; i < 64; ++i) {
        va.push_back(a.next_u32());
        vb.push_back(b.next_u32());
        vc.push_back(c.next_u32());
        vd.push_back(d.next_u32());
    }
    EXPECT_EQ(va, vb);
    EXPECT_NE(va, vc);
    EXPECT_NE(va, vd);
    EXPECT_EQ(a.algorithm(), "philox4x32-10");
}

TEST(Rng, NormalMoments)
{
    Rng rng(99);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        s += z;
        s2 += z * z;
    }
    const double mean = s / n, var = s2 / n - mean * mean;
    EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(n));
    EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rng, BelowIsUnbiasedAndInRange)
{
    Rng rng(5);
    std::vector<int> counts(7);
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        const auto v = rng.below(7);
        ASSERT_LT(v, 7u);
        ++counts[v];
    }
    for (int c : counts) EXPECT_NEAR(c, n / 7.0, 4 * std::sqrt(n / 7.0));
    auto perm = rng.permutation(100);
    std::sort(perm.begin(), perm.end());
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(perm[i], i);
}

TEST(KeyedRandom, IndependentOfEvaluationOrder)
{
    const KeyedRandom k{123, 4};
    const double forward = k.normal(5, 17);
    for (int i = 0; i < 30; ++i) (void)k.normal(static_cast<std::uint32_t>(i), 3);
    EXPECT_EQ(k.normal(5, 17), forward);
    EXPECT_NE(k.normal(5, 16), forward);
    EXPECT_NE((KeyedRandom{124, 4}.normal(5, 17)), forward);
}

TEST(DeriveSeed, SpreadsTags)
{
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
    EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
    EXPECT_EQ(derive_seed(1, 5), derive_seed(1, 5));
}
