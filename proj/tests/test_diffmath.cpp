#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tpt/autodiff.hpp"
#include "tpt/gradcheck.hpp"
#include "tpt/harness.hpp"
#include "tpt/rng.hpp"

using namespace tpt;

namespace {

Tensor random_matrix(std::uint64_t seed, std::size_t r, std::size_t c, double scale = 1.0) {
    Rng rng(seed);
    Tensor t({r, c});
    for (double& v : t.values()) v = normal(rng, 0.0, scale);
    return t;
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    t.set_requires_grad(true);
    EXPECT_EQ(t.grad().size(), t.size());
    t.set_requires_grad(false);
    EXPECT_TRUE(t.grad().empty());
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    ad::Tape tape;
    const Tensor x = random_matrix(1, 2, 5);
    const ad::Var y = ad::matmul(tape.constant(Tensor::identity(2)), tape.constant(x));
    EXPECT_TRUE(y.value().same_values(x));
}

TEST(Matmul, HandCheckedProduct) {
    ad::Tape tape;
    const ad::Var y = ad::matmul(tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
                                 tape.constant(Tensor::matrix(2, 1, {1, 1})));
    EXPECT_EQ(y.value().shape(), (Shape{2, 1}));
    EXPECT_DOUBLE_EQ(y.value()[0], 3.0);
    EXPECT_DOUBLE_EQ(y.value()[1], 7.0);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    ad::Tape tape;
    try {
        ad::matmul(tape.constant(Tensor({3, 4})), tape.constant(Tensor({5, 2})));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(shape_to_string({3, 4})), std::string::npos) << msg;
        EXPECT_NE(msg.find(shape_to_string({5, 2})), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    const Tensor a = random_matrix(2, 3, 4), b = random_matrix(3, 4, 2), w = random_matrix(4, 3, 2);
    auto proj = [&](ad::Tape& t, ad::Var y) { return ad::sum(ad::mul(y, t.constant(w))); };
    EXPECT_LE(finite_diff_check([&](ad::Tape& t, ad::Var x) { return proj(t, ad::matmul(x, t.constant(b))); }, a)
                  .max_rel_error,
              1e-6);
    EXPECT_LE(finite_diff_check([&](ad::Tape& t, ad::Var x) { return proj(t, ad::matmul(t.constant(a), x)); }, b)
                  .max_rel_error,
              1e-6);
}

TEST(Softmax, SymmetricRowIsUniform) {
    ad::Tape tape;
    const ad::Var p = ad::softmax_rows(tape.constant(Tensor::matrix(1, 2, {0, 0})));
    EXPECT_DOUBLE_EQ(p.value()[0], 0.5);
    EXPECT_DOUBLE_EQ(p.value()[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    ad::Tape tape;
    const ad::Var p = ad::softmax_rows(tape.constant(Tensor::matrix(1, 2, {1000, 0})));
    EXPECT_TRUE(p.value().all_finite());
    EXPECT_DOUBLE_EQ(p.value()[0], 1.0);
    EXPECT_LT(p.value()[1], 1e-300);
}

TEST(Softmax, ScalarOracle) {
    ad::Tape tape;
    const ad::Var p = ad::softmax_rows(tape.constant(Tensor::matrix(1, 2, {5, 1})));
    const double e4 = std::exp(4.0);
    EXPECT_NEAR(p.value()[0], e4 / (e4 + 1.0), 1e-15);
    EXPECT_NEAR(p.value()[1], 1.0 / (e4 + 1.0), 1e-15);
    EXPECT_NEAR(p.value()[0], 0.9820, 5e-5);
}

TEST(Softmax, RowsSumToOneIncludingLargeMagnitudes) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ad::Tape tape;
        const Tensor x = random_matrix(seed, 7, 9, seed % 2 == 0 ? 1.0 : 1e3);
        const Tensor& p = ad::softmax_rows(tape.constant(x)).value();
        ASSERT_TRUE(p.all_finite());
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < p.cols(); ++c) s += p.at(r, c);
            EXPECT_NEAR(s, 1.0, 1e-12) << "seed " << seed << " row " << r;
        }
    }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    ad::Tape tape;
    const ad::Var y = ad::layer_norm(tape.constant(Tensor::matrix(1, 4, {3, 3, 3, 3})),
                                     tape.constant(Tensor({1, 4}, 1.0)), tape.constant(Tensor({1, 4}, 0.0)));
    for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowIsFixedPoint) {
    ad::Tape tape;
    const ad::Var y = ad::layer_norm(tape.constant(Tensor::matrix(1, 2, {1, -1})),
                                     tape.constant(Tensor({1, 2}, 1.0)), tape.constant(Tensor({1, 2}, 0.0)), 1e-300);
    EXPECT_NEAR(y.value()[0], 1.0, 1e-15);
    EXPECT_NEAR(y.value()[1], -1.0, 1e-15);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
    ad::Tape tape;
    const Tensor x = random_matrix(5, 3, 16, 4.0);
    const Tensor& y = ad::layer_norm(tape.constant(x), tape.constant(Tensor({1, 16}, 1.0)),
                                     tape.constant(Tensor({1, 16}, 0.0)))
                          .value();
    for (std::size_t r = 0; r < 3; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t c = 0; c < 16; ++c) mean += y.at(r, c) / 16.0;
        for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 16.0;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-5);
    }
}

TEST(LayerNorm, GradientOnRandomInput) {
    const Tensor x = random_matrix(9, 2, 8), gain = random_matrix(10, 1, 8), bias = random_matrix(11, 1, 8);
    const Tensor w = random_matrix(12, 2, 8);
    const auto r = finite_diff_check(
        [&](ad::Tape& t, ad::Var v) {
            return ad::sum(ad::mul(ad::layer_norm(v, t.constant(gain), t.constant(bias)), t.constant(w)));
        },
        x);
    EXPECT_LE(r.max_rel_error, 1e-5);
}

TEST(ElementwiseOps, SpecValues) {
    ad::Tape tape;
    EXPECT_EQ(ad::gelu(tape.constant(Tensor::matrix(1, 1, {0}))).value()[0], 0.0);
    const Tensor& n = ad::l2_normalize_rows(tape.constant(Tensor::matrix(1, 2, {3, 4}))).value();
    EXPECT_NEAR(n[0], 0.6, 1e-15);
    EXPECT_NEAR(n[1], 0.8, 1e-15);
    const Tensor& z = ad::l2_normalize_rows(tape.constant(Tensor::matrix(1, 2, {0, 0}))).value();
    EXPECT_TRUE(z.all_finite());
    EXPECT_EQ(z[0], 0.0);
    EXPECT_NEAR(ad::log(tape.constant(Tensor::matrix(1, 1, {0}))).value()[0], std::log(1e-12), 1e-12);
    const Tensor& m = ad::mean_rows(tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 6}))).value();
    EXPECT_DOUBLE_EQ(m[0], 2.0);
    EXPECT_DOUBLE_EQ(m[1], 4.0);
}

TEST(Backward, SumGivesOnes) {
    Tensor p({3, 2}, 0.7);
    p.set_requires_grad(true);
    ad::Tape tape;
    tape.backward(ad::sum(tape.leaf(p)));
    for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, IndependentLossGivesZeroGrad) {
    Tensor p({2, 2}, 1.0), q({2, 2}, 2.0);
    p.set_requires_grad(true);
    q.set_requires_grad(true);
    ad::Tape tape;
    tape.leaf(p);
    tape.backward(ad::sum(ad::mul(tape.leaf(q), tape.leaf(q))));
    for (double g : p.grad()) EXPECT_EQ(g, 0.0);
    for (double g : q.grad()) EXPECT_EQ(g, 4.0);
}

TEST(Backward, NonScalarLossRejected) {
    Tensor p({2, 2}, 1.0);
    p.set_requires_grad(true);
    ad::Tape tape;
    EXPECT_THROW(tape.backward(ad::scale(tape.leaf(p), 2.0)), ContractError);
}

TEST(Backward, RepeatedCallsAccumulateLeafGrads) {
    Tensor p({1, 3}, 1.0);
    p.set_requires_grad(true);
    ad::Tape tape;
    const ad::Var loss = ad::sum(ad::scale(tape.leaf(p), 3.0));
    tape.backward(loss);
    tape.backward(loss);
    for (double g : p.grad()) EXPECT_EQ(g, 6.0);
    p.zero_grad();
    for (double g : p.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, VisitsOpsInReverseExecutionOrder) {
    Tensor p({2, 2}, 0.5);
    p.set_requires_grad(true);
    ad::Tape tape;
    const ad::Var a = tape.leaf(p);
    const ad::Var b = ad::scale(a, 2.0);
    const ad::Var c = ad::mul(b, a);
    const ad::Var d = ad::gelu(c);
    const ad::Var loss = ad::sum(d);
    tape.backward(loss);
    const auto& order = tape.last_backward_order();
    ASSERT_FALSE(order.empty());
    EXPECT_TRUE(std::is_sorted(order.rbegin(), order.rend()));
    EXPECT_EQ(order.front(), loss.id);
}

TEST(Backward, DeterministicAcrossIdenticalTapes) {
    const Tensor x0 = random_matrix(3, 4, 6);
    auto run = [&] {
        Tensor x = x0;
        x.set_requires_grad(true);
        ad::Tape tape;
        const ad::Var v = tape.leaf(x);
        const ad::Var p = ad::softmax_rows(ad::matmul(v, ad::transpose(v)));
        tape.backward(ad::sum(ad::mul(p, ad::log(p))));
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, QuadraticIsExact) {
    const Tensor x = Tensor::matrix(1, 2, {1, 2});
    const ScalarFn f = [](ad::Tape&, ad::Var v) { return ad::sum(ad::mul(v, v)); };
    const Tensor g = analytic_gradient(f, x);
    EXPECT_DOUBLE_EQ(g[0], 2.0);
    EXPECT_DOUBLE_EQ(g[1], 4.0);
    EXPECT_LE(finite_diff_check(f, x).max_rel_error, 1e-9);
}

TEST(FiniteDiff, EntropyOfSoftmax) {
    const Tensor x = random_matrix(21, 1, 6);
    const ScalarFn f = [](ad::Tape&, ad::Var v) {
        const ad::Var p = ad::softmax_rows(v);
        return ad::scale(ad::sum(ad::mul(p, ad::log(p))), -1.0);
    };
    EXPECT_LE(finite_diff_check(f, x).max_rel_error, 1e-6);
}

TEST(FiniteDiff, SharpSoftmaxStress) {
    const Tensor x = random_matrix(22, 1, 6, 0.05);
    const ScalarFn f = [](ad::Tape&, ad::Var v) {
        const ad::Var p = ad::softmax_rows(ad::scale(v, 100.0));
        return ad::scale(ad::sum(ad::mul(p, ad::log(p))), -1.0);
    };
    EXPECT_LE(finite_diff_check(f, x).max_rel_error, 1e-4);
}

// Every op w.r.t. every input, plus the encoders and the end-to-end loss.
class GradcheckSuite : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradcheckSuite, EveryOpWithinTolerance) {
    for (const NamedGradCheck& c : gradcheck_suite(GetParam())) {
        const bool end_to_end = c.name.rfind("encode", 0) == 0 || c.name.rfind("tpt_loss", 0) == 0 ||
                                c.name == "contrastive_loss";
        EXPECT_LE(c.result.max_rel_error, end_to_end ? 1e-4 : 1e-5) << c.name;
    }
}

INSTANTIATE_TEST_SUITE_P(TwentySeeds, GradcheckSuite, ::testing::Range<std::uint64_t>(0, 20));
