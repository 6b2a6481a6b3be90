#include <gtest/gtest.h>

#include <sstream>

#include "helpers.hpp"
#include "untf/numerics/grad_check.hpp"
#include "untf/numerics/serialize.hpp"

using namespace untf;
using untf::test::rand_tensor;

TEST(Softmax, SymmetricPairIsHalf) {
    auto p = softmax(TensorD::from({2}, {0.0, 0.0}));
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, RowsAreDistributions) {
    Rng rng = make_rng(1);
    auto p = softmax(rand_tensor({6, 7}, rng, false, 10.0));
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 7; ++c) {
            EXPECT_GE(p[r * 7 + c], 0.0);
            s += p[r * 7 + c];
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, MaskedEntriesGetZero) {
    std::vector<std::uint8_t> mask{1, 0, 1};
    auto p = softmax(TensorD::from({3}, {1.0, 50.0, 1.0}), mask);
    EXPECT_EQ(p[1], 0.0);
    EXPECT_DOUBLE_EQ(p[0], 0.5);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    for (double c : {-3.0, 0.0, 7.5}) {
        auto y = layer_norm(TensorD::full({1, 3}, c), TensorD::full({3}, 1.0), TensorD::zeros({3}));
        for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-12);
    }
}

TEST(Matmul, IdentityLeavesMatrix) {
    Rng rng = make_rng(2);
    auto a = rand_tensor({3, 3}, rng);
    auto eye = TensorD::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto y = matmul(eye, a);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y[i], a[i]);
}

TEST(Backward, SumOfSquares) {
    auto x = TensorD::from({3}, {1, 2, 3}, true);
    backward(sum(mul(x, x)));
    EXPECT_EQ(test::as_double(x.grad()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, ReluPiecewise) {
    auto x = TensorD::from({2}, {-1, 2}, true);
    backward(sum(relu(x)));
    EXPECT_EQ(test::as_double(x.grad()), (std::vector<double>{0, 1}));
}

TEST(Backward, AccumulatesUntilReset) {
    auto x = TensorD::from({2}, {1, -2}, true);
    backward(sum(mul(x, x)));
    backward(sum(mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Backward, RejectsNonScalar) {
    auto x = TensorD::from({2}, {1, 2}, true);
    EXPECT_THROW(backward(relu(x)), ValidationError);
}

TEST(Backward, LinearInLosses) {
    Rng rng = make_rng(3);
    auto x = rand_tensor({4, 3}, rng, true);
    auto w = rand_tensor({3, 2}, rng);
    auto f1 = [&] { return sum(relu(matmul(x, w))); };
    auto f2 = [&] { return mean(mul(x, x)); };
    backward(add(f1(), f2()));
    auto both = test::as_double(x.grad());
    x.zero_grad();
    backward(f1());
    backward(f2());
    EXPECT_LT(test::max_abs_diff(both, test::as_double(x.grad())), 1e-12);
}

TEST(Errors, ShapeMismatchNamesPrimitive) {
    try {
        matmul(TensorD::zeros({2, 3}), TensorD::zeros({2, 3}));
        FAIL() << "expected a shape error";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    }
}

TEST(Errors, NonFiniteOutputIsNumericFault) {
    EXPECT_THROW(log1p(TensorD::from({1}, {-1.0})), NumericFault);
}

TEST(Conv1d, DeltaKernelCopiesInput) {
    Rng rng = make_rng(4);
    auto x = rand_tensor({2, 1, 9}, rng);
    // Delta at tap 2 of a width-5 kernel with padding 2 is the identity.
    auto w = TensorD::from({1, 1, 5}, {0, 0, 1, 0, 0});
    auto y = conv1d(x, w, TensorD::zeros({1}), 1, 2);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
    // Off-centre delta shifts by one sample.
    auto w1 = TensorD::from({1, 1, 3}, {0, 0, 1});
    auto y1 = conv1d(x, w1, TensorD::zeros({1}), 1, 0);
    for (std::size_t t = 0; t < 7; ++t) EXPECT_DOUBLE_EQ(y1[t], x[t + 2]);
}

TEST(GradCheck, SquareAtOne) {
    auto rep = grad_check([](const TensorD& x) { return sum(mul(x, x)); }, TensorD::from({1}, {1.0}), 1e-5, 1e-4);
    EXPECT_TRUE(rep.pass);
    EXPECT_DOUBLE_EQ(rep.analytic[0], 2.0);
    EXPECT_NEAR(rep.numeric[0], 2.0, 1e-8);
}

TEST(GradCheck, WrongAdjointFails) {
    auto bad_square = [](const TensorD& x) {
        std::vector<double> v(x.values().begin(), x.values().end());
        for (auto& e : v) e *= e;
        return make_result<double>("bad_square", x.shape(), v, {x.node()}, [](detail::Node<double>& self) {
            double* g = detail::gbuf(self.inputs[0]);
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += 3.0 * self.grad[i];
        });
    };
    auto rep = grad_check([&](const TensorD& x) { return sum(bad_square(x)); }, TensorD::from({2}, {0.7, -1.2}), 1e-5, 1e-4);
    EXPECT_FALSE(rep.pass);
}

// Every primitive against central differences at 100 random points.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
    const int which = GetParam();
    Rng rng = make_rng(100 + static_cast<std::uint64_t>(which));
    auto other = rand_tensor({3, 4}, rng);
    auto gamma = rand_tensor({4}, rng);
    auto beta = rand_tensor({4}, rng);
    auto kernel = rand_tensor({2, 3, 3}, rng);
    auto kbias = rand_tensor({2}, rng);
    auto weights = rand_tensor({3, 4}, rng);
    std::function<TensorD(const TensorD&)> f;
    Shape shape{3, 4};
    switch (which) {
        case 0: f = [&](const TensorD& x) { return sum(mul(add(x, other), weights)); }; break;
        case 1: f = [&](const TensorD& x) { return sum(mul(sub(x, other), x)); }; break;
        case 2: f = [&](const TensorD& x) { return sum(mul(matmul(x, transpose(other, 0, 1)), matmul(x, transpose(other, 0, 1)))); }; break;
        case 3: f = [&](const TensorD& x) { return sum(mul(softmax(x), weights)); }; break;
        case 4: f = [&](const TensorD& x) { return sum(mul(layer_norm(x, gamma, beta), weights)); }; break;
        case 5: f = [&](const TensorD& x) { return sum(mul(log1p(mul(x, x)), weights)); }; break;
        case 6: f = [&](const TensorD& x) { return sum(mul(relu(x), weights)); }; break;
        case 7: f = [&](const TensorD& x) { return mean(mul(concat_last(x, other), concat_last(weights, x))); }; break;
        case 8: f = [&](const TensorD& x) { return sum(mul(slice(x, 1, 1, 2), slice(weights, 1, 0, 2))); }; break;
        case 9:
            shape = {2, 3, 6};
            f = [&](const TensorD& x) { return sum(mul(conv1d(x, kernel, kbias, 2, 1), conv1d(x, kernel, kbias, 2, 1))); };
            break;
        case 10:
            shape = {2, 3, 5};
            f = [&](const TensorD& x) {
                auto y = batch_norm(x, TensorD::from({3}, {1.5, 0.5, -1.0}), TensorD::from({3}, {0.1, 0.2, 0.3}));
                return sum(mul(y, mul(x, x)));
            };
            break;
        case 11: {
            const std::vector<std::size_t> idx{2, 0, 2};
            shape = {3, 4};
            f = [&, idx](const TensorD& x) { return sum(mul(embedding(x, idx), matmul(TensorD::full({3, 3}, 0.5), other))); };
            break;
        }
        case 12: {
            const std::vector<double> target{0.5, -1, 2, 0, 1, 1, -2, 3, 0.25, 0, 0, 1};
            f = [target](const TensorD& x) { return squared_error_sum(x, std::span<const double>(target)); };
            break;
        }
        default: f = [&](const TensorD& x) { return sum(mul(mean_last(permute(reshape(x, {2, 2, 3}), {2, 0, 1})), TensorD::full({3, 2}, 1.0))); };
    }
    double worst = 0;
    for (int point = 0; point < 100; ++point) {
        auto x = rand_tensor(shape, rng);
        worst = std::max(worst, grad_check(f, x, 1e-5, 1e-4).max_rel_error);
    }
    EXPECT_LT(worst, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Ops, PrimitiveGradient, ::testing::Range(0, 14));

TEST(BatchNorm, NormalizesPerChannel) {
    Rng rng = make_rng(6);
    auto x = rand_tensor({4, 2, 10}, rng, false, 3.0);
    BatchStats<double> seen;
    auto y = batch_norm(x, TensorD::full({2}, 1.0), TensorD::zeros({2}), static_cast<const BatchStats<double>*>(nullptr), &seen);
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t t = 0; t < 10; ++t) m += y[(n * 2 + c) * 10 + t];
        m /= 40;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t t = 0; t < 10; ++t) v += std::pow(y[(n * 2 + c) * 10 + t] - m, 2);
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v / 40, seen.var[c] / (seen.var[c] + kNormEpsilon), 1e-9);
    }
}

TEST(Serialize, TensorRoundTrip) {
    auto t = TensorD::from({2, 3}, {1.5, -2, 0, 3.25, 1e-3, 7});
    std::stringstream ss;
    BinaryWriter w(ss);
    write_tensor(w, "block.weight", t);
    BinaryReader r(ss, "buffer");
    auto back = read_tensor(r);
    EXPECT_EQ(back.name, "block.weight");
    EXPECT_EQ(back.shape, t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back.values[i], static_cast<double>(static_cast<float>(t[i])));
}

TEST(Serialize, TruncationIsCorruption) {
    std::stringstream ss;
    BinaryWriter w(ss);
    write_tensor(w, "x", TensorD::zeros({4}));
    auto bytes = ss.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 3));
    BinaryReader r(cut, "buffer");
    EXPECT_THROW(read_tensor(r), CorruptionError);
}

TEST(NoGrad, GuardStopsRecording) {
    auto x = TensorD::from({2}, {1, 2}, true);
    NoGradGuard guard;
    auto y = sum(mul(x, x));
    EXPECT_FALSE(y.requires_grad());
}
