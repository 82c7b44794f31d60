#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace moase;
using testing_support::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * n + j];
            c[i * n + j] = s;
        }
    return c;
}

}  // namespace

TEST(Tensor, ShapeChecks) {
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor({2, 3}).reshaped({4}), ShapeError);
    EXPECT_EQ(Tensor({2, 3}).reshaped({3, 2}).dim(0), 3u);
    EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
}

TEST(Ops, ReluAndSoftmax) {
    Graph g;
    const Var r = relu(g.constant(Tensor({3}, {-1.0, 0.0, 2.0})));
    EXPECT_EQ(r.value().storage(), (std::vector<double>{0.0, 0.0, 2.0}));
    const Var s = softmax_lastdim(g.constant(Tensor({4})));
    for (double v : s.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ops, MatmulMatchesNaiveLoop) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Tensor a = random_tensor({2, 3}, seed), b = random_tensor({3, 2}, seed + 100);
        Graph g;
        const Var c = matmul(g.constant(a), g.constant(b));
        EXPECT_EQ(c.value(), naive_matmul(a, b));
        EXPECT_EQ(g.macs(), 12u);
    }
}

TEST(Ops, MatmulTransposedAndBatched) {
    const Tensor a = random_tensor({2, 3, 4}, 3), b = random_tensor({5, 4}, 4);
    Tensor bt({4, 5});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) bt[j * 5 + i] = b[i * 4 + j];
    Graph g;
    const Var c = matmul(g.constant(a), g.constant(b), true);
    EXPECT_EQ(c.shape(), (Shape{2, 3, 5}));
    EXPECT_LT(max_abs_diff(c.value().reshaped({6, 5}), naive_matmul(a.reshaped({6, 4}), bt)), 1e-14);

    const Tensor x = random_tensor({2, 3, 4}, 5), y = random_tensor({2, 4, 2}, 6);
    const Var z = batch_matmul(g.constant(x), g.constant(y));
    for (std::size_t s = 0; s < 2; ++s) {
        Tensor xs({3, 4}, std::vector<double>(x.data().begin() + s * 12, x.data().begin() + (s + 1) * 12));
        Tensor ys({4, 2}, std::vector<double>(y.data().begin() + s * 8, y.data().begin() + (s + 1) * 8));
        const Tensor ref = naive_matmul(xs, ys);
        for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(z.value()[s * 6 + i], ref[i], 1e-14);
    }
}

TEST(Ops, ShapeMismatchThrows) {
    Graph g;
    EXPECT_THROW(matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3}))), ShapeError);
    EXPECT_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({2}))), ShapeError);
}

TEST(Ops, NonFiniteRaises) {
    Graph g;
    EXPECT_THROW(g.leaf(Tensor({1}, std::nan(""))), NumericError);
    EXPECT_THROW(log(g.constant(Tensor({1}, 0.0))), NumericError);
}

TEST(Backward, SumGivesOnes) {
    Graph g;
    const Var x = g.leaf(random_tensor({2, 3, 2}, 7));
    const GradientMap gm = g.backward(sum(x));
    for (double v : gm.at(x).data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, ReluSubgradient) {
    Graph g;
    const Var x = g.leaf(Tensor({2}, {-1.0, 2.0}));
    const GradientMap gm = g.backward(sum(relu(x)));
    EXPECT_EQ(gm.at(x).storage(), (std::vector<double>{0.0, 1.0}));
}

TEST(Backward, NonScalarLossRejected) {
    Graph g;
    const Var x = g.leaf(Tensor({2}));
    EXPECT_THROW(g.backward(x), ShapeError);
}

TEST(Backward, ConstantsReceiveNoGradient) {
    Graph g;
    const Var x = g.leaf(Tensor({2}, 1.0)), c = g.constant(Tensor({2}, 3.0));
    const GradientMap gm = g.backward(sum(mul(x, c)));
    EXPECT_TRUE(gm.contains(x));
    EXPECT_FALSE(gm.contains(c));
    EXPECT_EQ(gm.at(x).storage(), (std::vector<double>{3.0, 3.0}));
}

TEST(FiniteDiff, Quadratic) {
    const double err = finite_diff_check([](Graph&, const Var& x) { return sum(mul(x, x)); }, Tensor({1}, 3.0), 1e-5);
    EXPECT_LT(err, 1e-9);
}

TEST(FiniteDiff, ThreeLayerMlp) {
    const std::vector<Tensor> params = {random_tensor({5, 6}, 11), random_tensor({6}, 12), random_tensor({6, 6}, 13), random_tensor({6}, 14),
                                        random_tensor({6, 3}, 15), random_tensor({3}, 16)};
    const Tensor x = random_tensor({4, 5}, 17);
    const Tensor target = softmax_rows(random_tensor({4, 3}, 18, -2.0, 2.0));
    const double err = finite_diff_check(
        [&](Graph& g, std::span<const Var> p) {
            Var h = tanh(add(matmul(g.constant(x), p[0]), p[1]));
            h = relu(add(matmul(h, p[2]), p[3]));
            return soft_cross_entropy(add(matmul(h, p[4]), p[5]), target);
        },
        params, 1e-5);
    EXPECT_LT(err, 1e-4);
}

// Every differentiable op composed once, checked against central differences.
TEST(FiniteDiff, OpCoverage) {
    const Tensor x0 = random_tensor({2, 3, 4}, 21, 0.2, 1.0);
    const Tensor s0 = random_tensor({2, 3}, 22);
    const Tensor img = random_tensor({2, 4, 4}, 23);
    const Tensor tok = random_tensor({4}, 24);
    const double err = finite_diff_check(
        [&](Graph&, std::span<const Var> p) {
            const Var& x = p[0];
            Var a = layer_norm(x, 1e-6);
            Var b = softmax_lastdim(scale(a, 0.7));
            Var c = log_softmax_lastdim(shift(x, 0.3));
            Var d = scale_rows(log(x), p[1]);
            Var e = batch_matmul(b, x, true);
            Var f = concat_last({slice_last(c, 0, 2), slice_last(d, 2, 2)});
            Var h = mean_over_axis(neg(f), 1);
            Var t = select_last(tanh(x), 1);
            Var pa = patchify(p[2], 2);
            Var pt = prepend_token(slice_last(pa, 0, 4), p[3]);
            Var tk = take_token(pt, 1);
            return add(add(add(sum(mul(h, h)), sum(e)), sum(mul(t, t))), add(sum(mul(pt, pt)), sum(tk)));
        },
        {x0, s0, img, tok}, 1e-6);
    EXPECT_LT(err, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParams) {
    Tensor p = random_tensor({3}, 1);
    const Tensor before = p;
    AdamState st;
    st.lr = 0.1;
    Tensor* ps[] = {&p};
    const Tensor gs[] = {Tensor({3})};
    adam_step(ps, gs, st);
    EXPECT_EQ(p, before);
    EXPECT_EQ(st.t, 1u);
}

TEST(Adam, FirstStepMovesByLr) {
    Tensor p({1}, 0.0);
    AdamState st;
    st.lr = 0.1;
    Tensor* ps[] = {&p};
    const Tensor gs[] = {Tensor({1}, 1.0)};
    adam_step(ps, gs, st);
    // m_hat = 1, v_hat = 1: step = lr / (1 + eps)
    EXPECT_NEAR(p[0], -0.1 / (1.0 + st.eps), 1e-15);
}

TEST(Adam, MinimizesQuadratic) {
    Tensor p({1}, 1.0);
    AdamState st;
    st.lr = 1e-2;
    Tensor* ps[] = {&p};
    for (int i = 0; i < 100; ++i) {
        const Tensor gs[] = {Tensor({1}, 2.0 * p[0])};
        adam_step(ps, gs, st);
    }
    EXPECT_LT(std::abs(p[0]), 0.5);
}

TEST(Rng, DeterministicAndSeedSensitive) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const double va = a.normal();
        EXPECT_EQ(va, b.normal());
        if (i == 0) {
            EXPECT_NE(va, c.normal());
        }
    }
    EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
    EXPECT_NE(hash_name("a"), hash_name("b"));
}
