#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace moase;
using testing_support::random_tensor;

namespace {

AdapterWeights<Tensor> random_adapter(std::size_t E, std::size_t d, std::size_t h, std::uint64_t seed) {
    MoaseConfig cfg;
    cfg.experts = E;
    cfg.hidden = h;
    Rng rng(seed);
    AdapterWeights<Tensor> w = init_adapter(cfg, d, rng);
    visit_adapter("", [&](const std::string&, Tensor& t) {
        for (double& v : t.data()) v = rng.uniform(-0.8, 0.8);
    }, w);
    return w;
}

// Indices of the k kept entries of v (stable order on ties).
std::vector<bool> keep(const double* v, std::size_t n, std::size_t k, bool largest) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return largest ? v[a] > v[b] : v[a] < v[b]; });
    std::vector<bool> out(n, false);
    for (std::size_t i = 0; i < k; ++i) out[idx[i]] = true;
    return out;
}

// Straight-line MoASE: plain loops, no graph, token-axis selection.
Tensor moase_by_hand(const Tensor& F, const AdapterWeights<Tensor>& w, std::size_t E, std::size_t h, double eta) {
    const std::size_t b = F.dim(0), n = F.dim(1), d = F.dim(2);
    const std::vector<double> q = E == 4 ? std::vector<double>{0.25, 0.5, 0.25, 0.5} : std::vector<double>{0.5, 0.5};
    const std::vector<bool> largest = E == 4 ? std::vector<bool>{true, true, false, false} : std::vector<bool>{true, false};
    Tensor y({b, n, d});
    for (std::size_t s = 0; s < b; ++s) {
        const double* f = &F.data()[s * n * d];
        // DAG on the bottom half of F
        const std::vector<bool> low = keep(f, n * d, n * d / 2, false);
        std::vector<double> G(n * E);
        for (std::size_t t = 0; t < n; ++t) {
            double mx = -1e300;
            for (std::size_t e = 0; e < E; ++e) {
                double z = w.gates.dag_b[e];
                for (std::size_t j = 0; j < d; ++j) z += (low[t * d + j] ? f[t * d + j] : 0.0) * w.gates.dag_a[e * d + j];
                G[t * E + e] = z;
                mx = std::max(mx, z);
            }
            double sum = 0.0;
            for (std::size_t e = 0; e < E; ++e) sum += G[t * E + e] = std::exp(G[t * E + e] - mx);
            for (std::size_t e = 0; e < E; ++e) G[t * E + e] /= sum;
        }
        // ASG on the token mean
        std::vector<double> T(E);
        for (std::size_t e = 0; e < E; ++e) {
            double z = w.gates.asg_b[e];
            for (std::size_t j = 0; j < d; ++j) {
                double m = 0.0;
                for (std::size_t t = 0; t < n; ++t) m += f[t * d + j];
                z += m / static_cast<double>(n) * w.gates.asg_a[e * d + j];
            }
            T[e] = std::tanh(z);
        }
        for (std::size_t e = 0; e < E; ++e) {
            const auto& ex = w.experts[e];
            std::vector<double> hid(n * h);
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t k = 0; k < h; ++k) {
                    double z = ex.b_down[k];
                    for (std::size_t j = 0; j < d; ++j) z += f[t * d + j] * ex.w_down[j * h + k];
                    hid[t * h + k] = std::max(z, 0.0);
                }
            const double total = static_cast<double>(n * h);
            const double frac = std::clamp(q[e] + eta * T[e], 1.0 / total, 1.0);
            const std::size_t K = static_cast<std::size_t>(std::floor(total * frac));
            const std::vector<bool> kept = keep(hid.data(), n * h, K, largest[e]);
            for (std::size_t i = 0; i < n * h; ++i) hid[i] = kept[i] ? hid[i] * (1.0 + eta * T[e]) : 0.0;
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t j = 0; j < d; ++j) {
                    double z = ex.b_up[j];
                    for (std::size_t k = 0; k < h; ++k) z += hid[t * h + k] * ex.w_up[k * d + j];
                    y[(s * n + t) * d + j] += G[t * E + e] * z;
                }
        }
    }
    return y;
}

}  // namespace

TEST(Schedule, DefaultQSchedule) {
    const auto s4 = default_q_schedule(4);
    ASSERT_EQ(s4.size(), 4u);
    const double q4[] = {0.25, 0.5, 0.25, 0.5};
    const bool l4[] = {true, true, false, false};
    for (int i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(s4[i].q, q4[i]);
        EXPECT_EQ(s4[i].largest, l4[i]);
    }
    const auto s2 = default_q_schedule(2);
    EXPECT_DOUBLE_EQ(s2[0].q, 0.5);
    EXPECT_TRUE(s2[0].largest);
    EXPECT_DOUBLE_EQ(s2[1].q, 0.5);
    EXPECT_FALSE(s2[1].largest);
    for (std::size_t E : {2, 4, 8, 16}) {
        const auto s = default_q_schedule(E);
        EXPECT_EQ(std::count_if(s.begin(), s.end(), [](const SddSpec& x) { return x.largest; }), static_cast<long>(E / 2));
        for (const auto& x : s) EXPECT_TRUE(x.q > 0.0 && x.q <= 0.5);
    }
    EXPECT_THROW(default_q_schedule(3), ConfigError);
}

TEST(KHat, Formula) {
    EXPECT_EQ(k_hat(0.5, 0.1, 1.0 - 1e-12, 100), 60u);
    EXPECT_EQ(k_hat(0.5, 0.1, 0.0, 100), 50u);
    EXPECT_EQ(k_hat(0.5, 0.2, 0.0, 100), 50u);
    EXPECT_EQ(k_hat(0.01, 0.1, -1.0, 40), 1u);
    EXPECT_EQ(k_hat(0.95, 0.1, 1.0, 40), 40u);
}

TEST(Expert, ZeroUpProjectionOutputsZero) {
    Rng rng(1);
    const AdapterWeights<Tensor> w = init_adapter(testing_support::tiny_moase(), 8, rng);
    Graph g;
    const MoaseOutput out = moase_forward(g.constant(random_tensor({2, 5, 8}, 3)), bind_adapter(g, w, false), testing_support::tiny_moase());
    for (double v : out.y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Expert, IdentitySelectionIsPlainBottleneck) {
    const std::size_t n = 3, d = 4;
    AdapterWeights<Tensor> w = random_adapter(2, d, 1, 5);
    Graph g;
    const AdapterWeights<Var> v = bind_adapter(g, w, false);
    const Tensor F = random_tensor({1, n, d}, 6);
    const std::vector<std::size_t> k = {n};
    const ExpertResult r = expert_forward(g.constant(F), v.experts[0], {0.5, true, SddAxis::token}, k, nullptr, 0.1, true);
    const auto& e = w.experts[0];
    for (std::size_t t = 0; t < n; ++t) {
        double z = e.b_down[0];
        for (std::size_t j = 0; j < d; ++j) z += F[t * d + j] * e.w_down[j];
        z = std::max(z, 0.0);
        for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(r.out.value()[t * d + j], z * e.w_up[j] + e.b_up[j], 1e-14);
    }
}

TEST(Expert, EtaIrrelevantWhenOffsetIsZero) {
    AdapterWeights<Tensor> w = random_adapter(2, 4, 3, 8);
    Graph g;
    const AdapterWeights<Var> v = bind_adapter(g, w, false);
    const Var F = g.constant(random_tensor({2, 3, 4}, 9));
    const Var t = g.constant(Tensor({2}));
    const SddSpec spec{0.5, true, SddAxis::token};
    const std::vector<double> tz(2, 0.0);
    const auto k1 = expert_k_hat(spec, 0.1, tz, 3, 3), k2 = expert_k_hat(spec, 0.2, tz, 3, 3);
    EXPECT_EQ(k1, k2);
    EXPECT_EQ(expert_forward(F, v.experts[0], spec, k1, &t, 0.1, true).out.value(), expert_forward(F, v.experts[0], spec, k2, &t, 0.2, true).out.value());
}

TEST(Gates, ZeroDagIsUniform) {
    AdapterWeights<Tensor> w = random_adapter(4, 6, 2, 10);
    w.gates.dag_a = Tensor({4, 6});
    w.gates.dag_b = Tensor({4});
    Graph g;
    const Var G = dag_forward(g.constant(random_tensor({2, 3, 6}, 11)), bind_adapter(g, w, false).gates, true);
    for (double v : G.value().data()) EXPECT_EQ(v, 0.25);
}

TEST(Gates, HandSoftmax) {
    AdapterWeights<Tensor> w = random_adapter(2, 1, 1, 12);
    w.gates.dag_a = Tensor({2, 1});
    w.gates.dag_b = Tensor({2}, {std::log(3.0), 0.0});
    Graph g;
    const Var G = dag_forward(g.constant(Tensor({1, 1, 1}, 0.7)), bind_adapter(g, w, false).gates, false);
    EXPECT_NEAR(G.value()[0], 0.75, 1e-15);
    EXPECT_NEAR(G.value()[1], 0.25, 1e-15);
}

TEST(Gates, RowsNormalizedAndOffsetsBounded) {
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        AdapterWeights<Tensor> w = random_adapter(8, 6, 2, seed);
        for (double& v : w.gates.dag_a.data()) v *= 20.0;
        for (double& v : w.gates.asg_a.data()) v *= 3.0;
        Graph g;
        const auto v = bind_adapter(g, w, false);
        const Var F = g.constant(random_tensor({3, 4, 6}, seed + 99, -3.0, 3.0));
        const Tensor& G = dag_forward(F, v.gates, true).value();
        for (std::size_t r = 0; r < 12; ++r) {
            double s = 0.0;
            for (std::size_t e = 0; e < 8; ++e) {
                ASSERT_GE(G[r * 8 + e], 0.0);
                s += G[r * 8 + e];
            }
            ASSERT_NEAR(s, 1.0, 1e-9);
        }
        for (double t : asg_forward(F, v.gates).value().data()) ASSERT_TRUE(t > -1.0 && t < 1.0);
    }
}

TEST(Gates, ZeroAsgGivesStaticSchedule) {
    AdapterWeights<Tensor> w = random_adapter(4, 6, 5, 13);
    w.gates.asg_a = Tensor({4, 6});
    w.gates.asg_b = Tensor({4});
    Graph g;
    const MoaseOutput out = moase_forward(g.constant(random_tensor({2, 3, 6}, 14)), bind_adapter(g, w, false), testing_support::tiny_moase(4, 5));
    for (double t : out.T.value().data()) EXPECT_EQ(t, 0.0);
    const std::size_t expect[] = {3, 7, 3, 7};  // floor(15 q)
    for (std::size_t e = 0; e < 4; ++e)
        for (std::size_t k : out.k[e]) EXPECT_EQ(k, expect[e]);
}

TEST(Moase, IdenticalExpertsIgnoreRouting) {
    AdapterWeights<Tensor> w = random_adapter(2, 4, 3, 15);
    w.experts[1] = w.experts[0];
    MoaseConfig cfg = testing_support::tiny_moase(2, 3);
    cfg.use_asg = false;
    cfg.schedule = {{0.5, true, SddAxis::token}, {0.5, true, SddAxis::token}};
    const Tensor F = random_tensor({2, 3, 4}, 16);
    Graph g1, g2;
    const Tensor y1 = moase_forward(g1.constant(F), bind_adapter(g1, w, false), cfg).y.value();
    for (double& v : w.gates.dag_a.data()) v = -v * 5.0;
    const Tensor y2 = moase_forward(g2.constant(F), bind_adapter(g2, w, false), cfg).y.value();
    EXPECT_LT(max_abs_diff(y1, y2), 1e-12);
}

TEST(Moase, MatchesStraightLineImplementation) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        for (std::size_t E : {2, 4}) {
            const AdapterWeights<Tensor> w = random_adapter(E, 6, 3, seed * 31 + E);
            const Tensor F = random_tensor({3, 5, 6}, seed * 17);
            Graph g;
            const MoaseOutput out = moase_forward(g.constant(F), bind_adapter(g, w, false), testing_support::tiny_moase(E, 3));
            EXPECT_LT(max_abs_diff(out.y.value(), moase_by_hand(F, w, E, 3, 0.1)), 1e-12) << "seed " << seed << " E " << E;
        }
    }
}

TEST(Moase, ChannelAxisSelectsPerToken) {
    const AdapterWeights<Tensor> w = random_adapter(4, 6, 4, 21);
    MoaseConfig cfg = testing_support::tiny_moase(4, 4);
    cfg.axis = SddAxis::channel;
    Graph g;
    const MoaseOutput out = moase_forward(g.constant(random_tensor({2, 3, 6}, 22)), bind_adapter(g, w, false), cfg);
    for (std::size_t e = 0; e < 4; ++e) {
        ASSERT_EQ(out.k[e].size(), 6u);
        const Tensor& m = out.masks[e];
        for (std::size_t r = 0; r < 6; ++r) {
            double kept = 0.0;
            for (std::size_t j = 0; j < 4; ++j) kept += m[r * 4 + j];
            EXPECT_EQ(kept, static_cast<double>(out.k[e][r]));
        }
    }
}

TEST(Moase, ParamCountClosedForm) {
    EXPECT_EQ(2 * adapter_param_count(4, 32, 8), 4944u);
    EXPECT_THROW(testing_support::tiny_moase(3).validate(), ConfigError);
    EXPECT_NO_THROW(adapter_free().validate());
}

// 2 tokens, E=2: every adapter parameter through DAG, ASG surrogate, SDD and HP.
TEST(Moase, GradientOracleOnToyModel) {
    const std::size_t d = 3, h = 4;
    AdapterWeights<Tensor> w = random_adapter(2, d, h, 40);
    const AdapterWeights<Tensor> teacher = random_adapter(2, d, h, 41);
    std::vector<Tensor> params;
    visit_adapter("", [&](const std::string&, Tensor& t) { params.push_back(t); }, w);
    const Tensor F = random_tensor({2, 2, d}, 42);
    const Tensor target = softmax_rows(random_tensor({2, d}, 43, -1.0, 1.0));
    MoaseConfig cfg = testing_support::tiny_moase(2, h);
    cfg.eta = 0.3;
    const double err = finite_diff_check(
        [&](Graph& g, std::span<const Var> p) {
            AdapterWeights<Var> v;
            v.experts.resize(2);
            std::size_t i = 0;
            visit_adapter("", [&](const std::string&, Var& x) { x = p[i++]; }, v);
            const MoaseOutput out = moase_forward(g.constant(F), v, cfg);
            Var loss = soft_cross_entropy(mean_over_axis(out.y, 1), target);
            std::vector<Var> hp;
            visit_adapter("", [&](const std::string&, Var& s, const Tensor& t) {
                Tensor neg = t;
                for (double& x : neg.data()) x = -x;
                const Var diff = add(s, g.constant(neg));
                hp.push_back(sum(mul(diff, diff)));
            }, v, teacher);
            for (const Var& term : hp) loss = add(loss, scale(term, 0.5));
            return loss;
        },
        params, 1e-6);
    EXPECT_LT(err, 1e-4);
}
