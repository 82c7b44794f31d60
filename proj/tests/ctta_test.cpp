#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support.hpp"

using namespace moase;
using testing_support::random_tensor;
using testing_support::tiny_backbone;
using testing_support::tiny_moase;

namespace {

ModelParams adapted_model(const BackboneConfig& cfg, const MoaseConfig& m, std::uint64_t seed, bool randomize = true) {
    ModelParams p = init_model(cfg, seed);
    attach_adapters(p, m, seed);
    if (randomize) testing_support::randomize_adapters(p, seed + 1);
    return p;
}

AugmentationSet identity_only() {
    AugmentationSet a;
    a.views = {Augmentation{}};
    return a;
}

DomainStream random_stream(std::size_t domains, std::size_t per_domain, std::size_t rounds, std::uint64_t seed) {
    StreamSpec spec;
    spec.kinds.assign(corruption_kinds().begin(), corruption_kinds().begin() + static_cast<std::ptrdiff_t>(domains));
    spec.per_domain = per_domain;
    spec.rounds = rounds;
    spec.seed = seed;
    return build_stream(spec);
}

// 16x16 source model trained briefly; shared by the stream-level tests.
const ModelParams& small_source() {
    static const ModelParams p = [] {
        PretrainOptions opt;
        opt.epochs = 8;
        opt.threshold = 0.0;
        opt.seed = 5;
        return pretrain_source(generate_source(3000, 77), {}, BackboneConfig{}, opt).params;
    }();
    return p;
}

}  // namespace

TEST(PseudoLabel, IdentityViewIsTeacherSoftmax) {
    const BackboneConfig cfg = tiny_backbone();
    const ModelParams p = adapted_model(cfg, tiny_moase(), 1);
    const Tensor x = random_tensor({3, 8, 8}, 2, 0.0, 1.0);
    const PseudoLabel pl = pseudo_label(p, x, identity_only(), cfg, tiny_moase());
    const Prediction pr = predict(p, x, cfg, tiny_moase());
    EXPECT_EQ(pl.probs, softmax_rows(pr.logits));
    EXPECT_EQ(pl.feature, pr.feature);
}

TEST(PseudoLabel, DuplicateViewsChangeNothing) {
    const BackboneConfig cfg = tiny_backbone();
    const ModelParams p = adapted_model(cfg, tiny_moase(), 3);
    const Tensor x = random_tensor({2, 8, 8}, 4, 0.0, 1.0);
    AugmentationSet twice;
    twice.views = {Augmentation{}, Augmentation{}};
    const Tensor a = pseudo_label(p, x, identity_only(), cfg, tiny_moase()).probs;
    const Tensor b = pseudo_label(p, x, twice, cfg, tiny_moase()).probs;
    EXPECT_LT(max_abs_diff(a, b), 1e-15);
}

TEST(PseudoLabel, FlipAverageByHand) {
    const BackboneConfig cfg = tiny_backbone();
    const ModelParams p = adapted_model(cfg, tiny_moase(), 5);
    const Tensor x = random_tensor({2, 8, 8}, 6, 0.0, 1.0);
    Tensor flipped = x;
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t c = 0; c < 8; ++c) flipped[(b * 8 + y) * 8 + c] = x[(b * 8 + y) * 8 + 7 - c];
    AugmentationSet augs = identity_only();
    Augmentation f;
    f.flip = true;
    augs.views.push_back(f);
    const Tensor p0 = softmax_rows(predict(p, x, cfg, tiny_moase()).logits);
    const Tensor p1 = softmax_rows(predict(p, flipped, cfg, tiny_moase()).logits);
    ASSERT_GT(max_abs_diff(p0, p1), 1e-6);
    const Tensor got = pseudo_label(p, x, augs, cfg, tiny_moase()).probs;
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], 0.5 * (p0[i] + p1[i]), 1e-15);
}

TEST(Consistency, HandValues) {
    Graph g;
    const Tensor onehot({1, 4}, {0.0, 1.0, 0.0, 0.0});
    EXPECT_NEAR(consistency_loss(g.constant(Tensor({1, 4})), onehot).value().item(), std::log(4.0), 1e-15);

    const Tensor logits = random_tensor({1, 4}, 7, -2.0, 2.0);
    const Tensor p = softmax_rows(logits);
    double entropy = 0.0;
    for (double v : p.data()) entropy -= v * std::log(v);
    EXPECT_NEAR(consistency_loss(g.constant(logits), p).value().item(), entropy, 1e-14);
}

TEST(Consistency, MatchesDirectSummation) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Tensor logits = random_tensor({5, 4}, seed, -3.0, 3.0);
        const Tensor p = softmax_rows(random_tensor({5, 4}, seed + 50, -2.0, 2.0));
        double ref = 0.0;
        for (std::size_t r = 0; r < 5; ++r) {
            double z = 0.0;
            for (std::size_t c = 0; c < 4; ++c) z += std::exp(logits[r * 4 + c]);
            for (std::size_t c = 0; c < 4; ++c) ref -= p[r * 4 + c] * (logits[r * 4 + c] - std::log(z));
        }
        Graph g;
        EXPECT_NEAR(consistency_loss(g.constant(logits), p).value().item(), ref / 5.0, 1e-12);
    }
}

TEST(Consistency, RejectsNonDistributions) {
    Graph g;
    EXPECT_THROW(consistency_loss(g.constant(Tensor({1, 2})), Tensor({1, 2}, {0.7, 0.7})), ValidationError);
    EXPECT_THROW(consistency_loss(g.constant(Tensor({1, 2})), Tensor({1, 2}, {1.5, -0.5})), ValidationError);
}

TEST(Hp, ZeroAtTeacher) {
    const BackboneConfig cfg = tiny_backbone();
    const ModelParams p = adapted_model(cfg, tiny_moase(), 8);
    Graph g;
    ModelWeights<Var> w = bind_model(g, p, BindMode::adapters);
    EXPECT_EQ(hp_loss(w, p, 1.0).value().item(), 0.0);
}

TEST(Hp, ScalarHandValue) {
    Graph g;
    ModelWeights<Var> s;
    ModelParams t;
    s.blocks.resize(1);
    t.blocks.resize(1);
    AdapterWeights<Tensor> at;
    at.experts.push_back({Tensor({1, 1}, 0.0), Tensor({1}), Tensor({1, 1}), Tensor({1})});
    t.blocks[0].adapter = at;
    AdapterWeights<Tensor> as = at;
    as.experts[0].w_down[0] = 2.0;
    s.blocks[0].adapter = bind_adapter(g, as, true);
    EXPECT_DOUBLE_EQ(hp_loss(s, t, 1.0).value().item(), 2.0);
}

TEST(Hp, GradientIsMuTimesDifference) {
    const BackboneConfig cfg = tiny_backbone();
    const ModelParams teacher = adapted_model(cfg, tiny_moase(), 9);
    const ModelParams student = adapted_model(cfg, tiny_moase(), 10);
    for (double mu : {1.0, 0.3}) {
        Graph g;
        ModelWeights<Var> w = bind_model(g, student, BindMode::adapters);
        const GradientMap gm = g.backward(hp_loss(w, teacher, mu));
        visit_experts([&](const std::string& name, const Var& v, const Tensor& s, const Tensor& t) {
            const Tensor& grad = gm.at(v);
            for (std::size_t i = 0; i < grad.size(); ++i) ASSERT_NEAR(grad[i], mu * (s[i] - t[i]), 1e-12) << name;
        }, w, student, teacher);
        // gates are outside the penalty
        visit_gates("", [&](const std::string&, const Var& v) { EXPECT_FALSE(gm.contains(v) && max_abs_diff(gm.at(v), Tensor(v.shape())) > 0.0); },
                    w.blocks[0].adapter->gates);
    }
}

TEST(Hp, FiniteDifferenceCheck) {
    const BackboneConfig cfg = tiny_backbone();
    const ModelParams teacher = adapted_model(cfg, tiny_moase(2, 2), 11);
    const ModelParams student = adapted_model(cfg, tiny_moase(2, 2), 12);
    std::vector<Tensor> params;
    visit_adapters([&](const std::string&, const Tensor& t) { params.push_back(t); }, student);
    const double err = finite_diff_check(
        [&](Graph& g, std::span<const Var> v) {
            ModelWeights<Var> w = bind_model(g, student, BindMode::none);
            std::size_t i = 0;
            visit_adapters([&](const std::string&, Var& slot) { slot = v[i++]; }, w);
            return hp_loss(w, teacher, 1.0);
        },
        params, 1e-5);
    EXPECT_LT(err, 1e-6);
}

TEST(Ema, FixedPointAndScalar) {
    const BackboneConfig cfg = tiny_backbone();
    AdaptState s = make_adapt_state(adapted_model(cfg, tiny_moase(), 13), AdaptConfig{});
    const ModelParams before = s.teacher;
    ema_update(s);
    visit_model([](const std::string&, const Tensor& a, const Tensor& b) { EXPECT_EQ(a, b); }, before, s.teacher);

    visit_adapters([](const std::string&, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 1.0); }, s.teacher);
    visit_adapters([](const std::string&, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); }, s.student);
    ema_update(s);
    visit_adapters([](const std::string&, const Tensor& t) {
        for (double v : t.data()) EXPECT_DOUBLE_EQ(v, 0.999);
    }, s.teacher);
}

TEST(Ema, GeometricDecayTowardConstantStudent) {
    const BackboneConfig cfg = tiny_backbone();
    AdaptState s = make_adapt_state(adapted_model(cfg, tiny_moase(), 14), AdaptConfig{});
    testing_support::randomize_adapters(s.student, 15);
    auto dist = [&] {
        double d = 0.0;
        visit_adapters([&](const std::string&, const Tensor& t, const Tensor& c) {
            for (std::size_t i = 0; i < t.size(); ++i) d += (t[i] - c[i]) * (t[i] - c[i]);
        }, s.teacher, s.student);
        return std::sqrt(d);
    };
    const double d0 = dist();
    for (int t = 1; t <= 500; ++t) {
        ema_update(s);
        ASSERT_NEAR(dist(), std::pow(0.999, t) * d0, 1e-12 * d0) << "step " << t;
    }
}

TEST(Adapt, ZeroLrMatchesFrozenTeacher) {
    const BackboneConfig cfg = tiny_backbone();
    const ModelParams source = adapted_model(cfg, tiny_moase(), 16);
    AdaptConfig ac;
    ac.lr = 0.0;
    AdaptState s = make_adapt_state(source, ac);
    for (int i = 0; i < 5; ++i) {
        const Tensor x = random_tensor({4, 8, 8}, 200 + i, 0.0, 1.0);
        const StepResult r = adapt_step(s, x, ac.augs, cfg, tiny_moase());
        EXPECT_EQ(r.prediction, pseudo_label(source, x, ac.augs, cfg, tiny_moase()).probs);
    }
    visit_model([](const std::string& name, const Tensor& a, const Tensor& b) { EXPECT_EQ(a, b) << name; }, source, s.teacher);
}

TEST(Adapt, LargeMuKeepsStudentCloser) {
    const BackboneConfig cfg = tiny_backbone();
    ModelParams source = adapted_model(cfg, tiny_moase(), 17);
    auto gap_after_step = [&](double mu) {
        AdaptConfig ac;
        ac.lr = 1e-2;
        ac.mu = mu;
        AdaptState s = make_adapt_state(source, ac);
        testing_support::randomize_adapters(s.student, 99);  // student already away from teacher
        const Tensor x = random_tensor({4, 8, 8}, 19, 0.0, 1.0);
        adapt_step(s, x, identity_only(), cfg, tiny_moase());
        double d = 0.0;
        visit_experts([&](const std::string&, const Tensor& a, const Tensor& b) {
            for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
        }, s.student, s.teacher);
        return std::sqrt(d);
    };
    EXPECT_LT(gap_after_step(1e6), gap_after_step(0.0));
}

TEST(Stream, RoundsVisitSegmentsInOrder) {
    const BackboneConfig cfg = tiny_backbone();
    DomainStream st = random_stream(4, 8, 3, 20);
    for (auto& d : st.domains) {
        d.side = 8;
        for (auto& s : d.samples) s.image.resize(64);
    }
    StreamOptions o;
    o.backbone = cfg;
    o.moase = tiny_moase();
    const StreamResult r = run_stream(init_model(cfg, 21), st, o);
    ASSERT_EQ(r.segments.size(), 12u);
    for (std::size_t i = 0; i < 12; ++i) {
        EXPECT_EQ(r.segments[i].kind, corruption_kinds()[i % 4]);
        EXPECT_EQ(r.segments[i].round, i / 4);
    }
}

TEST(Stream, DeterministicAndZeroLrEqualsBaseline) {
    const DomainStream st = random_stream(3, 24, 1, 22);
    StreamOptions o;
    o.moase = MoaseConfig{};
    o.adapt.lr = 0.0;
    const StreamResult a = run_stream(small_source(), st, o), b = run_stream(small_source(), st, o);
    const StreamResult base = run_baseline(small_source(), st, o);
    ASSERT_EQ(a.batches.size(), base.batches.size());
    for (std::size_t i = 0; i < a.batches.size(); ++i) {
        EXPECT_EQ(a.batches[i].errors, b.batches[i].errors);
        EXPECT_EQ(a.batches[i].loss, b.batches[i].loss);
        EXPECT_EQ(a.batches[i].errors, base.batches[i].errors);
    }
    for (std::size_t i = 0; i < a.segments.size(); ++i) EXPECT_EQ(a.segments[i].features, base.segments[i].features);
}

// The reported prediction is the augmentation-averaged teacher, so the
// reference is the frozen source scored the same way.
TEST(Stream, CleanDomainErrorNearSourceError) {
    DomainStream st;
    st.domains = {generate_source(400, 23)};
    StreamOptions o;
    o.moase = MoaseConfig{};
    const double source_error = run_baseline(small_source(), st, o).mean_error();
    EXPECT_NEAR(run_stream(small_source(), st, o).mean_error(), source_error, 2.0);
    const double plain = 100.0 * (1.0 - accuracy(small_source(), st.domains[0], BackboneConfig{}, adapter_free()));
    EXPECT_LE(source_error, plain + 2.0);
}

TEST(Stream, NumericFailureNamesTheSegment) {
    const BackboneConfig cfg = tiny_backbone();
    ModelParams p = init_model(cfg, 24);
    p.head_w[0] = std::numeric_limits<double>::infinity();
    DomainStream st = random_stream(1, 8, 1, 25);
    for (auto& s : st.domains[0].samples) s.image.assign(64, 1.0);
    st.domains[0].side = 8;
    StreamOptions o;
    o.backbone = cfg;
    o.moase = tiny_moase();
    try {
        run_stream(p, st, o);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("segment 0"), std::string::npos) << e.what();
    }
}
