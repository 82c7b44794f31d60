#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moase/adam.hpp"
#include "moase/augment.hpp"
#include "moase/backbone.hpp"
#include "moase/domains.hpp"

namespace moase {

struct AdaptConfig {
    double lr = 1e-4;
    double alpha = 0.999;  // EMA weight
    double mu = 1.0;       // proximal coefficient
    std::size_t batch = 8;
    AugmentationSet augs = AugmentationSet::desk();

    void validate() const {
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("adapt.lr must be >= 0");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("adapt.alpha must lie in [0, 1]");
        if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("adapt.mu must be >= 0");
        if (batch == 0) throw ConfigError("adapt.batch must be >= 1");
        augs.validate();
    }
};

/// Teacher/student pair. Frozen backbone parameters are identical in both
/// and never touched; only the adapter (trainable view) differs.
struct AdaptState {
    ModelParams teacher;
    ModelParams student;
    double alpha = 0.999;
    double mu = 1.0;
    AdamState adam;
    std::size_t t = 0;
};

inline AdaptState make_adapt_state(const ModelParams& source, const AdaptConfig& cfg) {
    AdaptState s;
    s.teacher = source;
    s.student = source;
    s.alpha = cfg.alpha;
    s.mu = cfg.mu;
    s.adam.lr = cfg.lr;
    s.adam.beta1 = 0.9;
    s.adam.beta2 = 0.99;
    return s;
}

// ---------------------------------------------------------------------------

struct PseudoLabel {
    Tensor probs;    // [b, C], mean over views of softmax(teacher logits)
    Tensor feature;  // [b, d], teacher class-token feature of the identity view
};

inline Tensor softmax_rows(const Tensor& logits) {
    Tensor out = logits;
    const std::size_t c = logits.shape().back(), rows = logits.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data().data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += row[j] = std::exp(row[j] - mx);
        for (std::size_t j = 0; j < c; ++j) row[j] /= z;
    }
    return out;
}

/// Views are evaluated in set order and summed in that order, so the result
/// is reproducible. No graph gradient is ever requested for the teacher.
inline PseudoLabel pseudo_label(const ModelParams& teacher, const Tensor& images, const AugmentationSet& augs, const BackboneConfig& cfg,
                                const MoaseConfig& moase, std::uint64_t jitter_seed = 0) {
    if (augs.views.empty()) throw ConfigError("pseudo_label needs a nonempty augmentation set");
    PseudoLabel out;
    Rng rng(jitter_seed);
    for (const Augmentation& a : augs.views) {
        const Prediction p = predict(teacher, augment(images, a, rng), cfg, moase);
        const Tensor probs = softmax_rows(p.logits);
        if (out.probs.empty()) out.probs = Tensor(probs.shape());
        for (std::size_t i = 0; i < probs.size(); ++i) out.probs[i] += probs[i];
        if (a.identity() && out.feature.empty()) out.feature = p.feature;
    }
    const double inv = 1.0 / static_cast<double>(augs.views.size());
    for (double& v : out.probs.data()) v *= inv;
    if (out.feature.empty()) out.feature = predict(teacher, images, cfg, moase).feature;
    return out;
}

/// Mean soft cross-entropy of student logits against probability rows p.
inline Var consistency_loss(const Var& student_logits, const Tensor& p) {
    if (p.rank() != 2) throw ShapeError("consistency_loss expects p as [b, C]");
    const std::size_t c = p.dim(1);
    for (std::size_t r = 0; r < p.dim(0); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (p[r * c + j] < 0.0) throw ValidationError("pseudo-label row " + std::to_string(r) + " has a negative entry");
            s += p[r * c + j];
        }
        if (std::abs(s - 1.0) > 1e-6) throw ValidationError("pseudo-label row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
    return soft_cross_entropy(student_logits, p);
}

/// (mu/2) * sum over expert parameters of ||student - teacher||^2. Gates are
/// not part of the sum.
inline Var hp_loss(ModelWeights<Var>& student, const ModelParams& teacher, double mu) {
    std::vector<Var> terms;
    visit_experts(
        [&](const std::string&, Var& s, const Tensor& t) {
            Tensor neg = t;
            for (double& v : neg.data()) v = -v;
            const Var d = add(s, s.graph->constant(neg));
            terms.push_back(sum(mul(d, d)));
        },
        student, teacher);
    if (terms.empty()) throw ShapeError("hp_loss: model has no experts");
    Var total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return scale(total, 0.5 * mu);
}

/// theta_T <- alpha * theta_T + (1 - alpha) * theta_S over the adapter.
/// Written as an increment so a teacher equal to its student stays bit-identical.
inline void ema_update(AdaptState& s) {
    const double w = 1.0 - s.alpha;
    visit_adapters(
        [w](const std::string&, Tensor& t, const Tensor& st) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] += w * (st[i] - t[i]);
        },
        s.teacher, s.student);
}

struct StepResult {
    Tensor prediction;  // [b, C]
    Tensor feature;     // [b, d]
    Tensor student;     // [b, C] student logits before the update; empty without an update
    double consistency = 0.0;
    double hp = 0.0;
    double loss = 0.0;
};

/// One online step: predict with the teacher, then update the student on the
/// un-augmented batch, then move the teacher. Labels are never seen here.
inline StepResult adapt_step(AdaptState& s, const Tensor& images, const AugmentationSet& augs, const BackboneConfig& cfg, const MoaseConfig& moase,
                             bool update = true, std::uint64_t jitter_seed = 0) {
    StepResult r;
    PseudoLabel pl = pseudo_label(s.teacher, images, augs, cfg, moase, jitter_seed);
    r.prediction = std::move(pl.probs);
    r.feature = std::move(pl.feature);
    if (!update || !moase.enabled() || !s.student.has_adapters()) return r;

    Graph g;
    ModelWeights<Var> w = bind_model(g, s.student, BindMode::adapters);
    const EncodeResult enc = encode(g.constant(images), w, cfg, moase);
    r.student = enc.logits.value();
    Var loss = consistency_loss(enc.logits, r.prediction);
    r.consistency = loss.value().item();
    if (moase.use_hp) {
        const Var hp = hp_loss(w, s.teacher, s.mu);
        r.hp = hp.value().item();
        loss = add(loss, hp);
    }
    r.loss = loss.value().item();
    const GradientMap grads = g.backward(loss);

    TrainableView view = freeze_partition(s.student);
    std::vector<Tensor> gs;
    for (const Var& v : trainable_vars(w)) gs.push_back(grads.at(v));
    adam_step(view.tensors, gs, s.adam);
    ++s.t;
    ema_update(s);
    return r;
}

// ---------------------------------------------------------------------------

struct BatchRecord {
    std::size_t segment = 0;
    std::size_t domain = 0;
    std::size_t round = 0;
    std::size_t batch = 0;
    std::string kind;
    std::size_t samples = 0;
    std::size_t errors = 0;
    std::size_t student_errors = 0;  // diagnostic; equals errors' count basis, 0 when frozen
    double consistency = 0.0;
    double hp = 0.0;
    double loss = 0.0;
};

struct SegmentResult {
    std::size_t domain = 0;
    std::size_t round = 0;
    std::string kind;
    int severity = 0;
    std::size_t samples = 0;
    std::size_t errors = 0;
    std::size_t student_errors = 0;
    Tensor features;                     // [samples, d], teacher features
    std::vector<std::uint32_t> labels;

    double error_pct() const { return samples ? 100.0 * static_cast<double>(errors) / static_cast<double>(samples) : 0.0; }
};

struct StreamResult {
    std::vector<BatchRecord> batches;
    std::vector<SegmentResult> segments;

    double mean_error() const {
        if (segments.empty()) return 0.0;
        double s = 0.0;
        for (const auto& seg : segments) s += seg.error_pct();
        return s / static_cast<double>(segments.size());
    }

    /// Mean over the segments of one round.
    double round_error(std::size_t round) const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& seg : segments) {
            if (seg.round == round) {
                s += seg.error_pct();
                ++n;
            }
        }
        if (n == 0) throw ValidationError("no segments in round " + std::to_string(round));
        return s / static_cast<double>(n);
    }
};

struct StreamOptions {
    BackboneConfig backbone;
    MoaseConfig moase;
    AdaptConfig adapt;
    std::uint64_t seed = 1;
    bool frozen = false;  // baseline: same engine, no updates
    std::function<void(std::size_t segment, const AdaptState&)> on_segment_end;
};

/// Online CTTA over every segment of the stream. The prediction scored for a
/// batch is produced before that batch updates the model.
inline StreamResult run_stream(const ModelParams& source, const DomainStream& stream, const StreamOptions& opt) {
    if (stream.domains.empty() || stream.rounds == 0) throw ConfigError("run_stream needs a nonempty stream");
    opt.backbone.validate();
    opt.moase.validate();
    opt.adapt.validate();
    ModelParams init = source;
    attach_adapters(init, opt.moase, opt.seed);
    AdaptState state = make_adapt_state(init, opt.adapt);

    StreamResult res;
    for (std::size_t seg = 0; seg < stream.segments(); ++seg) {
        const Dataset& ds = stream.segment(seg);
        SegmentResult sr;
        sr.domain = seg % stream.domains.size();
        sr.round = seg / stream.domains.size();
        sr.kind = ds.kind;
        sr.severity = ds.severity;
        std::vector<double> feats;
        for (std::size_t start = 0, bi = 0; start < ds.size(); start += opt.adapt.batch, ++bi) {
            const std::size_t end = std::min(ds.size(), start + opt.adapt.batch);
            StepResult step;
            try {
                step = adapt_step(state, batch_images(ds, start, end), opt.adapt.augs, opt.backbone, opt.moase, !opt.frozen,
                                  mix_seed(opt.seed, mix_seed(seg, bi)));
            } catch (const NumericError& e) {
                throw NumericError("segment " + std::to_string(seg) + " (" + ds.kind + ") batch " + std::to_string(bi) + ": " + e.what());
            }
            const auto pred = argmax_rows(step.prediction);
            BatchRecord br{seg, sr.domain, sr.round, bi, ds.kind, end - start, 0, 0, step.consistency, step.hp, step.loss};
            const auto spred = step.student.empty() ? pred : argmax_rows(step.student);
            for (std::size_t i = start; i < end; ++i) {
                br.errors += pred[i - start] != ds.samples[i].label;
                br.student_errors += spred[i - start] != ds.samples[i].label;
                sr.labels.push_back(ds.samples[i].label);
            }
            sr.samples += br.samples;
            sr.errors += br.errors;
            sr.student_errors += br.student_errors;
            feats.insert(feats.end(), step.feature.data().begin(), step.feature.data().end());
            res.batches.push_back(std::move(br));
        }
        sr.features = Tensor({sr.samples, opt.backbone.dim}, std::move(feats));
        res.segments.push_back(std::move(sr));
        if (opt.on_segment_end) opt.on_segment_end(seg, state);
    }
    return res;
}

/// Frozen-source baseline on the identical stream: the same engine with
/// updates disabled. The zero-initialized adapter contributes nothing, so
/// it is dropped to save work.
inline StreamResult run_baseline(const ModelParams& source, const DomainStream& stream, StreamOptions opt) {
    opt.frozen = true;
    opt.moase.experts = 0;
    return run_stream(source, stream, opt);
}

}  // namespace moase
