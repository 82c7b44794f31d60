#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moase/adam.hpp"
#include "moase/adapter.hpp"
#include "moase/augment.hpp"
#include "moase/domains.hpp"
#include "moase/graph.hpp"
#include "moase/rng.hpp"

namespace moase {

struct BackboneConfig {
    std::size_t image = 16;
    std::size_t patch = 4;
    std::size_t dim = 32;
    std::size_t heads = 2;
    std::size_t depth = 2;
    std::size_t classes = 4;
    std::size_t mlp_hidden = 64;
    double adapter_scale = 0.1;

    std::size_t patches() const { return (image / patch) * (image / patch); }
    std::size_t tokens() const { return patches() + 1; }

    void validate() const {
        if (image == 0 || patch == 0 || image % patch != 0) throw ConfigError("backbone.image must be a positive multiple of backbone.patch");
        if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("backbone.dim must be a positive multiple of backbone.heads");
        if (depth == 0 || classes < 2 || mlp_hidden == 0) throw ConfigError("backbone.depth, classes and mlp_hidden must be positive (classes >= 2)");
    }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

template <class T>
struct BlockWeights {
    T ln1_g, ln1_b;
    T wq, bq, wk, bk, wv, bv, wo, bo;
    T ln2_g, ln2_b;
    T w1, b1, w2, b2;
    std::optional<AdapterWeights<T>> adapter;
};

template <class T>
struct ModelWeights {
    T patch_w, patch_b, cls, pos;
    std::vector<BlockWeights<T>> blocks;
    T lnf_g, lnf_b, head_w, head_b;

    bool has_adapters() const { return !blocks.empty() && blocks.front().adapter.has_value(); }
};

using ModelParams = ModelWeights<Tensor>;

/// Visits the source-model parameters (everything except adapters).
template <class F, class First, class... Rest>
void visit_frozen(F&& f, First& first, Rest&... rest) {
    if (((rest.blocks.size() != first.blocks.size()) || ...)) throw ShapeError("models differ in depth");
    f("patch_w", first.patch_w, rest.patch_w...);
    f("patch_b", first.patch_b, rest.patch_b...);
    f("cls", first.cls, rest.cls...);
    f("pos", first.pos, rest.pos...);
    for (std::size_t i = 0; i < first.blocks.size(); ++i) {
        const std::string p = "block." + std::to_string(i) + ".";
        auto& b = first.blocks[i];
        f(p + "ln1_g", b.ln1_g, rest.blocks[i].ln1_g...);
        f(p + "ln1_b", b.ln1_b, rest.blocks[i].ln1_b...);
        f(p + "wq", b.wq, rest.blocks[i].wq...);
        f(p + "bq", b.bq, rest.blocks[i].bq...);
        f(p + "wk", b.wk, rest.blocks[i].wk...);
        f(p + "bk", b.bk, rest.blocks[i].bk...);
        f(p + "wv", b.wv, rest.blocks[i].wv...);
        f(p + "bv", b.bv, rest.blocks[i].bv...);
        f(p + "wo", b.wo, rest.blocks[i].wo...);
        f(p + "bo", b.bo, rest.blocks[i].bo...);
        f(p + "ln2_g", b.ln2_g, rest.blocks[i].ln2_g...);
        f(p + "ln2_b", b.ln2_b, rest.blocks[i].ln2_b...);
        f(p + "w1", b.w1, rest.blocks[i].w1...);
        f(p + "b1", b.b1, rest.blocks[i].b1...);
        f(p + "w2", b.w2, rest.blocks[i].w2...);
        f(p + "b2", b.b2, rest.blocks[i].b2...);
    }
    f("lnf_g", first.lnf_g, rest.lnf_g...);
    f("lnf_b", first.lnf_b, rest.lnf_b...);
    f("head_w", first.head_w, rest.head_w...);
    f("head_b", first.head_b, rest.head_b...);
}

/// Visits every adapter parameter (experts and gates of every block).
template <class F, class First, class... Rest>
void visit_adapters(F&& f, First& first, Rest&... rest) {
    for (std::size_t i = 0; i < first.blocks.size(); ++i) {
        if (!first.blocks[i].adapter) continue;
        if (((!rest.blocks[i].adapter) || ...)) throw ShapeError("models differ in adapter layout");
        visit_adapter("block." + std::to_string(i) + ".adapter.", f, *first.blocks[i].adapter, *rest.blocks[i].adapter...);
    }
}

/// Expert parameters only (the proximal term's domain).
template <class F, class First, class... Rest>
void visit_experts(F&& f, First& first, Rest&... rest) {
    for (std::size_t i = 0; i < first.blocks.size(); ++i) {
        if (!first.blocks[i].adapter) continue;
        if (((!rest.blocks[i].adapter) || ...)) throw ShapeError("models differ in adapter layout");
        const auto& experts = first.blocks[i].adapter->experts;
        if (((rest.blocks[i].adapter->experts.size() != experts.size()) || ...)) throw ShapeError("models differ in expert count");
        for (std::size_t e = 0; e < experts.size(); ++e) {
            visit_expert("block." + std::to_string(i) + ".adapter.expert." + std::to_string(e) + ".", f, first.blocks[i].adapter->experts[e],
                         rest.blocks[i].adapter->experts[e]...);
        }
    }
}

template <class F, class... M>
void visit_model(F&& f, M&... m) {
    visit_frozen(f, m...);
    visit_adapters(f, m...);
}

inline std::size_t param_count(const ModelParams& p, bool adapters_only) {
    std::size_t n = 0;
    auto count = [&n](const std::string&, const Tensor& t) { n += t.size(); };
    if (!adapters_only) visit_frozen(count, p);
    visit_adapters(count, p);
    return n;
}

// ---------------------------------------------------------------------------

/// Replaces every block's adapter with a freshly initialized one (or removes
/// them when moase.experts == 0). Draws from its own stream so the backbone
/// initialization never depends on adapter settings.
inline void attach_adapters(ModelParams& p, const MoaseConfig& moase, std::uint64_t seed) {
    moase.validate();
    Rng rng(mix_seed(seed, hash_name("adapter-init")));
    const std::size_t d = p.patch_w.dim(1);
    for (auto& b : p.blocks) {
        if (moase.enabled()) b.adapter = init_adapter(moase, d, rng);
        else b.adapter.reset();
    }
}

inline ModelParams init_model(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, hash_name("backbone-init")));
    const std::size_t d = cfg.dim, pp = cfg.patch * cfg.patch, n = cfg.tokens(), m = cfg.mlp_hidden;
    auto dense = [&](std::size_t in, std::size_t out) {
        Tensor w({in, out});
        const double sd = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : w.data()) v = rng.normal(0.0, sd);
        return w;
    };
    auto small = [&](Shape s) {
        Tensor t(std::move(s));
        for (double& v : t.data()) v = rng.normal(0.0, 0.02);
        return t;
    };
    ModelParams p;
    p.patch_w = dense(pp, d);
    p.patch_b = Tensor({d});
    p.cls = small({d});
    p.pos = small({n, d});
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        BlockWeights<Tensor> b;
        b.ln1_g = Tensor({d}, 1.0);
        b.ln1_b = Tensor({d});
        b.wq = dense(d, d);
        b.bq = Tensor({d});
        b.wk = dense(d, d);
        b.bk = Tensor({d});
        b.wv = dense(d, d);
        b.bv = Tensor({d});
        b.wo = dense(d, d);
        b.bo = Tensor({d});
        b.ln2_g = Tensor({d}, 1.0);
        b.ln2_b = Tensor({d});
        b.w1 = dense(d, m);
        b.b1 = Tensor({m});
        b.w2 = dense(m, d);
        b.b2 = Tensor({d});
        p.blocks.push_back(std::move(b));
    }
    p.lnf_g = Tensor({d}, 1.0);
    p.lnf_b = Tensor({d});
    p.head_w = dense(d, cfg.classes);
    p.head_b = Tensor({cfg.classes});
    return p;
}

enum class BindMode {
    none,      // every parameter is a constant
    adapters,  // only adapter parameters require gradients
    all,       // every parameter requires gradients
};

inline ModelWeights<Var> bind_model(Graph& g, const ModelParams& p, BindMode mode) {
    ModelWeights<Var> w;
    w.blocks.resize(p.blocks.size());
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        if (p.blocks[i].adapter) {
            w.blocks[i].adapter.emplace();
            w.blocks[i].adapter->experts.resize(p.blocks[i].adapter->experts.size());
        }
    }
    visit_frozen([&](const std::string&, Var& v, const Tensor& t) { v = g.leaf(t, mode == BindMode::all); }, w, p);
    visit_adapters([&](const std::string&, Var& v, const Tensor& t) { v = g.leaf(t, mode != BindMode::none); }, w, p);
    return w;
}

/// Keeps only the top (high) or bottom (low) fraction of each block's MLP
/// activation per sample; used by the saliency analysis.
struct ActivationClamp {
    bool high = true;
    double q = 0.25;
};

struct EncodeOptions {
    bool use_adapter = true;
    std::optional<ActivationClamp> clamp;
    double ln_eps = 1e-6;
};

struct EncodeResult {
    Var logits;   // [b, C]
    Var tokens;   // [b, n, d]
    Var feature;  // [b, d]
    std::vector<MoaseOutput> adapters;
};

namespace detail {

inline Var affine_norm(const Var& x, const Var& gain, const Var& bias, double eps) { return add(mul(layer_norm(x, eps), gain), bias); }

inline Var attention(const Var& h, const BlockWeights<Var>& b, std::size_t heads) {
    const Var q = add(matmul(h, b.wq), b.bq);
    const Var k = add(matmul(h, b.wk), b.bk);
    const Var v = add(matmul(h, b.wv), b.bv);
    const std::size_t d = h.shape()[2], hd = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> outs;
    for (std::size_t i = 0; i < heads; ++i) {
        const Var qh = slice_last(q, i * hd, hd), kh = slice_last(k, i * hd, hd), vh = slice_last(v, i * hd, hd);
        const Var probs = softmax_lastdim(scale(batch_matmul(qh, kh, true), inv));
        outs.push_back(batch_matmul(probs, vh));
    }
    const Var merged = heads == 1 ? outs.front() : concat_last(outs);
    return add(matmul(merged, b.wo), b.bo);
}

}  // namespace detail

/// images [b, H, W] -> logits, final tokens, class-token feature.
/// Block: x += Attn(LN(x)); x += MLP(LN(x)) + s * MoASE(LN(x)).
inline EncodeResult encode(const Var& images, const ModelWeights<Var>& w, const BackboneConfig& cfg, const MoaseConfig& moase,
                           const EncodeOptions& opt = {}) {
    const Shape& s = images.shape();
    if (s.size() != 3 || s[1] != cfg.image || s[2] != cfg.image) {
        throw ShapeError("encode expects [b, " + std::to_string(cfg.image) + ", " + std::to_string(cfg.image) + "], got " + shape_str(s));
    }
    EncodeResult r;
    Var x = add(matmul(patchify(images, cfg.patch), w.patch_w), w.patch_b);
    x = add(prepend_token(x, w.cls), w.pos);
    for (const auto& b : w.blocks) {
        x = add(x, detail::attention(detail::affine_norm(x, b.ln1_g, b.ln1_b, opt.ln_eps), b, cfg.heads));
        const Var h = detail::affine_norm(x, b.ln2_g, b.ln2_b, opt.ln_eps);
        Var act = relu(add(matmul(h, b.w1), b.b1));
        if (opt.clamp) {
            const Shape& as = act.shape();
            const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(as[1] * as[2]) * opt.clamp->q + 1e-9));
            act = sdd(act, std::max<std::size_t>(k, 1), opt.clamp->high, SddAxis::token).out;
        }
        x = add(x, add(matmul(act, b.w2), b.b2));
        if (opt.use_adapter && b.adapter && moase.enabled()) {
            MoaseOutput a = moase_forward(h, *b.adapter, moase);
            x = add(x, scale(a.y, cfg.adapter_scale));
            r.adapters.push_back(std::move(a));
        }
    }
    r.tokens = detail::affine_norm(x, w.lnf_g, w.lnf_b, opt.ln_eps);
    r.feature = take_token(r.tokens, 0);
    r.logits = add(matmul(r.feature, w.head_w), w.head_b);
    return r;
}

struct Prediction {
    Tensor logits;   // [b, C]
    Tensor feature;  // [b, d]
};

/// Forward without gradients.
inline Prediction predict(const ModelParams& p, const Tensor& images, const BackboneConfig& cfg, const MoaseConfig& moase, const EncodeOptions& opt = {}) {
    Graph g;
    const ModelWeights<Var> w = bind_model(g, p, BindMode::none);
    EncodeResult r = encode(g.constant(images), w, cfg, moase, opt);
    return {r.logits.value(), r.feature.value()};
}

inline std::vector<std::uint32_t> argmax_rows(const Tensor& logits) {
    const std::size_t c = logits.shape().back(), rows = logits.size() / c;
    std::vector<std::uint32_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits[r * c + j] > logits[r * c + best]) best = j;
        out[r] = static_cast<std::uint32_t>(best);
    }
    return out;
}

inline double accuracy(const ModelParams& p, const Dataset& ds, const BackboneConfig& cfg, const MoaseConfig& moase, std::size_t batch = 64) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); i += batch) {
        const std::size_t end = std::min(ds.size(), i + batch);
        const auto pred = argmax_rows(predict(p, batch_images(ds, i, end), cfg, moase).logits);
        for (std::size_t j = i; j < end; ++j) correct += pred[j - i] == ds.samples[j].label;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------

enum class FreezeMode { adapter_only };

/// The parameters the optimizer may touch, in a fixed order.
struct TrainableView {
    std::vector<std::string> names;
    std::vector<Tensor*> tensors;

    std::size_t count() const {
        std::size_t n = 0;
        for (const Tensor* t : tensors) n += t->size();
        return n;
    }
};

inline TrainableView freeze_partition(ModelParams& p, FreezeMode = FreezeMode::adapter_only) {
    TrainableView v;
    visit_adapters(
        [&](const std::string& name, Tensor& t) {
            v.names.push_back(name);
            v.tensors.push_back(&t);
        },
        p);
    return v;
}

/// Variables matching freeze_partition's order.
inline std::vector<Var> trainable_vars(ModelWeights<Var>& w) {
    std::vector<Var> out;
    visit_adapters([&](const std::string&, Var& v) { out.push_back(v); }, w);
    return out;
}

/// Soft cross-entropy: mean over rows of -sum_c p[c] * log softmax(logits)[c].
inline Var soft_cross_entropy(const Var& logits, const Tensor& target) {
    if (logits.shape() != target.shape() || logits.shape().size() != 2) throw ShapeError("soft_cross_entropy expects matching [b, C] shapes");
    const Var t = logits.graph->constant(target);
    return scale(sum(mul(log_softmax_lastdim(logits), t)), -1.0 / static_cast<double>(target.dim(0)));
}

inline Tensor one_hot(std::span<const std::uint32_t> labels, std::size_t classes) {
    Tensor t({labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) t[i * classes + labels[i]] = 1.0;
    return t;
}

struct PretrainOptions {
    std::size_t epochs = 30;
    double lr = 2e-3;
    std::size_t batch = 32;
    std::uint64_t seed = 1;
    double threshold = 0.95;  // held-out accuracy required
    bool cosine = true;       // cosine-decay the learning rate to zero
    AugmentationSet augs = AugmentationSet::desk();  // one random view per sample; empty = none
};

struct PretrainResult {
    ModelParams params;
    double train_accuracy = 0.0;
    double heldout_accuracy = 0.0;
    std::vector<double> epoch_loss;
};

/// Trains the backbone (no adapter) with cross-entropy and Adam. Throws
/// PretrainError when held-out accuracy ends below the threshold.
inline PretrainResult pretrain_source(const Dataset& train, const Dataset& heldout, const BackboneConfig& cfg, const PretrainOptions& opt) {
    if (train.size() == 0) throw ConfigError("pretraining needs a nonempty dataset");
    PretrainResult res;
    res.params = init_model(cfg, opt.seed);
    MoaseConfig no_adapter;
    no_adapter.experts = 0;
    std::vector<Tensor*> params;
    visit_frozen([&](const std::string&, Tensor& t) { params.push_back(&t); }, res.params);
    AdamState adam;
    adam.lr = opt.lr;
    std::vector<std::size_t> order(train.size());
    Rng rng(mix_seed(opt.seed, hash_name("pretrain-order")));
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
        double total = 0.0;
        if (opt.cosine) adam.lr = 0.5 * opt.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(opt.epochs)));
        for (std::size_t start = 0; start < order.size(); start += opt.batch) {
            const std::size_t end = std::min(order.size(), start + opt.batch);
            Dataset chunk;
            chunk.side = train.side;
            std::vector<std::uint32_t> labels;
            for (std::size_t i = start; i < end; ++i) {
                chunk.samples.push_back(train.samples[order[i]]);
                labels.push_back(train.samples[order[i]].label);
            }
            Tensor images = batch_images(chunk, 0, chunk.size());
            if (!opt.augs.views.empty()) {
                const std::size_t px = cfg.image * cfg.image;
                for (std::size_t i = 0; i < chunk.size(); ++i) {
                    const Augmentation& a = opt.augs.views[rng.below(opt.augs.views.size())];
                    Tensor one({1, cfg.image, cfg.image}, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(i * px),
                                                                             images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * px)));
                    one = augment(one, a, rng);
                    std::copy(one.data().begin(), one.data().end(), images.data().begin() + static_cast<std::ptrdiff_t>(i * px));
                }
            }
            Graph g;
            ModelWeights<Var> w = bind_model(g, res.params, BindMode::all);
            EncodeResult r = encode(g.constant(images), w, cfg, no_adapter);
            Var loss = soft_cross_entropy(r.logits, one_hot(labels, cfg.classes));
            total += loss.value().item() * static_cast<double>(labels.size());
            GradientMap grads = g.backward(loss);
            std::vector<Tensor> gs;
            visit_frozen([&](const std::string&, Var& v) { gs.push_back(grads.at(v)); }, w);
            adam_step(params, gs, adam);
        }
        res.epoch_loss.push_back(total / static_cast<double>(train.size()));
    }
    res.train_accuracy = accuracy(res.params, train, cfg, no_adapter);
    res.heldout_accuracy = heldout.size() ? accuracy(res.params, heldout, cfg, no_adapter) : res.train_accuracy;
    if (res.heldout_accuracy < opt.threshold) {
        throw PretrainError("source accuracy " + std::to_string(res.heldout_accuracy) + " below threshold " + std::to_string(opt.threshold),
                            res.heldout_accuracy);
    }
    return res;
}

}  // namespace moase
