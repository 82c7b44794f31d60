#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "moase/backbone.hpp"
#include "moase/domains.hpp"

namespace moase {

inline constexpr double kKlEpsilon = 1e-12;

namespace detail {

inline void check_distribution(std::span<const double> p, const char* which) {
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string(which) + " has a negative or non-finite entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError(std::string(which) + " sums to " + std::to_string(s) + ", not 1");
}

}  // namespace detail

/// sum P' log(P' / Q') with both sides smoothed as X' = (X + eps) / (1 + n eps),
/// so a zero in Q cannot produce an infinity and KL(P, P) is exactly 0.
/// Clamped at 0 against rounding.
inline double kl_divergence(std::span<const double> p, std::span<const double> q, double eps = kKlEpsilon) {
    if (p.size() != q.size() || p.empty()) throw ValidationError("kl_divergence: length mismatch");
    detail::check_distribution(p, "P");
    detail::check_distribution(q, "Q");
    const double z = 1.0 + static_cast<double>(q.size()) * eps;
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double ps = (p[i] + eps) / z;
        if (ps > 0.0) s += ps * std::log((p[i] + eps) / (q[i] + eps));
    }
    return std::max(s, 0.0);
}

/// Jensen-Shannon divergence in nats, in [0, ln 2]. The mixture is positive
/// wherever P or Q is, so no smoothing is needed.
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) throw ValidationError("js_divergence: length mismatch");
    detail::check_distribution(p, "P");
    detail::check_distribution(q, "Q");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        const double a = p[i] > 0.0 ? p[i] * std::log(p[i] / m) : 0.0;
        const double b = q[i] > 0.0 ? q[i] * std::log(q[i] / m) : 0.0;
        s += 0.5 * (a + b);  // a + b commutes exactly, so JS(P, Q) == JS(Q, P) bitwise
    }
    return std::clamp(s, 0.0, std::numbers::ln2);
}

struct DomainFeatures {
    std::string name;
    Tensor features;  // [N, d]
    std::vector<std::uint32_t> labels;
};

using DomainFeatureBank = std::vector<DomainFeatures>;

/// Softmax over the d dimensions of the domain-mean feature.
inline std::vector<double> domain_distribution(const DomainFeatures& f) {
    if (f.features.rank() != 2 || f.features.dim(0) == 0) throw ValidationError("empty feature bank for domain '" + f.name + "'");
    const std::size_t n = f.features.dim(0), d = f.features.dim(1);
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += f.features[i * d + j];
    for (double& v : mean) v /= static_cast<double>(n);
    const double mx = *std::max_element(mean.begin(), mean.end());
    double z = 0.0;
    for (double& v : mean) z += v = std::exp(v - mx);
    for (double& v : mean) v /= z;
    return mean;
}

/// JS between consecutive domains in bank order.
inline std::vector<double> inter_domain_js(const DomainFeatureBank& bank) {
    if (bank.size() < 2) throw ValidationError("inter_domain_js needs at least 2 domains");
    std::vector<double> out;
    std::vector<double> prev = domain_distribution(bank.front());
    for (std::size_t i = 1; i < bank.size(); ++i) {
        std::vector<double> cur = domain_distribution(bank[i]);
        out.push_back(js_divergence(prev, cur));
        prev = std::move(cur);
    }
    return out;
}

struct IntraClass {
    std::vector<double> per_class;
    double mean = 0.0;
};

/// IC_c = (1/|c|) sum_{i in c} ||f_i - mean_c||^2; mean is unweighted over classes.
inline IntraClass intra_class_divergence(const Tensor& features, std::span<const std::uint32_t> labels, std::size_t classes) {
    if (features.rank() != 2 || features.dim(0) != labels.size()) throw ShapeError("intra_class_divergence: features and labels disagree");
    const std::size_t n = features.dim(0), d = features.dim(1);
    std::vector<std::vector<double>> centroid(classes, std::vector<double>(d, 0.0));
    std::vector<std::size_t> count(classes, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= classes) throw ValidationError("label " + std::to_string(labels[i]) + " out of range");
        ++count[labels[i]];
        for (std::size_t j = 0; j < d; ++j) centroid[labels[i]][j] += features[i * d + j];
    }
    std::string missing;
    for (std::size_t c = 0; c < classes; ++c) {
        if (count[c] == 0) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
        for (double& v : centroid[c]) v /= static_cast<double>(std::max<std::size_t>(count[c], 1));
    }
    if (!missing.empty()) throw ValidationError("intra_class_divergence: no samples for class " + missing);
    IntraClass ic;
    ic.per_class.assign(classes, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = features[i * d + j] - centroid[labels[i]][j];
            s += diff * diff;
        }
        ic.per_class[labels[i]] += s;
    }
    for (std::size_t c = 0; c < classes; ++c) {
        ic.per_class[c] /= static_cast<double>(count[c]);
        ic.mean += ic.per_class[c];
    }
    ic.mean /= static_cast<double>(classes);
    return ic;
}

// ---------------------------------------------------------------------------

enum class RetainMode { high_only, low_only };

/// |d(max logit)/d pixel| * |pixel| with each block's MLP activation clamped to
/// its top (or bottom) q fraction per sample; returns the mean over the batch
/// of (saliency inside the foreground mask) / (total saliency).
inline double saliency_split(const ModelParams& p, const Tensor& images, std::span<const std::vector<std::uint8_t>> masks, const BackboneConfig& cfg,
                             RetainMode mode, double q) {
    if (images.rank() != 3) throw ShapeError("saliency_split expects [b, H, W]");
    const std::size_t b = images.dim(0), px = images.dim(1) * images.dim(2);
    if (masks.size() != b) throw ValidationError("saliency_split: foreground masks missing for " + std::to_string(b - std::min(b, masks.size())) + " samples");
    for (const auto& m : masks)
        if (m.size() != px) throw ValidationError("saliency_split: foreground mask has the wrong size");
    if (!(q > 0.0 && q <= 1.0)) throw ConfigError("saliency_split: q must lie in (0, 1]");

    Graph g;
    const ModelWeights<Var> w = bind_model(g, p, BindMode::none);
    const Var x = g.leaf(images, true);
    MoaseConfig none;
    none.experts = 0;
    EncodeOptions opt;
    opt.use_adapter = false;
    opt.clamp = ActivationClamp{mode == RetainMode::high_only, q};
    const EncodeResult r = encode(x, w, cfg, none, opt);
    const auto top = argmax_rows(r.logits.value());
    const Var picked = sum(mul(r.logits, g.constant(one_hot(top, cfg.classes))));
    const GradientMap grads = g.backward(picked);
    const Tensor& gx = grads.at(x);

    double total_ratio = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double fg = 0.0, all = 0.0;
        for (std::size_t j = 0; j < px; ++j) {
            const double s = std::abs(gx[i * px + j]) * std::abs(images[i * px + j]);
            all += s;
            if (masks[i][j]) fg += s;
        }
        total_ratio += all > 0.0 ? fg / all : 0.0;
    }
    return total_ratio / static_cast<double>(b);
}

// ---------------------------------------------------------------------------

struct CostTable {
    std::size_t adapter_params = 0;    // all blocks
    std::size_t trainable_params = 0;  // equals adapter_params under adapter-only freezing
    std::size_t total_params = 0;
    std::uint64_t backbone_macs = 0;   // per sample
    std::uint64_t adapter_macs = 0;    // per sample
    std::uint64_t total_macs() const { return backbone_macs + adapter_macs; }
};

/// Closed-form counts. MACs cover every matrix product of one forward pass:
///   patch embedding  P * p^2 * d
///   per block        4 n d^2 (q, k, v, out) + 2 n^2 d (scores, mixing) + 2 n d m (MLP)
///   per adapter      n d E (DAG) + d E (ASG) + E * 2 n d h (experts)
///   head             d C
inline CostTable count_costs(const BackboneConfig& cfg, const MoaseConfig& moase) {
    cfg.validate();
    const std::uint64_t P = cfg.patches(), pp = cfg.patch * cfg.patch, n = cfg.tokens(), d = cfg.dim, m = cfg.mlp_hidden, C = cfg.classes,
                        L = cfg.depth;
    const std::uint64_t E = moase.experts, h = moase.hidden;
    CostTable c;
    c.adapter_params = moase.enabled() ? L * adapter_param_count(E, d, h) : 0;
    c.trainable_params = c.adapter_params;
    const std::uint64_t block_params = 4 * (d * d + d) + 4 * d + (d * m + m) + (m * d + d);
    c.total_params = (pp * d + d) + d + n * d + L * block_params + 2 * d + (d * C + C) + c.adapter_params;
    c.backbone_macs = P * pp * d + L * (4 * n * d * d + 2 * n * n * d + 2 * n * d * m) + d * C;
    c.adapter_macs = moase.enabled() ? L * (n * d * E + d * E + E * 2 * n * d * h) : 0;
    return c;
}

/// The same quantities measured: parameters by walking the model, MACs by
/// running one instrumented single-sample forward.
inline CostTable measure_costs(const BackboneConfig& cfg, const MoaseConfig& moase, std::uint64_t seed = 1) {
    ModelParams p = init_model(cfg, seed);
    attach_adapters(p, moase, seed);
    CostTable c;
    c.adapter_params = param_count(p, true);
    c.trainable_params = freeze_partition(p).count();
    c.total_params = param_count(p, false);
    const Tensor img({1, cfg.image, cfg.image}, 0.5);
    {
        Graph g;
        EncodeOptions plain;
        plain.use_adapter = false;
        encode(g.constant(img), bind_model(g, p, BindMode::none), cfg, moase, plain);
        c.backbone_macs = g.macs();
    }
    if (moase.enabled()) {
        Graph g;
        encode(g.constant(img), bind_model(g, p, BindMode::none), cfg, moase);
        c.adapter_macs = g.macs() - c.backbone_macs;
    }
    return c;
}

}  // namespace moase
