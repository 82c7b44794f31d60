#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "moase/graph.hpp"
#include "moase/rng.hpp"
#include "moase/sdd.hpp"

namespace moase {

// Parameter structs are templated on the leaf type so the same layout holds
// plain tensors (storage, optimizer, checkpoints) and graph variables (forward).

template <class T>
struct ExpertWeights {
    T w_down;  // d x h
    T b_down;  // h
    T w_up;    // h x d
    T b_up;    // d
};

template <class T>
struct GateWeights {
    T dag_a;  // E x d
    T dag_b;  // E
    T asg_a;  // E x d
    T asg_b;  // E
};

template <class T>
struct AdapterWeights {
    std::vector<ExpertWeights<T>> experts;
    GateWeights<T> gates;
};

/// Calls f(name, member...) for every tensor of one or more structurally
/// identical expert sets.
template <class F, class... E>
void visit_expert(const std::string& prefix, F&& f, E&... e) {
    f(prefix + "w_down", e.w_down...);
    f(prefix + "b_down", e.b_down...);
    f(prefix + "w_up", e.w_up...);
    f(prefix + "b_up", e.b_up...);
}

template <class F, class... G>
void visit_gates(const std::string& prefix, F&& f, G&... g) {
    f(prefix + "dag_a", g.dag_a...);
    f(prefix + "dag_b", g.dag_b...);
    f(prefix + "asg_a", g.asg_a...);
    f(prefix + "asg_b", g.asg_b...);
}

template <class F, class First, class... Rest>
void visit_adapter(const std::string& prefix, F&& f, First& first, Rest&... rest) {
    if (((rest.experts.size() != first.experts.size()) || ...)) throw ShapeError("adapter structures differ in expert count");
    for (std::size_t i = 0; i < first.experts.size(); ++i) {
        visit_expert(prefix + "expert." + std::to_string(i) + ".", f, first.experts[i], rest.experts[i]...);
    }
    visit_gates(prefix + "gate.", f, first.gates, rest.gates...);
}

struct MoaseConfig {
    std::size_t experts = 4;  // 0 disables the adapter
    std::size_t hidden = 8;
    double eta = 0.1;
    SddAxis axis = SddAxis::token;
    std::vector<SddSpec> schedule;  // empty: default_q_schedule(experts)
    bool use_sdd = true;
    bool use_dag = true;
    bool use_asg = true;
    bool use_hp = true;

    bool enabled() const { return experts > 0; }
    void validate() const;
    std::vector<SddSpec> resolved_schedule() const;
};

inline MoaseConfig adapter_free() {
    MoaseConfig m;
    m.experts = 0;
    return m;
}

/// Experts 1..E/2 keep the largest activations with q = i/E, experts
/// E/2+1..E mirror the same fractions keeping the smallest.
inline std::vector<SddSpec> default_q_schedule(std::size_t experts) {
    if (experts < 2 || experts % 2 != 0) throw ConfigError("expert count must be even and >= 2, got " + std::to_string(experts));
    std::vector<SddSpec> out;
    const std::size_t half = experts / 2;
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 1; i <= half; ++i) {
            out.push_back({static_cast<double>(i) / static_cast<double>(experts), pass == 0, SddAxis::token});
        }
    }
    return out;
}

inline void MoaseConfig::validate() const {
    if (experts == 0) return;
    if (experts < 2 || experts % 2 != 0) throw ConfigError("moase.experts must be 0 or an even number >= 2");
    if (hidden < 1) throw ConfigError("moase.hidden must be >= 1");
    if (!(eta >= 0.0)) throw ConfigError("moase.eta must be >= 0");
    if (!schedule.empty()) {
        if (schedule.size() != experts) throw ConfigError("moase.schedule needs one entry per expert");
        for (const SddSpec& s : schedule) {
            if (!(s.q > 0.0 && s.q <= 1.0)) throw ConfigError("moase.schedule q must lie in (0, 1]");
        }
    }
}

inline std::vector<SddSpec> MoaseConfig::resolved_schedule() const {
    std::vector<SddSpec> s = schedule.empty() ? default_q_schedule(experts) : schedule;
    for (SddSpec& e : s) e.axis = axis;
    return s;
}

/// Retained count for a slice of `total` entries: floor(total * clamp(q + eta*t, 1/total, 1)).
inline std::size_t k_hat(double q, double eta, double t, std::size_t total) {
    const double n = static_cast<double>(total);
    const double frac = std::clamp(q + eta * t, 1.0 / n, 1.0);
    // The small slack absorbs representation error in products like 100 * 0.6.
    const auto k = static_cast<std::size_t>(std::floor(n * frac + 1e-9));
    return std::clamp<std::size_t>(k, 1, total);
}

inline AdapterWeights<Tensor> init_adapter(const MoaseConfig& cfg, std::size_t d, Rng& rng) {
    AdapterWeights<Tensor> w;
    const std::size_t E = cfg.experts, h = cfg.hidden;
    const double kaiming = std::sqrt(2.0 / static_cast<double>(d));
    for (std::size_t i = 0; i < E; ++i) {
        ExpertWeights<Tensor> e{Tensor({d, h}), Tensor({h}), Tensor({h, d}), Tensor({d})};
        for (double& v : e.w_down.data()) v = rng.normal(0.0, kaiming);
        w.experts.push_back(std::move(e));
    }
    w.gates = {Tensor({E, d}), Tensor({E}), Tensor({E, d}), Tensor({E})};
    for (double& v : w.gates.dag_a.data()) v = rng.normal(0.0, 0.02);
    for (double& v : w.gates.asg_a.data()) v = rng.normal(0.0, 0.02);
    return w;
}

inline AdapterWeights<Var> bind_adapter(Graph& g, const AdapterWeights<Tensor>& w, bool requires_grad) {
    AdapterWeights<Var> out;
    out.experts.resize(w.experts.size());
    visit_adapter("", [&](const std::string&, Var& v, const Tensor& t) { v = g.leaf(t, requires_grad); }, out, w);
    return out;
}

/// Routing weights G: [b, n, E]. With use_sdd_input the gate sees only the
/// bottom half of F (K = floor(n*d/2), smallest kept, ranked over n x d).
inline Var dag_forward(const Var& F, const GateWeights<Var>& g, bool use_sdd_input) {
    const Shape& s = F.shape();
    if (s.size() != 3) throw ShapeError("dag_forward expects [b, n, d]");
    Var in = F;
    if (use_sdd_input) {
        const std::size_t k = (s[1] * s[2]) / 2;
        in = sdd(F, k, false, SddAxis::token).out;
    }
    return softmax_lastdim(add(matmul(in, g.dag_a, true), g.dag_b));
}

/// Threshold offsets T: [b, E] in (-1, 1) from the token-mean of F.
inline Var asg_forward(const Var& F, const GateWeights<Var>& g) {
    if (F.shape().size() != 3) throw ShapeError("asg_forward expects [b, n, d]");
    Var pooled = mean_over_axis(F, 1);
    return tanh(add(matmul(pooled, g.asg_a, true), g.asg_b));
}

/// Per-group retained counts for one expert given per-sample offsets t.
inline std::vector<std::size_t> expert_k_hat(const SddSpec& spec, double eta, std::span<const double> t, std::size_t tokens, std::size_t hidden) {
    std::vector<std::size_t> ks;
    if (spec.axis == SddAxis::token) {
        for (double ti : t) ks.push_back(k_hat(spec.q, eta, ti, tokens * hidden));
    } else {
        for (double ti : t) ks.insert(ks.end(), tokens, k_hat(spec.q, eta, ti, hidden));
    }
    return ks;
}

struct ExpertResult {
    Var out;
    Tensor mask;  // empty when SDD is off
};

/// ReLU(F W_down + b_down) -> SDD(k) -> * (1 + eta * t) -> W_up, b_up.
/// `t` is the expert's [b] column of T; pass nullptr to skip the threshold
/// scaling (ASG off). The rescale is the differentiable route into the gate,
/// since k itself is an integer.
inline ExpertResult expert_forward(const Var& F, const ExpertWeights<Var>& e, const SddSpec& spec, std::span<const std::size_t> k,
                                   const Var* t, double eta, bool use_sdd) {
    Var hidden = relu(add(matmul(F, e.w_down), e.b_down));
    Tensor mask;
    if (use_sdd) {
        SddResult r = sdd(hidden, k, spec.largest, spec.axis);
        hidden = r.out;
        mask = std::move(r.mask);
    }
    if (t) hidden = scale_rows(hidden, shift(scale(*t, eta), 1.0));
    return {add(matmul(hidden, e.w_up), e.b_up), std::move(mask)};
}

struct MoaseOutput {
    Var y;  // [b, n, d]
    Var G;  // [b, n, E]
    Var T;  // [b, E]
    std::vector<Tensor> masks;                  // per expert, [b, n, h]
    std::vector<std::vector<std::size_t>> k;    // per expert, per selection group
};

inline MoaseOutput moase_forward(const Var& F, const AdapterWeights<Var>& w, const MoaseConfig& cfg) {
    const Shape& s = F.shape();
    if (s.size() != 3) throw ShapeError("moase_forward expects [b, n, d]");
    const std::size_t b = s[0], n = s[1], E = cfg.experts, h = cfg.hidden;
    if (w.experts.size() != E) throw ShapeError("adapter has " + std::to_string(w.experts.size()) + " experts, config says " + std::to_string(E));
    Graph& g = *F.graph;
    const std::vector<SddSpec> schedule = cfg.resolved_schedule();

    MoaseOutput out;
    out.G = cfg.use_dag ? dag_forward(F, w.gates, true) : g.constant(Tensor({b, n, E}, 1.0 / static_cast<double>(E)));
    out.T = cfg.use_asg ? asg_forward(F, w.gates) : g.constant(Tensor({b, E}));

    std::optional<Var> y;
    for (std::size_t i = 0; i < E; ++i) {
        std::vector<double> t_col(b);
        for (std::size_t j = 0; j < b; ++j) t_col[j] = out.T.value()[j * E + i];
        std::vector<std::size_t> k = expert_k_hat(schedule[i], cfg.eta, t_col, n, h);
        std::optional<Var> t;
        if (cfg.use_asg) t = select_last(out.T, i);
        ExpertResult r = expert_forward(F, w.experts[i], schedule[i], k, t ? &*t : nullptr, cfg.eta, cfg.use_sdd);
        Var weighted = scale_rows(r.out, select_last(out.G, i));
        y = y ? add(*y, weighted) : weighted;
        out.masks.push_back(std::move(r.mask));
        out.k.push_back(std::move(k));
    }
    out.y = *y;
    return out;
}

/// Closed-form trainable parameter count of one adapter.
inline std::size_t adapter_param_count(std::size_t E, std::size_t d, std::size_t h) {
    return E * (d * h + h + h * d + d) + 2 * (E * d + E);
}

}  // namespace moase
