#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "moase/graph.hpp"

namespace moase {

/// Builds a scalar loss on a fresh graph from leaf variables bound to the
/// parameters. Must be deterministic.
using LossBuilder = std::function<Var(Graph&, std::span<const Var>)>;

namespace detail {

inline double evaluate_loss(const LossBuilder& f, const std::vector<Tensor>& params, std::vector<Tensor>* analytic) {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(g.leaf(p, analytic != nullptr));
    Var loss = f(g, vars);
    const double v = loss.value().item();
    if (!std::isfinite(v)) throw NumericError("loss is not finite");
    if (analytic) {
        GradientMap grads = g.backward(loss);
        analytic->clear();
        for (const Var& var : vars) {
            analytic->push_back(grads.contains(var) ? grads.at(var) : Tensor(var.shape()));
        }
    }
    return v;
}

}  // namespace detail

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
inline double finite_diff_check(const LossBuilder& f, std::vector<Tensor> params, double step) {
    if (!(step > 0.0)) throw ValidationError("finite_diff_check needs step > 0");
    std::vector<Tensor> analytic;
    detail::evaluate_loss(f, params, &analytic);

    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            const double orig = params[t][i];
            params[t][i] = orig + step;
            const double up = detail::evaluate_loss(f, params, nullptr);
            params[t][i] = orig - step;
            const double down = detail::evaluate_loss(f, params, nullptr);
            params[t][i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[t][i];
            worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
        }
    }
    return worst;
}

inline double finite_diff_check(const std::function<Var(Graph&, const Var&)>& f, const Tensor& param, double step) {
    return finite_diff_check([&](Graph& g, std::span<const Var> v) { return f(g, v[0]); }, std::vector<Tensor>{param}, step);
}

}  // namespace moase
