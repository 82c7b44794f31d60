#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moase/graph.hpp"

namespace moase {

/// Which slice the rank selection runs over.
///   token:   the whole n x m slice of each sample (rank over tokens and features)
///   channel: the m features of each (sample, token) row
enum class SddAxis { token, channel };

inline const char* to_string(SddAxis a) { return a == SddAxis::token ? "token" : "channel"; }

inline SddAxis parse_sdd_axis(const std::string& s) {
    if (s == "token") return SddAxis::token;
    if (s == "channel") return SddAxis::channel;
    throw ConfigError("unknown SDD axis '" + s + "' (expected token or channel)");
}

struct SddSpec {
    double q = 0.5;
    bool largest = true;
    SddAxis axis = SddAxis::token;
};

struct SddGroups {
    std::size_t count;
    std::size_t size;
};

inline SddGroups sdd_groups(const Shape& shape, SddAxis axis) {
    if (shape.size() != 3) throw ShapeError("sdd expects [b, n, m], got " + shape_str(shape));
    if (axis == SddAxis::token) return {shape[0], shape[1] * shape[2]};
    return {shape[0] * shape[1], shape[2]};
}

/// 0/1 mask keeping exactly k[g] entries of each group: the largest (or
/// smallest) values, ties resolved toward the smaller flat index.
inline Tensor sdd_mask(const Tensor& values, std::span<const std::size_t> k_per_group, bool largest, SddAxis axis) {
    const SddGroups groups = sdd_groups(values.shape(), axis);
    if (k_per_group.size() != groups.count) {
        throw SelectionError("sdd: expected " + std::to_string(groups.count) + " per-group counts, got " + std::to_string(k_per_group.size()));
    }
    Tensor mask(values.shape());
    std::vector<std::size_t> order(groups.size);
    for (std::size_t gi = 0; gi < groups.count; ++gi) {
        const std::size_t k = k_per_group[gi];
        if (k < 1 || k > groups.size) {
            throw SelectionError("sdd: K=" + std::to_string(k) + " outside [1, " + std::to_string(groups.size) + "]");
        }
        const double* v = values.data().data() + gi * groups.size;
        double* m = mask.data().data() + gi * groups.size;
        if (k == groups.size) {
            std::fill(m, m + groups.size, 1.0);
            continue;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto before = [v, largest](std::size_t a, std::size_t b) {
            if (v[a] != v[b]) return largest ? v[a] > v[b] : v[a] < v[b];
            return a < b;
        };
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), before);
        for (std::size_t i = 0; i < k; ++i) m[order[i]] = 1.0;
    }
    return mask;
}

inline Tensor sdd_mask(const Tensor& values, std::size_t k, bool largest, SddAxis axis) {
    const SddGroups groups = sdd_groups(values.shape(), axis);
    std::vector<std::size_t> ks(groups.count, k);
    return sdd_mask(values, ks, largest, axis);
}

struct SddResult {
    Var out;
    Tensor mask;
};

/// Keeps the selected entries and zeroes the rest. The mask is a constant of
/// the graph, so retained entries pass gradient unchanged and dropped ones get 0.
inline SddResult sdd(const Var& x, std::span<const std::size_t> k_per_group, bool largest, SddAxis axis = SddAxis::token) {
    Tensor mask = sdd_mask(x.value(), k_per_group, largest, axis);
    Var m = x.graph->constant(mask);
    return {mul(x, m), std::move(mask)};
}

inline SddResult sdd(const Var& x, std::size_t k, bool largest, SddAxis axis = SddAxis::token) {
    const SddGroups groups = sdd_groups(x.shape(), axis);
    std::vector<std::size_t> ks(groups.count, k);
    return sdd(x, ks, largest, axis);
}

}  // namespace moase
