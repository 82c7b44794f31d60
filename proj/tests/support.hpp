#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "moase/moase.hpp"

namespace testing_support {

using namespace moase;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// 8x8 images, 4x4 patches: 5 tokens, small enough for finite differences.
inline BackboneConfig tiny_backbone() {
    BackboneConfig c;
    c.image = 8;
    c.patch = 4;
    c.dim = 8;
    c.heads = 2;
    c.depth = 1;
    c.classes = 4;
    c.mlp_hidden = 16;
    return c;
}

inline MoaseConfig tiny_moase(std::size_t experts = 4, std::size_t hidden = 4) {
    MoaseConfig m;
    m.experts = experts;
    m.hidden = hidden;
    return m;
}

/// Gives every adapter tensor (including the zero up-projections) random values.
inline void randomize_adapters(ModelParams& p, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    visit_adapters([&](const std::string&, Tensor& t) {
        for (double& v : t.data()) v = rng.uniform(-scale, scale);
    }, p);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("moase_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing_support
