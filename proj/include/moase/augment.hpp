#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "moase/error.hpp"
#include "moase/image.hpp"
#include "moase/rng.hpp"
#include "moase/tensor.hpp"

namespace moase {

/// One test-time view: rescale (then resample back to native size),
/// optional horizontal flip, optional Gaussian pixel jitter.
struct Augmentation {
    double scale = 1.0;
    bool flip = false;
    double jitter = 0.0;

    bool identity() const { return scale == 1.0 && !flip && jitter == 0.0; }
    friend bool operator==(const Augmentation&, const Augmentation&) = default;
};

struct AugmentationSet {
    std::vector<Augmentation> views;

    static AugmentationSet from_scales(const std::vector<double>& scales, bool with_flip, double jitter = 0.0) {
        AugmentationSet s;
        for (double sc : scales) {
            s.views.push_back({sc, false, jitter});
            if (with_flip) s.views.push_back({sc, true, jitter});
        }
        return s;
    }

    /// Scales {0.5, 1, 2} with and without flip.
    static AugmentationSet desk() { return from_scales({0.5, 1.0, 2.0}, true); }
    static AugmentationSet full() { return from_scales({0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0}, true); }

    void validate() const {
        if (views.empty()) throw ConfigError("augmentation set is empty");
        bool has_identity = false;
        for (const Augmentation& a : views) {
            if (!(a.scale > 0.0) || !std::isfinite(a.scale)) throw ConfigError("augmentation scale must be positive");
            if (!(a.jitter >= 0.0)) throw ConfigError("augmentation jitter must be >= 0");
            has_identity = has_identity || (a.scale == 1.0 && !a.flip);
        }
        if (!has_identity) throw ConfigError("augmentation set must contain the identity view (scale 1, no flip)");
    }

    friend bool operator==(const AugmentationSet&, const AugmentationSet&) = default;
};

/// images [b, H, W] -> augmented [b, H, W]. `rng` only drives jitter.
inline Tensor augment(const Tensor& images, const Augmentation& a, Rng& rng) {
    if (images.rank() != 3) throw ShapeError("augment expects [b, H, W]");
    if (a.identity()) return images;
    const std::size_t b = images.dim(0), H = images.dim(1), W = images.dim(2);
    Tensor out(images.shape());
    for (std::size_t i = 0; i < b; ++i) {
        image::Plane p{H, W, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(i * H * W),
                                                 images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * H * W))};
        if (a.scale != 1.0) {
            const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(H) * a.scale)));
            const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(W) * a.scale)));
            p = image::resize(image::resize(p, h, w), H, W);
        }
        if (a.flip) p = image::flip_horizontal(p);
        if (a.jitter > 0.0) {
            for (double& v : p.pixels) v += rng.normal(0.0, a.jitter);
        }
        image::clip01(p);
        std::copy(p.pixels.begin(), p.pixels.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * H * W));
    }
    return out;
}

}  // namespace moase
