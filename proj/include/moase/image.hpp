#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace moase::image {

/// Grayscale image, row-major.
struct Plane {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    double at(std::ptrdiff_t y, std::ptrdiff_t x) const {
        y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(height) - 1);
        x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(width) - 1);
        return pixels[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)];
    }

    /// Bilinear sample at continuous pixel-center coordinates, edge-clamped.
    double sample(double y, double x) const {
        const double fy = std::floor(y), fx = std::floor(x);
        const double wy = y - fy, wx = x - fx;
        const auto iy = static_cast<std::ptrdiff_t>(fy), ix = static_cast<std::ptrdiff_t>(fx);
        return (1 - wy) * ((1 - wx) * at(iy, ix) + wx * at(iy, ix + 1)) + wy * ((1 - wx) * at(iy + 1, ix) + wx * at(iy + 1, ix + 1));
    }
};

/// Bilinear resize (half-pixel centers). Shrinking by more than 2x first
/// box-averages so small outputs do not alias.
inline Plane resize(const Plane& in, std::size_t height, std::size_t width) {
    Plane out{height, width, std::vector<double>(height * width)};
    const double sy = static_cast<double>(in.height) / static_cast<double>(height);
    const double sx = static_cast<double>(in.width) / static_cast<double>(width);
    if (sy >= 2.0 || sx >= 2.0) {
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const auto y0 = static_cast<std::size_t>(std::floor(static_cast<double>(y) * sy));
                const auto y1 = std::max(y0 + 1, static_cast<std::size_t>(std::floor(static_cast<double>(y + 1) * sy)));
                const auto x0 = static_cast<std::size_t>(std::floor(static_cast<double>(x) * sx));
                const auto x1 = std::max(x0 + 1, static_cast<std::size_t>(std::floor(static_cast<double>(x + 1) * sx)));
                double s = 0.0;
                for (std::size_t yy = y0; yy < std::min(y1, in.height); ++yy)
                    for (std::size_t xx = x0; xx < std::min(x1, in.width); ++xx) s += in.pixels[yy * in.width + xx];
                out.pixels[y * width + x] = s / static_cast<double>((std::min(y1, in.height) - y0) * (std::min(x1, in.width) - x0));
            }
        }
        return out;
    }
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
            const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
            out.pixels[y * width + x] = in.sample(src_y, src_x);
        }
    }
    return out;
}

inline Plane nearest_resize(const Plane& in, std::size_t height, std::size_t width) {
    Plane out{height, width, std::vector<double>(height * width)};
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sy = std::min(in.height - 1, y * in.height / height);
            const std::size_t sx = std::min(in.width - 1, x * in.width / width);
            out.pixels[y * width + x] = in.pixels[sy * in.width + sx];
        }
    }
    return out;
}

inline Plane flip_horizontal(const Plane& in) {
    Plane out = in;
    for (std::size_t y = 0; y < in.height; ++y)
        for (std::size_t x = 0; x < in.width; ++x) out.pixels[y * in.width + x] = in.pixels[y * in.width + (in.width - 1 - x)];
    return out;
}

inline Plane gaussian_blur(const Plane& in, double sigma) {
    if (sigma <= 0.0) return in;
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double z = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        z += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    }
    for (double& k : kernel) k /= z;
    Plane tmp = in, out = in;
    for (std::size_t y = 0; y < in.height; ++y) {
        for (std::size_t x = 0; x < in.width; ++x) {
            double s = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
                s += kernel[static_cast<std::size_t>(i + radius)] * in.at(static_cast<std::ptrdiff_t>(y), static_cast<std::ptrdiff_t>(x) + i);
            }
            tmp.pixels[y * in.width + x] = s;
        }
    }
    for (std::size_t y = 0; y < in.height; ++y) {
        for (std::size_t x = 0; x < in.width; ++x) {
            double s = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
                s += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(static_cast<std::ptrdiff_t>(y) + i, static_cast<std::ptrdiff_t>(x));
            }
            out.pixels[y * in.width + x] = s;
        }
    }
    return out;
}

inline void clip01(Plane& p) {
    for (double& v : p.pixels) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace moase::image
