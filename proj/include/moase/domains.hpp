#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "moase/binary_io.hpp"
#include "moase/error.hpp"
#include "moase/image.hpp"
#include "moase/rng.hpp"
#include "moase/tensor.hpp"

namespace moase {

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kNumClasses = 4;
inline const std::array<const char*, kNumClasses> kClassNames = {"circle", "square", "triangle", "cross"};

struct Sample {
    std::vector<double> image;          // side*side, values in [0, 1]
    std::uint32_t label = 0;
    std::vector<std::uint8_t> mask;     // side*side, 1 on shape pixels
};

struct Dataset {
    std::size_t side = kImageSide;
    std::string kind = "clean";
    int severity = 0;
    std::uint64_t seed = 0;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
};

/// Images [end-begin, side, side].
inline Tensor batch_images(const Dataset& ds, std::size_t begin, std::size_t end) {
    if (begin >= end || end > ds.size()) throw ValidationError("batch range out of bounds");
    const std::size_t px = ds.side * ds.side;
    Tensor out({end - begin, ds.side, ds.side});
    for (std::size_t i = begin; i < end; ++i) std::copy(ds.samples[i].image.begin(), ds.samples[i].image.end(), out.data().begin() + static_cast<std::ptrdiff_t>((i - begin) * px));
    return out;
}

inline std::vector<std::uint32_t> batch_labels(const Dataset& ds, std::size_t begin, std::size_t end) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(ds.samples[i].label);
    return out;
}

namespace detail {

inline image::Plane smooth_field(Rng& rng, std::size_t side, int waves, double amp_lo, double amp_hi) {
    image::Plane p{side, side, std::vector<double>(side * side, 0.0)};
    for (int w = 0; w < waves; ++w) {
        const double amp = rng.uniform(amp_lo, amp_hi);
        const double fx = rng.uniform(-0.8, 0.8), fy = rng.uniform(-0.8, 0.8);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x)
                p.pixels[y * side + x] += amp * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
    }
    return p;
}

inline std::vector<std::uint8_t> draw_shape(std::uint32_t label, Rng& rng, std::size_t side) {
    const double S = static_cast<double>(side);
    std::vector<std::uint8_t> mask(side * side, 0);
    auto set_if = [&](auto inside) {
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x)
                if (inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) mask[y * side + x] = 1;
    };
    switch (label) {
        case 0: {  // circle
            const double r = rng.uniform(3.0, 6.0);
            const double cx = rng.uniform(r, S - r), cy = rng.uniform(r, S - r);
            set_if([&](double x, double y) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; });
            break;
        }
        case 1: {  // square
            const double s = std::floor(rng.uniform(5.0, 10.99));
            const double x0 = std::floor(rng.uniform(0.0, S - s + 0.99)), y0 = std::floor(rng.uniform(0.0, S - s + 0.99));
            set_if([&](double x, double y) { return x >= x0 && x < x0 + s && y >= y0 && y < y0 + s; });
            break;
        }
        case 2: {  // upward triangle
            const double w = rng.uniform(8.0, 14.0), h = rng.uniform(7.0, 12.0);
            const double cx = rng.uniform(w / 2, S - w / 2), top = rng.uniform(0.0, S - h);
            set_if([&](double x, double y) {
                if (y < top || y > top + h) return false;
                return std::abs(x - cx) <= (y - top) / h * (w / 2);
            });
            break;
        }
        default: {  // plus-shaped cross
            const double len = rng.uniform(8.0, 13.0), t = rng.uniform(2.0, 3.2);
            const double cx = rng.uniform(len / 2, S - len / 2), cy = rng.uniform(len / 2, S - len / 2);
            set_if([&](double x, double y) {
                const double dx = std::abs(x - cx), dy = std::abs(y - cy);
                return (dx <= len / 2 && dy <= t / 2) || (dy <= len / 2 && dx <= t / 2);
            });
            break;
        }
    }
    return mask;
}

inline Sample make_sample(std::uint32_t label, std::uint64_t seed, std::size_t side) {
    Rng rng(seed);
    Sample s;
    s.label = label;
    s.mask = draw_shape(label, rng, side);
    const double base = rng.uniform(0.15, 0.45);
    const double fg = rng.uniform(0.7, 0.95);
    image::Plane tex = smooth_field(rng, side, 3, 0.03, 0.08);
    s.image.resize(side * side);
    for (std::size_t i = 0; i < side * side; ++i) {
        const double v = s.mask[i] ? fg + 0.3 * tex.pixels[i] : base + tex.pixels[i];
        s.image[i] = std::clamp(v, 0.0, 1.0);
    }
    return s;
}

}  // namespace detail

/// Class-balanced synthetic shapes {circle, square, triangle, cross} on
/// smooth textured backgrounds, shuffled with the seed.
inline Dataset generate_source(std::size_t n, std::uint64_t seed) {
    if (n < kNumClasses) throw ConfigError("generate_source needs n >= number of classes");
    Dataset ds;
    ds.seed = seed;
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.samples.push_back(detail::make_sample(static_cast<std::uint32_t>(i % kNumClasses), mix_seed(seed, i), ds.side));
    }
    Rng rng(mix_seed(seed, 0x5eed5eedULL));
    for (std::size_t i = n; i-- > 1;) std::swap(ds.samples[i], ds.samples[rng.below(i + 1)]);
    return ds;
}

// ---------------------------------------------------------------------------
// Corruptions. Each severity 1..5 indexes a fixed parameter table; severity 0
// returns the input unchanged.

inline const std::vector<std::string>& corruption_kinds() {
    static const std::vector<std::string> kinds = {"gaussian_noise", "shot_noise", "blur", "contrast", "pixelate", "elastic_like_warp", "brightness", "fog_like_haze"};
    return kinds;
}

namespace severity_table {
inline constexpr std::array<double, 5> gaussian_sigma = {0.05, 0.07, 0.09, 0.12, 0.15};
inline constexpr std::array<double, 5> shot_photons = {80.0, 50.0, 35.0, 25.0, 18.0};
inline constexpr std::array<double, 5> blur_sigma = {0.6, 0.8, 1.0, 1.3, 1.6};
inline constexpr std::array<double, 5> contrast_factor = {0.6, 0.5, 0.42, 0.34, 0.27};
inline constexpr std::array<double, 5> pixelate_scale = {0.8, 0.7, 0.6, 0.5, 0.4};
inline constexpr std::array<double, 5> warp_amplitude = {0.4, 0.55, 0.7, 0.85, 1.0};
inline constexpr std::array<double, 5> brightness_shift = {0.1, 0.18, 0.25, 0.32, 0.4};
inline constexpr std::array<double, 5> haze_alpha = {0.2, 0.3, 0.4, 0.5, 0.6};
}  // namespace severity_table

inline image::Plane corrupt_image(const image::Plane& in, const std::string& kind, int severity, Rng& rng) {
    namespace st = severity_table;
    const auto s = static_cast<std::size_t>(severity - 1);
    image::Plane out = in;
    if (kind == "gaussian_noise") {
        for (double& v : out.pixels) v += rng.normal(0.0, st::gaussian_sigma[s]);
    } else if (kind == "shot_noise") {
        const double lambda = st::shot_photons[s];
        for (double& v : out.pixels) v = static_cast<double>(rng.poisson(std::max(v, 0.0) * lambda)) / lambda;
    } else if (kind == "blur") {
        out = image::gaussian_blur(in, st::blur_sigma[s]);
    } else if (kind == "contrast") {
        double mean = 0.0;
        for (double v : in.pixels) mean += v;
        mean /= static_cast<double>(in.pixels.size());
        for (double& v : out.pixels) v = (v - mean) * st::contrast_factor[s] + mean;
    } else if (kind == "pixelate") {
        const auto h = static_cast<std::size_t>(std::round(static_cast<double>(in.height) * st::pixelate_scale[s]));
        const auto w = static_cast<std::size_t>(std::round(static_cast<double>(in.width) * st::pixelate_scale[s]));
        out = image::nearest_resize(image::resize(in, h, w), in.height, in.width);
    } else if (kind == "elastic_like_warp") {
        const double amp = st::warp_amplitude[s];
        image::Plane dx = detail::smooth_field(rng, in.height, 2, 0.5, 1.0);
        image::Plane dy = detail::smooth_field(rng, in.height, 2, 0.5, 1.0);
        for (std::size_t y = 0; y < in.height; ++y)
            for (std::size_t x = 0; x < in.width; ++x) {
                const std::size_t i = y * in.width + x;
                out.pixels[i] = in.sample(static_cast<double>(y) + amp * dy.pixels[i], static_cast<double>(x) + amp * dx.pixels[i]);
            }
    } else if (kind == "brightness") {
        for (double& v : out.pixels) v += st::brightness_shift[s];
    } else if (kind == "fog_like_haze") {
        const double a = st::haze_alpha[s];
        image::Plane fog = detail::smooth_field(rng, in.height, 3, 0.05, 0.15);
        for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = (1.0 - a) * in.pixels[i] + a * (0.65 + fog.pixels[i]);
    } else {
        throw ConfigError("unknown corruption kind '" + kind + "'");
    }
    image::clip01(out);
    return out;
}

/// Label- and mask-preserving corruption of every sample.
inline Dataset corrupt(const Dataset& ds, const std::string& kind, int severity, std::uint64_t seed) {
    const auto& kinds = corruption_kinds();
    if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) throw ConfigError("unknown corruption kind '" + kind + "'");
    if (severity < 0 || severity > 5) throw ConfigError("severity must be in 1..5 (0 = identity), got " + std::to_string(severity));
    Dataset out = ds;
    out.kind = kind;
    out.severity = severity;
    out.seed = seed;
    if (severity == 0) return out;
    const std::uint64_t base = mix_seed(mix_seed(seed, hash_name(kind)), static_cast<std::uint64_t>(severity));
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        Rng rng(mix_seed(base, i));
        image::Plane p{ds.side, ds.side, ds.samples[i].image};
        out.samples[i].image = corrupt_image(p, kind, severity, rng).pixels;
    }
    return out;
}

struct StreamSpec {
    std::vector<std::string> kinds = corruption_kinds();
    std::vector<int> severities = {5};  // one per kind, or a single value for all
    std::size_t per_domain = 200;
    std::size_t rounds = 1;
    std::uint64_t seed = 1;
};

struct DomainStream {
    std::vector<Dataset> domains;  // in visiting order within a round
    std::size_t rounds = 1;

    std::size_t segments() const { return domains.size() * rounds; }
    const Dataset& segment(std::size_t i) const { return domains.at(i % domains.size()); }
};

/// Seed of the clean target pool; independent of every source draw.
inline std::uint64_t target_pool_seed(std::uint64_t seed) { return mix_seed(seed, hash_name("target-pool")); }

inline DomainStream build_stream(const StreamSpec& spec) {
    if (spec.kinds.empty()) throw ConfigError("stream needs at least one corruption kind");
    if (spec.per_domain == 0) throw ConfigError("stream needs per_domain >= 1");
    if (spec.rounds == 0) throw ConfigError("stream needs rounds >= 1");
    if (spec.severities.size() != 1 && spec.severities.size() != spec.kinds.size()) {
        throw ConfigError("stream severities must be a single value or one per kind");
    }
    const Dataset pool = generate_source(std::max(spec.per_domain, kNumClasses), target_pool_seed(spec.seed));
    DomainStream stream;
    stream.rounds = spec.rounds;
    for (std::size_t i = 0; i < spec.kinds.size(); ++i) {
        const int sev = spec.severities.size() == 1 ? spec.severities[0] : spec.severities[i];
        if (sev < 1 || sev > 5) throw ConfigError("stream severity must be in 1..5");
        Dataset d = corrupt(pool, spec.kinds[i], sev, mix_seed(spec.seed, i));
        d.samples.resize(spec.per_domain);
        stream.domains.push_back(std::move(d));
    }
    return stream;
}

// ---------------------------------------------------------------------------
// Dataset cache: "MOASEDS1" | u32 version | u64 side | u64 count | i32 severity
// | u64 seed | u32 len + kind | u32 len + comma-joined class names | samples
// (u32 label, side^2 f64 pixels, side^2 u8 mask). Little-endian.

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path.string());
    os.write("MOASEDS1", 8);
    io::put<std::uint32_t>(os, kDatasetFormatVersion);
    io::put<std::uint64_t>(os, ds.side);
    io::put<std::uint64_t>(os, ds.samples.size());
    io::put<std::int32_t>(os, ds.severity);
    io::put<std::uint64_t>(os, ds.seed);
    io::put_string(os, ds.kind);
    std::string names;
    for (std::size_t c = 0; c < kNumClasses; ++c) names += (c ? "," : "") + std::string(kClassNames[c]);
    io::put_string(os, names);
    for (const Sample& s : ds.samples) {
        io::put<std::uint32_t>(os, s.label);
        for (double v : s.image) io::put<double>(os, v);
        os.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
    }
}

inline Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::string(magic, 8) != "MOASEDS1") throw FormatError(path.string() + " is not a dataset cache");
    if (io::get<std::uint32_t>(is) != kDatasetFormatVersion) throw FormatError("unsupported dataset cache version");
    Dataset ds;
    ds.side = io::get<std::uint64_t>(is);
    const auto count = io::get<std::uint64_t>(is);
    ds.severity = io::get<std::int32_t>(is);
    ds.seed = io::get<std::uint64_t>(is);
    ds.kind = io::get_string(is);
    io::get_string(is);
    if (ds.side == 0 || ds.side > 4096 || count > (1u << 24)) throw FormatError("dataset header out of range");
    const std::size_t px = ds.side * ds.side;
    ds.samples.resize(count);
    for (Sample& s : ds.samples) {
        s.label = io::get<std::uint32_t>(is);
        s.image.resize(px);
        for (double& v : s.image) v = io::get<double>(is);
        s.mask.resize(px);
        if (!is.read(reinterpret_cast<char*>(s.mask.data()), static_cast<std::streamsize>(px))) throw FormatError("truncated dataset cache");
    }
    return ds;
}

/// Loads `path` when present, otherwise generates and stores it.
template <class Make>
Dataset cached_dataset(const std::filesystem::path& path, Make&& make) {
    if (std::filesystem::exists(path)) return read_dataset(path);
    Dataset ds = make();
    write_dataset(path, ds);
    return ds;
}

}  // namespace moase
