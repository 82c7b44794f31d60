#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "moase/backbone.hpp"
#include "moase/binary_io.hpp"

namespace moase {

// Layout (little-endian):
//   magic "MOASECK1", u32 version
//   backbone: u64 image, patch, dim, heads, depth, classes, mlp_hidden; f64 adapter_scale
//   adapter:  u64 experts (0 = none), u64 hidden
//   u64 tensor count, then per tensor: name, u64 rank, u64 dims..., f64 values...

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'A', 'S', 'E', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    BackboneConfig backbone;
    ModelParams params;
};

inline void write_checkpoint(std::ostream& os, const BackboneConfig& cfg, const ModelParams& p) {
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::put<std::uint32_t>(os, kCheckpointVersion);
    for (std::size_t v : {cfg.image, cfg.patch, cfg.dim, cfg.heads, cfg.depth, cfg.classes, cfg.mlp_hidden}) io::put<std::uint64_t>(os, v);
    io::put<double>(os, cfg.adapter_scale);
    std::uint64_t experts = 0, hidden = 0;
    if (p.has_adapters()) {
        experts = p.blocks.front().adapter->experts.size();
        hidden = p.blocks.front().adapter->experts.front().b_down.size();
    }
    io::put<std::uint64_t>(os, experts);
    io::put<std::uint64_t>(os, hidden);
    std::uint64_t count = 0;
    visit_model([&](const std::string&, const Tensor&) { ++count; }, p);
    io::put<std::uint64_t>(os, count);
    visit_model(
        [&](const std::string& name, const Tensor& t) {
            io::put_string(os, name);
            io::put<std::uint64_t>(os, t.rank());
            for (std::size_t d : t.shape()) io::put<std::uint64_t>(os, d);
            for (double v : t.data()) io::put<double>(os, v);
        },
        p);
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError("not a checkpoint file");
    if (const auto v = io::get<std::uint32_t>(is); v != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v));
    Checkpoint ck;
    for (std::size_t* f : {&ck.backbone.image, &ck.backbone.patch, &ck.backbone.dim, &ck.backbone.heads, &ck.backbone.depth, &ck.backbone.classes,
                           &ck.backbone.mlp_hidden}) {
        *f = io::get<std::uint64_t>(is);
    }
    ck.backbone.adapter_scale = io::get<double>(is);
    try {
        ck.backbone.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    const auto experts = io::get<std::uint64_t>(is);
    const auto hidden = io::get<std::uint64_t>(is);

    // Build the skeleton, then overwrite every tensor by name.
    ck.params = init_model(ck.backbone, 0);
    if (experts > 0) {
        MoaseConfig m;
        m.experts = experts;
        m.hidden = hidden;
        attach_adapters(ck.params, m, 0);
    }
    const auto count = io::get<std::uint64_t>(is);
    std::uint64_t seen = 0;
    visit_model(
        [&](const std::string& name, Tensor& t) {
            if (seen++ >= count) throw FormatError("checkpoint is missing tensor " + name);
            const std::string stored = io::get_string(is, 256);
            if (stored != name) throw FormatError("checkpoint tensor order: expected " + name + ", found " + stored);
            const auto rank = io::get<std::uint64_t>(is);
            if (rank > 8) throw FormatError("checkpoint tensor " + name + " has implausible rank");
            Shape s(rank);
            for (auto& d : s) d = io::get<std::uint64_t>(is);
            if (s != t.shape()) throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(s) + ", expected " + shape_str(t.shape()));
            for (double& v : t.data()) v = io::get<double>(is);
        },
        ck.params);
    if (seen != count) throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " + std::to_string(seen));
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const BackboneConfig& cfg, const ModelParams& p) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + path.string());
    write_checkpoint(os, cfg, p);
    if (!os) throw FormatError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    return read_checkpoint(is);
}

}  // namespace moase
