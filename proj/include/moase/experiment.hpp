#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "moase/checkpoint.hpp"
#include "moase/config.hpp"
#include "moase/ctta.hpp"
#include "moase/report.hpp"

namespace moase {

inline std::uint64_t source_train_seed(std::uint64_t seed) { return mix_seed(seed, hash_name("source-train")); }
inline std::uint64_t source_heldout_seed(std::uint64_t seed) { return mix_seed(seed, hash_name("source-heldout")); }

/// Optional dataset cache directory; file names carry every generation input.
inline Dataset maybe_cached(const std::optional<fs::path>& dir, const std::string& name, const std::function<Dataset()>& make) {
    if (!dir) return make();
    fs::create_directories(*dir);
    return cached_dataset(*dir / (name + ".bin"), make);
}

inline PretrainResult pretrain(const RunConfig& cfg, const std::optional<fs::path>& cache = std::nullopt) {
    cfg.validate();
    const auto& p = cfg.pretrain;
    const std::uint64_t ts = source_train_seed(cfg.seed), hs = source_heldout_seed(cfg.seed);
    const Dataset train = maybe_cached(cache, "source_" + std::to_string(ts) + "_" + std::to_string(p.train_size), [&] { return generate_source(p.train_size, ts); });
    const Dataset held = maybe_cached(cache, "source_" + std::to_string(hs) + "_" + std::to_string(p.heldout_size), [&] { return generate_source(p.heldout_size, hs); });
    PretrainOptions opt;
    opt.epochs = p.epochs;
    opt.lr = p.lr;
    opt.batch = p.batch;
    opt.seed = cfg.seed;
    opt.threshold = p.threshold;
    return pretrain_source(train, held, cfg.backbone, opt);
}

inline DomainStream make_stream(const RunConfig& cfg, const std::optional<fs::path>& cache = std::nullopt) {
    const StreamSpec spec = cfg.effective_stream();
    if (!cache) return build_stream(spec);
    // Cache each domain under a name carrying its generation inputs.
    DomainStream stream;
    stream.rounds = spec.rounds;
    std::optional<DomainStream> fresh;
    for (std::size_t i = 0; i < spec.kinds.size(); ++i) {
        const int sev = spec.severities.size() == 1 ? spec.severities[0] : spec.severities[i];
        const std::string name = "domain_" + std::to_string(i) + "_" + spec.kinds[i] + "_s" + std::to_string(sev) + "_seed" + std::to_string(spec.seed) + "_n" +
                                 std::to_string(spec.per_domain);
        stream.domains.push_back(maybe_cached(cache, name, [&] {
            if (!fresh) fresh = build_stream(spec);
            return fresh->domains[i];
        }));
    }
    return stream;
}

inline void check_geometry(const RunConfig& cfg, const Checkpoint& ck) {
    if (!(ck.backbone == cfg.backbone)) {
        BackboneConfig a = ck.backbone, b = cfg.backbone;
        a.adapter_scale = b.adapter_scale;
        if (!(a == b)) throw ConfigError("checkpoint geometry does not match the config backbone");
    }
}

struct AdaptRun {
    StreamResult method;
    StreamResult baseline;
};

inline StreamOptions stream_options(const RunConfig& cfg) {
    StreamOptions o;
    o.backbone = cfg.backbone;
    o.moase = cfg.effective_moase();
    o.adapt = cfg.adapt;
    o.seed = cfg.seed;
    return o;
}

inline AdaptRun run_adapt(const RunConfig& cfg, const ModelParams& source, const DomainStream& stream,
                          std::function<void(std::size_t, const AdaptState&)> on_segment_end = {}) {
    cfg.validate();
    StreamOptions o = stream_options(cfg);
    AdaptRun r;
    r.baseline = run_baseline(source, stream, o);
    o.on_segment_end = std::move(on_segment_end);
    r.method = run_stream(source, stream, o);
    return r;
}

/// Everything analyze/report need, written into `dir`.
inline void write_adapt_run(const fs::path& dir, const RunConfig& cfg, const Checkpoint& source, const AdaptRun& r) {
    fs::create_directories(dir);
    write_text(dir / run_files::config, serialize_config(cfg));
    save_checkpoint(dir / run_files::source, source.backbone, source.params);
    write_text(dir / run_files::metrics, metrics_csv(r.method));
    write_text(dir / run_files::baseline_metrics, metrics_csv(r.baseline));
    write_bank(dir / run_files::bank, bank_from(r.method));
    write_bank(dir / run_files::baseline_bank, bank_from(r.baseline));
}

}  // namespace moase
