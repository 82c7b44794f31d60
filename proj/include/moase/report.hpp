#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moase/analysis.hpp"
#include "moase/binary_io.hpp"
#include "moase/checkpoint.hpp"
#include "moase/config.hpp"
#include "moase/ctta.hpp"

namespace moase {

namespace fs = std::filesystem;

// Run directory layout.
namespace run_files {
inline constexpr const char* config = "config.json";
inline constexpr const char* source = "source.ckpt";
inline constexpr const char* metrics = "metrics.csv";
inline constexpr const char* baseline_metrics = "baseline_metrics.csv";
inline constexpr const char* bank = "feature_bank.bin";
inline constexpr const char* baseline_bank = "baseline_feature_bank.bin";
inline constexpr const char* snapshots = "snapshots";
inline constexpr const char* divergence = "divergence.csv";
inline constexpr const char* ic = "ic.csv";
inline constexpr const char* saliency = "saliency.csv";
inline constexpr const char* report = "report.md";
inline constexpr const char* series = "series.json";
}  // namespace run_files

inline std::string fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + path.string());
    os << text;
}

inline std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Per-batch metrics CSV.

inline constexpr const char* kMetricsHeader = "segment,domain,round,kind,batch,samples,errors,student_errors,consistency,hp,loss";

inline std::string metrics_csv(const StreamResult& r) {
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const BatchRecord& b : r.batches) {
        out += std::to_string(b.segment) + "," + std::to_string(b.domain) + "," + std::to_string(b.round) + "," + b.kind + "," + std::to_string(b.batch) + "," +
               std::to_string(b.samples) + "," + std::to_string(b.errors) + "," + std::to_string(b.student_errors) + "," + fixed(b.consistency, 9) + "," +
               fixed(b.hp, 12) + "," + fixed(b.loss, 9) + "\n";
    }
    return out;
}

inline std::vector<BatchRecord> parse_metrics_csv(const std::string& text, const std::string& what) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kMetricsHeader) throw ReportError(what + ": unexpected header");
    std::vector<BatchRecord> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 11) throw ReportError(what + ": malformed row '" + line + "'");
        try {
            rows.push_back({std::stoul(f[0]), std::stoul(f[1]), std::stoul(f[2]), std::stoul(f[4]), f[3], std::stoul(f[5]), std::stoul(f[6]),
                            std::stoul(f[7]), std::stod(f[8]), std::stod(f[9]), std::stod(f[10])});
        } catch (const std::exception&) {
            throw ReportError(what + ": malformed row '" + line + "'");
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Feature bank: "MOASEFB1" | u32 version | u64 count | per domain: name,
// u64 n, u64 d, n*d f64, n u32 labels.

inline constexpr std::uint32_t kBankVersion = 1;

inline std::string segment_name(const SegmentResult& s, std::size_t rounds) {
    return rounds > 1 ? s.kind + "@" + std::to_string(s.round + 1) : s.kind;
}

inline DomainFeatureBank bank_from(const StreamResult& r) {
    std::size_t rounds = 0;
    for (const auto& s : r.segments) rounds = std::max(rounds, s.round + 1);
    DomainFeatureBank bank;
    for (const auto& s : r.segments) bank.push_back({segment_name(s, rounds), s.features, s.labels});
    return bank;
}

inline void write_bank(const fs::path& path, const DomainFeatureBank& bank) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + path.string());
    os.write("MOASEFB1", 8);
    io::put<std::uint32_t>(os, kBankVersion);
    io::put<std::uint64_t>(os, bank.size());
    for (const auto& d : bank) {
        io::put_string(os, d.name);
        io::put<std::uint64_t>(os, d.features.dim(0));
        io::put<std::uint64_t>(os, d.features.dim(1));
        for (double v : d.features.data()) io::put<double>(os, v);
        for (std::uint32_t l : d.labels) io::put<std::uint32_t>(os, l);
    }
}

inline DomainFeatureBank read_bank(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ReportError("feature bank missing: " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::string(magic, 8) != "MOASEFB1") throw FormatError(path.string() + " is not a feature bank");
    if (io::get<std::uint32_t>(is) != kBankVersion) throw FormatError("unsupported feature bank version");
    const auto count = io::get<std::uint64_t>(is);
    DomainFeatureBank bank;
    for (std::uint64_t i = 0; i < count; ++i) {
        DomainFeatures d;
        d.name = io::get_string(is, 1024);
        const auto n = io::get<std::uint64_t>(is), dim = io::get<std::uint64_t>(is);
        if (n == 0 || dim == 0 || n * dim > (1u << 26)) throw FormatError("feature bank entry has implausible size");
        std::vector<double> v(n * dim);
        for (double& x : v) x = io::get<double>(is);
        d.features = Tensor({n, dim}, std::move(v));
        d.labels.resize(n);
        for (auto& l : d.labels) l = io::get<std::uint32_t>(is);
        bank.push_back(std::move(d));
    }
    return bank;
}

// ---------------------------------------------------------------------------

struct DomainError {
    std::string name;
    double baseline = 0.0;  // %
    double method = 0.0;    // %
};

struct ErrorTable {
    std::vector<DomainError> rows;
    double baseline_mean = 0.0;
    double method_mean = 0.0;
    double gain = 0.0;  // baseline_mean - method_mean
};

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Aggregates per-batch rows into per-segment errors.
inline std::vector<std::pair<std::string, double>> segment_errors(const std::vector<BatchRecord>& rows) {
    std::map<std::size_t, std::tuple<std::string, std::size_t, std::size_t, std::size_t>> seg;
    std::size_t rounds = 0;
    for (const auto& b : rows) {
        auto& [kind, round, n, e] = seg[b.segment];
        kind = b.kind;
        round = b.round;
        n += b.samples;
        e += b.errors;
        rounds = std::max(rounds, b.round + 1);
    }
    std::vector<std::pair<std::string, double>> out;
    for (const auto& [i, v] : seg) {
        const auto& [kind, round, n, e] = v;
        out.emplace_back(rounds > 1 ? kind + "@" + std::to_string(round + 1) : kind, 100.0 * static_cast<double>(e) / static_cast<double>(n));
    }
    return out;
}

inline ErrorTable error_table(const std::vector<std::pair<std::string, double>>& baseline, const std::vector<std::pair<std::string, double>>& method) {
    if (baseline.size() != method.size()) throw ReportError("baseline and method metrics cover different segments");
    ErrorTable t;
    std::vector<double> b, m;
    for (std::size_t i = 0; i < method.size(); ++i) {
        if (baseline[i].first != method[i].first) throw ReportError("baseline and method metrics disagree on segment " + std::to_string(i));
        t.rows.push_back({method[i].first, baseline[i].second, method[i].second});
        b.push_back(baseline[i].second);
        m.push_back(method[i].second);
    }
    t.baseline_mean = mean_of(b);
    t.method_mean = mean_of(m);
    t.gain = t.baseline_mean - t.method_mean;
    return t;
}

/// Recomputes the table's derived numbers and fails on any disagreement.
inline void verify_identities(const ErrorTable& t) {
    double b = 0.0, m = 0.0;
    for (const auto& r : t.rows) {
        b += r.baseline;
        m += r.method;
    }
    const double n = static_cast<double>(std::max<std::size_t>(t.rows.size(), 1));
    if (std::abs(b / n - t.baseline_mean) > 1e-9 || std::abs(m / n - t.method_mean) > 1e-9) throw ReportError("mean is not the average of per-domain errors");
    if (std::abs((t.baseline_mean - t.method_mean) - t.gain) > 1e-9) throw ReportError("gain is not baseline minus method");
}

struct BankAnalysis {
    std::vector<double> js;                 // adjacent pairs
    std::vector<IntraClass> ic;             // per domain
    double mean_js() const { return mean_of(js); }
    double mean_ic() const {
        std::vector<double> v;
        for (const auto& c : ic) v.push_back(c.mean);
        return mean_of(v);
    }
};

inline BankAnalysis analyze_bank(const DomainFeatureBank& bank, std::size_t classes) {
    BankAnalysis a;
    if (bank.size() >= 2) a.js = inter_domain_js(bank);
    for (const auto& d : bank) {
        try {
            a.ic.push_back(intra_class_divergence(d.features, d.labels, classes));
        } catch (const ValidationError& e) {
            throw ValidationError("domain '" + d.name + "': " + e.what());
        }
    }
    return a;
}

struct SaliencyRow {
    std::string mode;
    double q = 0.0;
    double ratio = 0.0;
};

/// Evaluation batch for the saliency split: clean samples, seed-derived.
inline Dataset saliency_batch(std::uint64_t seed, std::size_t n = 64) { return generate_source(n, mix_seed(seed, hash_name("saliency"))); }

inline std::vector<SaliencyRow> saliency_table(const ModelParams& source, const BackboneConfig& cfg, std::uint64_t seed, double q = 0.25) {
    const Dataset ds = saliency_batch(seed);
    std::vector<std::vector<std::uint8_t>> masks;
    for (const auto& s : ds.samples) masks.push_back(s.mask);
    const Tensor images = batch_images(ds, 0, ds.size());
    return {{"high-only", q, saliency_split(source, images, masks, cfg, RetainMode::high_only, q)},
            {"low-only", q, saliency_split(source, images, masks, cfg, RetainMode::low_only, q)}};
}

struct RunReport {
    ErrorTable errors;
    std::vector<std::string> domains;
    BankAnalysis method;
    BankAnalysis baseline;
    std::vector<SaliencyRow> saliency;
    CostTable costs;
};

inline void require(const fs::path& dir, const char* file, const char* what) {
    if (!fs::exists(dir / file)) throw ReportError(std::string(what) + " missing: " + (dir / file).string());
}

/// Reads a completed adapt run and writes divergence.csv, ic.csv and saliency.csv.
inline RunReport analyze_run(const fs::path& dir) {
    require(dir, run_files::config, "config copy");
    require(dir, run_files::metrics, "metrics");
    require(dir, run_files::baseline_metrics, "baseline metrics");
    require(dir, run_files::bank, "feature bank");
    require(dir, run_files::baseline_bank, "baseline feature bank");
    require(dir, run_files::source, "source checkpoint");
    const RunConfig cfg = load_config(dir / run_files::config);

    RunReport rep;
    rep.errors = error_table(segment_errors(parse_metrics_csv(read_text(dir / run_files::baseline_metrics), "baseline metrics")),
                             segment_errors(parse_metrics_csv(read_text(dir / run_files::metrics), "metrics")));
    verify_identities(rep.errors);
    const DomainFeatureBank bank = read_bank(dir / run_files::bank);
    const DomainFeatureBank base = read_bank(dir / run_files::baseline_bank);
    for (const auto& d : bank) rep.domains.push_back(d.name);
    rep.method = analyze_bank(bank, cfg.backbone.classes);
    rep.baseline = analyze_bank(base, cfg.backbone.classes);
    const Checkpoint ck = load_checkpoint(dir / run_files::source);
    ModelParams src = ck.params;
    attach_adapters(src, adapter_free(), 0);
    rep.saliency = saliency_table(src, ck.backbone, cfg.seed);
    rep.costs = count_costs(cfg.backbone, cfg.effective_moase());

    std::string div = "model,domain_a,domain_b,js\n";
    auto add_div = [&](const char* model, const DomainFeatureBank& b, const BankAnalysis& a) {
        for (std::size_t i = 0; i < a.js.size(); ++i) div += std::string(model) + "," + b[i].name + "," + b[i + 1].name + "," + fixed(a.js[i], 12) + "\n";
    };
    add_div("baseline", base, rep.baseline);
    add_div("method", bank, rep.method);
    write_text(dir / run_files::divergence, div);

    std::string ic = "model,domain,class,ic\n";
    auto add_ic = [&](const char* model, const DomainFeatureBank& b, const BankAnalysis& a) {
        for (std::size_t i = 0; i < a.ic.size(); ++i)
            for (std::size_t c = 0; c < a.ic[i].per_class.size(); ++c)
                ic += std::string(model) + "," + b[i].name + "," + (c < kNumClasses ? kClassNames[c] : std::to_string(c)) + "," + fixed(a.ic[i].per_class[c], 12) +
                      "\n";
    };
    add_ic("baseline", base, rep.baseline);
    add_ic("method", bank, rep.method);
    write_text(dir / run_files::ic, ic);

    std::string sal = "mode,q,foreground_ratio\n";
    for (const auto& s : rep.saliency) sal += s.mode + "," + fixed(s.q, 4) + "," + fixed(s.ratio, 9) + "\n";
    write_text(dir / run_files::saliency, sal);
    return rep;
}

inline std::string render_markdown(const RunReport& r, const RunConfig& cfg) {
    std::ostringstream md;
    md << "# Run report\n\n";
    md << "seed " << cfg.seed << ", ablation `" << cfg.ablation << "`, E=" << cfg.moase.experts << ", h=" << cfg.moase.hidden << ", axis "
       << to_string(cfg.moase.axis) << ", lr " << cfg.adapt.lr << ", rounds " << cfg.stream.rounds << "\n\n";
    md << "## Online error (%)\n\n| domain | source | method |\n|---|---:|---:|\n";
    for (const auto& row : r.errors.rows) md << "| " << row.name << " | " << fixed(row.baseline, 2) << " | " << fixed(row.method, 2) << " |\n";
    md << "| **Mean** | " << fixed(r.errors.baseline_mean, 2) << " | " << fixed(r.errors.method_mean, 2) << " |\n";
    md << "\nGain: " << (r.errors.gain >= 0 ? "+" : "") << fixed(r.errors.gain, 2) << "\n\n";
    md << "## Inter-domain JS (adjacent pairs)\n\n| pair | source | method |\n|---|---:|---:|\n";
    for (std::size_t i = 0; i < r.method.js.size(); ++i) {
        md << "| " << r.domains[i] << " -> " << r.domains[i + 1] << " | " << fixed(r.baseline.js[i], 6) << " | " << fixed(r.method.js[i], 6) << " |\n";
    }
    md << "| **Mean** | " << fixed(r.baseline.mean_js(), 6) << " | " << fixed(r.method.mean_js(), 6) << " |\n\n";
    md << "## Intra-class divergence (class mean)\n\n| domain | source | method |\n|---|---:|---:|\n";
    for (std::size_t i = 0; i < r.method.ic.size(); ++i) md << "| " << r.domains[i] << " | " << fixed(r.baseline.ic[i].mean, 4) << " | " << fixed(r.method.ic[i].mean, 4) << " |\n";
    md << "| **Mean** | " << fixed(r.baseline.mean_ic(), 4) << " | " << fixed(r.method.mean_ic(), 4) << " |\n\n";
    md << "## Saliency split\n\n| retained | q | foreground ratio |\n|---|---:|---:|\n";
    for (const auto& s : r.saliency) md << "| " << s.mode << " | " << fixed(s.q, 2) << " | " << fixed(s.ratio, 4) << " |\n";
    md << "\n## Cost\n\n| quantity | value |\n|---|---:|\n";
    md << "| trainable (adapter) params | " << r.costs.trainable_params << " |\n";
    md << "| total params | " << r.costs.total_params << " |\n";
    md << "| backbone MACs / sample | " << r.costs.backbone_macs << " |\n";
    md << "| adapter MACs / sample | " << r.costs.adapter_macs << " |\n";
    return md.str();
}

inline std::string render_series(const RunReport& r) {
    nlohmann::ordered_json j;
    std::vector<double> eb, em, icb, icm;
    for (const auto& row : r.errors.rows) {
        eb.push_back(row.baseline);
        em.push_back(row.method);
    }
    for (const auto& c : r.baseline.ic) icb.push_back(c.mean);
    for (const auto& c : r.method.ic) icm.push_back(c.mean);
    j["domains"] = r.domains;
    j["error_baseline"] = eb;
    j["error_method"] = em;
    j["mean_error_baseline"] = r.errors.baseline_mean;
    j["mean_error_method"] = r.errors.method_mean;
    j["gain"] = r.errors.gain;
    j["js_baseline"] = r.baseline.js;
    j["js_method"] = r.method.js;
    j["ic_baseline"] = icb;
    j["ic_method"] = icm;
    nlohmann::ordered_json sal = nlohmann::ordered_json::object();
    for (const auto& s : r.saliency) sal[s.mode] = s.ratio;
    j["saliency"] = sal;
    return j.dump(2) + "\n";
}

/// analyze_run plus report.md and series.json.
inline RunReport make_report(const fs::path& dir) {
    RunReport r = analyze_run(dir);
    const RunConfig cfg = load_config(dir / run_files::config);
    write_text(dir / run_files::report, render_markdown(r, cfg));
    write_text(dir / run_files::series, render_series(r));
    return r;
}

}  // namespace moase
