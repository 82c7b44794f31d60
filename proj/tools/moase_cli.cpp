// moase: pretrain / adapt / analyze / report / sweep.
//
// Exit codes: 0 ok, 1 configuration or missing input, 2 pretraining failed,
// 3 numeric failure during adaptation.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "moase/moase.hpp"

namespace fs = std::filesystem;
using namespace moase;

namespace {

enum Exit { ok = 0, config_error = 1, pretrain_error = 2, numeric_error = 3 };

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> rounds;
    std::optional<std::string> ablate;
    std::optional<std::string> axis;
    std::optional<double> lr;
};

void report_error(const std::optional<fs::path>& dir, const std::string& kind, const std::string& message, std::optional<double> accuracy = {}) {
    nlohmann::ordered_json j{{"error", kind}, {"message", message}};
    if (accuracy) j["final_accuracy"] = *accuracy;
    std::cerr << j.dump() << "\n";
    if (dir && fs::is_directory(*dir)) write_text(*dir / "error.json", j.dump(2) + "\n");
}

RunConfig resolve_config(const std::string& path, const Overrides& o) {
    RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
    if (o.seed) cfg.seed = *o.seed;
    if (o.rounds) cfg.stream.rounds = *o.rounds;
    if (o.ablate) cfg.ablation = *o.ablate;
    if (o.axis) cfg.moase.axis = parse_sdd_axis(*o.axis);
    if (o.lr) cfg.adapt.lr = *o.lr;
    cfg.validate();
    return cfg;
}

template <class F>
int guarded(const std::optional<fs::path>& dir, F&& body) {
    try {
        body();
        return ok;
    } catch (const PretrainError& e) {
        report_error(dir, "pretrain", e.what(), e.final_accuracy());
        return pretrain_error;
    } catch (const NumericError& e) {
        report_error(dir, "numeric", e.what());
        return numeric_error;
    } catch (const ConfigError& e) {
        report_error(dir, "config", e.what());
        return config_error;
    } catch (const ReportError& e) {
        report_error(dir, "missing", e.what());
        return config_error;
    } catch (const std::exception& e) {
        report_error(dir, "error", e.what());
        return config_error;
    }
}

int cmd_pretrain(const std::string& config, const fs::path& out, const Overrides& o) {
    return guarded(out, [&] {
        const RunConfig cfg = resolve_config(config, o);
        fs::create_directories(out);
        write_text(out / run_files::config, serialize_config(cfg));
        const PretrainResult r = pretrain(cfg, out / "data");
        save_checkpoint(out / run_files::source, cfg.backbone, r.params);
        std::string csv = "epoch,loss\n";
        for (std::size_t i = 0; i < r.epoch_loss.size(); ++i) csv += std::to_string(i + 1) + "," + fixed(r.epoch_loss[i], 9) + "\n";
        csv += "train_accuracy," + fixed(r.train_accuracy, 6) + "\nheldout_accuracy," + fixed(r.heldout_accuracy, 6) + "\n";
        write_text(out / "pretrain_metrics.csv", csv);
        std::cout << "held-out source accuracy " << fixed(100.0 * r.heldout_accuracy, 2) << "%\n";
    });
}

void adapt_into(const fs::path& out, const RunConfig& cfg, const Checkpoint& ck, const std::optional<AdaptRun>& baseline = {}) {
    fs::create_directories(out / run_files::snapshots);
    const DomainStream stream = make_stream(cfg, out.parent_path() / "data");
    auto snapshot = [&](std::size_t seg, const AdaptState& s) {
        char name[32];
        std::snprintf(name, sizeof name, "segment_%03zu.ckpt", seg);
        save_checkpoint(out / run_files::snapshots / name, cfg.backbone, s.teacher);
    };
    AdaptRun r;
    if (baseline) {
        StreamOptions o = stream_options(cfg);
        o.on_segment_end = snapshot;
        r.baseline = baseline->baseline;
        r.method = run_stream(ck.params, stream, o);
    } else {
        r = run_adapt(cfg, ck.params, stream, snapshot);
    }
    write_adapt_run(out, cfg, ck, r);
    std::cout << fs::path(out).filename().string() << ": mean error " << fixed(r.method.mean_error(), 2) << "% (source " << fixed(r.baseline.mean_error(), 2)
              << "%)\n";
}

fs::path default_checkpoint(const std::string& given, const fs::path& out) {
    if (!given.empty()) return given;
    return out / run_files::source;
}

int cmd_adapt(const std::string& config, const std::string& checkpoint, const fs::path& out, const Overrides& o) {
    return guarded(out, [&] {
        const RunConfig cfg = resolve_config(config, o);
        const fs::path ckpath = default_checkpoint(checkpoint, out);
        if (!fs::exists(ckpath)) throw ConfigError("checkpoint not found: " + ckpath.string());
        const Checkpoint ck = load_checkpoint(ckpath);
        check_geometry(cfg, ck);
        fs::create_directories(out);
        adapt_into(out, cfg, ck);
    });
}

int cmd_report(const fs::path& dir) {
    return guarded(dir, [&] {
        if (!fs::is_directory(dir)) throw ReportError("run directory missing: " + dir.string());
        const RunReport r = make_report(dir);
        std::cout << "mean error " << fixed(r.errors.method_mean, 2) << "% vs source " << fixed(r.errors.baseline_mean, 2) << "%, gain "
                  << fixed(r.errors.gain, 2) << "\n";
    });
}

int cmd_sweep(const std::string& config, const std::string& checkpoint, const fs::path& out, const Overrides& o) {
    return guarded(out, [&] {
        const RunConfig base = resolve_config(config, o);
        const fs::path ckpath = default_checkpoint(checkpoint, out);
        if (!fs::exists(ckpath)) throw ConfigError("checkpoint not found: " + ckpath.string());
        const Checkpoint ck = load_checkpoint(ckpath);
        check_geometry(base, ck);
        fs::create_directories(out);
        write_text(out / run_files::config, serialize_config(base));

        // The baseline depends only on the source model and stream.
        AdaptRun shared;
        shared.baseline = run_baseline(ck.params, make_stream(base, out / "data"), stream_options(base));

        std::string summary = "point,experts,hidden,axis,mean_error,source_error,gain\n";
        auto point = [&](const std::string& name, RunConfig cfg) {
            cfg.validate();
            const fs::path dir = out / name;
            adapt_into(dir, cfg, ck, shared);
            const RunReport r = make_report(dir);
            summary += name + "," + std::to_string(cfg.moase.experts) + "," + std::to_string(cfg.moase.hidden) + "," + to_string(cfg.moase.axis) + "," +
                       fixed(r.errors.method_mean, 4) + "," + fixed(r.errors.baseline_mean, 4) + "," + fixed(r.errors.gain, 4) + "\n";
        };
        for (std::size_t e : base.sweep.experts) {
            RunConfig c = base;
            c.moase.experts = e;
            c.moase.schedule.clear();
            point("experts_" + std::to_string(e), c);
        }
        for (std::size_t h : base.sweep.hidden) {
            RunConfig c = base;
            c.moase.hidden = h;
            point("hidden_" + std::to_string(h), c);
        }
        for (SddAxis a : base.sweep.axes) {
            RunConfig c = base;
            c.moase.axis = a;
            point(std::string("axis_") + to_string(a), c);
        }
        write_text(out / "sweep.csv", summary);
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-activation-sparsity-experts continual test-time adaptation"};
    app.require_subcommand(1);

    std::string config, checkpoint, out;
    Overrides o;
    std::uint64_t seed = 0;
    std::size_t rounds = 0;
    std::string ablate, axis;
    double lr = 0.0;

    auto common = [&](CLI::App* c, bool adapt_flags) {
        c->add_option("--config", config, "JSON run configuration (defaults when omitted)");
        c->add_option("--out", out, "output / run directory")->required();
        c->add_option("--seed", seed, "override the run seed");
        if (!adapt_flags) return;
        c->add_option("--checkpoint", checkpoint, "source checkpoint (default: <out>/source.ckpt)");
        c->add_option("--rounds", rounds, "repeat the domain sequence this many times")->check(CLI::PositiveNumber);
        c->add_option("--ablate", ablate, "component set")->check(CLI::IsMember(ablation_names()));
        c->add_option("--sdd-axis", axis, "SDD ranking axis")->check(CLI::IsMember({"token", "channel"}));
        c->add_option("--lr", lr, "adaptation learning rate")->check(CLI::NonNegativeNumber);
    };
    auto* pre = app.add_subcommand("pretrain", "train the source model");
    common(pre, false);
    auto* ada = app.add_subcommand("adapt", "run online adaptation and the frozen-source baseline");
    common(ada, true);
    auto* ana = app.add_subcommand("analyze", "divergence, intra-class and saliency tables for a run");
    ana->add_option("--out", out, "run directory")->required();
    auto* rep = app.add_subcommand("report", "analyze plus report.md and series.json");
    rep->add_option("--out", out, "run directory")->required();
    auto* swp = app.add_subcommand("sweep", "expert-count, hidden-size and SDD-axis sweeps");
    common(swp, true);

    CLI11_PARSE(app, argc, argv);

    auto given = [](CLI::App* c, const char* name) { return c->count(name) > 0; };
    for (CLI::App* c : {pre, ada, swp}) {
        if (!c->parsed()) continue;
        if (given(c, "--seed")) o.seed = seed;
        if (c == pre) break;
        if (given(c, "--rounds")) o.rounds = rounds;
        if (given(c, "--ablate")) o.ablate = ablate;
        if (given(c, "--sdd-axis")) o.axis = axis;
        if (given(c, "--lr")) o.lr = lr;
    }

    if (pre->parsed()) return cmd_pretrain(config, out, o);
    if (ada->parsed()) return cmd_adapt(config, checkpoint, out, o);
    if (ana->parsed() || rep->parsed()) return cmd_report(out);
    return cmd_sweep(config, checkpoint, out, o);
}
