#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "moase/augment.hpp"
#include "moase/backbone.hpp"
#include "moase/ctta.hpp"
#include "moase/domains.hpp"

namespace moase {

struct PretrainConfig {
    std::size_t train_size = 6000;
    std::size_t heldout_size = 1000;
    std::size_t epochs = 20;
    double lr = 2e-3;
    std::size_t batch = 32;
    double threshold = 0.95;

    friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct SweepConfig {
    std::vector<std::size_t> experts = {2, 4, 8, 16};
    std::vector<std::size_t> hidden = {4, 8, 16, 32};
    std::vector<SddAxis> axes = {SddAxis::token, SddAxis::channel};

    friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

/// Component sets, from nothing (frozen source) to everything.
inline const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names = {"none", "moe-only", "sdd", "sdd+dag", "sdd+dag+asg", "full"};
    return names;
}

struct RunConfig {
    std::uint64_t seed = 1;
    std::string ablation = "full";
    BackboneConfig backbone;
    MoaseConfig moase;
    StreamSpec stream;
    AdaptConfig adapt;
    PretrainConfig pretrain;
    SweepConfig sweep;

    /// The adapter configuration after applying the ablation.
    MoaseConfig effective_moase() const {
        MoaseConfig m = moase;
        const auto& names = ablation_names();
        const auto level = std::find(names.begin(), names.end(), ablation) - names.begin();
        if (level == static_cast<std::ptrdiff_t>(names.size())) throw ConfigError("unknown ablation '" + ablation + "'");
        if (level == 0) {
            m.experts = 0;
            return m;
        }
        m.use_sdd = level >= 2;
        m.use_dag = level >= 3;
        m.use_asg = level >= 4;
        m.use_hp = level >= 5;
        return m;
    }

    StreamSpec effective_stream() const {
        StreamSpec s = stream;
        s.seed = seed;
        return s;
    }

    void validate() const {
        backbone.validate();
        moase.validate();
        effective_moase();
        adapt.validate();
        if (stream.kinds.empty()) throw ConfigError("stream.kinds must not be empty");
        for (const auto& k : stream.kinds) {
            const auto& all = corruption_kinds();
            if (std::find(all.begin(), all.end(), k) == all.end()) throw ConfigError("stream.kinds: unknown corruption kind '" + k + "'");
        }
        if (stream.severities.size() != 1 && stream.severities.size() != stream.kinds.size()) {
            throw ConfigError("stream.severities must hold one value or one per kind");
        }
        for (int s : stream.severities)
            if (s < 1 || s > 5) throw ConfigError("stream.severities must lie in 1..5");
        if (stream.per_domain == 0 || stream.rounds == 0) throw ConfigError("stream.per_domain and stream.rounds must be >= 1");
        if (backbone.image != kImageSide) throw ConfigError("backbone.image must be " + std::to_string(kImageSide) + " for the synthetic domains");
        if (backbone.classes != kNumClasses) throw ConfigError("backbone.classes must be " + std::to_string(kNumClasses) + " for the synthetic domains");
        if (pretrain.train_size < kNumClasses || pretrain.heldout_size < kNumClasses) throw ConfigError("pretrain sizes must be >= number of classes");
        if (pretrain.epochs == 0 || pretrain.batch == 0 || !(pretrain.lr > 0.0)) throw ConfigError("pretrain epochs, batch and lr must be positive");
        if (!(pretrain.threshold >= 0.0 && pretrain.threshold <= 1.0)) throw ConfigError("pretrain.threshold must lie in [0, 1]");
        for (std::size_t e : sweep.experts)
            if (e < 2 || e % 2) throw ConfigError("sweep.experts values must be even and >= 2");
        for (std::size_t h : sweep.hidden)
            if (h == 0) throw ConfigError("sweep.hidden values must be >= 1");
    }

    friend bool operator==(const RunConfig& a, const RunConfig& b);
};

namespace detail {

using nlohmann::json;

inline bool same(const MoaseConfig& a, const MoaseConfig& b) {
    if (a.schedule.size() != b.schedule.size()) return false;
    for (std::size_t i = 0; i < a.schedule.size(); ++i) {
        const SddSpec &x = a.schedule[i], &y = b.schedule[i];
        if (x.q != y.q || x.largest != y.largest || x.axis != y.axis) return false;
    }
    return a.experts == b.experts && a.hidden == b.hidden && a.eta == b.eta && a.axis == b.axis && a.use_sdd == b.use_sdd && a.use_dag == b.use_dag &&
           a.use_asg == b.use_asg && a.use_hp == b.use_hp;
}

inline bool same(const StreamSpec& a, const StreamSpec& b) {
    return a.kinds == b.kinds && a.severities == b.severities && a.per_domain == b.per_domain && a.rounds == b.rounds;
}

inline bool same(const AdaptConfig& a, const AdaptConfig& b) {
    return a.lr == b.lr && a.alpha == b.alpha && a.mu == b.mu && a.batch == b.batch && a.augs == b.augs;
}

/// Reads an object, rejecting keys outside `allowed`.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
    }

    void only(std::initializer_list<const char*> allowed) const {
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& [k, v] : j_.items()) {
            if (!ok.count(k)) throw ConfigError("unknown config key '" + key(k) + "'");
        }
    }

    template <class T>
    void get(const char* k, T& out) const {
        if (!j_.contains(k)) return;
        try {
            out = j_.at(k).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key '" + key(k) + "' has the wrong type");
        }
    }

    bool has(const char* k) const { return j_.contains(k); }
    Reader child(const char* k) const { return Reader(j_.at(k), key(k)); }
    const json& raw(const char* k) const { return j_.at(k); }
    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

private:
    const json& j_;
    std::string path_;
};

}  // namespace detail

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.seed == b.seed && a.ablation == b.ablation && a.backbone == b.backbone && detail::same(a.moase, b.moase) && detail::same(a.stream, b.stream) &&
           detail::same(a.adapt, b.adapt) && a.pretrain == b.pretrain && a.sweep == b.sweep;
}

inline nlohmann::json to_json(const RunConfig& c) {
    using nlohmann::json;
    json schedule = json::array();
    for (const SddSpec& s : c.moase.schedule) schedule.push_back({{"q", s.q}, {"largest", s.largest}});
    json views = json::array();
    for (const Augmentation& a : c.adapt.augs.views) views.push_back({{"scale", a.scale}, {"flip", a.flip}, {"jitter", a.jitter}});
    json axes = json::array();
    for (SddAxis a : c.sweep.axes) axes.push_back(to_string(a));
    const BackboneConfig& b = c.backbone;
    return {
        {"seed", c.seed},
        {"ablation", c.ablation},
        {"backbone",
         {{"image", b.image}, {"patch", b.patch}, {"dim", b.dim}, {"heads", b.heads}, {"depth", b.depth}, {"classes", b.classes}, {"mlp_hidden", b.mlp_hidden},
          {"adapter_scale", b.adapter_scale}}},
        {"moase",
         {{"experts", c.moase.experts}, {"hidden", c.moase.hidden}, {"eta", c.moase.eta}, {"axis", to_string(c.moase.axis)}, {"schedule", schedule},
          {"use_sdd", c.moase.use_sdd}, {"use_dag", c.moase.use_dag}, {"use_asg", c.moase.use_asg}, {"use_hp", c.moase.use_hp}}},
        {"stream", {{"kinds", c.stream.kinds}, {"severities", c.stream.severities}, {"per_domain", c.stream.per_domain}, {"rounds", c.stream.rounds}}},
        {"adapt", {{"lr", c.adapt.lr}, {"alpha", c.adapt.alpha}, {"mu", c.adapt.mu}, {"batch", c.adapt.batch}, {"augmentations", views}}},
        {"pretrain",
         {{"train_size", c.pretrain.train_size}, {"heldout_size", c.pretrain.heldout_size}, {"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr},
          {"batch", c.pretrain.batch}, {"threshold", c.pretrain.threshold}}},
        {"sweep", {{"experts", c.sweep.experts}, {"hidden", c.sweep.hidden}, {"axes", axes}}},
    };
}

/// Missing keys keep their defaults; unknown keys are errors. Validates.
inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::Reader r(j, "");
    r.only({"seed", "ablation", "backbone", "moase", "stream", "adapt", "pretrain", "sweep"});
    r.get("seed", c.seed);
    r.get("ablation", c.ablation);
    if (r.has("backbone")) {
        auto b = r.child("backbone");
        b.only({"image", "patch", "dim", "heads", "depth", "classes", "mlp_hidden", "adapter_scale"});
        b.get("image", c.backbone.image);
        b.get("patch", c.backbone.patch);
        b.get("dim", c.backbone.dim);
        b.get("heads", c.backbone.heads);
        b.get("depth", c.backbone.depth);
        b.get("classes", c.backbone.classes);
        b.get("mlp_hidden", c.backbone.mlp_hidden);
        b.get("adapter_scale", c.backbone.adapter_scale);
    }
    if (r.has("moase")) {
        auto m = r.child("moase");
        m.only({"experts", "hidden", "eta", "axis", "schedule", "use_sdd", "use_dag", "use_asg", "use_hp"});
        m.get("experts", c.moase.experts);
        m.get("hidden", c.moase.hidden);
        m.get("eta", c.moase.eta);
        std::string axis = to_string(c.moase.axis);
        m.get("axis", axis);
        c.moase.axis = parse_sdd_axis(axis);
        if (m.has("schedule")) {
            const auto& arr = m.raw("schedule");
            if (!arr.is_array()) throw ConfigError("moase.schedule must be an array");
            for (std::size_t i = 0; i < arr.size(); ++i) {
                detail::Reader e(arr[i], "moase.schedule[" + std::to_string(i) + "]");
                e.only({"q", "largest"});
                SddSpec s;
                e.get("q", s.q);
                e.get("largest", s.largest);
                s.axis = c.moase.axis;  // the schedule always follows moase.axis
                c.moase.schedule.push_back(s);
            }
        }
        m.get("use_sdd", c.moase.use_sdd);
        m.get("use_dag", c.moase.use_dag);
        m.get("use_asg", c.moase.use_asg);
        m.get("use_hp", c.moase.use_hp);
    }
    if (r.has("stream")) {
        auto s = r.child("stream");
        s.only({"kinds", "severities", "per_domain", "rounds"});
        s.get("kinds", c.stream.kinds);
        s.get("severities", c.stream.severities);
        s.get("per_domain", c.stream.per_domain);
        s.get("rounds", c.stream.rounds);
    }
    if (r.has("adapt")) {
        auto a = r.child("adapt");
        a.only({"lr", "alpha", "mu", "batch", "augmentations"});
        a.get("lr", c.adapt.lr);
        a.get("alpha", c.adapt.alpha);
        a.get("mu", c.adapt.mu);
        a.get("batch", c.adapt.batch);
        if (a.has("augmentations")) {
            const auto& arr = a.raw("augmentations");
            if (!arr.is_array()) throw ConfigError("adapt.augmentations must be an array");
            c.adapt.augs.views.clear();
            for (std::size_t i = 0; i < arr.size(); ++i) {
                detail::Reader e(arr[i], "adapt.augmentations[" + std::to_string(i) + "]");
                e.only({"scale", "flip", "jitter"});
                Augmentation v;
                e.get("scale", v.scale);
                e.get("flip", v.flip);
                e.get("jitter", v.jitter);
                c.adapt.augs.views.push_back(v);
            }
        }
    }
    if (r.has("pretrain")) {
        auto p = r.child("pretrain");
        p.only({"train_size", "heldout_size", "epochs", "lr", "batch", "threshold"});
        p.get("train_size", c.pretrain.train_size);
        p.get("heldout_size", c.pretrain.heldout_size);
        p.get("epochs", c.pretrain.epochs);
        p.get("lr", c.pretrain.lr);
        p.get("batch", c.pretrain.batch);
        p.get("threshold", c.pretrain.threshold);
    }
    if (r.has("sweep")) {
        auto s = r.child("sweep");
        s.only({"experts", "hidden", "axes"});
        s.get("experts", c.sweep.experts);
        s.get("hidden", c.sweep.hidden);
        if (s.has("axes")) {
            std::vector<std::string> names;
            s.get("axes", names);
            c.sweep.axes.clear();
            for (const auto& n : names) c.sweep.axes.push_back(parse_sdd_axis(n));
        }
    }
    c.validate();
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline std::string serialize_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

}  // namespace moase
