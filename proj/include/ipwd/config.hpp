#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ipwd/data.hpp"
#include "ipwd/errors.hpp"
#include "ipwd/losses.hpp"
#include "ipwd/net.hpp"
#include "ipwd/weighting.hpp"

namespace ipwd {

enum class Regime { Teacher, TwoStage, OneStage };

struct DataConfig {
    std::string source = "synthetic";  ///< "synthetic" or "csv"
    SyntheticSpec synthetic;
    std::string train_csv;
    std::string test_csv;
};

struct TeacherConfig {
    std::vector<std::size_t> hidden{128, 128};
    int epochs = 40;
    OptimizerConfig optimizer;
    std::string checkpoint;  ///< empty: distill trains a teacher first
};

struct StudentConfig {
    std::vector<std::size_t> hidden{8};
    bool dual_head = true;
    bool cls_to_backbone = false;
};

struct OneStageConfig {
    double alpha_T = 0.8;
    int ipwd_start_epoch = 0;  ///< 0 resolves to the start of the last quarter of training
    bool scale_ipw_by_alpha = false;
};

struct EvalConfig {
    std::size_t ece_bins = 10;
    std::size_t topk = 5;
    int every = 0;                    ///< test accuracy every n epochs; 0 only at the end
    std::vector<double> report_taus;  ///< empty resolves to {1, loss.tau}
};

// Small students are less stable than the teacher at the shared default step.
inline OptimizerConfig student_optimizer_defaults() {
    OptimizerConfig o;
    o.learning_rate.base = 0.01;
    return o;
}

struct RunConfig {
    Regime regime = Regime::TwoStage;
    std::uint64_t seed = 1;
    int epochs = 30;
    DataConfig data;
    TeacherConfig teacher;
    StudentConfig student;
    OptimizerConfig optimizer = student_optimizer_defaults();
    LossConfig loss;
    WeightingConfig weighting;
    OneStageConfig one_stage;
    EvalConfig eval;

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs must be non-negative");
        if (teacher.epochs < 0) throw ConfigError("teacher.epochs must be non-negative");
        if (data.source != "synthetic" && data.source != "csv") throw ConfigError("data.source must be synthetic or csv");
        if (data.source == "csv" && (data.train_csv.empty() || data.test_csv.empty())) {
            throw ConfigError("data.train_csv and data.test_csv are required for csv input");
        }
        if (teacher.hidden.empty() || student.hidden.empty()) throw ConfigError("networks need at least one hidden layer");
        for (auto w : teacher.hidden) {
            if (w == 0) throw ConfigError("teacher.hidden: zero-width layer");
        }
        for (auto w : student.hidden) {
            if (w == 0) throw ConfigError("student.hidden: zero-width layer");
        }
        teacher.optimizer.validate();
        optimizer.validate();
        loss.validate();
        weighting.validate();
        if (loss.mode == LossMode::Ipwd && weighting.use_cls_head && !student.dual_head) {
            throw ConfigError("IPWD with use_cls_head requires student.dual_head");
        }
        if (regime == Regime::OneStage) {
            if (!(one_stage.alpha_T > 0.0 && one_stage.alpha_T < 1.0)) throw ConfigError("one_stage.alpha_T must be in (0, 1)");
            // T + 1 means "never", which is how plain PS-KD is expressed in IPWD mode.
            if (one_stage.ipwd_start_epoch < 1 || one_stage.ipwd_start_epoch > epochs + 1) {
                throw ConfigError("one_stage.ipwd_start_epoch must be in [1, epochs + 1]");
            }
        }
        if (eval.ece_bins == 0) throw ConfigError("eval.ece_bins must be positive");
        if (eval.topk == 0) throw ConfigError("eval.topk must be positive");
        if (eval.every < 0) throw ConfigError("eval.every must be non-negative");
        for (double t : eval.report_taus) {
            if (!(t > 0.0)) throw ConfigError("eval.report_taus must be positive");
        }
    }
};

/// Epoch at which IPWD switches on to cover the last quarter of a T-epoch run.
inline int late_start_epoch(int total_epochs) { return total_epochs - total_epochs / 4 + 1; }

/// Fills the values that default to "derived from other settings".
inline RunConfig resolve(RunConfig cfg) {
    if (cfg.one_stage.ipwd_start_epoch == 0) cfg.one_stage.ipwd_start_epoch = late_start_epoch(cfg.epochs);
    if (cfg.eval.report_taus.empty()) {
        cfg.eval.report_taus.push_back(1.0);
        if (cfg.loss.tau != 1.0) cfg.eval.report_taus.push_back(cfg.loss.tau);
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// JSON

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::Teacher: return "TEACHER";
        case Regime::TwoStage: return "TWO_STAGE";
        case Regime::OneStage: return "ONE_STAGE";
    }
    return "?";
}

inline std::string to_string(LossMode m) {
    switch (m) {
        case LossMode::CeOnly: return "CE_ONLY";
        case LossMode::Kd: return "KD";
        case LossMode::Ipwd: return "IPWD";
    }
    return "?";
}

inline Regime parse_regime(const std::string& s) {
    if (s == "TEACHER") return Regime::Teacher;
    if (s == "TWO_STAGE") return Regime::TwoStage;
    if (s == "ONE_STAGE") return Regime::OneStage;
    throw ConfigError("unknown regime '" + s + "'");
}

inline LossMode parse_loss_mode(const std::string& s) {
    if (s == "CE_ONLY") return LossMode::CeOnly;
    if (s == "KD") return LossMode::Kd;
    if (s == "IPWD") return LossMode::Ipwd;
    throw ConfigError("unknown loss mode '" + s + "'");
}

using Json = nlohmann::ordered_json;

inline Json optimizer_to_json(const OptimizerConfig& o) {
    return Json{{"learning_rate", o.learning_rate.base},
                {"decay_epochs", o.learning_rate.decay_epochs},
                {"decay_factor", o.learning_rate.decay_factor},
                {"momentum", o.momentum},
                {"weight_decay", o.weight_decay},
                {"batch_size", o.batch_size}};
}

inline OptimizerConfig optimizer_from_json(const Json& j) {
    OptimizerConfig o;
    o.learning_rate.base = j.at("learning_rate").get<double>();
    o.learning_rate.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
    o.learning_rate.decay_factor = j.at("decay_factor").get<double>();
    o.momentum = j.at("momentum").get<double>();
    o.weight_decay = j.at("weight_decay").get<double>();
    o.batch_size = j.at("batch_size").get<std::size_t>();
    return o;
}

inline Json to_json(const RunConfig& c) {
    const auto& s = c.data.synthetic;
    Json j;
    j["regime"] = to_string(c.regime);
    j["seed"] = c.seed;
    j["epochs"] = c.epochs;
    j["data"] = Json{{"source", c.data.source},
                     {"train_csv", c.data.train_csv},
                     {"test_csv", c.data.test_csv},
                     {"synthetic",
                      {{"num_classes", s.num_classes},
                       {"contexts_per_class", s.contexts_per_class},
                       {"mixing_ratio", s.mixing_ratio},
                       {"context_proportions", s.context_proportions},
                       {"dim", s.dim},
                       {"train_per_class", s.train_per_class},
                       {"test_per_class", s.test_per_class},
                       {"class_spread", s.class_spread},
                       {"context_offset", s.context_offset},
                       {"noise_std", s.noise_std},
                       {"scale_spread", s.scale_spread},
                       {"seed", s.seed}}}};
    j["teacher"] = Json{{"hidden", c.teacher.hidden},
                        {"epochs", c.teacher.epochs},
                        {"optimizer", optimizer_to_json(c.teacher.optimizer)},
                        {"checkpoint", c.teacher.checkpoint}};
    j["student"] = Json{{"hidden", c.student.hidden},
                        {"dual_head", c.student.dual_head},
                        {"cls_to_backbone", c.student.cls_to_backbone}};
    j["optimizer"] = optimizer_to_json(c.optimizer);
    j["loss"] = Json{{"mode", to_string(c.loss.mode)}, {"alpha", c.loss.alpha}, {"beta", c.loss.beta}, {"tau", c.loss.tau}};
    j["weighting"] = Json{{"use_cls_head", c.weighting.use_cls_head},
                          {"normalize_logits", c.weighting.normalize_logits},
                          {"epsilon_floor", c.weighting.epsilon_floor},
                          {"weight_cap", c.weighting.weight_cap ? Json(*c.weighting.weight_cap) : Json(nullptr)},
                          {"renormalize_mean", c.weighting.renormalize_mean}};
    j["one_stage"] = Json{{"alpha_T", c.one_stage.alpha_T},
                          {"ipwd_start_epoch", c.one_stage.ipwd_start_epoch},
                          {"scale_ipw_by_alpha", c.one_stage.scale_ipw_by_alpha}};
    j["eval"] = Json{{"ece_bins", c.eval.ece_bins},
                     {"topk", c.eval.topk},
                     {"every", c.eval.every},
                     {"report_taus", c.eval.report_taus}};
    return j;
}

inline RunConfig from_json(const Json& j) {
    try {
        RunConfig c;
        c.regime = parse_regime(j.at("regime").get<std::string>());
        c.seed = j.at("seed").get<std::uint64_t>();
        c.epochs = j.at("epochs").get<int>();
        const auto& d = j.at("data");
        c.data.source = d.at("source").get<std::string>();
        c.data.train_csv = d.at("train_csv").get<std::string>();
        c.data.test_csv = d.at("test_csv").get<std::string>();
        const auto& s = d.at("synthetic");
        auto& spec = c.data.synthetic;
        spec.num_classes = s.at("num_classes").get<std::size_t>();
        spec.contexts_per_class = s.at("contexts_per_class").get<std::size_t>();
        spec.mixing_ratio = s.at("mixing_ratio").get<double>();
        spec.context_proportions = s.at("context_proportions").get<std::vector<double>>();
        spec.dim = s.at("dim").get<std::size_t>();
        spec.train_per_class = s.at("train_per_class").get<std::size_t>();
        spec.test_per_class = s.at("test_per_class").get<std::size_t>();
        spec.class_spread = s.at("class_spread").get<double>();
        spec.context_offset = s.at("context_offset").get<double>();
        spec.noise_std = s.at("noise_std").get<double>();
        spec.scale_spread = s.at("scale_spread").get<double>();
        spec.seed = s.at("seed").get<std::uint64_t>();
        const auto& t = j.at("teacher");
        c.teacher.hidden = t.at("hidden").get<std::vector<std::size_t>>();
        c.teacher.epochs = t.at("epochs").get<int>();
        c.teacher.optimizer = optimizer_from_json(t.at("optimizer"));
        c.teacher.checkpoint = t.at("checkpoint").get<std::string>();
        const auto& st = j.at("student");
        c.student.hidden = st.at("hidden").get<std::vector<std::size_t>>();
        c.student.dual_head = st.at("dual_head").get<bool>();
        c.student.cls_to_backbone = st.at("cls_to_backbone").get<bool>();
        c.optimizer = optimizer_from_json(j.at("optimizer"));
        const auto& l = j.at("loss");
        c.loss.mode = parse_loss_mode(l.at("mode").get<std::string>());
        c.loss.alpha = l.at("alpha").get<double>();
        c.loss.beta = l.at("beta").get<double>();
        c.loss.tau = l.at("tau").get<double>();
        const auto& w = j.at("weighting");
        c.weighting.use_cls_head = w.at("use_cls_head").get<bool>();
        c.weighting.normalize_logits = w.at("normalize_logits").get<bool>();
        c.weighting.epsilon_floor = w.at("epsilon_floor").get<double>();
        if (!w.at("weight_cap").is_null()) c.weighting.weight_cap = w.at("weight_cap").get<double>();
        c.weighting.renormalize_mean = w.at("renormalize_mean").get<bool>();
        const auto& o = j.at("one_stage");
        c.one_stage.alpha_T = o.at("alpha_T").get<double>();
        c.one_stage.ipwd_start_epoch = o.at("ipwd_start_epoch").get<int>();
        c.one_stage.scale_ipw_by_alpha = o.at("scale_ipw_by_alpha").get<bool>();
        const auto& e = j.at("eval");
        c.eval.ece_bins = e.at("ece_bins").get<std::size_t>();
        c.eval.topk = e.at("topk").get<std::size_t>();
        c.eval.every = e.at("every").get<int>();
        c.eval.report_taus = e.at("report_taus").get<std::vector<double>>();
        return c;
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("config: ") + ex.what());
    }
}

namespace detail {

inline bool compatible(const Json& base, const Json& value) {
    if (base.is_null() || value.is_null()) return true;
    if (base.is_number() && value.is_number()) return true;
    return base.type() == value.type();
}

/// Merges `patch` into `base`; every patched key must already exist in `base`.
inline void merge_strict(Json& base, const Json& patch, const std::string& prefix) {
    if (!patch.is_object()) throw ConfigError("config: expected an object at '" + prefix + "'");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
        auto& slot = base[key];
        if (slot.is_object()) {
            merge_strict(slot, value, path);
        } else {
            if (!compatible(slot, value)) throw ConfigError("config: wrong type for '" + path + "'");
            slot = value;
        }
    }
}

}  // namespace detail

/// Turns "a.b.c=value" into a nested patch. Values are parsed as JSON when
/// possible and taken as strings otherwise.
inline Json override_patch(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    Json patch = value;
    std::size_t end = key.size();
    while (true) {
        const auto dot = key.rfind('.', end - 1);
        const std::size_t start = dot == std::string::npos ? 0 : dot + 1;
        patch = Json{{key.substr(start, end - start), patch}};
        if (dot == std::string::npos) break;
        end = dot;
    }
    return patch;
}

/// Named hyper-parameter profiles, applied as patches over the defaults.
inline const std::map<std::string, Json>& presets() {
    static const std::map<std::string, Json> table = {
        {"synthetic-ipwd", Json{{"regime", "TWO_STAGE"}, {"loss", {{"mode", "IPWD"}}}}},
        {"synthetic-kd", Json{{"regime", "TWO_STAGE"}, {"loss", {{"mode", "KD"}, {"alpha", 1.0}}}}},
        {"synthetic-pskd", Json{{"regime", "ONE_STAGE"}, {"loss", {{"mode", "KD"}, {"tau", 1.0}}}}},
        {"synthetic-pskd-ipwd", Json{{"regime", "ONE_STAGE"}, {"loss", {{"mode", "IPWD"}, {"tau", 1.0}}}}},
        {"small-image", Json{{"loss", {{"tau", 10.0}, {"alpha", 5.0}}}}},
        {"large-scale", Json{{"loss", {{"tau", 2.0}, {"alpha", 2.5}}}}},
    };
    return table;
}

/// Defaults <- presets (in order) <- config document <- overrides, then resolved.
inline RunConfig build_config(const std::vector<std::string>& preset_names, const Json* document,
                              const std::vector<std::string>& overrides) {
    Json merged = to_json(RunConfig{});
    for (const auto& name : preset_names) {
        const auto it = presets().find(name);
        if (it == presets().end()) throw ConfigError("unknown preset '" + name + "'");
        detail::merge_strict(merged, it->second, "");
    }
    if (document != nullptr) detail::merge_strict(merged, *document, "");
    for (const auto& o : overrides) detail::merge_strict(merged, override_patch(o), "");
    return resolve(from_json(merged));
}

inline Json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    Json j = Json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: " + path.string() + " is not valid JSON");
    return j;
}

}  // namespace ipwd
