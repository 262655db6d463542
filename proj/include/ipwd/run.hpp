#pragma once

// Run directories. Every run writes
//   config.json       resolved configuration, written before any training
//   metrics.csv       one row per epoch
//   weights.csv       per-epoch propensity-weight summaries (header only without IPWD)
//   checkpoints/      *.ckpt
//   predictions.csv   test-set prediction dump
//   report.json       final metric bundle
// Distillation runs also keep teacher_profile.json and profile_tau_<t>.dat.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ipwd/checkpoint.hpp"
#include "ipwd/config.hpp"
#include "ipwd/data.hpp"
#include "ipwd/errors.hpp"
#include "ipwd/metrics.hpp"
#include "ipwd/trainer.hpp"

namespace ipwd {

namespace fs = std::filesystem;

struct Splits {
    Dataset train;
    Dataset test;
};

inline Splits load_splits(const RunConfig& cfg) {
    if (cfg.data.source == "synthetic") {
        auto s = generate_synthetic(cfg.data.synthetic);
        return {std::move(s.train), std::move(s.test)};
    }
    Splits s;
    s.train = load_csv(cfg.data.train_csv);
    s.test = load_csv(cfg.data.test_csv, CsvSchema{s.train.num_classes});
    if (s.test.dim != s.train.dim) throw ConfigError("train and test CSV files have different feature counts");
    return s;
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string tau_tag(double tau) {
    std::string s = format_double(tau);
    for (char& c : s) {
        if (c == '.') c = 'p';
    }
    return s;
}

inline std::string metrics_csv(const std::vector<EpochLog>& epochs) {
    std::string out = "epoch,l_cls,l_dist_or_ipw,total,l_cls_head,alpha_t,ipwd_active,learning_rate,test_top1\n";
    for (const auto& e : epochs) {
        out += std::to_string(e.epoch) + ',' + format_double(e.l_cls) + ',' + format_double(e.l_dist_or_ipw) + ',' +
               format_double(e.total) + ',' + format_double(e.l_cls_head) + ',' + format_double(e.alpha_t) + ',' +
               (e.ipwd_active ? "1" : "0") + ',' + format_double(e.learning_rate) + ',' +
               (e.test_top1 ? format_double(*e.test_top1) : std::string()) + '\n';
    }
    return out;
}

inline std::string weights_csv(const std::vector<WeightLog>& weights) {
    std::string out = "epoch,w_mean,w_std,w_max,frac_w_gt_2\n";
    for (const auto& w : weights) {
        out += std::to_string(w.epoch) + ',' + format_double(w.summary.mean) + ',' + format_double(w.summary.std) +
               ',' + format_double(w.summary.max) + ',' + format_double(w.summary.frac_above_two) + '\n';
    }
    return out;
}

inline Json to_json(const GroupReport& g) {
    Json j;
    j["grouping"] = g.grouping == Grouping::Context ? "context" : "teacher_rank";
    j["labels"] = g.labels;
    j["members"] = g.members;
    j["values"] = g.values;
    if (g.baseline_values) j["baseline_values"] = *g.baseline_values;
    if (g.deltas) j["deltas"] = *g.deltas;
    return j;
}

inline Json to_json(const MetricBundle& m) {
    Json j;
    j["top1"] = m.top1;
    j["topk"] = m.topk;
    j["k"] = m.k;
    j["ece"] = m.ece;
    j["ece_bins"] = m.ece_bins;
    j["aurc"] = m.aurc;
    j["macro_recall"] = m.macro_recall;
    if (m.context_groups) j["context_groups"] = to_json(*m.context_groups);
    if (m.rank_groups) j["rank_groups"] = to_json(*m.rank_groups);
    return j;
}

inline Json to_json(const TeacherProfile& p) {
    Json curves = Json::array();
    for (const auto& c : p.curves) {
        curves.push_back(Json{{"tau", c.tau},
                              {"class_means", c.class_means},
                              {"ranking", c.ranking},
                              {"sorted", c.sorted},
                              {"imbalance_ratio", c.imbalance_ratio}});
    }
    return Json{{"curves", curves}};
}

inline TeacherProfile profile_from_json(const Json& j) {
    try {
        TeacherProfile p;
        for (const auto& c : j.at("curves")) {
            p.curves.push_back(make_profile_curve(c.at("tau").get<double>(), c.at("class_means").get<std::vector<double>>()));
        }
        return p;
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("teacher profile: ") + e.what());
    }
}

/// Two-column "rank mean_probability" file per temperature, rank starting at 1.
inline void write_profile_dat(const fs::path& dir, const TeacherProfile& profile) {
    for (const auto& c : profile.curves) {
        std::string text = "# rank mean_prob tau=" + format_double(c.tau) + "\n";
        for (std::size_t r = 0; r < c.sorted.size(); ++r) text += std::to_string(r + 1) + ' ' + format_double(c.sorted[r]) + '\n';
        write_text(dir / ("profile_tau_" + tau_tag(c.tau) + ".dat"), text);
    }
}

inline void write_profile(const fs::path& dir, const TeacherProfile& profile) {
    write_json(dir / "teacher_profile.json", to_json(profile));
    write_profile_dat(dir, profile);
}

/// Echoes the resolved config; the first thing every run writes.
inline void begin_run(const fs::path& dir, const RunConfig& cfg) {
    ensure_dir(dir);
    write_json(dir / "config.json", to_json(cfg));
}

inline void write_training_logs(const fs::path& dir, const TrainResult& r) {
    write_text(dir / "metrics.csv", metrics_csv(r.epochs));
    write_text(dir / "weights.csv", weights_csv(r.weights));
}

inline Evaluation write_evaluation(const fs::path& dir, const NetworkState& net, const Dataset& test, const RunConfig& cfg,
                                   const ProfileCurve* ranking) {
    Evaluation ev = evaluate(net, test, cfg.eval.ece_bins, cfg.eval.topk, ranking);
    write_dump_csv(ev.dump, dir / "predictions.csv");
    write_json(dir / "report.json", to_json(ev.metrics));
    return ev;
}

struct RunOutcome {
    TrainResult train;
    Evaluation evaluation;
};

inline RunOutcome run_train_teacher(const RunConfig& cfg, const fs::path& dir) {
    begin_run(dir, cfg);
    const Splits data = load_splits(cfg);
    const auto test = data.test.labeled();
    RunOutcome out;
    out.train = train_teacher(cfg, data.train.labeled(), &test);
    ensure_dir(dir / "checkpoints");
    save_checkpoint(out.train.net, dir / "checkpoints" / "teacher.ckpt");
    write_training_logs(dir, out.train);
    const TeacherProfile profile = teacher_profile(out.train.net, data.train.labeled(), cfg.eval.report_taus);
    write_profile(dir, profile);
    out.evaluation = write_evaluation(dir, out.train.net, data.test, cfg, &profile.at(cfg.loss.tau));
    return out;
}

/// Uses teacher.checkpoint when set; otherwise trains a teacher into <dir>/teacher.
inline RunOutcome run_distill(const RunConfig& cfg, const fs::path& dir) {
    begin_run(dir, cfg);
    NetworkState teacher_net;
    if (!cfg.teacher.checkpoint.empty()) {
        teacher_net = load_checkpoint(cfg.teacher.checkpoint);
    } else {
        RunConfig tcfg = cfg;
        tcfg.regime = Regime::Teacher;
        teacher_net = run_train_teacher(tcfg, dir / "teacher").train.net;
    }
    const Splits data = load_splits(cfg);
    const TeacherSnapshot teacher(std::move(teacher_net), cfg.loss.tau, TeacherProvenance::PretrainedFile);
    const TeacherProfile profile = teacher_profile(teacher, data.train.labeled(), cfg.eval.report_taus);
    write_profile(dir, profile);

    const auto test = data.test.labeled();
    RunOutcome out;
    out.train = distill_two_stage(cfg, teacher, data.train.labeled(), &test);
    ensure_dir(dir / "checkpoints");
    save_checkpoint(out.train.net, dir / "checkpoints" / "student.ckpt");
    write_training_logs(dir, out.train);
    out.evaluation = write_evaluation(dir, out.train.net, data.test, cfg, &profile.at(cfg.loss.tau));
    return out;
}

inline RunOutcome run_self_distill(const RunConfig& cfg, const fs::path& dir) {
    begin_run(dir, cfg);
    const Splits data = load_splits(cfg);
    const auto test = data.test.labeled();
    RunOutcome out;
    out.train = selfdistill_one_stage(cfg, data.train.labeled(), &test);
    ensure_dir(dir / "checkpoints");
    save_checkpoint(out.train.net, dir / "checkpoints" / "student.ckpt");
    write_training_logs(dir, out.train);
    out.evaluation = write_evaluation(dir, out.train.net, data.test, cfg, nullptr);
    return out;
}

/// The checkpoint is read before anything is written, so a bad path leaves no outputs.
inline Evaluation run_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dir) {
    const NetworkState net = load_checkpoint(checkpoint);
    const Splits data = load_splits(cfg);
    begin_run(dir, cfg);
    return write_evaluation(dir, net, data.test, cfg, nullptr);
}

inline TeacherProfile run_profile_teacher(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dir) {
    const NetworkState net = load_checkpoint(checkpoint);
    const Splits data = load_splits(cfg);
    begin_run(dir, cfg);
    const TeacherSnapshot teacher(net, cfg.loss.tau, TeacherProvenance::PretrainedFile);
    TeacherProfile profile = teacher_profile(teacher, data.train.labeled(), cfg.eval.report_taus);
    write_profile(dir, profile);
    return profile;
}

inline void run_gen_data(const RunConfig& cfg, const fs::path& dir) {
    begin_run(dir, cfg);
    const Splits data = load_splits(cfg);
    write_csv(data.train, dir / "train.csv");
    write_csv(data.test, dir / "test.csv");
}

}  // namespace ipwd
