#pragma once

// Post-hoc reports computed from a finished run directory. Everything here is
// derived from files on disk, so reruns produce identical bytes.
//
// <run>/reports/
//   group_recall.csv      grouping,group,members,value,baseline,delta
//   calibration.json      top-1, top-k, ECE, AURC, macro recall
//   profile_tau_<t>.dat   teacher profile curves (when the run has a profile)
//   weights_series.dat    per-epoch weight summaries, whitespace separated

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "ipwd/config.hpp"
#include "ipwd/errors.hpp"
#include "ipwd/metrics.hpp"
#include "ipwd/run.hpp"

namespace ipwd {

struct ReportSummary {
    fs::path directory;
    MetricBundle metrics;
};

namespace detail {

inline PredictionDump require_dump(const fs::path& run_dir) {
    const fs::path path = run_dir / "predictions.csv";
    if (!fs::exists(path)) throw IoError("missing prediction dump: " + path.string());
    return read_dump_csv(path);
}

inline std::string join_members(const std::vector<std::size_t>& m) {
    std::string s;
    for (std::size_t i = 0; i < m.size(); ++i) s += (i ? " " : "") + std::to_string(m[i]);
    return s;
}

inline void append_groups(std::string& out, const GroupReport& g) {
    const char* kind = g.grouping == Grouping::Context ? "context" : "teacher_rank";
    for (std::size_t i = 0; i < g.values.size(); ++i) {
        out += std::string(kind) + ',' + g.labels[i] + ',' + join_members(g.members[i]) + ',' + format_double(g.values[i]);
        if (g.deltas) {
            out += ',' + format_double((*g.baseline_values)[i]) + ',' + format_double((*g.deltas)[i]);
        } else {
            out += ",,";
        }
        out += '\n';
    }
}

}  // namespace detail

/// Writes <run_dir>/reports. With a baseline run, group recalls carry deltas
/// (run minus baseline). Teacher-rank groups use the run's teacher profile at
/// the distillation tau and are skipped when the run has none.
inline ReportSummary emit_reports(const fs::path& run_dir, const std::optional<fs::path>& baseline_dir = std::nullopt) {
    const PredictionDump dump = detail::require_dump(run_dir);
    std::optional<PredictionDump> baseline;
    if (baseline_dir) baseline = detail::require_dump(*baseline_dir);
    const PredictionDump* base = baseline ? &*baseline : nullptr;

    const fs::path config_path = run_dir / "config.json";
    if (!fs::exists(config_path)) throw IoError("missing run config: " + config_path.string());
    const RunConfig cfg = resolve(from_json(read_json_file(config_path)));

    std::optional<TeacherProfile> profile;
    if (fs::exists(run_dir / "teacher_profile.json")) profile = profile_from_json(read_json_file(run_dir / "teacher_profile.json"));

    ReportSummary summary;
    summary.directory = run_dir / "reports";
    ensure_dir(summary.directory);

    auto& m = summary.metrics;
    m.top1 = topk_accuracy(dump, 1);
    m.k = std::min(cfg.eval.topk, dump.num_classes);
    m.topk = topk_accuracy(dump, m.k);
    m.ece_bins = cfg.eval.ece_bins;
    m.ece = ece(dump, m.ece_bins);
    m.aurc = aurc(dump);
    m.macro_recall = macro_recall(dump);

    std::string groups = "grouping,group,members,value,baseline,delta\n";
    if (profile) {
        m.rank_groups = group_recall(dump, Grouping::TeacherRank, &profile->at(cfg.loss.tau), base);
        detail::append_groups(groups, *m.rank_groups);
    }
    if (dump.has_context()) {
        m.context_groups = group_recall(dump, Grouping::Context, nullptr, base);
        detail::append_groups(groups, *m.context_groups);
    }
    write_text(summary.directory / "group_recall.csv", groups);
    write_json(summary.directory / "calibration.json", Json{{"top1", m.top1},
                                                            {"topk", m.topk},
                                                            {"k", m.k},
                                                            {"ece", m.ece},
                                                            {"ece_bins", m.ece_bins},
                                                            {"aurc", m.aurc},
                                                            {"macro_recall", m.macro_recall}});
    if (profile) write_profile_dat(summary.directory, *profile);

    const fs::path weights_path = run_dir / "weights.csv";
    if (fs::exists(weights_path)) {
        std::ifstream in(weights_path);
        std::string line, text;
        bool header = true;
        while (std::getline(in, line)) {
            for (char& c : line) {
                if (c == ',') c = ' ';
            }
            text += (header ? "# " : "") + line + '\n';
            header = false;
        }
        write_text(summary.directory / "weights_series.dat", text);
    }
    return summary;
}

}  // namespace ipwd
