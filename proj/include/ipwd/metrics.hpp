#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ipwd/data.hpp"
#include "ipwd/errors.hpp"
#include "ipwd/mathcore.hpp"
#include "ipwd/net.hpp"

namespace ipwd {

struct PredictionRow {
    std::vector<double> probs;
    std::size_t predicted = 0;  ///< argmax of probs, lowest index on ties
    std::size_t truth = 0;
    double confidence = 0.0;  ///< max of probs
    int context = -1;         ///< -1 when unknown

    bool correct() const noexcept { return predicted == truth; }
};

struct PredictionDump {
    std::size_t num_classes = 0;
    std::vector<PredictionRow> rows;

    std::size_t size() const noexcept { return rows.size(); }
    bool has_context() const noexcept { return !rows.empty() && rows.front().context >= 0; }
};

inline PredictionRow make_prediction(std::vector<double> probs, std::size_t truth, int context = -1) {
    PredictionRow row;
    row.predicted = argmax(probs);
    row.confidence = probs[row.predicted];
    row.truth = truth;
    row.context = context;
    row.probs = std::move(probs);
    return row;
}

inline PredictionDump make_dump(std::span<const ProbVector> probs, std::span<const int> labels,
                                std::span<const int> contexts = {}) {
    if (probs.size() != labels.size()) throw InvalidArgument("make_dump: probability/label count mismatch");
    if (!contexts.empty() && contexts.size() != labels.size()) throw InvalidArgument("make_dump: context count mismatch");
    PredictionDump dump;
    dump.num_classes = probs.empty() ? 0 : probs.front().size();
    for (std::size_t i = 0; i < probs.size(); ++i) {
        dump.rows.push_back(make_prediction(probs[i].values, static_cast<std::size_t>(labels[i]),
                                            contexts.empty() ? -1 : contexts[i]));
    }
    return dump;
}

/// Fraction of samples whose true class ranks among the k most probable classes.
/// A class ranks above another if its probability is larger, or equal with a lower index.
inline double topk_accuracy(const PredictionDump& dump, std::size_t k) {
    if (dump.rows.empty()) throw InvalidArgument("topk_accuracy: empty dump");
    if (k == 0 || k > dump.num_classes) throw InvalidArgument("topk_accuracy: k out of range");
    std::size_t hits = 0;
    for (const auto& row : dump.rows) {
        const double pt = row.probs[row.truth];
        std::size_t above = 0;
        for (std::size_t c = 0; c < row.probs.size(); ++c) {
            if (row.probs[c] > pt || (row.probs[c] == pt && c < row.truth)) ++above;
        }
        if (above < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(dump.rows.size());
}

/// Recall per class; NaN for classes without samples.
inline std::vector<double> per_class_recall(const PredictionDump& dump) {
    std::vector<double> correct(dump.num_classes, 0.0);
    std::vector<double> total(dump.num_classes, 0.0);
    for (const auto& row : dump.rows) {
        total[row.truth] += 1.0;
        if (row.correct()) correct[row.truth] += 1.0;
    }
    std::vector<double> recall(dump.num_classes, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < dump.num_classes; ++c) {
        if (total[c] > 0.0) recall[c] = correct[c] / total[c];
    }
    return recall;
}

namespace detail {

inline double mean_defined(std::span<const double> values, std::span<const std::size_t> members) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t m : members) {
        if (!std::isnan(values[m])) {
            sum += values[m];
            ++n;
        }
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

}  // namespace detail

inline double macro_recall(const PredictionDump& dump) {
    const auto recall = per_class_recall(dump);
    std::vector<std::size_t> all(dump.num_classes);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return detail::mean_defined(recall, all);
}

/// Mean teacher distribution at one temperature.
struct ProfileCurve {
    double tau = 1.0;
    std::vector<double> class_means;   ///< indexed by class
    std::vector<std::size_t> ranking;  ///< classes by descending mean, ties by index
    std::vector<double> sorted;        ///< class_means in ranking order
    double imbalance_ratio = 1.0;      ///< max / min class mean
};

struct TeacherProfile {
    std::vector<ProfileCurve> curves;

    const ProfileCurve& at(double tau) const {
        for (const auto& c : curves) {
            if (c.tau == tau) return c;
        }
        throw InvalidArgument("teacher profile has no curve at tau=" + std::to_string(tau));
    }
};

inline ProfileCurve make_profile_curve(double tau, std::vector<double> class_means) {
    ProfileCurve curve;
    curve.tau = tau;
    curve.class_means = std::move(class_means);
    curve.ranking.resize(curve.class_means.size());
    std::iota(curve.ranking.begin(), curve.ranking.end(), std::size_t{0});
    std::stable_sort(curve.ranking.begin(), curve.ranking.end(),
                     [&](std::size_t a, std::size_t b) { return curve.class_means[a] > curve.class_means[b]; });
    for (std::size_t c : curve.ranking) curve.sorted.push_back(curve.class_means[c]);
    curve.imbalance_ratio = curve.sorted.back() > 0.0 ? curve.sorted.front() / curve.sorted.back()
                                                      : std::numeric_limits<double>::infinity();
    return curve;
}

inline TeacherProfile teacher_profile_from_logits(std::span<const LogitVector> logits, std::span<const double> taus) {
    if (taus.empty()) throw InvalidArgument("teacher_profile: no temperatures given");
    if (logits.empty()) throw InvalidArgument("teacher_profile: no samples");
    TeacherProfile profile;
    const std::size_t C = logits.front().size();
    for (double tau : taus) {
        std::vector<double> means(C, 0.0);
        for (const auto& z : logits) {
            const ProbVector p = softmax(z, tau);
            for (std::size_t c = 0; c < C; ++c) means[c] += p[c];
        }
        for (double& m : means) m /= static_cast<double>(logits.size());
        profile.curves.push_back(make_profile_curve(tau, std::move(means)));
    }
    return profile;
}

/// Per-class mean soft prediction of a teacher network (KD head) over a dataset.
inline TeacherProfile teacher_profile(const NetworkState& teacher, const LabeledView& data,
                                      std::span<const double> taus) {
    std::vector<LogitVector> logits;
    logits.reserve(data.size());
    for (const auto& x : data.features) logits.push_back(forward(teacher, x).z_kd);
    return teacher_profile_from_logits(logits, taus);
}

enum class Grouping { TeacherRank, Context };

struct GroupReport {
    Grouping grouping = Grouping::TeacherRank;
    std::vector<std::string> labels;
    std::vector<std::vector<std::size_t>> members;  ///< class ids (rank) or context ids (context)
    std::vector<double> values;                     ///< macro recall per group
    std::vector<double> per_class_recall;
    std::optional<std::vector<double>> baseline_values;
    std::optional<std::vector<double>> deltas;  ///< values - baseline_values
};

namespace detail {

inline std::vector<double> group_values(const PredictionDump& dump, Grouping grouping,
                                        const std::vector<std::vector<std::size_t>>& members) {
    std::vector<double> out;
    if (grouping == Grouping::TeacherRank) {
        const auto recall = per_class_recall(dump);
        for (const auto& m : members) out.push_back(mean_defined(recall, m));
        return out;
    }
    for (const auto& m : members) {
        PredictionDump subset;
        subset.num_classes = dump.num_classes;
        for (const auto& row : dump.rows) {
            if (row.context >= 0 && static_cast<std::size_t>(row.context) == m.front()) subset.rows.push_back(row);
        }
        out.push_back(macro_recall(subset));
    }
    return out;
}

}  // namespace detail

/// Macro-averaged recall per group. TeacherRank ranks classes by the teacher's
/// mean probability and splits the ranking into `num_groups` contiguous groups
/// (head first). Context groups samples by hidden context id.
inline GroupReport group_recall(const PredictionDump& dump, Grouping grouping, const ProfileCurve* ranking = nullptr,
                                const PredictionDump* baseline = nullptr, std::size_t num_groups = 4) {
    if (dump.rows.empty()) throw InvalidArgument("group_recall: empty dump");
    GroupReport report;
    report.grouping = grouping;
    report.per_class_recall = per_class_recall(dump);

    if (grouping == Grouping::TeacherRank) {
        if (ranking == nullptr) throw ConfigError("group_recall: teacher-rank grouping needs a teacher profile");
        if (ranking->ranking.size() != dump.num_classes) throw ConfigError("group_recall: profile class count mismatch");
        const std::size_t C = dump.num_classes;
        const std::size_t G = std::clamp<std::size_t>(num_groups, 1, C);
        for (std::size_t g = 0; g < G; ++g) {
            const std::size_t lo = g * C / G;
            const std::size_t hi = (g + 1) * C / G;
            report.members.emplace_back(ranking->ranking.begin() + static_cast<std::ptrdiff_t>(lo),
                                        ranking->ranking.begin() + static_cast<std::ptrdiff_t>(hi));
            report.labels.push_back("rank " + std::to_string(lo + 1) + "-" + std::to_string(hi));
        }
    } else {
        if (!dump.has_context()) throw ConfigError("group_recall: context grouping needs context ids");
        std::set<int> ids;
        for (const auto& row : dump.rows) ids.insert(row.context);
        for (int id : ids) {
            report.members.push_back({static_cast<std::size_t>(id)});
            report.labels.push_back("context " + std::to_string(id));
        }
    }
    report.values = detail::group_values(dump, grouping, report.members);
    if (baseline != nullptr) {
        if (baseline->num_classes != dump.num_classes) throw InvalidArgument("group_recall: baseline class count mismatch");
        report.baseline_values = detail::group_values(*baseline, grouping, report.members);
        std::vector<double> deltas;
        for (std::size_t g = 0; g < report.values.size(); ++g) {
            deltas.push_back(report.values[g] - (*report.baseline_values)[g]);
        }
        report.deltas = std::move(deltas);
    }
    return report;
}

/// 1-based confidence bin: bin m covers ((m-1)/M, m/M]; confidence 0 falls in bin 1.
inline std::size_t calibration_bin(double confidence, std::size_t bins) {
    const double M = static_cast<double>(bins);
    auto m = static_cast<std::size_t>(std::clamp(std::ceil(confidence * M), 1.0, M));
    // ceil(conf * M) can land one bin off from the boundary comparison; settle on the latter.
    while (m > 1 && confidence <= static_cast<double>(m - 1) / M) --m;
    while (m < bins && confidence > static_cast<double>(m) / M) ++m;
    return m;
}

/// Expected calibration error: (1/N) sum_m |B_m| * |Acc(B_m) - Conf(B_m)|.
inline double ece(const PredictionDump& dump, std::size_t bins = 10) {
    if (bins == 0) throw InvalidArgument("ece: need at least one bin");
    if (dump.rows.empty()) throw InvalidArgument("ece: empty dump");
    std::vector<double> count(bins, 0.0), correct(bins, 0.0), confidence(bins, 0.0);
    for (const auto& row : dump.rows) {
        const std::size_t m = calibration_bin(row.confidence, bins) - 1;
        count[m] += 1.0;
        confidence[m] += row.confidence;
        if (row.correct()) correct[m] += 1.0;
    }
    double total = 0.0;
    for (std::size_t m = 0; m < bins; ++m) {
        if (count[m] == 0.0) continue;
        total += count[m] * std::abs(correct[m] / count[m] - confidence[m] / count[m]);
    }
    return total / static_cast<double>(dump.rows.size());
}

/// Area under the risk-coverage curve, scaled by 1e3. Samples are ordered by
/// descending confidence (ties by index); the curve is averaged over all N
/// coverage points k/N with risk = errors among the top k / k.
inline double aurc(const PredictionDump& dump) {
    if (dump.rows.empty()) throw InvalidArgument("aurc: empty dump");
    std::vector<std::size_t> order(dump.rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dump.rows[a].confidence > dump.rows[b].confidence;
    });
    double area = 0.0;
    std::size_t errors = 0;
    for (std::size_t k = 1; k <= order.size(); ++k) {
        if (!dump.rows[order[k - 1]].correct()) ++errors;
        area += static_cast<double>(errors) / static_cast<double>(k);
    }
    return area / static_cast<double>(order.size()) * 1000.0;
}

// PredictionDump CSV: sample_id,true,pred,conf,p_0..p_{C-1},context

inline void write_dump_csv(const PredictionDump& dump, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "sample_id,true,pred,conf";
    for (std::size_t c = 0; c < dump.num_classes; ++c) out << ",p_" << c;
    out << ",context\n";
    for (std::size_t i = 0; i < dump.rows.size(); ++i) {
        const auto& r = dump.rows[i];
        out << i << ',' << r.truth << ',' << r.predicted << ',' << format_double(r.confidence);
        for (double p : r.probs) out << ',' << format_double(p);
        out << ',' << r.context << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

inline PredictionDump read_dump_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty prediction dump", 1);
    const auto header = detail::split_commas(line);
    if (header.size() < 7 || header[0] != "sample_id" || header.back() != "context") {
        throw ParseError("unexpected prediction dump header", 1);
    }
    PredictionDump dump;
    dump.num_classes = header.size() - 5;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = detail::split_commas(line);
        if (cells.size() != header.size()) throw ParseError("ragged prediction row", line_no);
        PredictionRow row;
        bool ok = detail::parse_number(cells[1], row.truth) && detail::parse_number(cells[2], row.predicted) &&
                  detail::parse_number(cells[3], row.confidence);
        row.probs.resize(dump.num_classes);
        for (std::size_t c = 0; c < dump.num_classes; ++c) ok = ok && detail::parse_number(cells[4 + c], row.probs[c]);
        ok = ok && detail::parse_number(cells.back(), row.context);
        if (!ok) throw ParseError("malformed prediction row", line_no);
        if (row.truth >= dump.num_classes || row.predicted >= dump.num_classes) {
            throw ParseError("class index out of range", line_no);
        }
        dump.rows.push_back(std::move(row));
    }
    return dump;
}

}  // namespace ipwd
