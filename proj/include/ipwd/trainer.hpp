#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ipwd/config.hpp"
#include "ipwd/data.hpp"
#include "ipwd/errors.hpp"
#include "ipwd/losses.hpp"
#include "ipwd/metrics.hpp"
#include "ipwd/net.hpp"
#include "ipwd/weighting.hpp"

namespace ipwd {

enum class TeacherProvenance { PretrainedFile, PreviousEpochSelf };

/// A frozen teacher and the temperature its soft targets are produced at.
class TeacherSnapshot {
public:
    TeacherSnapshot(NetworkState net, double tau, TeacherProvenance provenance)
        : net_(std::move(net)), tau_(tau), provenance_(provenance) {}

    const NetworkState& network() const noexcept { return net_; }
    double tau() const noexcept { return tau_; }
    TeacherProvenance provenance() const noexcept { return provenance_; }

    std::vector<LogitVector> logits(std::span<const std::span<const double>> inputs) const {
        std::vector<LogitVector> out;
        out.reserve(inputs.size());
        for (auto x : inputs) out.push_back(forward(net_, x).z_kd);
        return out;
    }

private:
    NetworkState net_;
    double tau_;
    TeacherProvenance provenance_;
};

inline TeacherProfile teacher_profile(const TeacherSnapshot& teacher, const LabeledView& data,
                                      std::span<const double> taus) {
    return teacher_profile(teacher.network(), data, taus);
}

/// alpha_t = alpha_T * t / T.
inline double pskd_alpha(double alpha_T, int epoch, int total_epochs) {
    return alpha_T * static_cast<double>(epoch) / static_cast<double>(total_epochs);
}

struct EpochLog {
    int epoch = 0;
    double learning_rate = 0.0;
    double alpha_t = 0.0;       ///< one-stage schedule value; 0 elsewhere
    bool teacher_active = false;
    bool ipwd_active = false;
    double l_cls = 0.0;
    double l_dist_or_ipw = 0.0;
    double total = 0.0;
    double l_cls_head = 0.0;
    std::optional<double> test_top1;
};

struct WeightLog {
    int epoch = 0;
    WeightSummary summary;
};

struct TrainResult {
    NetworkState net;
    std::vector<EpochLog> epochs;
    std::vector<WeightLog> weights;
    std::vector<double> last_epoch_weights;  ///< per training sample; empty unless IPWD ran
    double max_weight = 0.0;
};

struct TrainHooks {
    std::function<void(int epoch, const NetworkState&)> on_epoch_end;
    std::function<void(int epoch, const TeacherSnapshot&)> on_teacher;
};

struct MetricBundle {
    double top1 = 0.0;
    double topk = 0.0;
    std::size_t k = 0;
    double ece = 0.0;
    std::size_t ece_bins = 10;
    double aurc = 0.0;
    double macro_recall = 0.0;
    std::optional<GroupReport> context_groups;
    std::optional<GroupReport> rank_groups;
};

struct Evaluation {
    MetricBundle metrics;
    PredictionDump dump;
};

/// Evaluates the KD head. `ranking` enables teacher-rank quartile groups.
inline Evaluation evaluate(const NetworkState& net, const Dataset& data, std::size_t ece_bins = 10,
                           std::size_t topk = 5, const ProfileCurve* ranking = nullptr) {
    if (data.size() == 0) throw InvalidArgument("evaluate: empty dataset");
    if (data.num_classes != net.num_classes) throw InvalidArgument("evaluate: class count mismatch");
    Evaluation ev;
    ev.dump.num_classes = net.num_classes;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto p = softmax(forward(net, data.features[i]).z_kd, 1.0);
        ev.dump.rows.push_back(make_prediction(std::move(p.values), static_cast<std::size_t>(data.labels[i]),
                                               data.has_context() ? data.contexts[i] : -1));
    }
    auto& m = ev.metrics;
    m.top1 = topk_accuracy(ev.dump, 1);
    m.k = std::min(topk, net.num_classes);
    m.topk = topk_accuracy(ev.dump, m.k);
    m.ece_bins = ece_bins;
    m.ece = ece(ev.dump, ece_bins);
    m.aurc = aurc(ev.dump);
    m.macro_recall = macro_recall(ev.dump);
    if (ev.dump.has_context()) m.context_groups = group_recall(ev.dump, Grouping::Context);
    if (ranking != nullptr) m.rank_groups = group_recall(ev.dump, Grouping::TeacherRank, ranking);
    return ev;
}

inline double test_accuracy(const NetworkState& net, const LabeledView& data) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (argmax(forward(net, data.features[i]).z_kd.span()) == static_cast<std::size_t>(data.labels[i])) ++hits;
    }
    return data.size() == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(data.size());
}

namespace detail {

inline constexpr std::uint64_t kTeacherInitStream = 1;
inline constexpr std::uint64_t kStudentInitStream = 2;
inline constexpr std::uint64_t kTeacherShuffleStream = 11;
inline constexpr std::uint64_t kStudentShuffleStream = 12;

inline std::vector<std::size_t> dims_for(const LabeledView& data, const std::vector<std::size_t>& hidden) {
    std::vector<std::size_t> dims{data.dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    return dims;
}

inline void check_finite_outputs(const std::vector<DualHeadOutput>& outputs, std::size_t batch, int epoch) {
    for (const auto& o : outputs) {
        for (double v : o.z_kd) {
            if (!std::isfinite(v)) throw TrainingDiverged("non-finite logits", batch, epoch);
        }
        for (double v : o.z_cls) {
            if (!std::isfinite(v)) throw TrainingDiverged("non-finite logits", batch, epoch);
        }
    }
}

/// Everything a loss callback needs for one minibatch.
struct BatchContext {
    int epoch;
    std::span<const std::size_t> indices;
    std::span<const std::span<const double>> inputs;
    std::span<const DualHeadOutput> outputs;
    std::span<const OneHotLabel> labels;
};

/// Loss callback result: the loss plus the sample weights it used, if any.
struct BatchLoss {
    LossResult loss;
    std::vector<double> weights;
};

/// Epoch hooks for a training regime.
struct Regimen {
    std::function<void(int epoch, const NetworkState& net, EpochLog& log)> begin_epoch;
    std::function<BatchLoss(const BatchContext&)> batch_loss;
};

inline void run_epochs(NetworkState& net, const LabeledView& train, const LabeledView* test, int epochs,
                       const OptimizerConfig& opt, const HeadMask& mask, std::uint64_t shuffle_seed, int eval_every,
                       const Regimen& regimen, const TrainHooks& hooks, TrainResult& result) {
    std::vector<OneHotLabel> all_labels;
    all_labels.reserve(train.size());
    for (int y : train.labels) all_labels.push_back(OneHotLabel::checked(y, train.num_classes));

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        EpochLog log;
        log.epoch = epoch;
        log.learning_rate = opt.learning_rate.at(epoch);
        if (regimen.begin_epoch) regimen.begin_epoch(epoch, net, log);

        std::vector<double> epoch_weights;
        std::vector<double> sample_weights;
        double sum_cls = 0.0, sum_dist = 0.0, sum_total = 0.0, sum_head = 0.0;
        const auto plan = batches(train.size(), opt.batch_size, shuffle_seed, epoch);
        for (std::size_t b = 0; b < plan.size(); ++b) {
            const auto& idx = plan[b];
            std::vector<std::span<const double>> inputs;
            std::vector<OneHotLabel> labels;
            inputs.reserve(idx.size());
            labels.reserve(idx.size());
            for (std::size_t i : idx) {
                inputs.emplace_back(train.features[i]);
                labels.push_back(all_labels[i]);
            }
            const auto outputs = forward_batch(net, inputs);
            check_finite_outputs(outputs, b, epoch);

            BatchLoss bl = regimen.batch_loss(BatchContext{epoch, idx, inputs, outputs, labels});
            const auto& br = bl.loss.breakdown;
            if (!std::isfinite(br.total) || !std::isfinite(br.l_cls_head)) {
                throw TrainingDiverged("non-finite loss", b, epoch);
            }
            const double n = static_cast<double>(idx.size());
            sum_cls += br.l_cls * n;
            sum_dist += (br.weighted ? br.l_ipw_dist : br.l_dist) * n;
            sum_total += br.total * n;
            sum_head += br.l_cls_head * n;
            if (!bl.weights.empty()) {
                if (sample_weights.empty()) sample_weights.assign(train.size(), 0.0);
                for (std::size_t s = 0; s < idx.size(); ++s) sample_weights[idx[s]] = bl.weights[s];
                epoch_weights.insert(epoch_weights.end(), bl.weights.begin(), bl.weights.end());
            }
            backward_and_step(net, inputs, bl.loss.gradients, opt, mask, epoch, b);
        }
        const double n = static_cast<double>(train.size());
        log.l_cls = sum_cls / n;
        log.l_dist_or_ipw = sum_dist / n;
        log.total = sum_total / n;
        log.l_cls_head = sum_head / n;
        if (!epoch_weights.empty()) {
            const auto summary = summarize_weights(epoch_weights);
            result.weights.push_back({epoch, summary});
            result.max_weight = std::max(result.max_weight, summary.max);
            result.last_epoch_weights = std::move(sample_weights);
        }
        if (test != nullptr && test->size() > 0 && ((eval_every > 0 && epoch % eval_every == 0) || epoch == epochs)) {
            log.test_top1 = test_accuracy(net, *test);
        }
        result.epochs.push_back(log);
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, net);
    }
}

/// Propensity weights for one batch; `teacher_logits` may be empty when the CLS head is the reference.
inline std::vector<double> ipw_weights(std::span<const DualHeadOutput> outputs, std::span<const OneHotLabel> labels,
                                       std::span<const LogitVector> teacher_logits, const WeightingConfig& cfg) {
    std::vector<PropensityRecord> records;
    records.reserve(outputs.size());
    for (std::size_t s = 0; s < outputs.size(); ++s) {
        records.push_back(estimate_propensity(outputs[s], labels[s], teacher_logits.empty() ? nullptr : &teacher_logits[s], cfg));
    }
    auto w = batch_weights(records).weights;
    if (cfg.renormalize_mean) renormalize_to_unit_mean(w);
    return w;
}

inline void check_teacher(const NetworkState& teacher, const LabeledView& train) {
    if (teacher.num_classes != train.num_classes) {
        throw ConfigError("teacher predicts " + std::to_string(teacher.num_classes) + " classes, data has " +
                          std::to_string(train.num_classes));
    }
    if (teacher.input_dim() != train.dim) throw ConfigError("teacher input width does not match the data");
}

}  // namespace detail

/// Single-head network trained with cross-entropy only.
inline TrainResult train_teacher(const RunConfig& cfg, const LabeledView& train, const LabeledView* test = nullptr,
                                 const TrainHooks& hooks = {}) {
    TrainResult result;
    result.net = init_network(detail::dims_for(train, cfg.teacher.hidden), train.num_classes, false,
                              mix_seed(cfg.seed, detail::kTeacherInitStream));
    detail::Regimen regimen;
    regimen.batch_loss = [](const detail::BatchContext& ctx) {
        return detail::BatchLoss{batch_cls_loss(ctx.outputs, ctx.labels), {}};
    };
    detail::run_epochs(result.net, train, test, cfg.teacher.epochs, cfg.teacher.optimizer, HeadMask{},
                       mix_seed(cfg.seed, detail::kTeacherShuffleStream), cfg.eval.every, regimen, hooks, result);
    return result;
}

inline NetworkState init_student(const RunConfig& cfg, const LabeledView& train) {
    return init_network(detail::dims_for(train, cfg.student.hidden), train.num_classes, cfg.student.dual_head,
                        mix_seed(cfg.seed, detail::kStudentInitStream));
}

inline HeadMask student_mask(const RunConfig& cfg) { return HeadMask{true, cfg.student.cls_to_backbone}; }

/// Two-stage distillation from a frozen teacher: CE_ONLY, KD (alpha * L_cls +
/// beta * L_dist) or IPWD (L_cls + alpha * L_ipw-dist). Soft targets are
/// recomputed from the teacher for every batch.
inline TrainResult distill_two_stage(const RunConfig& cfg, const TeacherSnapshot& teacher, const LabeledView& train,
                                     const LabeledView* test = nullptr, const TrainHooks& hooks = {}) {
    detail::check_teacher(teacher.network(), train);
    if (teacher.tau() != cfg.loss.tau) throw ConfigError("teacher snapshot tau differs from loss.tau");
    TrainResult result;
    result.net = init_student(cfg, train);
    if (hooks.on_teacher) hooks.on_teacher(0, teacher);

    detail::Regimen regimen;
    regimen.begin_epoch = [&](int, const NetworkState&, EpochLog& log) {
        log.teacher_active = cfg.loss.mode != LossMode::CeOnly;
        log.ipwd_active = cfg.loss.mode == LossMode::Ipwd;
    };
    regimen.batch_loss = [&](const detail::BatchContext& ctx) {
        if (cfg.loss.mode == LossMode::CeOnly) return detail::BatchLoss{batch_cls_loss(ctx.outputs, ctx.labels), {}};
        const auto t_logits = teacher.logits(ctx.inputs);
        const SoftTargets targets = soften(t_logits, teacher.tau());
        if (cfg.loss.mode == LossMode::Kd) {
            return detail::BatchLoss{batch_kd_loss(ctx.outputs, targets, ctx.labels, cfg.loss), {}};
        }
        auto w = detail::ipw_weights(ctx.outputs, ctx.labels,
                                     cfg.weighting.use_cls_head ? std::span<const LogitVector>{} : t_logits,
                                     cfg.weighting);
        auto loss = batch_ipwd_loss(ctx.outputs, targets, ctx.labels, w, cfg.loss);
        return detail::BatchLoss{std::move(loss), std::move(w)};
    };
    detail::run_epochs(result.net, train, test, cfg.epochs, cfg.optimizer, student_mask(cfg),
                       mix_seed(cfg.seed, detail::kStudentShuffleStream), cfg.eval.every, regimen, hooks, result);
    return result;
}

/// Progressive self-distillation. The teacher of epoch t is the student at the
/// end of epoch t-1; epoch 1 has no teacher and trains with plain CE. In IPWD
/// mode the distillation term is reweighted from one_stage.ipwd_start_epoch on.
inline TrainResult selfdistill_one_stage(const RunConfig& cfg, const LabeledView& train,
                                         const LabeledView* test = nullptr, const TrainHooks& hooks = {}) {
    TrainResult result;
    result.net = init_student(cfg, train);
    const int T = cfg.epochs;
    std::optional<TeacherSnapshot> teacher;

    detail::Regimen regimen;
    regimen.begin_epoch = [&](int epoch, const NetworkState& net, EpochLog& log) {
        log.alpha_t = pskd_alpha(cfg.one_stage.alpha_T, epoch, T);
        if (epoch > 1) {
            teacher.emplace(net, cfg.loss.tau, TeacherProvenance::PreviousEpochSelf);
            if (hooks.on_teacher) hooks.on_teacher(epoch, *teacher);
        }
        log.teacher_active = teacher.has_value();
        log.ipwd_active = teacher && cfg.loss.mode == LossMode::Ipwd && epoch >= cfg.one_stage.ipwd_start_epoch;
    };
    regimen.batch_loss = [&](const detail::BatchContext& ctx) {
        if (!teacher || cfg.loss.mode == LossMode::CeOnly) {
            return detail::BatchLoss{batch_cls_loss(ctx.outputs, ctx.labels), {}};
        }
        const double alpha_t = pskd_alpha(cfg.one_stage.alpha_T, ctx.epoch, T);
        const auto t_logits = teacher->logits(ctx.inputs);
        const SoftTargets targets = soften(t_logits, teacher->tau());
        const bool ipwd = cfg.loss.mode == LossMode::Ipwd && ctx.epoch >= cfg.one_stage.ipwd_start_epoch;
        if (!ipwd) {
            return detail::BatchLoss{batch_pskd_loss(ctx.outputs, targets, ctx.labels, alpha_t, std::nullopt, cfg.loss.tau), {}};
        }
        auto w = detail::ipw_weights(ctx.outputs, ctx.labels,
                                     cfg.weighting.use_cls_head ? std::span<const LogitVector>{} : t_logits,
                                     cfg.weighting);
        const double multiplier = cfg.one_stage.scale_ipw_by_alpha ? cfg.loss.alpha : 1.0;
        auto loss = batch_pskd_loss(ctx.outputs, targets, ctx.labels, alpha_t, std::span<const double>(w),
                                    cfg.loss.tau, multiplier);
        return detail::BatchLoss{std::move(loss), std::move(w)};
    };
    detail::run_epochs(result.net, train, test, T, cfg.optimizer, student_mask(cfg),
                       mix_seed(cfg.seed, detail::kStudentShuffleStream), cfg.eval.every, regimen, hooks, result);
    return result;
}

}  // namespace ipwd
