#pragma once

// Batch objectives and their logit-level gradients.
//
// Distillation gradient. With p = softmax(z_s / tau), q = softmax(z_t / tau),
//   l_dist = tau^2 * sum_k q_k (log q_k - log p_k)
//   d l_dist / d z_s,k = tau^2 * (1 / tau) * (p_k - q_k) = tau * (p_k - q_k)
// The tau^2 factor cancels the 1/tau^2 shrinkage of the softened gradient, so
// the distillation term keeps a comparable scale across temperatures.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipwd/errors.hpp"
#include "ipwd/mathcore.hpp"
#include "ipwd/net.hpp"

namespace ipwd {

enum class LossMode { CeOnly, Kd, Ipwd };

struct LossConfig {
    LossMode mode = LossMode::Ipwd;
    double alpha = 1.0;  ///< KD: weight of L_cls. IPWD: weight of L_ipw-dist.
    double beta = 1.0;   ///< KD only: weight of L_dist.
    double tau = 4.0;

    void validate() const {
        if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("loss: alpha must be >= 0");
        if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("loss: beta must be >= 0");
        if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss: tau must be positive");
    }
};

/// Teacher distributions softened at a known temperature.
struct SoftTargets {
    double tau = 1.0;
    std::vector<ProbVector> probs;
};

inline SoftTargets soften(std::span<const LogitVector> teacher_logits, double tau) {
    SoftTargets t{tau, {}};
    t.probs.reserve(teacher_logits.size());
    for (const auto& z : teacher_logits) t.probs.push_back(softmax(z, tau));
    return t;
}

struct LossBreakdown {
    double l_cls = 0.0;       ///< mean CE of the KD head
    double l_dist = 0.0;      ///< mean l_dist
    double l_ipw_dist = 0.0;  ///< mean w * l_dist (weighted objectives only)
    double total = 0.0;
    double l_cls_head = 0.0;  ///< mean CE of the CLS head; tracked, not part of total
    bool weighted = false;
    double cls_coefficient = 0.0;
    double dist_coefficient = 0.0;
    std::vector<double> per_sample_weights;
    std::vector<double> per_sample_dist;

    double recomposed_total() const {
        return cls_coefficient * l_cls + dist_coefficient * (weighted ? l_ipw_dist : l_dist);
    }
};

struct LossResult {
    LossBreakdown breakdown;
    LogitGradients gradients;
};

/// total = cls_coef * L_cls + dist_coef * D, where D is L_dist, or L_ipw-dist when
/// weights are given. Weights are constants: no gradient flows through them.
/// A present CLS head always gets a plain CE gradient against the labels.
inline LossResult batch_composite_loss(std::span<const DualHeadOutput> outputs, const SoftTargets* targets,
                                       std::span<const OneHotLabel> labels, std::span<const double> weights,
                                       bool weighted, double cls_coef, double dist_coef, double tau) {
    const std::size_t batch = outputs.size();
    if (batch == 0) throw InvalidArgument("loss: empty batch");
    if (labels.size() != batch) throw InvalidArgument("loss: label count mismatch");
    const bool with_dist = targets != nullptr;
    if (with_dist) {
        if (targets->probs.size() != batch) throw InvalidArgument("loss: soft target count mismatch");
        if (targets->tau != tau) {
            throw ConfigError("loss: soft targets softened at tau=" + std::to_string(targets->tau) +
                              " but tau=" + std::to_string(tau) + " configured");
        }
    }
    if (weighted) {
        if (weights.size() != batch) {
            throw InvalidArgument("loss: " + std::to_string(weights.size()) + " weights for " +
                                  std::to_string(batch) + " samples");
        }
        for (double w : weights) {
            if (!(w > 0.0)) throw InvalidArgument("loss: weights must be strictly positive");
        }
    }

    const double inv_batch = 1.0 / static_cast<double>(batch);
    LossResult r;
    auto& b = r.breakdown;
    b.weighted = weighted;
    b.cls_coefficient = cls_coef;
    b.dist_coefficient = with_dist ? dist_coef : 0.0;
    r.gradients.kd.resize(batch);
    const bool with_cls_head = outputs[0].has_cls();
    if (with_cls_head) r.gradients.cls.resize(batch);

    for (std::size_t s = 0; s < batch; ++s) {
        const auto& out = outputs[s];
        const std::size_t classes = out.z_kd.size();
        const std::size_t y = labels[s].class_index;
        if (y >= classes) throw InvalidArgument("loss: label out of range");
        if (out.has_cls() != with_cls_head) throw InvalidArgument("loss: mixed single/dual-head outputs");

        const ProbVector p = softmax(out.z_kd, 1.0);
        b.l_cls += cross_entropy(p, labels[s]);

        auto& g = r.gradients.kd[s];
        g.resize(classes);
        for (std::size_t k = 0; k < classes; ++k) {
            g[k] = cls_coef * (p[k] - (k == y ? 1.0 : 0.0)) * inv_batch;
        }

        if (with_dist) {
            const ProbVector& q = targets->probs[s];
            if (q.size() != classes) throw InvalidArgument("loss: soft target length mismatch");
            const ProbVector ps = softmax(out.z_kd, tau);
            const double l = std::max(0.0, tau * tau * (cross_entropy(ps, q) - cross_entropy(q, q)));
            const double w = weighted ? weights[s] : 1.0;
            b.per_sample_dist.push_back(l);
            b.l_dist += l;
            b.l_ipw_dist += w * l;
            for (std::size_t k = 0; k < classes; ++k) {
                g[k] += dist_coef * w * tau * (ps[k] - q[k]) * inv_batch;
            }
        }

        if (with_cls_head) {
            const ProbVector pc = softmax(out.z_cls, 1.0);
            b.l_cls_head += cross_entropy(pc, labels[s]);
            auto& gc = r.gradients.cls[s];
            gc.resize(classes);
            for (std::size_t k = 0; k < classes; ++k) gc[k] = (pc[k] - (k == y ? 1.0 : 0.0)) * inv_batch;
        }
    }
    b.l_cls *= inv_batch;
    b.l_dist *= inv_batch;
    b.l_ipw_dist = weighted ? b.l_ipw_dist * inv_batch : 0.0;
    b.l_cls_head *= inv_batch;
    if (weighted) b.per_sample_weights.assign(weights.begin(), weights.end());
    b.total = b.recomposed_total();
    return r;
}

/// L_cls: mean CE of the KD head at tau = 1.
inline LossResult batch_cls_loss(std::span<const DualHeadOutput> outputs, std::span<const OneHotLabel> labels) {
    return batch_composite_loss(outputs, nullptr, labels, {}, false, 1.0, 0.0, 1.0);
}

/// L_kd = alpha * L_cls + beta * L_dist.
inline LossResult batch_kd_loss(std::span<const DualHeadOutput> outputs, const SoftTargets& targets,
                                std::span<const OneHotLabel> labels, const LossConfig& cfg) {
    return batch_composite_loss(outputs, &targets, labels, {}, false, cfg.alpha, cfg.beta, cfg.tau);
}

/// L_ipwd = L_cls + alpha * L_ipw-dist, with L_ipw-dist the batch mean of w * l_dist.
inline LossResult batch_ipwd_loss(std::span<const DualHeadOutput> outputs, const SoftTargets& targets,
                                  std::span<const OneHotLabel> labels, std::span<const double> weights,
                                  const LossConfig& cfg) {
    return batch_composite_loss(outputs, &targets, labels, weights, true, 1.0, cfg.alpha, cfg.tau);
}

/// Progressive self-distillation: (1 - alpha_t) * L_cls + alpha_t * D, where D is
/// L_ipw-dist when weights are supplied and L_dist otherwise.
inline LossResult batch_pskd_loss(std::span<const DualHeadOutput> outputs, const SoftTargets& targets,
                                  std::span<const OneHotLabel> labels, double alpha_t,
                                  std::optional<std::span<const double>> weights, double tau,
                                  double dist_multiplier = 1.0) {
    return batch_composite_loss(outputs, &targets, labels, weights.value_or(std::span<const double>{}),
                                weights.has_value(), 1.0 - alpha_t, alpha_t * dist_multiplier, tau);
}

}  // namespace ipwd
