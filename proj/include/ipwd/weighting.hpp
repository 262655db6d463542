#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ipwd/errors.hpp"
#include "ipwd/mathcore.hpp"
#include "ipwd/net.hpp"

namespace ipwd {

struct WeightingConfig {
    bool use_cls_head = true;      ///< false: the teacher output is the CE-trained reference
    bool normalize_logits = true;  ///< divide logits by their std before the softmax
    double epsilon_floor = 1e-6;   ///< lower bound on both cross-entropies
    std::optional<double> weight_cap;
    bool renormalize_mean = false;  ///< rescale each batch's weights to mean 1

    void validate() const {
        if (!(epsilon_floor > 0.0 && epsilon_floor <= 1e-3)) {
            throw ConfigError("weighting: epsilon_floor must be in (0, 1e-3]");
        }
        if (weight_cap && !(*weight_cap > 1.0)) throw ConfigError("weighting: weight_cap must exceed 1");
    }
};

enum class PropensityFlag : std::uint8_t {
    KdFloored = 1 << 0,
    ReferenceFloored = 1 << 1,
    KdDegenerate = 1 << 2,
    ReferenceDegenerate = 1 << 3,
    WeightCapped = 1 << 4,
};

struct PropensityFlags {
    std::uint8_t bits = 0;

    bool has(PropensityFlag f) const noexcept { return (bits & static_cast<std::uint8_t>(f)) != 0; }
    void set(PropensityFlag f) noexcept { bits |= static_cast<std::uint8_t>(f); }
    bool any() const noexcept { return bits != 0; }
};

/// Machine-domain propensity of one sample and its inverse-probability weight.
struct PropensityRecord {
    double h_cls = 0.0;  ///< CE of the reference (CLS head or teacher) against the label
    double h_kd = 0.0;   ///< CE of the KD head against the label
    double z_x = 0.0;    ///< log(h_cls / h_kd)
    double p_hat = 0.0;  ///< h_cls / (h_cls + h_kd)
    double w_hat = 0.0;  ///< 1 + h_kd / h_cls, possibly capped
    PropensityFlags fallback_flags;
};

/// Estimates P(x | machine) by comparing how well the KD head and a CE-trained
/// reference explain the ground-truth label. Samples the KD head fits worse than
/// the reference get weights above 2.
inline PropensityRecord estimate_propensity(const DualHeadOutput& out, OneHotLabel label,
                                            const LogitVector* teacher_logits, const WeightingConfig& cfg) {
    const LogitVector* reference = nullptr;
    if (cfg.use_cls_head) {
        if (!out.has_cls()) throw ConfigError("estimate_propensity: network has no CLS head");
        reference = &out.z_cls;
    } else {
        if (teacher_logits == nullptr) {
            throw ConfigError("estimate_propensity: teacher logits required when the CLS head is disabled");
        }
        reference = teacher_logits;
    }
    if (reference->size() != out.z_kd.size()) throw InvalidArgument("estimate_propensity: class count mismatch");
    if (label.class_index >= out.z_kd.size()) throw InvalidArgument("estimate_propensity: label out of range");

    PropensityRecord rec;
    auto probs = [&](const LogitVector& z, PropensityFlag degenerate_flag) {
        if (!cfg.normalize_logits) return softmax(z, 1.0);
        auto n = std_normalized_probs(z);
        if (n.degenerate) rec.fallback_flags.set(degenerate_flag);
        return std::move(n.probs);
    };
    const ProbVector kd = probs(out.z_kd, PropensityFlag::KdDegenerate);
    const ProbVector ref = probs(*reference, PropensityFlag::ReferenceDegenerate);

    rec.h_kd = cross_entropy(kd, label);
    rec.h_cls = cross_entropy(ref, label);
    if (rec.h_kd < cfg.epsilon_floor) {
        rec.h_kd = cfg.epsilon_floor;
        rec.fallback_flags.set(PropensityFlag::KdFloored);
    }
    if (rec.h_cls < cfg.epsilon_floor) {
        rec.h_cls = cfg.epsilon_floor;
        rec.fallback_flags.set(PropensityFlag::ReferenceFloored);
    }
    rec.z_x = std::log(rec.h_cls / rec.h_kd);
    rec.p_hat = rec.h_cls / (rec.h_cls + rec.h_kd);
    rec.w_hat = 1.0 + rec.h_kd / rec.h_cls;
    // When the two cross-entropies differ by a few ulps the quotient can round
    // to exactly 1; keep "w > 2 iff h_kd > h_cls" exact.
    if (rec.h_kd > rec.h_cls && !(rec.w_hat > 2.0)) rec.w_hat = std::nextafter(2.0, 3.0);
    if (rec.h_kd < rec.h_cls && !(rec.w_hat < 2.0)) rec.w_hat = std::nextafter(2.0, 1.0);
    if (cfg.weight_cap && rec.w_hat > *cfg.weight_cap) {
        rec.w_hat = *cfg.weight_cap;
        rec.fallback_flags.set(PropensityFlag::WeightCapped);
    }
    return rec;
}

struct WeightSummary {
    std::size_t count = 0;
    double mean = 0.0;
    double std = 0.0;  ///< population
    double max = 0.0;
    double frac_above_two = 0.0;
};

inline WeightSummary summarize_weights(std::span<const double> w) {
    if (w.empty()) throw InvalidArgument("summarize_weights: empty input");
    WeightSummary s;
    s.count = w.size();
    s.max = w[0];
    std::size_t above = 0;
    for (double v : w) {
        s.mean += v;
        s.max = std::max(s.max, v);
        if (v > 2.0) ++above;
    }
    const double n = static_cast<double>(w.size());
    s.mean /= n;
    double ss = 0.0;
    for (double v : w) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / n);
    s.frac_above_two = static_cast<double>(above) / n;
    return s;
}

struct BatchWeights {
    std::vector<double> weights;
    WeightSummary summary;
};

inline BatchWeights batch_weights(std::span<const PropensityRecord> records) {
    if (records.empty()) throw InvalidArgument("batch_weights: empty batch");
    BatchWeights out;
    out.weights.reserve(records.size());
    for (const auto& r : records) out.weights.push_back(r.w_hat);
    out.summary = summarize_weights(out.weights);
    return out;
}

inline void renormalize_to_unit_mean(std::vector<double>& weights) {
    if (weights.empty()) return;
    double mean = 0.0;
    for (double w : weights) mean += w;
    mean /= static_cast<double>(weights.size());
    for (double& w : weights) w /= mean;
}

}  // namespace ipwd
