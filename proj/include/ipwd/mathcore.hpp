#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ipwd/errors.hpp"

namespace ipwd {

/// Floor applied to probabilities inside log() by cross_entropy.
inline constexpr double kLogFloor = 1e-12;

/// Below this standard deviation, logits are treated as constant.
inline constexpr double kDegenerateSigma = 1e-8;

namespace detail {

// Shared storage for the two vector types; keeps them distinct at the type level.
template <typename Tag>
struct ClassVector {
    std::vector<double> values;

    ClassVector() = default;
    explicit ClassVector(std::vector<double> v) : values(std::move(v)) {}
    ClassVector(std::initializer_list<double> v) : values(v) {}

    std::size_t size() const noexcept { return values.size(); }
    bool empty() const noexcept { return values.empty(); }
    double operator[](std::size_t i) const { return values[i]; }
    double& operator[](std::size_t i) { return values[i]; }
    auto begin() const noexcept { return values.begin(); }
    auto end() const noexcept { return values.end(); }
    std::span<const double> span() const noexcept { return values; }

    friend bool operator==(const ClassVector&, const ClassVector&) = default;
};

struct LogitTag {};
struct ProbTag {};

inline void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw InvalidArgument(std::string(what) + ": non-finite entry");
    }
}

}  // namespace detail

/// Raw class scores.
using LogitVector = detail::ClassVector<detail::LogitTag>;

/// A point on the probability simplex.
using ProbVector = detail::ClassVector<detail::ProbTag>;

struct OneHotLabel {
    std::size_t class_index = 0;

    static OneHotLabel checked(long long index, std::size_t num_classes) {
        if (index < 0 || static_cast<std::size_t>(index) >= num_classes) {
            throw InvalidArgument("label " + std::to_string(index) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
        }
        return OneHotLabel{static_cast<std::size_t>(index)};
    }
};

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

/// Temperature softmax exp(z_k / tau) / sum_i exp(z_i / tau), max-subtracted.
inline ProbVector softmax(std::span<const double> z, double tau = 1.0) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("softmax: tau must be positive");
    if (z.empty()) throw InvalidArgument("softmax: empty logits");
    detail::require_finite(z, "softmax");

    const double peak = *std::max_element(z.begin(), z.end());
    std::vector<double> out(z.size());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp((z[i] - peak) / tau);
        total += out[i];
    }
    for (double& p : out) p /= total;
    return ProbVector(std::move(out));
}

inline ProbVector softmax(const LogitVector& z, double tau = 1.0) { return softmax(z.span(), tau); }

/// H(p, q) = sum_i -q_i log max(p_i, eps). p is the prediction, q the weighting distribution.
inline double cross_entropy(const ProbVector& p, const ProbVector& q) {
    if (p.size() != q.size()) throw InvalidArgument("cross_entropy: length mismatch");
    double h = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (q[i] != 0.0) h -= q[i] * std::log(std::max(p[i], kLogFloor));
    }
    return h;
}

/// H(p, onehot(y)) = -log max(p_y, eps).
inline double cross_entropy(const ProbVector& p, OneHotLabel y) {
    if (y.class_index >= p.size()) throw InvalidArgument("cross_entropy: label out of range");
    return -std::log(std::max(p[y.class_index], kLogFloor));
}

/// tau^2 * [H(y^s_tau, y^t_tau) - H(y^t_tau, y^t_tau)], i.e. tau^2 * KL(y^t_tau || y^s_tau).
inline double kd_divergence_loss(const LogitVector& z_student, const LogitVector& z_teacher,
                                 double tau) {
    if (z_student.size() != z_teacher.size()) {
        throw InvalidArgument("kd_divergence_loss: length mismatch");
    }
    const ProbVector ps = softmax(z_student, tau);
    const ProbVector pt = softmax(z_teacher, tau);
    const double kl = cross_entropy(ps, pt) - cross_entropy(pt, pt);
    return std::max(0.0, tau * tau * kl);
}

/// Population standard deviation (divide by C) about the mean. Values are scaled
/// by max |x| first so huge but finite logits do not overflow the sum of squares.
inline double population_stddev(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double scale = 0.0;
    for (double x : v) scale = std::max(scale, std::abs(x));
    if (scale == 0.0 || !std::isfinite(scale)) return scale == 0.0 ? 0.0 : scale;
    double mean = 0.0;
    for (double x : v) mean += x / scale;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x / scale - mean) * (x / scale - mean);
    return scale * std::sqrt(ss / static_cast<double>(v.size()));
}

struct NormalizedProbs {
    ProbVector probs;
    bool degenerate = false;  ///< sigma fell below kDegenerateSigma; probs are uniform
};

/// softmax(z / sigma(z)). The mean is not subtracted: softmax is shift invariant,
/// so only the scale matters.
inline NormalizedProbs std_normalized_probs(const LogitVector& z) {
    if (z.size() < 2) throw InvalidArgument("std_normalized_probs: need at least two classes");
    detail::require_finite(z.span(), "std_normalized_probs");
    const double sigma = population_stddev(z.span());
    if (sigma < kDegenerateSigma) {
        return {ProbVector(std::vector<double>(z.size(), 1.0 / static_cast<double>(z.size()))), true};
    }
    return {softmax(z, sigma), false};
}

}  // namespace ipwd
