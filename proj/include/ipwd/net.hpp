#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipwd/errors.hpp"
#include "ipwd/mathcore.hpp"
#include "ipwd/rng.hpp"

namespace ipwd {

/// Fully connected layer y = W x + b, W stored row-major as outputs x inputs.
struct DenseLayer {
    std::size_t inputs = 0;
    std::size_t outputs = 0;
    std::vector<double> weights;
    std::vector<double> bias;
    std::vector<double> weight_momentum;
    std::vector<double> bias_momentum;

    DenseLayer() = default;
    DenseLayer(std::size_t in, std::size_t out)
        : inputs(in),
          outputs(out),
          weights(in * out, 0.0),
          bias(out, 0.0),
          weight_momentum(in * out, 0.0),
          bias_momentum(out, 0.0) {}

    std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }

    void apply(std::span<const double> x, std::span<double> y) const {
        for (std::size_t r = 0; r < outputs; ++r) {
            const double* row = weights.data() + r * inputs;
            double acc = bias[r];
            for (std::size_t c = 0; c < inputs; ++c) acc += row[c] * x[c];
            y[r] = acc;
        }
    }
};

/// MLP backbone with a KD head and an optional CLS head on the shared features.
struct NetworkState {
    std::vector<std::size_t> layer_dims;  ///< input, hidden..., feature
    std::size_t num_classes = 0;
    bool dual_head = false;
    std::uint64_t rng_seed = 0;
    std::vector<DenseLayer> backbone;
    DenseLayer kd_head;
    std::optional<DenseLayer> cls_head;

    std::size_t input_dim() const { return layer_dims.front(); }
    std::size_t feature_dim() const { return layer_dims.back(); }
    std::size_t layer_count() const { return backbone.size() + 1 + (cls_head ? 1 : 0); }

    /// Visits layers in canonical order: backbone, KD head, CLS head.
    template <typename F>
    void for_each_layer(F&& f) const {
        for (const auto& layer : backbone) f(layer);
        f(kd_head);
        if (cls_head) f(*cls_head);
    }

    template <typename F>
    void for_each_layer(F&& f) {
        for (auto& layer : backbone) f(layer);
        f(kd_head);
        if (cls_head) f(*cls_head);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_layer([&](const DenseLayer& l) { n += l.parameter_count(); });
        return n;
    }
};

/// FNV-1a over the parameter bytes in canonical order (momenta excluded).
inline std::uint64_t parameter_checksum(const NetworkState& net) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](const std::vector<double>& v) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
        for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    net.for_each_layer([&](const DenseLayer& l) {
        feed(l.weights);
        feed(l.bias);
    });
    return h;
}

struct DualHeadOutput {
    LogitVector z_kd;
    LogitVector z_cls;  ///< empty when the network has no CLS head
    std::vector<double> features;

    bool has_cls() const noexcept { return !z_cls.empty(); }
};

struct LearningRateSchedule {
    double base = 0.05;
    std::vector<int> decay_epochs;  ///< 1-based epochs at which the rate is multiplied by decay_factor
    double decay_factor = 0.1;

    double at(int epoch) const {
        double lr = base;
        for (int e : decay_epochs) {
            if (epoch >= e) lr *= decay_factor;
        }
        return lr;
    }
};

struct OptimizerConfig {
    LearningRateSchedule learning_rate;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 64;

    void validate() const {
        if (!(learning_rate.base > 0.0)) throw ConfigError("optimizer: learning rate must be positive");
        if (!(learning_rate.decay_factor > 0.0)) throw ConfigError("optimizer: decay factor must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer: momentum must be in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight decay must be non-negative");
        if (batch_size == 0) throw ConfigError("optimizer: batch size must be positive");
    }
};

/// Which heads send gradient into the shared backbone. Head parameters always
/// receive their own gradient.
struct HeadMask {
    bool kd_to_backbone = true;
    bool cls_to_backbone = false;
};

/// dLoss/dlogits per sample; `cls` is empty when no CLS-head gradient is supplied.
struct LogitGradients {
    std::vector<std::vector<double>> kd;
    std::vector<std::vector<double>> cls;
};

/// Parameter gradients in canonical layer order.
struct ParameterGradients {
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<double>> biases;
};

struct StepReport {
    double grad_norm = 0.0;
    double learning_rate = 0.0;
};

/// He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases. The CLS head
/// is drawn after the KD head so single- and dual-head networks share a prefix.
inline NetworkState init_network(std::span<const std::size_t> layer_dims, std::size_t num_classes,
                                 bool dual_head, std::uint64_t seed) {
    if (layer_dims.size() < 2) throw InvalidArgument("init_network: need an input and at least one hidden layer");
    if (num_classes < 2) throw InvalidArgument("init_network: need at least two classes");
    for (std::size_t d : layer_dims) {
        if (d == 0) throw InvalidArgument("init_network: zero-width layer");
    }

    NetworkState net;
    net.layer_dims.assign(layer_dims.begin(), layer_dims.end());
    net.num_classes = num_classes;
    net.dual_head = dual_head;
    net.rng_seed = seed;

    Rng rng(seed);
    auto draw = [&](DenseLayer& layer) {
        const double bound = std::sqrt(6.0 / static_cast<double>(layer.inputs));
        for (double& w : layer.weights) w = rng.uniform(-bound, bound);
    };
    for (std::size_t i = 0; i + 1 < layer_dims.size(); ++i) {
        net.backbone.emplace_back(layer_dims[i], layer_dims[i + 1]);
        draw(net.backbone.back());
    }
    net.kd_head = DenseLayer(net.feature_dim(), num_classes);
    draw(net.kd_head);
    if (dual_head) {
        net.cls_head = DenseLayer(net.feature_dim(), num_classes);
        draw(*net.cls_head);
    }
    return net;
}

/// ReLU on hidden layers, identity on both heads.
inline DualHeadOutput forward(const NetworkState& net, std::span<const double> x) {
    if (x.size() != net.input_dim()) {
        throw InvalidArgument("forward: input has " + std::to_string(x.size()) + " features, expected " +
                              std::to_string(net.input_dim()));
    }
    std::vector<double> act(x.begin(), x.end());
    std::vector<double> next;
    for (const auto& layer : net.backbone) {
        next.assign(layer.outputs, 0.0);
        layer.apply(act, next);
        for (double& v : next) v = v > 0.0 ? v : 0.0;
        act.swap(next);
    }
    DualHeadOutput out;
    std::vector<double> z(net.num_classes);
    net.kd_head.apply(act, z);
    out.z_kd = LogitVector(z);
    if (net.cls_head) {
        net.cls_head->apply(act, z);
        out.z_cls = LogitVector(z);
    }
    out.features = std::move(act);
    return out;
}

inline std::vector<DualHeadOutput> forward_batch(const NetworkState& net,
                                                 std::span<const std::span<const double>> inputs) {
    std::vector<DualHeadOutput> out;
    out.reserve(inputs.size());
    for (auto x : inputs) out.push_back(forward(net, x));
    return out;
}

/// Backpropagates per-sample logit gradients through the network. Samples are
/// accumulated in batch order.
inline ParameterGradients compute_gradients(const NetworkState& net,
                                            std::span<const std::span<const double>> inputs,
                                            const LogitGradients& grads, const HeadMask& mask) {
    const std::size_t batch = inputs.size();
    if (grads.kd.size() != batch) throw InvalidArgument("compute_gradients: one KD gradient per sample required");
    const bool with_cls = !grads.cls.empty();
    if (with_cls && !net.cls_head) throw InvalidArgument("compute_gradients: CLS gradient for a single-head network");
    if (with_cls && grads.cls.size() != batch) {
        throw InvalidArgument("compute_gradients: one CLS gradient per sample required");
    }

    ParameterGradients out;
    net.for_each_layer([&](const DenseLayer& l) {
        out.weights.emplace_back(l.weights.size(), 0.0);
        out.biases.emplace_back(l.bias.size(), 0.0);
    });
    const std::size_t depth = net.backbone.size();
    const std::size_t kd_index = depth;
    const std::size_t cls_index = depth + 1;

    std::vector<std::vector<double>> pre(depth);
    std::vector<std::vector<double>> act(depth + 1);
    std::vector<double> delta;
    std::vector<double> delta_prev;

    auto accumulate = [](const DenseLayer& layer, std::span<const double> upstream, std::span<const double> input,
                         std::vector<double>& gw, std::vector<double>& gb) {
        for (std::size_t r = 0; r < layer.outputs; ++r) {
            const double g = upstream[r];
            if (g == 0.0) continue;
            double* row = gw.data() + r * layer.inputs;
            for (std::size_t c = 0; c < layer.inputs; ++c) row[c] += g * input[c];
            gb[r] += g;
        }
    };
    auto backprop_into = [](const DenseLayer& layer, std::span<const double> upstream, std::vector<double>& down) {
        for (std::size_t r = 0; r < layer.outputs; ++r) {
            const double g = upstream[r];
            if (g == 0.0) continue;
            const double* row = layer.weights.data() + r * layer.inputs;
            for (std::size_t c = 0; c < layer.inputs; ++c) down[c] += row[c] * g;
        }
    };

    for (std::size_t s = 0; s < batch; ++s) {
        if (inputs[s].size() != net.input_dim()) throw InvalidArgument("compute_gradients: input dimension mismatch");
        if (grads.kd[s].size() != net.num_classes) throw InvalidArgument("compute_gradients: KD gradient length mismatch");
        if (with_cls && grads.cls[s].size() != net.num_classes) {
            throw InvalidArgument("compute_gradients: CLS gradient length mismatch");
        }

        act[0].assign(inputs[s].begin(), inputs[s].end());
        for (std::size_t l = 0; l < depth; ++l) {
            const auto& layer = net.backbone[l];
            pre[l].assign(layer.outputs, 0.0);
            layer.apply(act[l], pre[l]);
            act[l + 1].resize(layer.outputs);
            for (std::size_t i = 0; i < layer.outputs; ++i) act[l + 1][i] = pre[l][i] > 0.0 ? pre[l][i] : 0.0;
        }
        const auto& features = act[depth];

        delta.assign(net.feature_dim(), 0.0);
        accumulate(net.kd_head, grads.kd[s], features, out.weights[kd_index], out.biases[kd_index]);
        if (mask.kd_to_backbone) backprop_into(net.kd_head, grads.kd[s], delta);
        if (with_cls) {
            accumulate(*net.cls_head, grads.cls[s], features, out.weights[cls_index], out.biases[cls_index]);
            if (mask.cls_to_backbone) backprop_into(*net.cls_head, grads.cls[s], delta);
        }

        for (std::size_t l = depth; l-- > 0;) {
            const auto& layer = net.backbone[l];
            for (std::size_t i = 0; i < layer.outputs; ++i) {
                if (!(pre[l][i] > 0.0)) delta[i] = 0.0;
            }
            accumulate(layer, delta, act[l], out.weights[l], out.biases[l]);
            if (l == 0) break;
            delta_prev.assign(layer.inputs, 0.0);
            backprop_into(layer, delta, delta_prev);
            delta.swap(delta_prev);
        }
    }
    return out;
}

/// Momentum SGD with L2 weight decay on every parameter:
///   v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
inline StepReport apply_step(NetworkState& net, const ParameterGradients& grads, const OptimizerConfig& opt,
                             int epoch, std::size_t batch_index) {
    double sq = 0.0;
    for (const auto& v : grads.weights) {
        for (double g : v) sq += g * g;
    }
    for (const auto& v : grads.biases) {
        for (double g : v) sq += g * g;
    }
    if (!std::isfinite(sq)) throw TrainingDiverged("non-finite gradient", batch_index, epoch);

    const double lr = opt.learning_rate.at(epoch);
    std::size_t index = 0;
    auto update = [&](std::vector<double>& param, std::vector<double>& momentum, const std::vector<double>& g) {
        for (std::size_t i = 0; i < param.size(); ++i) {
            momentum[i] = opt.momentum * momentum[i] + (g[i] + opt.weight_decay * param[i]);
            param[i] -= lr * momentum[i];
        }
    };
    net.for_each_layer([&](DenseLayer& layer) {
        update(layer.weights, layer.weight_momentum, grads.weights[index]);
        update(layer.bias, layer.bias_momentum, grads.biases[index]);
        ++index;
    });
    return {std::sqrt(sq), lr};
}

inline StepReport backward_and_step(NetworkState& net, std::span<const std::span<const double>> inputs,
                                    const LogitGradients& grads, const OptimizerConfig& opt, const HeadMask& mask,
                                    int epoch = 1, std::size_t batch_index = 0) {
    for (const auto* per_head : {&grads.kd, &grads.cls}) {
        for (const auto& g : *per_head) {
            for (double v : g) {
                if (!std::isfinite(v)) throw TrainingDiverged("non-finite logit gradient", batch_index, epoch);
            }
        }
    }
    return apply_step(net, compute_gradients(net, inputs, grads, mask), opt, epoch, batch_index);
}

}  // namespace ipwd
