#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ipwd/errors.hpp"
#include "ipwd/rng.hpp"

namespace ipwd {

/// Features and labels only. Training code receives this view, never a Dataset,
/// so hidden context ids cannot leak into losses or weights.
struct LabeledView {
    std::size_t dim = 0;
    std::size_t num_classes = 0;
    std::span<const std::vector<double>> features;
    std::span<const int> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

struct Dataset {
    std::size_t dim = 0;
    std::size_t num_classes = 0;
    std::vector<std::vector<double>> features;
    std::vector<int> labels;
    std::vector<int> contexts;  ///< evaluation-only; empty when unknown

    std::size_t size() const noexcept { return labels.size(); }
    bool has_context() const noexcept { return !contexts.empty(); }
    LabeledView labeled() const { return {dim, num_classes, features, labels}; }
};

/// Class-balanced Gaussian mixture whose intra-class contexts are long-tailed.
/// Context k of every class has proportion r^k / sum_j r^j unless explicit
/// proportions are given, so context 0 is the head and context K-1 the rarest.
struct SyntheticSpec {
    std::size_t num_classes = 10;
    std::size_t contexts_per_class = 3;
    double mixing_ratio = 0.15;
    std::vector<double> context_proportions;  ///< overrides mixing_ratio when non-empty
    std::size_t dim = 4;
    std::size_t train_per_class = 500;
    std::size_t test_per_class = 200;
    double class_spread = 3.0;    ///< std of class centres per coordinate
    double context_offset = 3.0;  ///< distance of context k >= 1 from its class centre
    double noise_std = 1.0;
    double scale_spread = 1.5;    ///< class c uses noise_std * exp(scale_spread * u_c), u_c evenly spaced in [-1, 1]
    std::uint64_t seed = 1;

    std::vector<double> proportions() const {
        if (!context_proportions.empty()) return context_proportions;
        std::vector<double> p(contexts_per_class);
        double total = 0.0;
        double mass = 1.0;
        for (auto& v : p) {
            v = mass;
            total += mass;
            mass *= mixing_ratio;
        }
        for (auto& v : p) v /= total;
        return p;
    }

    void validate() const {
        if (num_classes < 2) throw InvalidArgument("synthetic: need at least two classes");
        if (contexts_per_class < 1) throw InvalidArgument("synthetic: need at least one context per class");
        if (dim < 2) throw InvalidArgument("synthetic: need at least two feature dimensions");
        if (train_per_class == 0) throw InvalidArgument("synthetic: train_per_class must be positive");
        if (!(noise_std > 0.0) || !std::isfinite(noise_std)) {
            throw InvalidArgument("synthetic: degenerate covariance (noise_std must be positive)");
        }
        if (!(class_spread >= 0.0) || !(context_offset >= 0.0) || !(scale_spread >= 0.0) || !std::isfinite(scale_spread)) {
            throw InvalidArgument("synthetic: spreads must be non-negative");
        }
        if (context_proportions.empty()) {
            if (!(mixing_ratio > 0.0)) throw InvalidArgument("synthetic: mixing_ratio must be positive");
        } else {
            if (context_proportions.size() != contexts_per_class) {
                throw InvalidArgument("synthetic: one proportion per context required");
            }
            double total = 0.0;
            for (double p : context_proportions) {
                if (!(p >= 0.0)) throw InvalidArgument("synthetic: proportions must be non-negative");
                total += p;
            }
            if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("synthetic: proportions must sum to 1");
        }
    }
};

struct SplitDataset {
    Dataset train;
    Dataset test;
};

inline SplitDataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const std::size_t C = spec.num_classes;
    const std::size_t K = spec.contexts_per_class;
    const std::size_t d = spec.dim;

    // Context 0 sits on its class centre; the others at a fixed distance in a random direction.
    std::vector<std::vector<std::vector<double>>> means(C, std::vector<std::vector<double>>(K));
    std::vector<double> scale(C);
    for (std::size_t c = 0; c < C; ++c) {
        const double u = 2.0 * static_cast<double>(c) / static_cast<double>(C - 1) - 1.0;
        scale[c] = spec.noise_std * std::exp(spec.scale_spread * u);
        std::vector<double> centre(d);
        for (double& v : centre) v = spec.class_spread * rng.normal();
        for (std::size_t k = 0; k < K; ++k) {
            std::vector<double> dir(d);
            double norm = 0.0;
            for (double& v : dir) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
            const double reach = k == 0 ? 0.0 : spec.context_offset;
            means[c][k].resize(d);
            for (std::size_t i = 0; i < d; ++i) means[c][k][i] = centre[i] + reach * dir[i] / norm;
        }
    }

    const std::vector<double> props = spec.proportions();
    std::vector<double> cumulative(K);
    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        acc += props[k];
        cumulative[k] = acc;
    }
    auto draw_context = [&] {
        const double u = rng.uniform() * acc;
        for (std::size_t k = 0; k < K; ++k) {
            if (u < cumulative[k]) return k;
        }
        return K - 1;
    };

    auto fill = [&](Dataset& ds, std::size_t per_class) {
        ds.dim = d;
        ds.num_classes = C;
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t n = 0; n < per_class; ++n) {
                const std::size_t k = draw_context();
                std::vector<double> x(d);
                for (std::size_t i = 0; i < d; ++i) x[i] = means[c][k][i] + scale[c] * rng.normal();
                ds.features.push_back(std::move(x));
                ds.labels.push_back(static_cast<int>(c));
                ds.contexts.push_back(static_cast<int>(k));
            }
        }
    };
    SplitDataset out;
    fill(out.train, spec.train_per_class);
    fill(out.test, spec.test_per_class);
    return out;
}

/// Per-epoch shuffled partition of [0, n) into batches keyed by (seed, epoch).
/// The final short batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                     int epoch) {
    if (batch_size == 0) throw InvalidArgument("batches: batch_size must be positive");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return out;
}

inline std::uint64_t dataset_checksum(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    feed(&ds.dim, sizeof ds.dim);
    feed(&ds.num_classes, sizeof ds.num_classes);
    for (const auto& x : ds.features) feed(x.data(), x.size() * sizeof(double));
    feed(ds.labels.data(), ds.labels.size() * sizeof(int));
    feed(ds.contexts.data(), ds.contexts.size() * sizeof(int));
    return h;
}

/// Shortest round-trip decimal for a double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline void write_csv(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (std::size_t i = 0; i < ds.dim; ++i) out << 'f' << i << ',';
    out << "label";
    if (ds.has_context()) out << ",context";
    out << '\n';
    for (std::size_t r = 0; r < ds.size(); ++r) {
        for (double v : ds.features[r]) out << format_double(v) << ',';
        out << ds.labels[r];
        if (ds.has_context()) out << ',' << ds.contexts[r];
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

struct CsvSchema {
    std::size_t num_classes = 0;  ///< 0 infers max(label) + 1
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            cells.push_back(line.substr(start));
            break;
        }
        cells.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return cells;
}

template <typename T>
bool parse_number(std::string_view cell, T& value) {
    while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\r')) cell.remove_suffix(1);
    if (cell.empty()) return false;
    auto res = std::from_chars(cell.data(), cell.data() + cell.size(), value);
    return res.ec == std::errc() && res.ptr == cell.data() + cell.size();
}

}  // namespace detail

/// Reads "f0,...,f{d-1},label[,context]". Row order is preserved.
inline Dataset parse_csv(std::istream& in, const CsvSchema& schema = {}) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty file, expected a header row", 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = detail::split_commas(line);

    Dataset ds;
    std::size_t label_col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "label") label_col = i;
    }
    if (label_col == header.size()) throw ParseError("missing required column 'label'", 1);
    for (std::size_t i = 0; i < label_col; ++i) {
        if (header[i] != "f" + std::to_string(i)) {
            throw ParseError("expected column 'f" + std::to_string(i) + "', found '" + std::string(header[i]) + "'", 1);
        }
    }
    const bool with_context = header.size() == label_col + 2 && header[label_col + 1] == "context";
    if (header.size() != label_col + 1 && !with_context) {
        throw ParseError("unexpected columns after 'label'", 1);
    }
    if (label_col == 0) throw ParseError("no feature columns", 1);
    ds.dim = label_col;

    std::size_t line_no = 1;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = detail::split_commas(line);
        if (cells.size() != header.size()) {
            throw ParseError("expected " + std::to_string(header.size()) + " cells, found " +
                                 std::to_string(cells.size()),
                             line_no);
        }
        std::vector<double> x(ds.dim);
        for (std::size_t i = 0; i < ds.dim; ++i) {
            if (!detail::parse_number(cells[i], x[i]) || !std::isfinite(x[i])) {
                throw ParseError("non-numeric value in column 'f" + std::to_string(i) + "'", line_no);
            }
        }
        int label = 0;
        if (!detail::parse_number(cells[label_col], label)) throw ParseError("non-integer label", line_no);
        if (label < 0 || (schema.num_classes > 0 && static_cast<std::size_t>(label) >= schema.num_classes)) {
            throw ParseError("label " + std::to_string(label) + " out of range", line_no);
        }
        max_label = std::max(max_label, label);
        ds.features.push_back(std::move(x));
        ds.labels.push_back(label);
        if (with_context) {
            int context = 0;
            if (!detail::parse_number(cells[label_col + 1], context)) throw ParseError("non-integer context", line_no);
            ds.contexts.push_back(context);
        }
    }
    ds.num_classes = schema.num_classes > 0 ? schema.num_classes : static_cast<std::size_t>(max_label + 1);
    if (ds.num_classes < 2) throw ParseError("fewer than two classes", line_no);
    return ds;
}

inline Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return parse_csv(in, schema);
}

}  // namespace ipwd
