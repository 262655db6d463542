#pragma once

// Checkpoint layout (little-endian):
//   "IPWDCKPT" | version u32 | num_layers u32 | num_layers x (rows u32, cols u32)
//   | dual_head u8 | seed u64 | parameters f64...
// Parameters follow layer order (backbone, KD head, CLS head); each layer is its
// row-major weights followed by its biases. Momenta are not stored.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "ipwd/errors.hpp"
#include "ipwd/net.hpp"

namespace ipwd {

inline constexpr std::string_view kCheckpointMagic = "IPWDCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::size_t checkpoint_header_size(std::size_t num_layers) {
    return kCheckpointMagic.size() + 4 + 4 + 8 * num_layers + 1 + 8;
}

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
    using U = std::make_unsigned_t<T>;
    auto bits = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>(bits & 0xFF));
        bits = static_cast<U>(bits >> 8);
    }
}

inline void put_f64(std::string& out, double value) { put_le(out, std::bit_cast<std::uint64_t>(value)); }

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        if (bytes_.size() - pos_ < sizeof(T)) throw CheckpointFormatError("checkpoint truncated");
        std::make_unsigned_t<T> value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            value |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(value);
    }

    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

    std::string_view take(std::size_t n) {
        if (bytes_.size() - pos_ < n) throw CheckpointFormatError("checkpoint truncated");
        auto view = bytes_.substr(pos_, n);
        pos_ += n;
        return view;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const NetworkState& net) {
    std::string out(kCheckpointMagic);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.layer_count()));
    net.for_each_layer([&](const DenseLayer& l) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.outputs));
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.inputs));
    });
    detail::put_le<std::uint8_t>(out, net.cls_head ? 1 : 0);
    detail::put_le<std::uint64_t>(out, net.rng_seed);
    net.for_each_layer([&](const DenseLayer& l) {
        for (double w : l.weights) detail::put_f64(out, w);
        for (double b : l.bias) detail::put_f64(out, b);
    });
    return out;
}

inline NetworkState parse_checkpoint(std::string_view bytes) {
    detail::ByteReader in(bytes);
    if (bytes.size() < kCheckpointMagic.size() || in.take(kCheckpointMagic.size()) != kCheckpointMagic) {
        throw CheckpointFormatError("bad checkpoint magic");
    }
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto num_layers = in.get<std::uint32_t>();
    if (num_layers < 2 || num_layers > 4096) throw CheckpointFormatError("implausible layer count");
    std::vector<std::array<std::uint32_t, 2>> shapes(num_layers);
    for (auto& s : shapes) {
        s[0] = in.get<std::uint32_t>();
        s[1] = in.get<std::uint32_t>();
        if (s[0] == 0 || s[1] == 0) throw CheckpointFormatError("zero-width layer");
    }
    const auto dual = in.get<std::uint8_t>();
    if (dual > 1) throw CheckpointFormatError("dual_head flag must be 0 or 1");
    const auto seed = in.get<std::uint64_t>();

    const std::size_t heads = dual ? 2 : 1;
    if (num_layers < heads + 1) throw CheckpointFormatError("no backbone layers");
    const std::size_t depth = num_layers - heads;

    NetworkState net;
    net.dual_head = dual == 1;
    net.rng_seed = seed;
    net.layer_dims.push_back(shapes[0][1]);
    for (std::size_t i = 0; i < depth; ++i) {
        if (shapes[i][1] != net.layer_dims.back()) throw CheckpointFormatError("inconsistent layer shapes");
        net.layer_dims.push_back(shapes[i][0]);
    }
    for (std::size_t h = depth; h < num_layers; ++h) {
        if (shapes[h][1] != net.layer_dims.back()) throw CheckpointFormatError("head does not match feature width");
        if (shapes[h][0] != shapes[depth][0]) throw CheckpointFormatError("heads disagree on class count");
    }
    net.num_classes = shapes[depth][0];
    if (net.num_classes < 2) throw CheckpointFormatError("fewer than two classes");

    std::size_t expected = 0;
    for (const auto& s : shapes) expected += (static_cast<std::size_t>(s[0]) * s[1] + s[0]) * 8;
    if (in.remaining() != expected) {
        throw CheckpointFormatError("body holds " + std::to_string(in.remaining()) + " bytes, expected " +
                                    std::to_string(expected));
    }

    auto read_layer = [&](const std::array<std::uint32_t, 2>& s) {
        DenseLayer layer(s[1], s[0]);
        for (double& w : layer.weights) w = in.get_f64();
        for (double& b : layer.bias) b = in.get_f64();
        return layer;
    };
    for (std::size_t i = 0; i < depth; ++i) net.backbone.push_back(read_layer(shapes[i]));
    net.kd_head = read_layer(shapes[depth]);
    if (net.dual_head) net.cls_head = read_layer(shapes[depth + 1]);
    return net;
}

inline void save_checkpoint(const NetworkState& net, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(net);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

inline NetworkState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

}  // namespace ipwd
