#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nnfi/error.hpp"
#include "nnfi/graph.hpp"
#include "nnfi/rng.hpp"
#include "nnfi/tensor.hpp"
#include "nnfi/text.hpp"

namespace nnfi {

struct Sample {
    Tensor input;
    std::uint16_t label = 0;
};

/// Labeled inputs, each shaped like the graph input.
struct Dataset {
    std::vector<Sample> samples;

    bool empty() const noexcept { return samples.empty(); }
    std::size_t size() const noexcept { return samples.size(); }
};

// ---------------------------------------------------------------------------
// Byte helpers (little-endian)

namespace io_detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f32s(std::string& out, std::span<const float> values) {
    for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
public:
    Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    bool done() const noexcept { return pos_ == bytes_.size(); }

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw LoadError(LoadFailure::Truncated, what_ + " is truncated");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_++]) << (8 * i));
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void f32s(std::span<float> out) {
        if (out.size() > (bytes_.size() - pos_) / 4) throw LoadError(LoadFailure::Truncated, what_ + " is truncated");
        for (float& f : out) f = std::bit_cast<float>(u32());
    }

private:
    const std::string& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace io_detail

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Model description text
//
//   input shape=1,1,28,28
//   model.conv1 conv2d in=1 out=6 kernel=5 stride=1 padding=0 bias=1
//   model.pool1 maxpool2d kernel=2 stride=2
//   model.block1.add add source=model.conv1

struct ModelDescription {
    Shape input_shape;
    std::vector<LayerNode> layers; // weights unbound
};

inline ModelDescription parse_model_description(const std::string& text) {
    ModelDescription desc;
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& msg) -> LoadError {
        return LoadError(LoadFailure::Malformed, "model description line " + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        std::istringstream fields(trim(hash == std::string::npos ? raw : raw.substr(0, hash)));
        std::vector<std::string> tok{std::istream_iterator<std::string>(fields), std::istream_iterator<std::string>()};
        if (tok.empty()) continue;

        std::map<std::string, std::string> kv;
        for (std::size_t i = (tok[0] == "input" ? 1 : 2); i < tok.size(); ++i) {
            const auto eq = tok[i].find('=');
            if (eq == std::string::npos) throw fail("expected key=value, got '" + tok[i] + "'");
            if (!kv.emplace(tok[i].substr(0, eq), tok[i].substr(eq + 1)).second)
                throw fail("duplicate key '" + tok[i].substr(0, eq) + "'");
        }
        auto take = [&](const std::string& key, bool required) -> std::optional<std::string> {
            auto it = kv.find(key);
            if (it == kv.end()) {
                if (required) throw fail("missing key '" + key + "'");
                return std::nullopt;
            }
            std::string v = it->second;
            kv.erase(it);
            return v;
        };
        auto number = [&](const std::string& key, bool required, std::size_t fallback) -> std::size_t {
            auto v = take(key, required);
            if (!v) return fallback;
            try {
                return static_cast<std::size_t>(parse_uint(*v, lineno));
            } catch (const ParseError&) {
                throw fail("key '" + key + "' needs an unsigned integer");
            }
        };

        if (tok[0] == "input") {
            if (!desc.input_shape.empty()) throw fail("input declared twice");
            for (const auto& d : split(*take("shape", true), ',')) {
                std::size_t extent = 0;
                try {
                    extent = static_cast<std::size_t>(parse_uint(d, lineno));
                } catch (const ParseError&) {
                    throw fail("bad input extent '" + d + "'");
                }
                if (extent == 0) throw fail("input extents must be positive");
                desc.input_shape.push_back(extent);
            }
        } else {
            if (tok.size() < 2) throw fail("expected '<path> <kind> key=value ...'");
            LayerNode node;
            node.path = tok[0];
            const auto kind = parse_layer_kind(tok[1]);
            if (!kind) throw fail("unknown layer kind '" + tok[1] + "'");
            node.kind = *kind;
            auto& p = node.params;
            switch (node.kind) {
            case LayerKind::Conv2d:
                p.in_channels = number("in", true, 0);
                p.out_channels = number("out", true, 0);
                p.kernel = number("kernel", true, 0);
                p.stride = number("stride", false, 1);
                p.padding = number("padding", false, 0);
                p.bias = number("bias", false, 1) != 0;
                break;
            case LayerKind::Linear:
                p.in_features = number("in", true, 0);
                p.out_features = number("out", true, 0);
                p.bias = number("bias", false, 1) != 0;
                break;
            case LayerKind::MaxPool2d:
            case LayerKind::AvgPool2d:
                p.kernel = number("kernel", true, 0);
                p.stride = number("stride", false, p.kernel);
                break;
            case LayerKind::Add: p.source = *take("source", true); break;
            default: break;
            }
            if (!node.weighted()) p.bias = false;
            if (!kv.empty()) throw fail("unexpected key '" + kv.begin()->first + "' for " + tok[1]);
            desc.layers.push_back(std::move(node));
        }
        if (!kv.empty()) throw fail("unexpected key '" + kv.begin()->first + "'");
    }
    if (desc.input_shape.empty()) throw LoadError(LoadFailure::Malformed, "model description has no input line");
    return desc;
}

inline std::string model_description_text(const Shape& input_shape, const std::vector<LayerNode>& layers) {
    std::string out = "input shape=";
    for (std::size_t i = 0; i < input_shape.size(); ++i) out += (i ? "," : "") + std::to_string(input_shape[i]);
    out += "\n";
    for (const auto& l : layers) {
        const auto& p = l.params;
        out += l.path + " " + std::string(layer_kind_name(l.kind));
        switch (l.kind) {
        case LayerKind::Conv2d:
            out += " in=" + std::to_string(p.in_channels) + " out=" + std::to_string(p.out_channels) +
                   " kernel=" + std::to_string(p.kernel) + " stride=" + std::to_string(p.stride) +
                   " padding=" + std::to_string(p.padding) + " bias=" + (p.bias ? "1" : "0");
            break;
        case LayerKind::Linear:
            out += " in=" + std::to_string(p.in_features) + " out=" + std::to_string(p.out_features) +
                   " bias=" + (p.bias ? "1" : "0");
            break;
        case LayerKind::MaxPool2d:
        case LayerKind::AvgPool2d:
            out += " kernel=" + std::to_string(p.kernel) + " stride=" + std::to_string(p.stride);
            break;
        case LayerKind::Add: out += " source=" + p.source; break;
        default: break;
        }
        out += "\n";
    }
    return out;
}

inline std::string model_description_text(const Graph& g) { return model_description_text(g.input_shape(), g.layers()); }

/// Graph with all weights and biases zero. Enough to resolve configurations
/// against a topology without loading weights.
inline Graph zero_weight_graph(ModelDescription desc) {
    for (auto& l : desc.layers) {
        if (!l.weighted()) continue;
        l.weight = Tensor(l.weight_shape());
        if (l.params.bias) l.bias = Tensor(l.bias_shape());
    }
    return Graph(std::move(desc.input_shape), std::move(desc.layers));
}

// ---------------------------------------------------------------------------
// Weights: "MRFW", u32 version=1, u32 count, then per tensor
// u16 name length, name, u8 dtype (0=F32), u8 ndim, u32 dims, f32 data.

inline constexpr std::uint32_t kWeightsVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline std::string encode_weights(const NamedTensors& tensors) {
    using namespace io_detail;
    std::string out = "MRFW";
    put_u32(out, kWeightsVersion);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xFFFF) throw ArgumentError("tensor name too long: " + name);
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        put_u8(out, 0);
        put_u8(out, static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        put_f32s(out, t.f32());
    }
    return out;
}

inline NamedTensors decode_weights(const std::string& bytes) {
    io_detail::Reader r(bytes, "weights file");
    if (bytes.size() < 4 || bytes.compare(0, 4, "MRFW") != 0)
        throw LoadError(LoadFailure::BadMagic, "weights file does not start with MRFW");
    r.str(4);
    const auto version = r.u32();
    if (version != kWeightsVersion)
        throw LoadError(LoadFailure::BadVersion, "unsupported weights version " + std::to_string(version));
    const auto count = r.u32();
    NamedTensors out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u16());
        const auto dtype = r.u8();
        if (dtype != 0) throw LoadError(LoadFailure::Malformed, name + ": unsupported dtype code " + std::to_string(dtype));
        const auto ndim = r.u8();
        if (ndim == 0) throw LoadError(LoadFailure::Malformed, name + ": zero-dimensional tensor");
        Shape shape;
        for (unsigned d = 0; d < ndim; ++d) {
            const auto extent = r.u32();
            if (extent == 0) throw LoadError(LoadFailure::Malformed, name + ": zero extent");
            shape.push_back(extent);
        }
        if (shape_numel(shape) > bytes.size()) throw LoadError(LoadFailure::Truncated, "weights file is truncated");
        Tensor t(shape);
        r.f32s(t.f32());
        out.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done()) throw LoadError(LoadFailure::Malformed, "trailing bytes after last tensor");
    return out;
}

inline NamedTensors graph_tensors(const Graph& g) {
    NamedTensors out;
    for (const auto& l : g.layers()) {
        if (l.weight) out.emplace_back(l.path + ".weight", *l.weight);
        if (l.bias) out.emplace_back(l.path + ".bias", *l.bias);
    }
    return out;
}

/// Bind named tensors to a description. Every weighted layer must find its
/// tensors with matching shapes; unused tensors are rejected.
inline Graph bind_weights(ModelDescription desc, const NamedTensors& tensors) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : tensors)
        if (!by_name.emplace(name, &t).second) throw LoadError(LoadFailure::Malformed, "duplicate tensor " + name);
    auto fetch = [&](const std::string& name, const Shape& want) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw LoadError(LoadFailure::MissingTensor, "missing tensor " + name);
        if (it->second->shape() != want)
            throw LoadError(LoadFailure::ShapeMismatch, name + " has shape " + shape_string(it->second->shape()) +
                                                            ", expected " + shape_string(want));
        Tensor t = *it->second;
        by_name.erase(it);
        return t;
    };
    for (auto& l : desc.layers) {
        if (!l.weighted()) continue;
        l.weight = fetch(l.path + ".weight", l.weight_shape());
        if (l.params.bias) l.bias = fetch(l.path + ".bias", l.bias_shape());
    }
    if (!by_name.empty()) throw LoadError(LoadFailure::Malformed, "tensor " + by_name.begin()->first + " matches no layer");
    try {
        return Graph(std::move(desc.input_shape), std::move(desc.layers));
    } catch (const GraphError& e) {
        throw LoadError(LoadFailure::Malformed, e.what());
    }
}

inline Graph load_model(const std::filesystem::path& desc_path, const std::filesystem::path& weights_path) {
    return bind_weights(parse_model_description(read_file(desc_path)), decode_weights(read_file(weights_path)));
}

inline void save_model(const Graph& g, const std::filesystem::path& desc_path, const std::filesystem::path& weights_path) {
    write_file(desc_path, model_description_text(g));
    write_file(weights_path, encode_weights(graph_tensors(g)));
}

// ---------------------------------------------------------------------------
// Dataset: "MRFD", u32 count, then per sample u16 label and f32 pixels. The
// sample shape comes from the graph input.

inline std::string encode_dataset(const Dataset& data) {
    using namespace io_detail;
    std::string out = "MRFD";
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    for (const auto& s : data.samples) {
        put_u16(out, s.label);
        put_f32s(out, s.input.f32());
    }
    return out;
}

inline Dataset decode_dataset(const std::string& bytes, const Shape& sample_shape) {
    io_detail::Reader r(bytes, "dataset file");
    if (bytes.size() < 4 || bytes.compare(0, 4, "MRFD") != 0)
        throw LoadError(LoadFailure::BadMagic, "dataset file does not start with MRFD");
    r.str(4);
    const auto count = r.u32();
    const std::size_t per_sample = 2 + 4 * shape_numel(sample_shape);
    if (static_cast<std::uint64_t>(count) * per_sample != bytes.size() - 8)
        throw LoadError(bytes.size() - 8 < static_cast<std::uint64_t>(count) * per_sample ? LoadFailure::Truncated
                                                                                         : LoadFailure::ShapeMismatch,
                        "dataset size does not match " + std::to_string(count) + " samples of shape " +
                            shape_string(sample_shape));
    Dataset data;
    data.samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Sample s{Tensor(sample_shape), 0};
        s.label = r.u16();
        r.f32s(s.input.f32());
        data.samples.push_back(std::move(s));
    }
    return data;
}

inline Dataset load_dataset(const std::filesystem::path& path, const Shape& sample_shape) {
    return decode_dataset(read_file(path), sample_shape);
}

// ---------------------------------------------------------------------------
// Fixtures

inline std::size_t argmax(const Tensor& logits) {
    const auto v = logits.f32();
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

namespace io_detail {

inline LayerNode conv(std::string path, std::size_t in, std::size_t out, std::size_t k, std::size_t pad = 0) {
    LayerNode n{std::move(path), LayerKind::Conv2d, {}, std::nullopt, std::nullopt};
    n.params.in_channels = in;
    n.params.out_channels = out;
    n.params.kernel = k;
    n.params.padding = pad;
    return n;
}
inline LayerNode fc(std::string path, std::size_t in, std::size_t out) {
    LayerNode n{std::move(path), LayerKind::Linear, {}, std::nullopt, std::nullopt};
    n.params.in_features = in;
    n.params.out_features = out;
    return n;
}
inline LayerNode pool(std::string path, LayerKind kind, std::size_t k) {
    LayerNode n{std::move(path), kind, {}, std::nullopt, std::nullopt};
    n.params.kernel = k;
    n.params.stride = k;
    n.params.bias = false;
    return n;
}
inline LayerNode plain(std::string path, LayerKind kind) {
    LayerNode n{std::move(path), kind, {}, std::nullopt, std::nullopt};
    n.params.bias = false;
    return n;
}
inline LayerNode add(std::string path, std::string source) {
    LayerNode n = plain(std::move(path), LayerKind::Add);
    n.params.source = std::move(source);
    return n;
}

// Weights uniform in (-0.1, 0.1), biases zero.
inline Graph with_random_weights(Shape input, std::vector<LayerNode> layers, std::uint64_t seed) {
    for (auto& l : layers) {
        if (!l.weighted()) continue;
        Rng rng(seed, 0, l.path + ".weight");
        Tensor w(l.weight_shape());
        for (auto& v : w.f32()) v = static_cast<float>(-0.1 + 0.2 * rng.uniform());
        l.weight = std::move(w);
        if (l.params.bias) l.bias = Tensor(l.bias_shape());
    }
    return Graph(std::move(input), std::move(layers));
}

} // namespace io_detail

/// LeNet-style classifier for 1x28x28 inputs: two conv/pool stages and two
/// fully-connected layers, ten outputs.
inline Graph fixture_model(std::uint64_t seed) {
    using namespace io_detail;
    std::vector<LayerNode> layers{
        conv("model.conv1", 1, 6, 5),
        plain("model.relu1", LayerKind::ReLU),
        pool("model.pool1", LayerKind::MaxPool2d, 2),
        conv("model.conv2", 6, 16, 5),
        plain("model.relu2", LayerKind::ReLU),
        pool("model.pool2", LayerKind::MaxPool2d, 2),
        plain("model.flatten", LayerKind::Flatten),
        fc("model.fc1", 256, 120),
        plain("model.relu3", LayerKind::ReLU),
        fc("model.fc2", 120, 10),
    };
    return with_random_weights({1, 1, 28, 28}, std::move(layers), seed);
}

/// Small two-block residual network on 1x8x8 inputs.
inline Graph residual_fixture_model(std::uint64_t seed) {
    using namespace io_detail;
    std::vector<LayerNode> layers{conv("model.conv1", 1, 4, 3, 1)};
    std::string prev = "model.conv1";
    for (const std::string block : {"model.block1", "model.block2"}) {
        layers.push_back(conv(block + ".conv1", 4, 4, 3, 1));
        layers.push_back(plain(block + ".relu1", LayerKind::ReLU));
        layers.push_back(conv(block + ".conv2", 4, 4, 3, 1));
        layers.push_back(add(block + ".add", prev));
        prev = block + ".add";
    }
    layers.push_back(pool("model.pool", LayerKind::AvgPool2d, 2));
    layers.push_back(plain("model.flatten", LayerKind::Flatten));
    layers.push_back(fc("model.fc", 64, 10));
    return with_random_weights({1, 1, 8, 8}, std::move(layers), seed);
}

/// Smooth random images: one to three Gaussian blobs plus light noise,
/// clamped to [0, 1]. Labels come from the model's own prediction.
inline Dataset fixture_dataset(const Graph& model, std::uint64_t seed, std::size_t count = 256) {
    const Shape shape = model.input_shape();
    const std::size_t h = shape[2], w = shape[3];
    Dataset data;
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(seed, i, "fixture.image");
        Tensor img(shape);
        auto px = img.f32();
        const auto blobs = 1 + rng.uniform_index(3);
        std::vector<std::array<double, 4>> params;
        for (std::uint64_t b = 0; b < blobs; ++b) {
            const double cy = 0.15 * h + 0.7 * h * rng.uniform();
            const double cx = 0.15 * w + 0.7 * w * rng.uniform();
            const double sigma = (0.05 + 0.15 * rng.uniform()) * static_cast<double>(h);
            const double amp = 0.3 + 0.7 * rng.uniform();
            params.push_back({cy, cx, sigma, amp});
        }
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double v = 0.05 * rng.normal();
                for (const auto& [cy, cx, sigma, amp] : params) {
                    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                    v += amp * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                }
                px[y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        const auto label = static_cast<std::uint16_t>(argmax(forward(model, img)));
        data.samples.push_back({std::move(img), label});
    }
    return data;
}

struct FixtureFiles {
    std::string description;
    std::string weights;
    std::string dataset;
};

inline constexpr const char* kFixtureModelFile = "model.txt";
inline constexpr const char* kFixtureWeightsFile = "weights.mrfw";
inline constexpr const char* kFixtureDataFile = "data.mrfd";

inline FixtureFiles generate_fixture(std::uint64_t seed) {
    const Graph model = fixture_model(seed);
    return {model_description_text(model), encode_weights(graph_tensors(model)), encode_dataset(fixture_dataset(model, seed))};
}

inline void write_fixture(const std::filesystem::path& dir, std::uint64_t seed) {
    const auto files = generate_fixture(seed);
    write_file(dir / kFixtureModelFile, files.description);
    write_file(dir / kFixtureWeightsFile, files.weights);
    write_file(dir / kFixtureDataFile, files.dataset);
}

} // namespace nnfi
