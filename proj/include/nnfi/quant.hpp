#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "nnfi/error.hpp"
#include "nnfi/graph.hpp"
#include "nnfi/tensor.hpp"
#include "nnfi/text.hpp"

namespace nnfi {

struct NoQuant {
    friend bool operator==(const NoQuant&, const NoQuant&) = default;
};

/// m.n two's-complement fixed point: int_bits includes the sign bit, so the
/// code is int_bits + frac_bits wide and covers [-2^(m-1), 2^(m-1)).
struct FixedPoint {
    int int_bits = 3;
    int frac_bits = 13;
    friend bool operator==(const FixedPoint&, const FixedPoint&) = default;
};

/// Symmetric per-layer scale derived from the observed dynamic range.
struct LayerwiseRange {
    int total_bits = 8;
    friend bool operator==(const LayerwiseRange&, const LayerwiseRange&) = default;
};

/// Round-trip through IEEE binary16 so faults land in a half-precision word.
struct Float16Cast {
    friend bool operator==(const Float16Cast&, const Float16Cast&) = default;
};

using QuantMethod = std::variant<NoQuant, FixedPoint, LayerwiseRange, Float16Cast>;

struct QuantSpec {
    QuantMethod method = NoQuant{};
    std::optional<double> scale_override;

    bool enabled() const noexcept { return !std::holds_alternative<NoQuant>(method); }

    /// Width of the word that faults are injected into.
    unsigned code_bits() const noexcept {
        if (auto fp = std::get_if<FixedPoint>(&method)) return static_cast<unsigned>(fp->int_bits + fp->frac_bits);
        if (auto lr = std::get_if<LayerwiseRange>(&method)) return static_cast<unsigned>(lr->total_bits);
        if (std::holds_alternative<Float16Cast>(method)) return 16;
        return 32;
    }

    bool is_integer() const noexcept {
        return std::holds_alternative<FixedPoint>(method) || std::holds_alternative<LayerwiseRange>(method);
    }

    void validate() const {
        if (auto fp = std::get_if<FixedPoint>(&method)) {
            if (fp->int_bits < 1 || fp->frac_bits < 0 || fp->int_bits + fp->frac_bits > 32)
                throw ConfigError("fixed-point format " + std::to_string(fp->int_bits) + "." +
                                  std::to_string(fp->frac_bits) + " is out of range");
        } else if (auto lr = std::get_if<LayerwiseRange>(&method)) {
            if (lr->total_bits < 2 || lr->total_bits > 32)
                throw ConfigError("layerwise quantization needs 2..32 bits, got " + std::to_string(lr->total_bits));
        }
        if (scale_override && !(*scale_override > 0.0) )
            throw ConfigError("quantization scale must be positive");
    }

    friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

struct DynamicRange {
    float min_val = 0.0f;
    float max_val = 0.0f;
    friend bool operator==(const DynamicRange&, const DynamicRange&) = default;
};

/// Keys are layer paths for post-layer activations, "<path>#input" for the
/// layer input and "<path>#weight" for stored weights.
using RangeMap = std::map<std::string, DynamicRange>;

inline std::string input_range_key(const std::string& path) { return path + "#input"; }
inline std::string weight_range_key(const std::string& path) { return path + "#weight"; }

inline DType code_dtype(unsigned bits) {
    if (bits <= 8) return DType::I8;
    if (bits <= 16) return DType::I16;
    return DType::I32;
}

/// Quantization step and code bounds for an integer method.
struct QuantGrid {
    double step = 1.0;
    std::int64_t lo = 0;
    std::int64_t hi = 0;
};

inline QuantGrid quant_grid(const QuantSpec& spec, const std::optional<DynamicRange>& range) {
    spec.validate();
    QuantGrid g;
    const unsigned bits = spec.code_bits();
    g.lo = -(std::int64_t{1} << (bits - 1));
    g.hi = (std::int64_t{1} << (bits - 1)) - 1;
    if (auto fp = std::get_if<FixedPoint>(&spec.method)) {
        g.step = std::ldexp(1.0, -fp->frac_bits);
    } else if (std::holds_alternative<LayerwiseRange>(spec.method)) {
        if (!range) throw ConfigError("layerwise quantization requires a calibrated range");
        const double max_abs = std::max(std::fabs(static_cast<double>(range->min_val)),
                                        std::fabs(static_cast<double>(range->max_val)));
        // An all-zero range has no natural scale; unit step keeps zeros exact.
        g.step = max_abs > 0.0 ? max_abs / static_cast<double>(g.hi) : 1.0;
    } else {
        throw ConfigError("quantization method has no integer grid");
    }
    if (spec.scale_override) g.step *= *spec.scale_override;
    return g;
}

/// Round half away from zero, then saturate. NaN maps to code 0.
inline std::int64_t quantize_value(double x, const QuantGrid& g) {
    if (std::isnan(x)) return 0;
    const double r = std::round(x / g.step);
    if (r <= static_cast<double>(g.lo)) return g.lo;
    if (r >= static_cast<double>(g.hi)) return g.hi;
    return static_cast<std::int64_t>(r);
}

inline float dequantize_value(std::int64_t q, const QuantGrid& g) {
    return static_cast<float>(static_cast<double>(q) * g.step);
}

inline Tensor quantize(const Tensor& x, const QuantSpec& spec, const std::optional<DynamicRange>& range = std::nullopt) {
    if (x.dtype() != DType::F32) throw ArgumentError("quantize expects an f32 tensor");
    if (!spec.enabled()) throw ConfigError("quantize called with method 'none'");
    spec.validate();
    if (std::holds_alternative<Float16Cast>(spec.method)) return to_f16(x);

    const QuantGrid g = quant_grid(spec, range);
    Tensor q(x.shape(), code_dtype(spec.code_bits()));
    const auto src = x.f32();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const auto code = quantize_value(src[i], g);
        q.set_bits(i, static_cast<std::uint32_t>(code) & word_mask(word_bits(q.dtype())));
    }
    return q;
}

inline Tensor dequantize(const Tensor& q, const QuantSpec& spec, const std::optional<DynamicRange>& range = std::nullopt) {
    if (!spec.enabled()) throw ConfigError("dequantize called with method 'none'");
    if (std::holds_alternative<Float16Cast>(spec.method)) {
        if (q.dtype() != DType::F16) throw ArgumentError("float16 dequantize expects an f16 tensor");
        return to_f32(q);
    }
    if (!is_integer(q.dtype())) throw ArgumentError("dequantize expects an integer tensor");
    const QuantGrid g = quant_grid(spec, range);
    Tensor x(q.shape(), DType::F32);
    auto dst = x.f32();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = dequantize_value(static_cast<std::int64_t>(q.value(i)), g);
    return x;
}

inline DynamicRange tensor_range(const Tensor& t) {
    DynamicRange r{std::numeric_limits<float>::infinity(), -std::numeric_limits<float>::infinity()};
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto v = static_cast<float>(t.value(i));
        if (std::isnan(v)) continue;
        r.min_val = std::min(r.min_val, v);
        r.max_val = std::max(r.max_val, v);
    }
    if (r.min_val > r.max_val) r = {0.0f, 0.0f};
    return r;
}

inline void widen(DynamicRange& r, const DynamicRange& other) {
    r.min_val = std::min(r.min_val, other.min_val);
    r.max_val = std::max(r.max_val, other.max_val);
}

/// Per-layer golden-run ranges over a batch of inputs, plus weight ranges
/// read directly from the stored weights.
inline RangeMap calibrate(const Graph& graph, const std::vector<Tensor>& inputs) {
    if (inputs.empty()) throw ArgumentError("calibration needs at least one input");
    RangeMap ranges;
    std::vector<Hook> hooks;
    for (const auto& node : graph.layers()) {
        auto record = [&ranges](const std::string& key) {
            return [&ranges, key](const HookPoint&, Tensor t) {
                const DynamicRange r = tensor_range(t);
                auto [it, fresh] = ranges.try_emplace(key, r);
                if (!fresh) widen(it->second, r);
                return t;
            };
        };
        hooks.push_back({{node.path, HookSite::ActivationPre}, record(input_range_key(node.path))});
        hooks.push_back({{node.path, HookSite::ActivationPost}, record(node.path)});
    }
    for (const auto& input : inputs) forward(graph, input, hooks);
    for (const auto& node : graph.layers())
        if (node.weighted()) ranges[weight_range_key(node.path)] = tensor_range(*node.weight);
    return ranges;
}

inline std::string ranges_to_csv(const RangeMap& ranges) {
    std::string out = "path,min,max\n";
    for (const auto& [path, r] : ranges)
        out += path + "," + format_float(r.min_val) + "," + format_float(r.max_val) + "\n";
    return out;
}

inline RangeMap ranges_from_csv(const std::string& text) {
    RangeMap ranges;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || (lineno == 1 && line == "path,min,max")) continue;
        auto fields = split(line, ',');
        if (fields.size() != 3) throw ParseError(lineno, "expected path,min,max");
        DynamicRange r{static_cast<float>(parse_double(fields[1], lineno)),
                       static_cast<float>(parse_double(fields[2], lineno))};
        if (!(r.min_val <= r.max_val)) throw ParseError(lineno, "range min exceeds max");
        ranges[fields[0]] = r;
    }
    return ranges;
}

} // namespace nnfi
