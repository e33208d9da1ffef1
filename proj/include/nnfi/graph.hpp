#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nnfi/error.hpp"
#include "nnfi/tensor.hpp"

namespace nnfi {

enum class LayerKind { Conv2d, Linear, ReLU, MaxPool2d, AvgPool2d, Flatten, Add, Softmax };

inline constexpr std::array<std::pair<LayerKind, std::string_view>, 8> kLayerKindNames{{
    {LayerKind::Conv2d, "conv2d"},
    {LayerKind::Linear, "linear"},
    {LayerKind::ReLU, "relu"},
    {LayerKind::MaxPool2d, "maxpool2d"},
    {LayerKind::AvgPool2d, "avgpool2d"},
    {LayerKind::Flatten, "flatten"},
    {LayerKind::Add, "add"},
    {LayerKind::Softmax, "softmax"},
}};

inline std::string_view layer_kind_name(LayerKind kind) {
    for (const auto& [k, name] : kLayerKindNames)
        if (k == kind) return name;
    return "?";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view name) {
    for (const auto& [k, n] : kLayerKindNames)
        if (n == name) return k;
    return std::nullopt;
}

struct LayerParams {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    bool bias = true;
    std::string source; // Add: path of the earlier output to sum with

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct LayerNode {
    std::string path;
    LayerKind kind = LayerKind::ReLU;
    LayerParams params;
    std::optional<Tensor> weight;
    std::optional<Tensor> bias;

    bool weighted() const noexcept { return kind == LayerKind::Conv2d || kind == LayerKind::Linear; }

    Shape weight_shape() const {
        if (kind == LayerKind::Conv2d)
            return {params.out_channels, params.in_channels, params.kernel, params.kernel};
        if (kind == LayerKind::Linear) return {params.out_features, params.in_features};
        return {};
    }
    Shape bias_shape() const {
        return {kind == LayerKind::Conv2d ? params.out_channels : params.out_features};
    }
};

enum class HookSite { WeightPre, ActivationPre, ActivationPost };

inline std::string_view hook_site_name(HookSite site) {
    switch (site) {
    case HookSite::WeightPre: return "weight";
    case HookSite::ActivationPre: return "pre";
    case HookSite::ActivationPost: return "post";
    }
    return "?";
}

struct HookPoint {
    std::string path;
    HookSite site = HookSite::ActivationPost;
    friend bool operator==(const HookPoint&, const HookPoint&) = default;
};

/// Hooks receive the tensor at their site and return its replacement, which
/// must keep shape and dtype.
using HookFn = std::function<Tensor(const HookPoint&, Tensor)>;

struct Hook {
    HookPoint point;
    HookFn fn;
};

// ---------------------------------------------------------------------------
// Layer kernels. All take and return F32 tensors.

namespace ops {

inline void require_f32(const Tensor& t, const char* what) {
    if (t.dtype() != DType::F32) throw GraphError(std::string(what) + " must be f32");
}

inline std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
    const std::size_t padded = in + 2 * padding;
    if (stride == 0) throw GraphError("stride must be positive");
    if (padded < kernel) throw GraphError("kernel larger than padded input");
    if ((padded - kernel) % stride != 0)
        throw GraphError("non-integral output extent: (" + std::to_string(in) + "+2*" + std::to_string(padding) +
                         "-" + std::to_string(kernel) + ")/" + std::to_string(stride));
    return (padded - kernel) / stride + 1;
}

inline std::size_t pool_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
    if (stride == 0 || kernel == 0) throw GraphError("pool kernel and stride must be positive");
    if (in < kernel) throw GraphError("pool kernel larger than input");
    return (in - kernel) / stride + 1;
}

/// Cross-correlation over NCHW input with KCHW weight, F32 accumulation
/// starting from the bias.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, std::size_t stride,
                     std::size_t padding) {
    require_f32(input, "conv2d input");
    require_f32(weight, "conv2d weight");
    const auto& is = input.shape();
    const auto& ws = weight.shape();
    if (is.size() != 4 || ws.size() != 4) throw GraphError("conv2d expects 4-d input and weight");
    const std::size_t n = is[0], c = is[1], h = is[2], w = is[3];
    const std::size_t k = ws[0], kh = ws[2], kw = ws[3];
    if (ws[1] != c)
        throw GraphError("conv2d channel mismatch: input " + std::to_string(c) + ", weight " + std::to_string(ws[1]));
    if (bias && (bias->size() != k)) throw GraphError("conv2d bias size mismatch");
    const std::size_t oh = conv_extent(h, kh, stride, padding);
    const std::size_t ow = conv_extent(w, kw, stride, padding);

    Tensor out(Shape{n, k, oh, ow});
    auto dst = out.f32();
    const auto src = input.f32();
    const auto wt = weight.f32();
    const float* b = bias ? bias->f32().data() : nullptr;
    const auto ipad = static_cast<std::ptrdiff_t>(padding);

    for (std::size_t ni = 0; ni < n; ++ni) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            const float init = b ? b[ki] : 0.0f;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * stride) - ipad;
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * stride) - ipad;
                    float acc = init;
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        const float* plane = src.data() + (ni * c + ci) * h * w;
                        const float* kern = wt.data() + (ki * c + ci) * kh * kw;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const std::ptrdiff_t y = y0 + static_cast<std::ptrdiff_t>(ky);
                            if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
                            const float* row = plane + static_cast<std::size_t>(y) * w;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const std::ptrdiff_t x = x0 + static_cast<std::ptrdiff_t>(kx);
                                if (x < 0 || x >= static_cast<std::ptrdiff_t>(w)) continue;
                                acc += kern[ky * kw + kx] * row[x];
                            }
                        }
                    }
                    dst[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    return out;
}

/// y = W x + b for input [N, in] and weight [out, in].
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias) {
    require_f32(input, "linear input");
    require_f32(weight, "linear weight");
    const auto& is = input.shape();
    const auto& ws = weight.shape();
    if (is.size() != 2 || ws.size() != 2) throw GraphError("linear expects 2-d input and weight");
    if (is[1] != ws[1])
        throw GraphError("linear feature mismatch: input " + std::to_string(is[1]) + ", weight " +
                         std::to_string(ws[1]));
    if (bias && bias->size() != ws[0]) throw GraphError("linear bias size mismatch");
    const std::size_t n = is[0], in = is[1], outf = ws[0];
    Tensor out(Shape{n, outf});
    auto dst = out.f32();
    const auto src = input.f32();
    const auto wt = weight.f32();
    for (std::size_t ni = 0; ni < n; ++ni) {
        const float* x = src.data() + ni * in;
        for (std::size_t o = 0; o < outf; ++o) {
            float acc = bias ? bias->f32()[o] : 0.0f;
            const float* row = wt.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
            dst[ni * outf + o] = acc;
        }
    }
    return out;
}

inline Tensor relu(Tensor t) {
    require_f32(t, "relu input");
    // NaN passes through unchanged.
    for (auto& v : t.f32())
        if (v < 0.0f) v = 0.0f;
    return t;
}

template <bool Max>
Tensor pool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
    require_f32(input, "pool input");
    const auto& is = input.shape();
    if (is.size() != 4) throw GraphError("pool expects 4-d input");
    const std::size_t n = is[0], c = is[1], h = is[2], w = is[3];
    const std::size_t oh = pool_extent(h, kernel, stride);
    const std::size_t ow = pool_extent(w, kernel, stride);
    Tensor out(Shape{n, c, oh, ow});
    auto dst = out.f32();
    const auto src = input.f32();
    const float inv = 1.0f / static_cast<float>(kernel * kernel);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const float* p = src.data() + plane * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                float acc = Max ? -std::numeric_limits<float>::infinity() : 0.0f;
                bool nan = false;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const float v = p[(oy * stride + ky) * w + ox * stride + kx];
                        if constexpr (Max) {
                            if (std::isnan(v)) nan = true;
                            else if (v > acc) acc = v;
                        } else {
                            acc += v;
                        }
                    }
                }
                if constexpr (Max) {
                    if (nan) acc = std::numeric_limits<float>::quiet_NaN();
                } else {
                    acc *= inv;
                }
                dst[(plane * oh + oy) * ow + ox] = acc;
            }
        }
    }
    return out;
}

inline Tensor flatten(const Tensor& input) {
    require_f32(input, "flatten input");
    const std::size_t n = input.shape()[0];
    Tensor out(Shape{n, input.size() / n});
    std::copy(input.f32().begin(), input.f32().end(), out.f32().begin());
    return out;
}

inline Tensor add(Tensor a, const Tensor& b) {
    require_f32(a, "add input");
    require_f32(b, "add source");
    if (a.shape() != b.shape())
        throw GraphError("add shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    auto dst = a.f32();
    const auto src = b.f32();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    return a;
}

inline Tensor softmax(Tensor t) {
    require_f32(t, "softmax input");
    const std::size_t inner = t.shape().back();
    auto v = t.f32();
    for (std::size_t base = 0; base < v.size(); base += inner) {
        float mx = v[base];
        for (std::size_t i = 1; i < inner; ++i) mx = std::max(mx, v[base + i]);
        float sum = 0.0f;
        for (std::size_t i = 0; i < inner; ++i) {
            v[base + i] = std::exp(v[base + i] - mx);
            sum += v[base + i];
        }
        for (std::size_t i = 0; i < inner; ++i) v[base + i] /= sum;
    }
    return t;
}

} // namespace ops

// ---------------------------------------------------------------------------

/// Output shape of one layer for a given input shape; throws GraphError when
/// the layer cannot consume that shape.
inline Shape infer_output_shape(const LayerNode& layer, const Shape& in) {
    const auto& p = layer.params;
    switch (layer.kind) {
    case LayerKind::Conv2d:
        if (in.size() != 4 || in[1] != p.in_channels)
            throw GraphError(layer.path + ": conv2d expects [N," + std::to_string(p.in_channels) + ",H,W], got " +
                             shape_string(in));
        return {in[0], p.out_channels, ops::conv_extent(in[2], p.kernel, p.stride, p.padding),
                ops::conv_extent(in[3], p.kernel, p.stride, p.padding)};
    case LayerKind::Linear:
        if (in.size() != 2 || in[1] != p.in_features)
            throw GraphError(layer.path + ": linear expects [N," + std::to_string(p.in_features) + "], got " +
                             shape_string(in));
        return {in[0], p.out_features};
    case LayerKind::MaxPool2d:
    case LayerKind::AvgPool2d:
        if (in.size() != 4) throw GraphError(layer.path + ": pool expects 4-d input, got " + shape_string(in));
        return {in[0], in[1], ops::pool_extent(in[2], p.kernel, p.stride), ops::pool_extent(in[3], p.kernel, p.stride)};
    case LayerKind::Flatten: return {in[0], shape_numel(in) / in[0]};
    case LayerKind::ReLU:
    case LayerKind::Add:
    case LayerKind::Softmax: return in;
    }
    return in;
}

class Graph {
public:
    Graph() = default;

    Graph(Shape input_shape, std::vector<LayerNode> layers)
        : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
        validate();
    }

    const Shape& input_shape() const noexcept { return input_shape_; }
    const std::vector<LayerNode>& layers() const noexcept { return layers_; }
    std::size_t size() const noexcept { return layers_.size(); }

    /// Activation shape after each layer, in layer order.
    const std::vector<Shape>& output_shapes() const noexcept { return output_shapes_; }

    std::optional<std::size_t> index_of(std::string_view path) const {
        auto it = index_.find(std::string(path));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    const LayerNode& layer(std::string_view path) const { return layers_.at(require_index(path)); }

    const Shape& output_shape(std::string_view path) const { return output_shapes_.at(require_index(path)); }

    Shape input_shape_of(std::size_t index) const {
        return index == 0 ? input_shape_ : output_shapes_.at(index - 1);
    }

    /// Replace a weight tensor in place. Used by permanent-fault runs, which
    /// need exclusive access to the graph.
    void set_weight(std::string_view path, Tensor weight) {
        auto& node = layers_.at(require_index(path));
        if (!node.weighted()) throw GraphError(node.path + " has no weight");
        if (weight.shape() != node.weight_shape() || weight.dtype() != DType::F32)
            throw GraphError(node.path + ": replacement weight has wrong shape or dtype");
        node.weight = std::move(weight);
    }

    void validate() {
        index_.clear();
        output_shapes_.clear();
        if (input_shape_.empty()) throw GraphError("graph input shape is empty");
        Shape shape = input_shape_;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& node = layers_[i];
            if (node.path.empty()) throw GraphError("layer " + std::to_string(i) + " has an empty path");
            if (!index_.emplace(node.path, i).second) throw GraphError("duplicate layer path " + node.path);
            if (node.weighted()) {
                if (!node.weight) throw GraphError(node.path + ": missing weight");
                if (node.weight->shape() != node.weight_shape())
                    throw GraphError(node.path + ": weight shape " + shape_string(node.weight->shape()) +
                                     " does not match parameters " + shape_string(node.weight_shape()));
                if (node.params.bias) {
                    if (!node.bias || node.bias->shape() != node.bias_shape())
                        throw GraphError(node.path + ": missing or misshaped bias");
                }
            }
            if (node.kind == LayerKind::Add) {
                auto src = index_.find(node.params.source);
                if (src == index_.end() || src->second >= i)
                    throw GraphError(node.path + ": add source '" + node.params.source + "' does not precede it");
                if (output_shapes_[src->second] != shape)
                    throw GraphError(node.path + ": add source shape mismatch");
            }
            shape = infer_output_shape(node, shape);
            output_shapes_.push_back(shape);
        }
    }

private:
    std::size_t require_index(std::string_view path) const {
        auto idx = index_of(path);
        if (!idx) throw GraphError("no layer named '" + std::string(path) + "'");
        return *idx;
    }

    Shape input_shape_;
    std::vector<LayerNode> layers_;
    std::vector<Shape> output_shapes_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline Tensor run_hooks(const std::vector<const Hook*>& hooks, const HookPoint& point, Tensor t) {
    for (const Hook* h : hooks) {
        const Shape shape = t.shape();
        const DType dtype = t.dtype();
        t = h->fn(point, std::move(t));
        if (t.shape() != shape || t.dtype() != dtype)
            throw HookError("hook at " + point.path + "/" + std::string(hook_site_name(point.site)) +
                            " changed tensor shape or dtype");
    }
    return t;
}

} // namespace detail

/// Run one inference pass. Hooks fire once per matching site, in layer
/// order: ActivationPre, then WeightPre (on a copy of the weight), then the
/// layer, then ActivationPost. The graph itself is never modified.
inline Tensor forward(const Graph& graph, Tensor input, const std::vector<Hook>& hooks = {}) {
    if (input.shape() != graph.input_shape())
        throw GraphError("input shape " + shape_string(input.shape()) + " does not match graph input " +
                         shape_string(graph.input_shape()));
    if (input.dtype() != DType::F32) throw GraphError("graph input must be f32");

    const auto& layers = graph.layers();
    std::vector<std::array<std::vector<const Hook*>, 3>> bound(layers.size());
    for (const auto& h : hooks) {
        auto idx = graph.index_of(h.point.path);
        if (!idx) throw HookError("hook targets unknown layer '" + h.point.path + "'");
        if (h.point.site == HookSite::WeightPre && !layers[*idx].weighted())
            throw HookError("weight hook on unweighted layer '" + h.point.path + "'");
        bound[*idx][static_cast<std::size_t>(h.point.site)].push_back(&h);
    }

    std::vector<bool> keep(layers.size(), false);
    for (const auto& node : layers)
        if (node.kind == LayerKind::Add) keep[*graph.index_of(node.params.source)] = true;
    std::unordered_map<std::size_t, Tensor> saved;

    Tensor x = std::move(input);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& node = layers[i];
        auto& site_hooks = bound[i];
        const auto& pre = site_hooks[static_cast<std::size_t>(HookSite::ActivationPre)];
        if (!pre.empty()) x = detail::run_hooks(pre, {node.path, HookSite::ActivationPre}, std::move(x));

        const Tensor* weight = node.weight ? &*node.weight : nullptr;
        Tensor weight_copy;
        const auto& wpre = site_hooks[static_cast<std::size_t>(HookSite::WeightPre)];
        if (!wpre.empty()) {
            weight_copy = detail::run_hooks(wpre, {node.path, HookSite::WeightPre}, *node.weight);
            weight = &weight_copy;
        }
        const Tensor* bias = (node.params.bias && node.bias) ? &*node.bias : nullptr;

        switch (node.kind) {
        case LayerKind::Conv2d: x = ops::conv2d(x, *weight, bias, node.params.stride, node.params.padding); break;
        case LayerKind::Linear: x = ops::linear(x, *weight, bias); break;
        case LayerKind::ReLU: x = ops::relu(std::move(x)); break;
        case LayerKind::MaxPool2d: x = ops::pool2d<true>(x, node.params.kernel, node.params.stride); break;
        case LayerKind::AvgPool2d: x = ops::pool2d<false>(x, node.params.kernel, node.params.stride); break;
        case LayerKind::Flatten: x = ops::flatten(x); break;
        case LayerKind::Add: x = ops::add(std::move(x), saved.at(*graph.index_of(node.params.source))); break;
        case LayerKind::Softmax: x = ops::softmax(std::move(x)); break;
        }

        const auto& post = site_hooks[static_cast<std::size_t>(HookSite::ActivationPost)];
        if (!post.empty()) x = detail::run_hooks(post, {node.path, HookSite::ActivationPost}, std::move(x));
        if (keep[i]) saved[i] = x;
    }
    return x;
}

// ---------------------------------------------------------------------------

/// Glob match where '*' matches any run of characters, dots included.
inline bool glob_match(std::string_view pattern, std::string_view text) {
    std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (p < pattern.size() && pattern[p] == text[t]) {
            ++p;
            ++t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

inline std::vector<std::string> list_paths(const Graph& graph, std::string_view pattern) {
    std::vector<std::string> out;
    for (const auto& node : graph.layers())
        if (glob_match(pattern, node.path)) out.push_back(node.path);
    return out;
}

} // namespace nnfi
