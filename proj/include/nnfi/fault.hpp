#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include "nnfi/error.hpp"
#include "nnfi/graph.hpp"
#include "nnfi/quant.hpp"
#include "nnfi/rng.hpp"
#include "nnfi/tensor.hpp"

namespace nnfi {

enum class Target { Weight, Activation };

inline const char* target_name(Target t) { return t == Target::Weight ? "weight" : "activation"; }

// ---------------------------------------------------------------------------
// Selector configuration

enum class Sampling { Rounded, Poisson, PerBitBernoulli };

struct PositionEntry {
    std::string path;
    std::size_t offset = 0;
    unsigned bit = 0;
    friend bool operator==(const PositionEntry&, const PositionEntry&) = default;
};

struct FixedPosition {
    std::vector<PositionEntry> sites;
    friend bool operator==(const FixedPosition&, const FixedPosition&) = default;
};

struct FixedCount {
    std::uint64_t k = 1;
    friend bool operator==(const FixedCount&, const FixedCount&) = default;
};

struct RateSelect {
    double ber = 0.0;
    Sampling sampling = Sampling::Poisson;
    friend bool operator==(const RateSelect&, const RateSelect&) = default;
};

using SelectorMode = std::variant<FixedPosition, FixedCount, RateSelect>;

/// Restricts candidate elements before sampling. Channel is axis 1; pixel is
/// (axis 2, axis 3) of a rank-4 tensor. An element mask, when non-empty, must
/// cover the whole tensor.
struct SiteMask {
    std::optional<std::size_t> channel;
    std::optional<std::pair<std::size_t, std::size_t>> pixel;
    std::vector<bool> elements;

    bool admits(std::size_t offset, const Shape& shape) const {
        if (!elements.empty() && !elements[offset]) return false;
        if (channel) {
            if (shape.size() < 2) throw ConfigError("channel mask needs a tensor with a channel axis");
            std::size_t inner = 1;
            for (std::size_t d = 2; d < shape.size(); ++d) inner *= shape[d];
            if ((offset / inner) % shape[1] != *channel) return false;
        }
        if (pixel) {
            if (shape.size() != 4) throw ConfigError("pixel mask needs a 4-d tensor");
            const std::size_t w = shape[3], h = shape[2];
            if (offset % w != pixel->second || (offset / w) % h != pixel->first) return false;
        }
        return true;
    }

    friend bool operator==(const SiteMask&, const SiteMask&) = default;
};

struct SelectorSpec {
    SelectorMode mode = RateSelect{};
    std::optional<SiteMask> mask;

    void validate() const {
        if (auto r = std::get_if<RateSelect>(&mode)) {
            if (!(r->ber >= 0.0 && r->ber <= 1.0))
                throw ConfigError("bit error rate must lie in [0, 1], got " + std::to_string(r->ber));
        }
    }

    friend bool operator==(const SelectorSpec&, const SelectorSpec&) = default;
};

// ---------------------------------------------------------------------------
// Error models

struct BitFlipRandom { friend bool operator==(const BitFlipRandom&, const BitFlipRandom&) = default; };
struct BitFlipFixed {
    unsigned bit = 0;
    friend bool operator==(const BitFlipFixed&, const BitFlipFixed&) = default;
};
struct StuckAtZero { friend bool operator==(const StuckAtZero&, const StuckAtZero&) = default; };
struct FixedValue {
    double value = 0.0;
    friend bool operator==(const FixedValue&, const FixedValue&) = default;
};
struct UniformRandom {
    double lo = 0.0;
    double hi = 1.0;
    friend bool operator==(const UniformRandom&, const UniformRandom&) = default;
};
struct GaussianPerturb {
    double sigma = 1.0;
    friend bool operator==(const GaussianPerturb&, const GaussianPerturb&) = default;
};

using ErrorModelSpec = std::variant<BitFlipRandom, BitFlipFixed, StuckAtZero, FixedValue, UniformRandom, GaussianPerturb>;

inline bool is_bit_model(const ErrorModelSpec& m) {
    return std::holds_alternative<BitFlipRandom>(m) || std::holds_alternative<BitFlipFixed>(m);
}

/// Bits per element in the selector's site space. Only a random bit flip
/// needs the bit position drawn by the selector; every other model picks
/// whole elements.
inline unsigned slot_bits(const ErrorModelSpec& m, unsigned word_width) {
    return std::holds_alternative<BitFlipRandom>(m) ? word_width : 1u;
}

inline void validate_error_model(const ErrorModelSpec& m, unsigned width, bool integer_target) {
    if (auto f = std::get_if<BitFlipFixed>(&m)) {
        if (f->bit >= width)
            throw ConfigError("bit " + std::to_string(f->bit) + " exceeds the " + std::to_string(width) + "-bit word");
    } else if (auto g = std::get_if<GaussianPerturb>(&m)) {
        if (!(g->sigma > 0.0)) throw ConfigError("gaussian sigma must be positive");
        if (integer_target) throw ConfigError("gaussian perturbation applies to floating-point targets only");
    } else if (auto u = std::get_if<UniformRandom>(&m)) {
        if (!(u->lo < u->hi)) throw ConfigError("uniform error model needs lo < hi");
    }
}

// ---------------------------------------------------------------------------

struct FaultSite {
    std::string layer_path;
    Target target = Target::Activation;
    std::size_t element_offset = 0;
    std::optional<unsigned> bit_index;
    friend bool operator==(const FaultSite&, const FaultSite&) = default;
};

/// What a selector samples over: one tensor at one layer, with `word_bits`
/// slots per element.
struct SiteScope {
    std::string path;
    Target target = Target::Activation;
    Shape shape;
    unsigned word_bits = 1;
};

/// n_bits * ber rounded half away from zero.
inline std::uint64_t expected_count(std::uint64_t n_bits, double ber) {
    return static_cast<std::uint64_t>(std::round(static_cast<double>(n_bits) * ber));
}

/// Poisson draw with mean lambda. Multiplication method for small means,
/// transformed rejection (PTRS) above 30.
inline std::uint64_t poisson_sample(double lambda, Rng& rng) {
    if (!(lambda > 0.0)) return 0;
    if (lambda < 30.0) {
        const double limit = std::exp(-lambda);
        double prod = rng.uniform();
        std::uint64_t k = 0;
        while (prod > limit) {
            ++k;
            prod *= rng.uniform();
        }
        return k;
    }
    const double slam = std::sqrt(lambda);
    const double loglam = std::log(lambda);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    while (true) {
        const double u = rng.uniform() - 0.5;
        const double v = rng.uniform();
        const double us = 0.5 - std::fabs(u);
        const double k = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
        if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(k);
        if (k < 0.0 || (us < 0.013 && v > us)) continue;
        if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <= -lambda + k * loglam - std::lgamma(k + 1.0))
            return static_cast<std::uint64_t>(k);
    }
}

inline std::uint64_t poisson_count(std::uint64_t n_bits, double ber, Rng& rng) {
    return poisson_sample(static_cast<double>(n_bits) * ber, rng);
}

namespace detail {

/// k distinct values from [0, n), sorted (Floyd's algorithm).
inline std::vector<std::uint64_t> sample_distinct(std::uint64_t n, std::uint64_t k, Rng& rng) {
    std::unordered_set<std::uint64_t> chosen;
    chosen.reserve(static_cast<std::size_t>(k) * 2);
    for (std::uint64_t j = n - k; j < n; ++j) {
        const std::uint64_t t = rng.uniform_index(j + 1);
        if (!chosen.insert(t).second) chosen.insert(j);
    }
    std::vector<std::uint64_t> out(chosen.begin(), chosen.end());
    std::sort(out.begin(), out.end());
    return out;
}

/// Per-slot Bernoulli(p) acceptance threshold on a 64-bit draw.
inline std::uint64_t bernoulli_threshold(double p) {
    if (p >= 1.0) return ~std::uint64_t{0};
    return static_cast<std::uint64_t>(std::ldexp(p, 64));
}

} // namespace detail

/// Choose fault sites in one tensor. Rate modes sample bit slots
/// (element x word_bits); Poisson draws with replacement and deduplicates.
inline std::vector<FaultSite> select_sites(const SelectorSpec& selector, const SiteScope& scope, Rng& rng) {
    selector.validate();
    const std::size_t n_elem = shape_numel(scope.shape);
    const unsigned wb = std::max(1u, scope.word_bits);
    if (selector.mask && !selector.mask->elements.empty() && selector.mask->elements.size() != n_elem)
        throw ConfigError("element mask size does not match tensor at " + scope.path);

    std::vector<std::size_t> candidates;
    const bool masked = selector.mask.has_value();
    if (masked) {
        for (std::size_t i = 0; i < n_elem; ++i)
            if (selector.mask->admits(i, scope.shape)) candidates.push_back(i);
    }
    const std::uint64_t n_cand = masked ? candidates.size() : n_elem;
    const std::uint64_t space = n_cand * wb;

    auto site_of = [&](std::uint64_t slot) {
        FaultSite s;
        s.layer_path = scope.path;
        s.target = scope.target;
        const std::uint64_t e = slot / wb;
        s.element_offset = masked ? candidates[e] : static_cast<std::size_t>(e);
        if (wb > 1) s.bit_index = static_cast<unsigned>(slot % wb);
        return s;
    };

    std::vector<FaultSite> sites;
    if (auto fixed = std::get_if<FixedPosition>(&selector.mode)) {
        for (const auto& p : fixed->sites) {
            if (p.path != scope.path) continue;
            if (p.offset >= n_elem)
                throw ConfigError("fixed position " + p.path + ":" + std::to_string(p.offset) + " is outside the tensor");
            if (wb > 1 && p.bit >= wb)
                throw ConfigError("fixed position bit " + std::to_string(p.bit) + " exceeds the word width");
            if (masked && !selector.mask->admits(p.offset, scope.shape)) continue;
            FaultSite s{scope.path, scope.target, p.offset, std::nullopt};
            if (wb > 1) s.bit_index = p.bit;
            sites.push_back(std::move(s));
        }
        return sites;
    }

    std::vector<std::uint64_t> slots;
    if (auto count = std::get_if<FixedCount>(&selector.mode)) {
        if (count->k > space)
            throw ConfigError("fixed count " + std::to_string(count->k) + " exceeds the " + std::to_string(space) +
                              " available sites at " + scope.path);
        slots = detail::sample_distinct(space, count->k, rng);
    } else {
        const auto& rate = std::get<RateSelect>(selector.mode);
        if (rate.ber > 0.0 && space > 0) {
            switch (rate.sampling) {
            case Sampling::Rounded: slots = detail::sample_distinct(space, expected_count(space, rate.ber), rng); break;
            case Sampling::Poisson: {
                const std::uint64_t k = poisson_count(space, rate.ber, rng);
                slots.reserve(static_cast<std::size_t>(k));
                for (std::uint64_t i = 0; i < k; ++i) slots.push_back(rng.uniform_index(space));
                std::sort(slots.begin(), slots.end());
                slots.erase(std::unique(slots.begin(), slots.end()), slots.end());
                break;
            }
            case Sampling::PerBitBernoulli: {
                const std::uint64_t threshold = detail::bernoulli_threshold(rate.ber);
                const bool all = rate.ber >= 1.0;
                for (std::uint64_t s = 0; s < space; ++s)
                    if (rng.next_u64() < threshold || all) slots.push_back(s);
                break;
            }
            }
        }
    }
    sites.reserve(slots.size());
    for (auto slot : slots) sites.push_back(site_of(slot));
    return sites;
}

namespace detail {

inline std::uint32_t sign_extend(std::uint32_t word, unsigned width, unsigned storage) {
    if (width < storage && (word >> (width - 1)) & 1u) word |= ~word_mask(width);
    return word & word_mask(storage);
}

inline std::uint32_t encode_value(double v, DType dtype, unsigned width) {
    switch (dtype) {
    case DType::F32: return std::bit_cast<std::uint32_t>(static_cast<float>(v));
    case DType::F16: return f32_to_f16_bits(static_cast<float>(v));
    default: {
        const double lo = -std::ldexp(1.0, static_cast<int>(width) - 1);
        const double hi = std::ldexp(1.0, static_cast<int>(width) - 1) - 1.0;
        const double r = std::isnan(v) ? 0.0 : std::clamp(std::round(v), lo, hi);
        return static_cast<std::uint32_t>(static_cast<std::int64_t>(r)) & word_mask(word_bits(dtype));
    }
    }
}

} // namespace detail

/// Corrupt `tensor` at `sites`. `width` is the logical word width for
/// integer codes narrower than their storage (e.g. 14-bit codes in i16);
/// 0 means the storage width. Returns the number of elements whose bits
/// changed.
inline std::size_t apply_error(const ErrorModelSpec& model, Tensor& tensor, const std::vector<FaultSite>& sites, Rng& rng,
                               unsigned width = 0) {
    const DType dtype = tensor.dtype();
    const unsigned storage = word_bits(dtype);
    if (width == 0) width = storage;
    if (width > storage || (!is_integer(dtype) && width != storage))
        throw ArgumentError("logical width " + std::to_string(width) + " does not fit " + dtype_name(dtype));
    validate_error_model(model, width, is_integer(dtype));

    std::vector<std::pair<std::size_t, std::uint32_t>> original;
    original.reserve(sites.size());
    std::unordered_set<std::size_t> touched;

    for (const auto& site : sites) {
        const std::size_t i = site.element_offset;
        const std::uint32_t before = tensor.get_bits(i);
        if (touched.insert(i).second) original.emplace_back(i, before);

        std::uint32_t word = before;
        std::visit(
            [&](const auto& m) {
                using M = std::decay_t<decltype(m)>;
                if constexpr (std::is_same_v<M, BitFlipRandom>) {
                    unsigned bit = site.bit_index ? *site.bit_index : static_cast<unsigned>(rng.uniform_index(width));
                    if (bit >= width) throw ConfigError("site bit index exceeds word width");
                    word = detail::sign_extend((word ^ (1u << bit)) & word_mask(width), width, storage);
                } else if constexpr (std::is_same_v<M, BitFlipFixed>) {
                    word = detail::sign_extend((word ^ (1u << m.bit)) & word_mask(width), width, storage);
                } else if constexpr (std::is_same_v<M, StuckAtZero>) {
                    word = 0;
                } else if constexpr (std::is_same_v<M, FixedValue>) {
                    word = detail::encode_value(m.value, dtype, width);
                } else if constexpr (std::is_same_v<M, UniformRandom>) {
                    if (is_integer(dtype)) {
                        const double lo = std::ceil(m.lo);
                        const double hi = std::ceil(m.hi);
                        const auto span = static_cast<std::uint64_t>(std::max(1.0, hi - lo));
                        word = detail::encode_value(lo + static_cast<double>(rng.uniform_index(span)), dtype, width);
                    } else {
                        word = detail::encode_value(m.lo + rng.uniform() * (m.hi - m.lo), dtype, width);
                    }
                } else if constexpr (std::is_same_v<M, GaussianPerturb>) {
                    const double x = tensor.value(i);
                    word = detail::encode_value(static_cast<float>(x) + static_cast<float>(m.sigma * rng.normal()), dtype,
                                                width);
                }
            },
            model);
        tensor.set_bits(i, word);
    }

    std::size_t changed = 0;
    for (const auto& [i, before] : original)
        if (tensor.get_bits(i) != before) ++changed;
    return changed;
}

// ---------------------------------------------------------------------------

struct InjectorContext {
    std::string path;
    Target target = Target::Activation;
    /// Needed for layerwise quantization of activations; weight targets fall
    /// back to the range of the tensor being corrupted.
    std::optional<DynamicRange> range;
};

/// Build a hook that runs [quantize] -> select -> corrupt -> [dequantize].
/// Only the sampled elements are converted, and only elements whose code
/// actually changed are written back, so untouched elements stay
/// bit-identical. Without a quantizer the float bits are corrupted in place.
inline HookFn make_injector(const QuantSpec& quant, const SelectorSpec& selector, const ErrorModelSpec& model, Rng rng,
                            InjectorContext ctx) {
    quant.validate();
    selector.validate();
    if (quant.enabled()) validate_error_model(model, quant.code_bits(), quant.is_integer());
    if (std::holds_alternative<LayerwiseRange>(quant.method) && ctx.target == Target::Activation && !ctx.range)
        throw ConfigError("layerwise quantization of " + ctx.path + " activations needs a calibrated range");

    struct State {
        QuantSpec quant;
        SelectorSpec selector;
        ErrorModelSpec model;
        Rng rng;
        InjectorContext ctx;
    };
    auto state = std::make_shared<State>(State{quant, selector, model, rng, std::move(ctx)});

    return [state](const HookPoint&, Tensor t) -> Tensor {
        auto& s = *state;
        const unsigned width = s.quant.enabled() ? s.quant.code_bits() : word_bits(t.dtype());
        const SiteScope scope{s.ctx.path, s.ctx.target, t.shape(), slot_bits(s.model, width)};
        auto sites = select_sites(s.selector, scope, s.rng);
        if (sites.empty()) return t;

        if (!s.quant.enabled()) {
            apply_error(s.model, t, sites, s.rng);
            return t;
        }

        std::vector<std::size_t> elems;
        elems.reserve(sites.size());
        for (const auto& site : sites) elems.push_back(site.element_offset);
        std::sort(elems.begin(), elems.end());
        elems.erase(std::unique(elems.begin(), elems.end()), elems.end());

        std::vector<float> picked(elems.size());
        for (std::size_t j = 0; j < elems.size(); ++j) picked[j] = static_cast<float>(t.value(elems[j]));
        for (auto& site : sites)
            site.element_offset = static_cast<std::size_t>(
                std::lower_bound(elems.begin(), elems.end(), site.element_offset) - elems.begin());

        std::optional<DynamicRange> range = s.ctx.range;
        if (!range && std::holds_alternative<LayerwiseRange>(s.quant.method)) range = tensor_range(t);

        const Tensor compact(Shape{elems.size()}, std::move(picked));
        const Tensor codes = quantize(compact, s.quant, range);
        Tensor faulty = codes;
        apply_error(s.model, faulty, sites, s.rng, width);
        const Tensor restored = dequantize(faulty, s.quant, range);

        auto dst = t.f32();
        const auto src = restored.f32();
        for (std::size_t j = 0; j < elems.size(); ++j)
            if (faulty.get_bits(j) != codes.get_bits(j)) dst[elems[j]] = src[j];
        return t;
    };
}

} // namespace nnfi
