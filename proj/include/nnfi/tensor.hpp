#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "nnfi/error.hpp"

namespace nnfi {

using Shape = std::vector<std::size_t>;

// F16 elements hold raw IEEE-754 binary16 patterns. I32 carries quantized
// codes wider than 16 bits.
enum class DType : std::uint8_t { F32, F16, I16, I8, I32 };

constexpr unsigned word_bits(DType t) noexcept {
    switch (t) {
    case DType::F32: return 32;
    case DType::F16: return 16;
    case DType::I16: return 16;
    case DType::I8: return 8;
    case DType::I32: return 32;
    }
    return 0;
}

constexpr bool is_integer(DType t) noexcept {
    return t == DType::I16 || t == DType::I8 || t == DType::I32;
}

constexpr const char* dtype_name(DType t) noexcept {
    switch (t) {
    case DType::F32: return "f32";
    case DType::F16: return "f16";
    case DType::I16: return "i16";
    case DType::I8: return "i8";
    case DType::I32: return "i32";
    }
    return "?";
}

constexpr std::uint32_t word_mask(unsigned bits) noexcept {
    return bits >= 32 ? 0xFFFFFFFFu : ((1u << bits) - 1u);
}

// ---------------------------------------------------------------------------
// binary16 conversion

/// Narrow to binary16 with round-to-nearest-even. NaN payload bits that fit
/// are kept; a payload that would vanish becomes a quiet NaN.
inline std::uint16_t f32_to_f16_bits(float value) noexcept {
    constexpr std::uint32_t f32_infinity = 255u << 23;
    constexpr std::uint32_t f16_overflow = (127u + 16u) << 23;
    constexpr std::uint32_t denorm_magic = ((127u - 15u) + (23u - 10u) + 1u) << 23;

    std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint32_t sign = bits & 0x80000000u;
    bits ^= sign;

    std::uint16_t out;
    if (bits >= f16_overflow) {
        if (bits > f32_infinity) {
            std::uint16_t payload = static_cast<std::uint16_t>((bits >> 13) & 0x3FFu);
            out = static_cast<std::uint16_t>(0x7C00u | (payload ? payload : 0x200u));
        } else {
            out = 0x7C00u;
        }
    } else if (bits < (113u << 23)) {
        float tmp = std::bit_cast<float>(bits) + std::bit_cast<float>(denorm_magic);
        out = static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(tmp) - denorm_magic);
    } else {
        const std::uint32_t mant_odd = (bits >> 13) & 1u;
        bits += (static_cast<std::uint32_t>(15 - 127) << 23) + 0xFFFu;
        bits += mant_odd;
        out = static_cast<std::uint16_t>(bits >> 13);
    }
    return static_cast<std::uint16_t>(out | (sign >> 16));
}

inline float f16_bits_to_f32(std::uint16_t half) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(half & 0x8000u) << 16;
    const std::uint32_t exponent = (half >> 10) & 0x1Fu;
    const std::uint32_t mantissa = half & 0x3FFu;
    if (exponent == 0) {
        float magnitude = std::ldexp(static_cast<float>(mantissa), -24);
        return sign ? -magnitude : magnitude;
    }
    if (exponent == 31) {
        return std::bit_cast<float>(sign | 0x7F800000u | (mantissa << 13));
    }
    return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

// ---------------------------------------------------------------------------

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(shape[i]);
    }
    return out;
}

/// Dense row-major n-dimensional array. The element buffer type follows the
/// dtype tag; bit-level access goes through get_bits/set_bits.
class Tensor {
public:
    using Storage = std::variant<std::vector<float>, std::vector<std::uint16_t>, std::vector<std::int16_t>,
                                 std::vector<std::int8_t>, std::vector<std::int32_t>>;

    Tensor() : Tensor(Shape{1}) {}

    explicit Tensor(Shape shape, DType dtype = DType::F32) : shape_(std::move(shape)), dtype_(dtype) {
        check_shape(shape_);
        const std::size_t n = shape_numel(shape_);
        switch (dtype_) {
        case DType::F32: data_ = std::vector<float>(n, 0.0f); break;
        case DType::F16: data_ = std::vector<std::uint16_t>(n, 0); break;
        case DType::I16: data_ = std::vector<std::int16_t>(n, 0); break;
        case DType::I8: data_ = std::vector<std::int8_t>(n, 0); break;
        case DType::I32: data_ = std::vector<std::int32_t>(n, 0); break;
        }
    }

    Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), dtype_(DType::F32) {
        check_shape(shape_);
        if (values.size() != shape_numel(shape_))
            throw ArgumentError("tensor data size " + std::to_string(values.size()) + " does not match shape " +
                                shape_string(shape_));
        data_ = std::move(values);
    }

    const Shape& shape() const noexcept { return shape_; }
    DType dtype() const noexcept { return dtype_; }
    std::size_t size() const noexcept { return std::visit([](const auto& v) { return v.size(); }, data_); }
    std::size_t rank() const noexcept { return shape_.size(); }

    template <typename T>
    std::span<T> as() {
        return std::span<T>(std::get<std::vector<std::remove_const_t<T>>>(data_));
    }
    template <typename T>
    std::span<const T> as() const {
        return std::span<const T>(std::get<std::vector<std::remove_const_t<T>>>(data_));
    }

    std::span<float> f32() { return checked<float>(DType::F32); }
    std::span<const float> f32() const { return checked_const<float>(DType::F32); }

    /// Element value widened to double, whatever the storage type.
    double value(std::size_t offset) const {
        check_offset(offset);
        switch (dtype_) {
        case DType::F32: return as<float>()[offset];
        case DType::F16: return f16_bits_to_f32(as<std::uint16_t>()[offset]);
        case DType::I16: return as<std::int16_t>()[offset];
        case DType::I8: return as<std::int8_t>()[offset];
        case DType::I32: return as<std::int32_t>()[offset];
        }
        return 0.0;
    }

    /// Exact stored bit pattern, zero-extended to 32 bits.
    std::uint32_t get_bits(std::size_t offset) const {
        check_offset(offset);
        switch (dtype_) {
        case DType::F32: return std::bit_cast<std::uint32_t>(as<float>()[offset]);
        case DType::F16: return as<std::uint16_t>()[offset];
        case DType::I16: return static_cast<std::uint16_t>(as<std::int16_t>()[offset]);
        case DType::I8: return static_cast<std::uint8_t>(as<std::int8_t>()[offset]);
        case DType::I32: return static_cast<std::uint32_t>(as<std::int32_t>()[offset]);
        }
        return 0;
    }

    void set_bits(std::size_t offset, std::uint32_t word) {
        check_offset(offset);
        if ((word & ~word_mask(word_bits(dtype_))) != 0)
            throw ArgumentError("word does not fit in " + std::to_string(word_bits(dtype_)) + " bits");
        switch (dtype_) {
        case DType::F32: as<float>()[offset] = std::bit_cast<float>(word); break;
        case DType::F16: as<std::uint16_t>()[offset] = static_cast<std::uint16_t>(word); break;
        case DType::I16: as<std::int16_t>()[offset] = static_cast<std::int16_t>(static_cast<std::uint16_t>(word)); break;
        case DType::I8: as<std::int8_t>()[offset] = static_cast<std::int8_t>(static_cast<std::uint8_t>(word)); break;
        case DType::I32: as<std::int32_t>()[offset] = static_cast<std::int32_t>(word); break;
        }
    }

    std::size_t flat_index(std::span<const std::size_t> coords) const {
        if (coords.size() != shape_.size())
            throw IndexError("expected " + std::to_string(shape_.size()) + " coordinates, got " +
                             std::to_string(coords.size()));
        std::size_t offset = 0;
        for (std::size_t d = 0; d < coords.size(); ++d) {
            if (coords[d] >= shape_[d])
                throw IndexError("coordinate " + std::to_string(coords[d]) + " out of range for axis " +
                                 std::to_string(d) + " (extent " + std::to_string(shape_[d]) + ")");
            offset = offset * shape_[d] + coords[d];
        }
        return offset;
    }
    std::size_t flat_index(std::initializer_list<std::size_t> coords) const {
        return flat_index(std::span<const std::size_t>(coords.begin(), coords.size()));
    }

    bool bit_equal(const Tensor& other) const {
        if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (get_bits(i) != other.get_bits(i)) return false;
        return true;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.bit_equal(b); }

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw ArgumentError("tensor shape must have at least one axis");
        for (auto extent : shape)
            if (extent == 0) throw ArgumentError("tensor extents must be positive");
    }

    void check_offset(std::size_t offset) const {
        if (offset >= size())
            throw IndexError("element offset " + std::to_string(offset) + " out of range (" + std::to_string(size()) +
                             " elements)");
    }

    template <typename T>
    std::span<T> checked(DType want) {
        if (dtype_ != want) throw ArgumentError(std::string("tensor is ") + dtype_name(dtype_) + ", not " + dtype_name(want));
        return as<T>();
    }
    template <typename T>
    std::span<const T> checked_const(DType want) const {
        if (dtype_ != want) throw ArgumentError(std::string("tensor is ") + dtype_name(dtype_) + ", not " + dtype_name(want));
        return as<T>();
    }

    Shape shape_;
    DType dtype_;
    Storage data_;
};

inline std::size_t flat_index(const Tensor& t, std::span<const std::size_t> coords) { return t.flat_index(coords); }
inline std::uint32_t get_bits(const Tensor& t, std::size_t offset) { return t.get_bits(offset); }
inline void set_bits(Tensor& t, std::size_t offset, std::uint32_t word) { t.set_bits(offset, word); }

/// Widen any tensor to F32 (F16 exactly, integers by value).
inline Tensor to_f32(const Tensor& t) {
    if (t.dtype() == DType::F32) return t;
    Tensor out(t.shape(), DType::F32);
    auto dst = out.f32();
    for (std::size_t i = 0; i < t.size(); ++i) dst[i] = static_cast<float>(t.value(i));
    return out;
}

inline Tensor to_f16(const Tensor& t) {
    if (t.dtype() == DType::F16) return t;
    Tensor out(t.shape(), DType::F16);
    auto dst = out.as<std::uint16_t>();
    for (std::size_t i = 0; i < t.size(); ++i) dst[i] = f32_to_f16_bits(static_cast<float>(t.value(i)));
    return out;
}

} // namespace nnfi
