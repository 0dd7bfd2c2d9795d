// SPDX-License-Identifier: Apache-2.0

#include "exmerge/dtype.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "exmerge/errors.hpp"

static_assert(std::endian::native == std::endian::little, "exmerge assumes a little-endian host");

namespace exmerge {

std::string_view dtype_tag(DType dtype) noexcept {
    switch (dtype) {
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
        case DType::I64: return "I64";
        case DType::I32: return "I32";
        case DType::I8: return "I8";
        case DType::U8: return "U8";
        case DType::Bool: return "BOOL";
    }
    return "?";
}

std::optional<DType> parse_dtype_tag(std::string_view tag) noexcept {
    for (DType d : kAllDTypes) {
        if (dtype_tag(d) == tag) {
            return d;
        }
    }
    return std::nullopt;
}

float half_bits_to_float(std::uint16_t bits) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    const std::uint32_t exponent = (bits >> 10) & 0x1Fu;
    std::uint32_t mantissa = bits & 0x3FFu;
    std::uint32_t out;
    if (exponent == 0x1F) {
        out = sign | 0x7F800000u | (mantissa << 13);
    } else if (exponent != 0) {
        out = sign | ((exponent + 112) << 23) | (mantissa << 13);
    } else if (mantissa == 0) {
        out = sign;
    } else {
        // subnormal: renormalise
        int shift = 0;
        while ((mantissa & 0x400u) == 0) {
            mantissa <<= 1;
            ++shift;
        }
        mantissa &= 0x3FFu;
        out = sign | (static_cast<std::uint32_t>(113 - shift) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(out);
}

float bfloat16_bits_to_float(std::uint16_t bits) noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t float_to_half_bits(float value) noexcept {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t abs = x & 0x7FFFFFFFu;

    if (abs > 0x7F800000u) {
        return sign | 0x7E00u | static_cast<std::uint16_t>((abs >> 13) & 0x1FFu);
    }
    if (abs >= 0x477FF000u) {
        // at or past the midpoint between 65504 and 65536
        return sign | 0x7C00u;
    }
    if (abs < 0x38800000u) {
        // result is subnormal or zero in half precision
        if (abs < 0x33000000u) {
            return sign;  // below half of the smallest subnormal
        }
        const std::uint32_t exponent = abs >> 23;
        const std::uint32_t mantissa = (abs & 0x7FFFFFu) | 0x800000u;
        const std::uint32_t shift = 126 - exponent;  // 14..24
        std::uint32_t result = mantissa >> shift;
        const std::uint32_t remainder = mantissa & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (remainder > halfway || (remainder == halfway && (result & 1u))) {
            ++result;
        }
        return sign | static_cast<std::uint16_t>(result);
    }
    std::uint32_t rebased = abs - (112u << 23);
    const std::uint32_t remainder = rebased & 0x1FFFu;
    std::uint32_t result = rebased >> 13;
    if (remainder > 0x1000u || (remainder == 0x1000u && (result & 1u))) {
        ++result;  // may carry into the exponent, which is the correct rounding
    }
    return sign | static_cast<std::uint16_t>(result);
}

std::uint16_t float_to_bfloat16_bits(float value) noexcept {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    if ((x & 0x7FFFFFFFu) > 0x7F800000u) {
        return static_cast<std::uint16_t>((x >> 16) | 0x0040u);  // quiet the NaN
    }
    const std::uint32_t rounding = 0x7FFFu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>((x + rounding) >> 16);
}

float round_to_odd_float(double value) noexcept {
    if (std::isnan(value)) {
        return static_cast<float>(value);
    }
    float f = static_cast<float>(value);
    if (static_cast<double>(f) == value) {
        return f;
    }
    if (std::fabs(static_cast<double>(f)) > std::fabs(value)) {
        f = std::nextafter(f, 0.0f);
    }
    return std::bit_cast<float>(std::bit_cast<std::uint32_t>(f) | 1u);
}

std::uint16_t double_to_half_bits(double value) noexcept {
    return float_to_half_bits(round_to_odd_float(value));
}

std::uint16_t double_to_bfloat16_bits(double value) noexcept {
    return float_to_bfloat16_bits(round_to_odd_float(value));
}

namespace {

template <typename T>
T load(const std::byte* p) noexcept {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void store(std::byte* p, T v) noexcept {
    std::memcpy(p, &v, sizeof(T));
}

void require_size(DType dtype, std::size_t bytes, std::size_t count) {
    if (bytes != count * element_size(dtype)) {
        throw ValidationError("element buffer size mismatch for dtype " + std::string(dtype_tag(dtype)));
    }
}

}  // namespace

void decode_elements(DType dtype, std::span<const std::byte> bytes, std::span<double> out) {
    require_size(dtype, bytes.size(), out.size());
    const std::byte* p = bytes.data();
    const std::size_t n = out.size();
    switch (dtype) {
        case DType::F32:
            for (std::size_t i = 0; i < n; ++i) out[i] = load<float>(p + 4 * i);
            break;
        case DType::F16:
            for (std::size_t i = 0; i < n; ++i) out[i] = half_bits_to_float(load<std::uint16_t>(p + 2 * i));
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) out[i] = bfloat16_bits_to_float(load<std::uint16_t>(p + 2 * i));
            break;
        case DType::I64:
            for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(load<std::int64_t>(p + 8 * i));
            break;
        case DType::I32:
            for (std::size_t i = 0; i < n; ++i) out[i] = load<std::int32_t>(p + 4 * i);
            break;
        case DType::I8:
            for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::int8_t>(std::to_integer<std::uint8_t>(p[i]));
            break;
        case DType::U8:
        case DType::Bool:
            for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(std::to_integer<std::uint8_t>(p[i]));
            break;
    }
}

void encode_elements(DType dtype, std::span<const double> values, std::span<std::byte> out) {
    require_size(dtype, out.size(), values.size());
    std::byte* p = out.data();
    const std::size_t n = values.size();
    switch (dtype) {
        case DType::F32:
            for (std::size_t i = 0; i < n; ++i) store(p + 4 * i, static_cast<float>(values[i]));
            break;
        case DType::F16:
            for (std::size_t i = 0; i < n; ++i) store(p + 2 * i, double_to_half_bits(values[i]));
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) store(p + 2 * i, double_to_bfloat16_bits(values[i]));
            break;
        default:
            throw ValidationError("cannot encode computed values as " + std::string(dtype_tag(dtype)));
    }
}

std::vector<double> decode_all(DType dtype, std::span<const std::byte> bytes) {
    std::vector<double> out(bytes.size() / element_size(dtype));
    decode_elements(dtype, bytes, out);
    return out;
}

std::vector<std::byte> encode_all(DType dtype, std::span<const double> values) {
    std::vector<std::byte> out(values.size() * element_size(dtype));
    encode_elements(dtype, values, out);
    return out;
}

std::uint64_t count_nonfinite(DType dtype, std::span<const std::byte> bytes) noexcept {
    std::uint64_t count = 0;
    const std::byte* p = bytes.data();
    switch (dtype) {
        case DType::F32:
            for (std::size_t i = 0; i + 4 <= bytes.size(); i += 4) {
                count += (load<std::uint32_t>(p + i) & 0x7F800000u) == 0x7F800000u;
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i + 2 <= bytes.size(); i += 2) {
                count += (load<std::uint16_t>(p + i) & 0x7C00u) == 0x7C00u;
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i + 2 <= bytes.size(); i += 2) {
                count += (load<std::uint16_t>(p + i) & 0x7F80u) == 0x7F80u;
            }
            break;
        default:
            break;
    }
    return count;
}

}  // namespace exmerge
