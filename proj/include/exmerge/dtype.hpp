// SPDX-License-Identifier: Apache-2.0
//
// Element types of checkpoint tensors and the scalar conversions between
// storage encodings and the double-precision working type.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace exmerge {

enum class DType : std::uint8_t { F32, F16, BF16, I64, I32, I8, U8, Bool };

inline constexpr DType kAllDTypes[] = {DType::F32, DType::F16, DType::BF16, DType::I64,
                                       DType::I32, DType::I8,  DType::U8,   DType::Bool};

constexpr std::size_t element_size(DType dtype) noexcept {
    switch (dtype) {
        case DType::F32: return 4;
        case DType::F16: return 2;
        case DType::BF16: return 2;
        case DType::I64: return 8;
        case DType::I32: return 4;
        case DType::I8: return 1;
        case DType::U8: return 1;
        case DType::Bool: return 1;
    }
    return 0;
}

/// Floating tensors are merge targets; everything else is a buffer.
constexpr bool is_floating(DType dtype) noexcept {
    return dtype == DType::F32 || dtype == DType::F16 || dtype == DType::BF16;
}

/// Container tag ("F32", "BF16", ...).
std::string_view dtype_tag(DType dtype) noexcept;
std::optional<DType> parse_dtype_tag(std::string_view tag) noexcept;

float half_bits_to_float(std::uint16_t bits) noexcept;
float bfloat16_bits_to_float(std::uint16_t bits) noexcept;
std::uint16_t float_to_half_bits(float value) noexcept;      // round to nearest even
std::uint16_t float_to_bfloat16_bits(float value) noexcept;  // round to nearest even

/// Rounds a double to the nearest float, breaking ties toward an odd
/// significand. Rounding the result again to any format with at least two
/// fewer significand bits yields the correctly rounded value of the double.
float round_to_odd_float(double value) noexcept;

std::uint16_t double_to_half_bits(double value) noexcept;
std::uint16_t double_to_bfloat16_bits(double value) noexcept;

/// Decodes `count` elements of `dtype` from little-endian bytes into doubles.
/// Floating encodings and 32-bit integers convert exactly.
void decode_elements(DType dtype, std::span<const std::byte> bytes, std::span<double> out);

/// Encodes doubles into storage bytes with a single round-to-nearest-even step.
/// Only floating dtypes are encodable.
void encode_elements(DType dtype, std::span<const double> values, std::span<std::byte> out);

std::vector<double> decode_all(DType dtype, std::span<const std::byte> bytes);
std::vector<std::byte> encode_all(DType dtype, std::span<const double> values);

/// Number of NaN or infinite elements in a floating buffer; 0 for other dtypes.
std::uint64_t count_nonfinite(DType dtype, std::span<const std::byte> bytes) noexcept;

}  // namespace exmerge
