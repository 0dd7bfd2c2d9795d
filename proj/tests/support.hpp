// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test binaries.

#pragma once

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "exmerge/checkpoint.hpp"
#include "exmerge/dtype.hpp"

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
public:
    TempDir() {
        std::string templ = (fs::temp_directory_path() / "exmerge-test-XXXXXX").string();
        if (!::mkdtemp(templ.data())) throw std::runtime_error("mkdtemp failed");
        path_ = templ;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::vector<std::byte> read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<std::byte> out(data.size());
    if (!data.empty()) std::memcpy(out.data(), data.data(), data.size());
    return out;
}

inline void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Hand-assembled container: 8-byte little-endian length, header text, data.
inline std::string container(const std::string& header, const std::string& data) {
    std::string out(8, '\0');
    const std::uint64_t n = header.size();
    std::memcpy(out.data(), &n, 8);
    return out + header + data;
}

template <typename T>
std::string raw_bytes(const std::vector<T>& values) {
    std::string s(values.size() * sizeof(T), '\0');
    if (!values.empty()) std::memcpy(s.data(), values.data(), s.size());
    return s;
}

template <typename T>
std::vector<std::byte> as_byte_vector(const std::vector<T>& values) {
    std::vector<std::byte> out(values.size() * sizeof(T));
    if (!values.empty()) std::memcpy(out.data(), values.data(), out.size());
    return out;
}

inline std::vector<float> as_floats(const std::vector<std::byte>& bytes) {
    std::vector<float> out(bytes.size() / 4);
    std::memcpy(out.data(), bytes.data(), out.size() * 4);
    return out;
}

/// Spacing of representable values of `dtype` (f32/f16/bf16) at magnitude
/// |a|, taken on the side facing `toward`.
inline double ulp_at(exmerge::DType dtype, double a, double toward) {
    using exmerge::DType;
    const int mantissa_bits = dtype == DType::F32 ? 23 : dtype == DType::F16 ? 10 : 7;
    const int min_exponent = dtype == DType::F16 ? -14 : -126;
    const double m = std::fabs(a);
    int e = m == 0.0 ? min_exponent : std::ilogb(m);
    if (m != 0.0 && m == std::ldexp(1.0, e) && std::fabs(toward) < m) --e;  // power of two: finer spacing below
    return std::ldexp(1.0, std::max(e, min_exponent) - mantissa_bits);
}

/// |a - x| in units of the storage spacing next to `a`.
inline double ulp_error(exmerge::DType dtype, double a, double x) {
    if (a == x) return 0.0;
    return std::fabs(a - x) / ulp_at(dtype, a, x);
}

// Half and bfloat16 values straight from the bit fields.
inline double oracle_half(std::uint16_t bits) {
    const int sign = bits >> 15 ? -1 : 1;
    const int exponent = (bits >> 10) & 0x1F;
    const int mantissa = bits & 0x3FF;
    if (exponent == 0x1F) {
        return mantissa ? std::numeric_limits<double>::quiet_NaN() : sign * std::numeric_limits<double>::infinity();
    }
    if (exponent == 0) return sign * std::ldexp(mantissa, -24);
    return sign * std::ldexp(1024 + mantissa, exponent - 25);
}

inline double oracle_bf16(std::uint16_t bits) {
    const int sign = bits >> 15 ? -1 : 1;
    const int exponent = (bits >> 7) & 0xFF;
    const int mantissa = bits & 0x7F;
    if (exponent == 0xFF) {
        return mantissa ? std::numeric_limits<double>::quiet_NaN() : sign * std::numeric_limits<double>::infinity();
    }
    if (exponent == 0) return sign * std::ldexp(mantissa, -133);
    return sign * std::ldexp(128 + mantissa, exponent - 134);
}

// Nearest-even rounding by search over every finite encoding.
struct Table {
    std::vector<std::pair<double, std::uint16_t>> finite;  // nonnegative values, ascending
    double overflow;                                       // smallest magnitude that rounds to infinity
    std::uint16_t inf_bits;

    std::uint16_t round(long double x) const {
        const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
        const long double a = std::fabs(x);
        if (a >= overflow) return sign | inf_bits;
        auto it = std::lower_bound(finite.begin(), finite.end(), a,
                                   [](const auto& e, long double v) { return e.first < v; });
        if (it == finite.end()) return sign | finite.back().second;
        if (it->first == a || it == finite.begin()) return sign | it->second;
        auto lo = it - 1;
        const long double dlo = a - lo->first;
        const long double dhi = it->first - a;
        if (dlo < dhi) return sign | lo->second;
        if (dhi < dlo) return sign | it->second;
        return sign | ((lo->second & 1) ? it->second : lo->second);
    }
};

inline Table make_table(double (*decode)(std::uint16_t), std::uint16_t inf_bits) {
    Table t;
    for (std::uint32_t b = 0; b < 0x8000; ++b) {
        const double v = decode(static_cast<std::uint16_t>(b));
        if (std::isfinite(v)) t.finite.emplace_back(v, static_cast<std::uint16_t>(b));
    }
    std::sort(t.finite.begin(), t.finite.end());
    const double max = t.finite.back().first;
    const double prev = t.finite[t.finite.size() - 2].first;
    t.overflow = max + (max - prev) / 2;  // halfway to the next binade step; ties go to even (infinity)
    t.inf_bits = inf_bits;
    return t;
}

inline const Table& half_table() {
    static const Table t = make_table(oracle_half, 0x7C00);
    return t;
}

inline const Table& bf16_table() {
    static const Table t = make_table(oracle_bf16, 0x7F80);
    return t;
}

/// Storage value of `x` under nearest-even rounding, computed without the
/// library's conversion routines.
inline double round_to_storage(exmerge::DType dtype, long double x) {
    using exmerge::DType;
    if (dtype == DType::F32) return static_cast<float>(x);
    return dtype == DType::F16 ? oracle_half(half_table().round(x)) : oracle_bf16(bf16_table().round(x));
}

/// Random values of magnitude ~[lo, hi] with random sign.
inline double random_magnitude(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> e(std::log2(lo), std::log2(hi));
    std::bernoulli_distribution s(0.5);
    const double v = std::exp2(e(rng));
    return s(rng) ? -v : v;
}

}  // namespace testsupport
