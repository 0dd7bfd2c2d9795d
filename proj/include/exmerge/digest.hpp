// SPDX-License-Identifier: Apache-2.0
//
// SHA-256 helpers and the checkpoint content digest.
//
// The content digest covers tensor names, dtypes, shapes and bytes but not the
// metadata map or on-disk tensor order:
//
//   sha256( for each tensor in name order:
//             name \0 dtype-tag \0 shape \0 hex(sha256(bytes)) \n )

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exmerge/dtype.hpp"

namespace exmerge {

class Checkpoint;
struct TensorMeta;

class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(Sha256&&) noexcept;
    Sha256& operator=(Sha256&&) noexcept;

    void update(std::span<const std::byte> bytes);
    void update(std::string_view text);
    std::string hex_digest();  // finalises; the object may not be updated afterwards

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view text);

struct TensorDigest {
    std::string name;
    DType dtype;
    std::string shape;  // format_shape()
    std::string bytes_sha256;
};

std::string combine_tensor_digests(std::vector<TensorDigest> tensors);

/// Streams every tensor once; memory use is bounded by `chunk_bytes`.
std::string compute_content_digest(const Checkpoint& ckpt, std::size_t chunk_bytes = std::size_t{4} << 20);

}  // namespace exmerge
