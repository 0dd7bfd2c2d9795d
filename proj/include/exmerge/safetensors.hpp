// SPDX-License-Identifier: Apache-2.0
//
// Reader and writer for the safetensors container:
//
//   [u64 little-endian N][N bytes of UTF-8 JSON header][data region]
//
// The header maps each tensor name to {"dtype", "shape", "data_offsets"} with
// offsets relative to the start of the data region, plus an optional
// "__metadata__" object of string values. Sharded checkpoints are read through
// their "*.index.json" manifest, whose "weight_map" maps tensor names to shard
// files next to the manifest.
//
// Reading is lazy: tensors are fetched with positional reads when requested,
// so resident memory stays bounded by what callers hold on to.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "exmerge/checkpoint.hpp"

namespace exmerge {

inline constexpr std::uint64_t kMaxHeaderBytes = 100u << 20;

/// Opens a single container file or a shard manifest (path ending in ".json").
Checkpoint read_checkpoint(const std::filesystem::path& path);

struct WriteOptions {
    unsigned threads = 1;
    /// Granularity of streamed tensor reads; also bounds per-thread buffers.
    std::size_t chunk_bytes = std::size_t{4} << 20;
    bool overwrite = true;
};

struct WriteSummary {
    std::uint64_t file_bytes = 0;
    std::string content_digest;
    /// Floating tensors that contain NaN or Inf, with their counts.
    std::map<std::string, std::uint64_t> nonfinite;
};

/// Writes atomically: data goes to a temporary file in the destination
/// directory which is renamed over `path` only after everything succeeded.
/// Tensor order, dtype tags, raw bytes and metadata are preserved exactly.
WriteSummary write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                              const WriteOptions& options = {});

/// Serialised JSON header (without length prefix or padding) as write_checkpoint emits it.
std::string encode_header(const Checkpoint& ckpt);

}  // namespace exmerge
