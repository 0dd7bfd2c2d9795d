// SPDX-License-Identifier: Apache-2.0
//
// In-memory model of a checkpoint: an ordered collection of named dense
// tensors, each backed by a TensorSource that produces its bytes on demand.
// File-backed and computed tensors are never resident as a whole unless a
// caller asks for them.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exmerge/dtype.hpp"

namespace exmerge {

using Shape = std::vector<std::uint64_t>;
using Metadata = std::map<std::string, std::string>;

std::uint64_t element_count(const Shape& shape);  // throws ValidationError on overflow
std::string format_shape(const Shape& shape);

struct ByteRange {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::uint64_t size() const noexcept { return end - begin; }
    friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

/// Storage view of one tensor. `byte_range` addresses the logical data region
/// of the checkpoint (tensors are laid out contiguously in insertion order).
struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    ByteRange byte_range;

    std::uint64_t numel() const { return element_count(shape); }
    std::uint64_t nbytes() const noexcept { return byte_range.size(); }
};

/// Producer of one tensor's raw little-endian bytes. Implementations are
/// immutable and safe to read from several threads at once.
class TensorSource {
public:
    virtual ~TensorSource() = default;

    /// Copies bytes [offset, offset + out.size()) of the tensor into `out`.
    virtual void read(std::uint64_t offset, std::span<std::byte> out) const = 0;

    /// False when every read has to materialise the whole tensor; readers should
    /// then request the tensor in a single call.
    virtual bool supports_ranged_reads() const noexcept { return true; }

    /// True when bytes come from a file or memory rather than being computed.
    virtual bool is_stored() const noexcept { return true; }
};

class MemorySource final : public TensorSource {
public:
    explicit MemorySource(std::vector<std::byte> bytes) : bytes_(std::move(bytes)) {}

    void read(std::uint64_t offset, std::span<std::byte> out) const override;
    std::span<const std::byte> bytes() const noexcept { return bytes_; }

private:
    std::vector<std::byte> bytes_;
};

class Checkpoint {
public:
    Checkpoint();

    /// Appends a tensor holding `bytes`; throws ValidationError on a duplicate
    /// name or a byte length that disagrees with dtype and shape.
    void add_tensor(std::string name, DType dtype, Shape shape, std::vector<std::byte> bytes);
    void add_tensor(std::string name, DType dtype, Shape shape, std::shared_ptr<const TensorSource> source);

    /// Encodes `values` into a floating tensor.
    void add_values(std::string name, DType dtype, Shape shape, std::span<const double> values);

    std::span<const TensorMeta> tensors() const noexcept { return metas_; }
    std::size_t size() const noexcept { return metas_.size(); }
    bool empty() const noexcept { return metas_.empty(); }
    bool contains(std::string_view name) const { return find(name) != nullptr; }

    const TensorMeta* find(std::string_view name) const;
    const TensorMeta& meta(std::string_view name) const;  // throws ValidationError
    const std::shared_ptr<const TensorSource>& source(std::string_view name) const;

    std::vector<std::byte> read_bytes(std::string_view name) const;
    void read_bytes(std::string_view name, std::uint64_t offset, std::span<std::byte> out) const;
    std::vector<double> read_values(std::string_view name) const;

    /// Total size of the logical data region.
    std::uint64_t data_size() const noexcept { return metas_.empty() ? 0 : metas_.back().byte_range.end; }

    /// True when at least one tensor is computed on demand.
    bool is_lazy() const noexcept;

    Metadata& metadata() noexcept { return metadata_; }
    const Metadata& metadata() const noexcept { return metadata_; }

    const std::optional<std::filesystem::path>& source_path() const noexcept { return source_path_; }
    void set_source_path(std::filesystem::path path) { source_path_ = std::move(path); }

    /// Content digest (see digest.hpp), memoised across copies of this checkpoint.
    const std::string& content_digest() const;

private:
    std::size_t index_of(std::string_view name) const;
    void invalidate_digest();

    std::vector<TensorMeta> metas_;
    std::vector<std::shared_ptr<const TensorSource>> sources_;
    std::map<std::string, std::size_t, std::less<>> index_;
    Metadata metadata_;
    std::optional<std::filesystem::path> source_path_;

    struct DigestCache;
    std::shared_ptr<DigestCache> digest_cache_;
};

struct SignatureEntry {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;

    friend bool operator==(const SignatureEntry&, const SignatureEntry&) = default;
};

/// Name-sorted (name, dtype, shape) fingerprint. Two checkpoints are merge
/// compatible iff their signatures are equal.
struct ArchSignature {
    std::vector<SignatureEntry> entries;

    friend bool operator==(const ArchSignature&, const ArchSignature&) = default;
};

ArchSignature arch_signature(const Checkpoint& ckpt);

struct SignatureDifference {
    std::string tensor;
    std::string description;
};

/// All differences between two signatures, in name order.
std::vector<SignatureDifference> signature_differences(const ArchSignature& a, const ArchSignature& b);

/// Throws SignatureMismatch naming the first differing tensor between
/// `inputs[0]` and any other input.
void require_same_architecture(std::span<const Checkpoint* const> inputs);

}  // namespace exmerge
