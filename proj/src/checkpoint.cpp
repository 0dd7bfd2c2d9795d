// SPDX-License-Identifier: Apache-2.0

#include "exmerge/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <mutex>

#include "exmerge/digest.hpp"
#include "exmerge/errors.hpp"

namespace exmerge {

std::uint64_t element_count(const Shape& shape) {
    std::uint64_t n = 1;
    for (std::uint64_t d : shape) {
        if (d != 0 && n > UINT64_MAX / d) {
            throw ValidationError("tensor shape " + format_shape(shape) + " overflows 64-bit element count");
        }
        n *= d;
    }
    return n;
}

std::string format_shape(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void MemorySource::read(std::uint64_t offset, std::span<std::byte> out) const {
    if (offset > bytes_.size() || out.size() > bytes_.size() - offset) {
        throw ValidationError("read past the end of an in-memory tensor");
    }
    if (!out.empty()) {
        std::memcpy(out.data(), bytes_.data() + offset, out.size());
    }
}

struct Checkpoint::DigestCache {
    std::once_flag once;
    std::string value;
};

Checkpoint::Checkpoint() : digest_cache_(std::make_shared<DigestCache>()) {}

void Checkpoint::add_tensor(std::string name, DType dtype, Shape shape, std::vector<std::byte> bytes) {
    const std::uint64_t expected = element_count(shape) * element_size(dtype);
    if (bytes.size() != expected) {
        throw ValidationError("tensor '" + name + "': data length " + std::to_string(bytes.size()) +
                              " does not match " + std::string(dtype_tag(dtype)) + " " + format_shape(shape) +
                              " (" + std::to_string(expected) + " bytes)");
    }
    add_tensor(std::move(name), dtype, std::move(shape), std::make_shared<MemorySource>(std::move(bytes)));
}

void Checkpoint::add_tensor(std::string name, DType dtype, Shape shape, std::shared_ptr<const TensorSource> source) {
    if (name.empty()) {
        throw ValidationError("tensor names must be nonempty");
    }
    if (index_.contains(name)) {
        throw ValidationError("duplicate tensor name '" + name + "'");
    }
    if (!source) {
        throw ValidationError("tensor '" + name + "' has no data source");
    }
    const std::uint64_t nbytes = element_count(shape) * element_size(dtype);
    const std::uint64_t begin = data_size();
    TensorMeta meta{name, dtype, std::move(shape), {begin, begin + nbytes}};
    index_.emplace(name, metas_.size());
    metas_.push_back(std::move(meta));
    sources_.push_back(std::move(source));
    invalidate_digest();
}

void Checkpoint::add_values(std::string name, DType dtype, Shape shape, std::span<const double> values) {
    if (values.size() != element_count(shape)) {
        throw ValidationError("tensor '" + name + "': value count does not match shape " + format_shape(shape));
    }
    add_tensor(std::move(name), dtype, std::move(shape), encode_all(dtype, values));
}

const TensorMeta* Checkpoint::find(std::string_view name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &metas_[it->second];
}

std::size_t Checkpoint::index_of(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ValidationError("no tensor named '" + std::string(name) + "'");
    }
    return it->second;
}

const TensorMeta& Checkpoint::meta(std::string_view name) const { return metas_[index_of(name)]; }

const std::shared_ptr<const TensorSource>& Checkpoint::source(std::string_view name) const {
    return sources_[index_of(name)];
}

std::vector<std::byte> Checkpoint::read_bytes(std::string_view name) const {
    const std::size_t i = index_of(name);
    std::vector<std::byte> out(metas_[i].nbytes());
    sources_[i]->read(0, out);
    return out;
}

void Checkpoint::read_bytes(std::string_view name, std::uint64_t offset, std::span<std::byte> out) const {
    const std::size_t i = index_of(name);
    if (offset > metas_[i].nbytes() || out.size() > metas_[i].nbytes() - offset) {
        throw ValidationError("read past the end of tensor '" + std::string(name) + "'");
    }
    sources_[i]->read(offset, out);
}

std::vector<double> Checkpoint::read_values(std::string_view name) const {
    return decode_all(meta(name).dtype, read_bytes(name));
}

bool Checkpoint::is_lazy() const noexcept {
    return std::any_of(sources_.begin(), sources_.end(), [](const auto& s) { return !s->is_stored(); });
}

void Checkpoint::invalidate_digest() { digest_cache_ = std::make_shared<DigestCache>(); }

const std::string& Checkpoint::content_digest() const {
    DigestCache& cache = *digest_cache_;
    std::call_once(cache.once, [&] { cache.value = compute_content_digest(*this); });
    return cache.value;
}

ArchSignature arch_signature(const Checkpoint& ckpt) {
    ArchSignature sig;
    sig.entries.reserve(ckpt.size());
    for (const TensorMeta& m : ckpt.tensors()) {
        sig.entries.push_back({m.name, m.dtype, m.shape});
    }
    std::sort(sig.entries.begin(), sig.entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return sig;
}

std::vector<SignatureDifference> signature_differences(const ArchSignature& a, const ArchSignature& b) {
    std::vector<SignatureDifference> diffs;
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    while (ia != a.entries.end() || ib != b.entries.end()) {
        if (ib == b.entries.end() || (ia != a.entries.end() && ia->name < ib->name)) {
            diffs.push_back({ia->name, "only in first checkpoint"});
            ++ia;
        } else if (ia == a.entries.end() || ib->name < ia->name) {
            diffs.push_back({ib->name, "only in second checkpoint"});
            ++ib;
        } else {
            if (ia->dtype != ib->dtype) {
                diffs.push_back({ia->name, "dtype " + std::string(dtype_tag(ia->dtype)) + " vs " +
                                               std::string(dtype_tag(ib->dtype))});
            } else if (ia->shape != ib->shape) {
                diffs.push_back({ia->name, "shape " + format_shape(ia->shape) + " vs " + format_shape(ib->shape)});
            }
            ++ia;
            ++ib;
        }
    }
    return diffs;
}

void require_same_architecture(std::span<const Checkpoint* const> inputs) {
    if (inputs.size() < 2) {
        return;
    }
    const ArchSignature first = arch_signature(*inputs[0]);
    for (std::size_t i = 1; i < inputs.size(); ++i) {
        const auto diffs = signature_differences(first, arch_signature(*inputs[i]));
        if (!diffs.empty()) {
            throw SignatureMismatch(diffs.front().tensor, "signature mismatch between input 0 and input " +
                                                              std::to_string(i) + " at tensor '" +
                                                              diffs.front().tensor + "': " + diffs.front().description);
        }
    }
}

}  // namespace exmerge
