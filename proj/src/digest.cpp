// SPDX-License-Identifier: Apache-2.0

#include "exmerge/digest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>

#include "exmerge/checkpoint.hpp"
#include "exmerge/errors.hpp"

namespace exmerge {

struct Sha256::Impl {
    EVP_MD_CTX* ctx = nullptr;
    ~Impl() { EVP_MD_CTX_free(ctx); }
};

Sha256::Sha256() : impl_(std::make_unique<Impl>()) {
    impl_->ctx = EVP_MD_CTX_new();
    if (impl_->ctx == nullptr || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256: context initialisation failed");
    }
}

Sha256::~Sha256() = default;
Sha256::Sha256(Sha256&&) noexcept = default;
Sha256& Sha256::operator=(Sha256&&) noexcept = default;

void Sha256::update(std::span<const std::byte> bytes) {
    if (!bytes.empty()) {
        EVP_DigestUpdate(impl_->ctx, bytes.data(), bytes.size());
    }
}

void Sha256::update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }

std::string Sha256::hex_digest() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(impl_->ctx, md.data(), &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

std::string sha256_hex(std::string_view text) {
    Sha256 h;
    h.update(text);
    return h.hex_digest();
}

std::string combine_tensor_digests(std::vector<TensorDigest> tensors) {
    std::sort(tensors.begin(), tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    Sha256 h;
    for (const auto& t : tensors) {
        h.update(t.name);
        h.update(std::string_view("\0", 1));
        h.update(dtype_tag(t.dtype));
        h.update(std::string_view("\0", 1));
        h.update(t.shape);
        h.update(std::string_view("\0", 1));
        h.update(t.bytes_sha256);
        h.update("\n");
    }
    return h.hex_digest();
}

std::string compute_content_digest(const Checkpoint& ckpt, std::size_t chunk_bytes) {
    std::vector<TensorDigest> digests;
    digests.reserve(ckpt.size());
    std::vector<std::byte> buffer;
    for (const TensorMeta& meta : ckpt.tensors()) {
        Sha256 h;
        const auto& source = ckpt.source(meta.name);
        if (source->supports_ranged_reads()) {
            const std::size_t step = std::max<std::size_t>(element_size(meta.dtype),
                                                           chunk_bytes - chunk_bytes % element_size(meta.dtype));
            for (std::uint64_t off = 0; off < meta.nbytes(); off += step) {
                buffer.resize(static_cast<std::size_t>(std::min<std::uint64_t>(step, meta.nbytes() - off)));
                source->read(off, buffer);
                h.update(buffer);
            }
        } else {
            buffer.resize(meta.nbytes());
            source->read(0, buffer);
            h.update(buffer);
        }
        digests.push_back({meta.name, meta.dtype, format_shape(meta.shape), h.hex_digest()});
    }
    return combine_tensor_digests(std::move(digests));
}

}  // namespace exmerge
