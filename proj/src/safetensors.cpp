// SPDX-License-Identifier: Apache-2.0

#include "exmerge/safetensors.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <exception>
#include <fstream>
#include <optional>
#include <set>
#include <thread>
#include <tuple>

#include "exmerge/digest.hpp"
#include "exmerge/errors.hpp"
#include "json.hpp"

namespace exmerge {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string errno_text() { return std::strerror(errno); }

/// Read-only file descriptor shared by every tensor of one container.
class ReadOnlyFile {
public:
    explicit ReadOnlyFile(const fs::path& path) : path_(path) {
        fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
        if (fd_ < 0) {
            throw IoError("cannot open '" + path.string() + "': " + errno_text());
        }
        struct stat st {};
        if (::fstat(fd_, &st) != 0) {
            const std::string why = errno_text();
            ::close(fd_);
            throw IoError("cannot stat '" + path.string() + "': " + why);
        }
        size_ = static_cast<std::uint64_t>(st.st_size);
    }
    ~ReadOnlyFile() { ::close(fd_); }
    ReadOnlyFile(const ReadOnlyFile&) = delete;
    ReadOnlyFile& operator=(const ReadOnlyFile&) = delete;

    std::uint64_t size() const noexcept { return size_; }
    const fs::path& path() const noexcept { return path_; }

    void read_at(std::uint64_t offset, std::span<std::byte> out) const {
        std::size_t done = 0;
        while (done < out.size()) {
            const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
            if (n < 0) {
                if (errno == EINTR) continue;
                throw IoError("read failed on '" + path_.string() + "': " + errno_text());
            }
            if (n == 0) {
                throw FormatError("truncated data region in '" + path_.string() + "': unexpected end of file at byte " +
                                  std::to_string(offset + done));
            }
            done += static_cast<std::size_t>(n);
        }
    }

private:
    fs::path path_;
    int fd_ = -1;
    std::uint64_t size_ = 0;
};

class FileSource final : public TensorSource {
public:
    FileSource(std::shared_ptr<const ReadOnlyFile> file, std::uint64_t base) : file_(std::move(file)), base_(base) {}

    void read(std::uint64_t offset, std::span<std::byte> out) const override { file_->read_at(base_ + offset, out); }

private:
    std::shared_ptr<const ReadOnlyFile> file_;
    std::uint64_t base_;
};

struct HeaderEntry {
    std::string name;
    DType dtype;
    Shape shape;
    std::uint64_t begin;
    std::uint64_t end;
};

std::uint64_t require_unsigned(const ordered_json& v, const std::string& what) {
    if (!v.is_number_unsigned()) {
        throw FormatError(what + " must be a nonnegative integer");
    }
    return v.get<std::uint64_t>();
}

HeaderEntry parse_entry(const std::string& name, const ordered_json& info, const std::string& where) {
    const std::string ctx = "malformed header in '" + where + "': tensor '" + name + "'";
    if (name.empty()) {
        throw FormatError("malformed header in '" + where + "': empty tensor name");
    }
    if (!info.is_object()) {
        throw FormatError(ctx + " is not an object");
    }
    auto dt = info.find("dtype");
    auto sh = info.find("shape");
    auto off = info.find("data_offsets");
    if (dt == info.end() || sh == info.end() || off == info.end()) {
        throw FormatError(ctx + " lacks dtype, shape or data_offsets");
    }
    if (!dt->is_string()) {
        throw FormatError(ctx + ": dtype must be a string");
    }
    const auto dtype = parse_dtype_tag(dt->get_ref<const std::string&>());
    if (!dtype) {
        throw FormatError("unsupported dtype '" + dt->get<std::string>() + "' for tensor '" + name + "' in '" + where +
                          "'");
    }
    if (!sh->is_array()) {
        throw FormatError(ctx + ": shape must be an array");
    }
    Shape shape;
    for (const auto& d : *sh) {
        shape.push_back(require_unsigned(d, ctx + ": shape entry"));
    }
    if (!off->is_array() || off->size() != 2) {
        throw FormatError(ctx + ": data_offsets must be [start, end]");
    }
    const std::uint64_t begin = require_unsigned((*off)[0], ctx + ": data_offsets");
    const std::uint64_t end = require_unsigned((*off)[1], ctx + ": data_offsets");
    std::uint64_t numel = 0;
    try {
        numel = element_count(shape);
    } catch (const ValidationError&) {
        throw FormatError(ctx + ": shape overflows");
    }
    if (numel > UINT64_MAX / element_size(*dtype) || end < begin || end - begin != numel * element_size(*dtype)) {
        throw FormatError(ctx + ": data_offsets [" + std::to_string(begin) + ", " + std::to_string(end) +
                          "] do not match " + std::string(dtype_tag(*dtype)) + " " + format_shape(shape));
    }
    return {name, *dtype, std::move(shape), begin, end};
}

ordered_json parse_json_object(const std::string& text, std::uint64_t byte_base, const std::string& where) {
    std::set<std::string> seen;
    std::string duplicate;
    auto callback = [&](int depth, nlohmann::json::parse_event_t event, ordered_json& parsed) {
        if (event == nlohmann::json::parse_event_t::key && depth == 1 && duplicate.empty()) {
            const auto& key = parsed.get_ref<const std::string&>();
            if (!seen.insert(key).second) {
                duplicate = key;
            }
        }
        return true;
    };
    ordered_json doc;
    try {
        doc = ordered_json::parse(text, callback);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("malformed header in '" + where + "' near byte " + std::to_string(byte_base + e.byte) +
                          ": " + e.what());
    }
    if (!duplicate.empty()) {
        throw FormatError("malformed header in '" + where + "': duplicate tensor name '" + duplicate + "'");
    }
    if (!doc.is_object()) {
        throw FormatError("malformed header in '" + where + "': top level is not an object");
    }
    return doc;
}

void merge_metadata(Metadata& into, const ordered_json& meta, const std::string& where) {
    if (meta.is_null()) {
        return;
    }
    if (!meta.is_object()) {
        throw FormatError("malformed header in '" + where + "': metadata is not an object");
    }
    for (const auto& [key, value] : meta.items()) {
        into.emplace(key, value.is_string() ? value.get<std::string>() : value.dump());
    }
}

Checkpoint read_container(const fs::path& path) {
    auto file = std::make_shared<const ReadOnlyFile>(path);
    const std::string where = path.string();
    if (file->size() < 8) {
        throw FormatError("malformed header in '" + where + "': file is shorter than the 8-byte length prefix");
    }
    std::array<std::byte, 8> prefix{};
    file->read_at(0, prefix);
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, prefix.data(), 8);
    if (header_len > kMaxHeaderBytes) {
        throw FormatError("malformed header in '" + where + "': declared header length " + std::to_string(header_len) +
                          " exceeds the limit");
    }
    if (header_len > file->size() - 8) {
        throw FormatError("malformed header in '" + where + "': header length " + std::to_string(header_len) +
                          " runs past the end of the file");
    }
    std::string header(header_len, '\0');
    file->read_at(8, std::as_writable_bytes(std::span(header.data(), header.size())));
    const ordered_json doc = parse_json_object(header, 8, where);

    Checkpoint ckpt;
    std::vector<HeaderEntry> entries;
    for (const auto& [key, value] : doc.items()) {
        if (key == "__metadata__") {
            merge_metadata(ckpt.metadata(), value, where);
            continue;
        }
        entries.push_back(parse_entry(key, value, where));
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return std::tie(a.begin, a.end) < std::tie(b.begin, b.end); });

    const std::uint64_t data_begin = 8 + header_len;
    const std::uint64_t data_len = file->size() - data_begin;
    std::uint64_t expected = 0;
    for (const auto& e : entries) {
        if (e.begin != expected) {
            throw FormatError("malformed header in '" + where + "': tensor '" + e.name + "' starts at byte " +
                              std::to_string(e.begin) + " but the previous tensor ends at " + std::to_string(expected));
        }
        expected = e.end;
    }
    if (expected > data_len) {
        const std::string last = entries.empty() ? std::string() : entries.back().name;
        throw FormatError("truncated data region in '" + where + "': header declares " + std::to_string(expected) +
                          " bytes but only " + std::to_string(data_len) + " follow the header (tensor '" + last +
                          "')");
    }
    for (auto& e : entries) {
        ckpt.add_tensor(e.name, e.dtype, std::move(e.shape), std::make_shared<FileSource>(file, data_begin + e.begin));
    }
    ckpt.set_source_path(path);
    return ckpt;
}

Checkpoint read_sharded(const fs::path& index_path) {
    std::ifstream in(index_path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + index_path.string() + "'");
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string where = index_path.string();
    const ordered_json doc = parse_json_object(text, 0, where);
    auto wm = doc.find("weight_map");
    if (wm == doc.end() || !wm->is_object()) {
        throw FormatError("malformed shard index '" + where + "': missing weight_map object");
    }

    std::vector<std::string> shard_order;
    std::map<std::string, std::string> owner;
    for (const auto& [name, shard] : wm->items()) {
        if (!shard.is_string()) {
            throw FormatError("malformed shard index '" + where + "': shard for '" + name + "' is not a string");
        }
        const auto& file = shard.get_ref<const std::string&>();
        if (std::find(shard_order.begin(), shard_order.end(), file) == shard_order.end()) {
            shard_order.push_back(file);
        }
        owner.emplace(name, file);
    }

    Checkpoint merged;
    std::size_t found = 0;
    for (const auto& shard_name : shard_order) {
        const Checkpoint shard = read_container(index_path.parent_path() / shard_name);
        for (const TensorMeta& m : shard.tensors()) {
            auto it = owner.find(m.name);
            if (it == owner.end() || it->second != shard_name) {
                throw FormatError("shard '" + shard_name + "' holds tensor '" + m.name +
                                  "' which the index does not assign to it");
            }
            merged.add_tensor(m.name, m.dtype, m.shape, shard.source(m.name));
            ++found;
        }
        for (const auto& [k, v] : shard.metadata()) {
            merged.metadata().emplace(k, v);
        }
    }
    if (found != owner.size()) {
        for (const auto& [name, shard] : owner) {
            if (!merged.contains(name)) {
                throw FormatError("index maps tensor '" + name + "' to shard '" + shard + "' which lacks it");
            }
        }
    }
    // the index's own "metadata" (total_size etc.) describes the sharding, not the model
    merged.set_source_path(index_path);
    return merged;
}

class OutputFile {
public:
    explicit OutputFile(fs::path path) : path_(std::move(path)) {
        fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0644);
        if (fd_ < 0) {
            throw IoError("cannot create '" + path_.string() + "': " + errno_text());
        }
    }
    ~OutputFile() {
        if (fd_ >= 0) {
            ::close(fd_);
        }
        if (!committed_) {
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    OutputFile(const OutputFile&) = delete;
    OutputFile& operator=(const OutputFile&) = delete;

    void write(std::span<const std::byte> bytes) {
        std::size_t done = 0;
        while (done < bytes.size()) {
            const ssize_t n = ::write(fd_, bytes.data() + done, bytes.size() - done);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw IoError("write failed on '" + path_.string() + "': " + errno_text());
            }
            done += static_cast<std::size_t>(n);
        }
        written_ += bytes.size();
    }

    void commit_as(const fs::path& destination) {
        if (::fdatasync(fd_) != 0) {
            throw IoError("fdatasync failed on '" + path_.string() + "': " + errno_text());
        }
        if (::close(fd_) != 0) {
            fd_ = -1;
            throw IoError("close failed on '" + path_.string() + "': " + errno_text());
        }
        fd_ = -1;
        if (std::rename(path_.c_str(), destination.c_str()) != 0) {
            throw IoError("cannot rename '" + path_.string() + "' to '" + destination.string() + "': " + errno_text());
        }
        committed_ = true;
    }

    std::uint64_t written() const noexcept { return written_; }

private:
    fs::path path_;
    int fd_ = -1;
    bool committed_ = false;
    std::uint64_t written_ = 0;
};

fs::path temporary_sibling(const fs::path& path) {
    static std::atomic<unsigned> counter{0};
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    return dir / ("." + path.filename().string() + ".tmp-" + std::to_string(::getpid()) + "-" +
                  std::to_string(counter.fetch_add(1)));
}

struct Chunk {
    std::size_t tensor;
    std::uint64_t offset;
    std::uint64_t length;
    bool last;
};

constexpr std::size_t kWindowBytes = std::size_t{64} << 20;

std::vector<Chunk> plan_chunks(const Checkpoint& ckpt, std::size_t chunk_bytes) {
    std::vector<Chunk> chunks;
    const auto metas = ckpt.tensors();
    for (std::size_t t = 0; t < metas.size(); ++t) {
        const std::uint64_t n = metas[t].nbytes();
        const std::size_t es = element_size(metas[t].dtype);
        const std::uint64_t step = std::max<std::uint64_t>(es, chunk_bytes - chunk_bytes % es);
        if (n == 0 || !ckpt.source(metas[t].name)->supports_ranged_reads() || n <= step) {
            chunks.push_back({t, 0, n, true});
            continue;
        }
        for (std::uint64_t off = 0; off < n; off += step) {
            const std::uint64_t len = std::min(step, n - off);
            chunks.push_back({t, off, len, off + len == n});
        }
    }
    return chunks;
}

}  // namespace

Checkpoint read_checkpoint(const fs::path& path) {
    if (path.extension() == ".json") {
        return read_sharded(path);
    }
    return read_container(path);
}

std::string encode_header(const Checkpoint& ckpt) {
    ordered_json header = ordered_json::object();
    if (!ckpt.metadata().empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : ckpt.metadata()) {
            meta[k] = v;
        }
        header["__metadata__"] = std::move(meta);
    }
    for (const TensorMeta& m : ckpt.tensors()) {
        header[m.name] = {{"dtype", std::string(dtype_tag(m.dtype))},
                          {"shape", m.shape},
                          {"data_offsets", {m.byte_range.begin, m.byte_range.end}}};
    }
    try {
        return header.dump();
    } catch (const nlohmann::json::type_error& e) {
        throw ValidationError(std::string("checkpoint header is not valid UTF-8 JSON: ") + e.what());
    }
}

WriteSummary write_checkpoint(const Checkpoint& ckpt, const fs::path& path, const WriteOptions& options) {
    for (const TensorMeta& m : ckpt.tensors()) {
        if (m.name == "__metadata__") {
            throw ValidationError("'__metadata__' is reserved and cannot name a tensor");
        }
    }
    if (!options.overwrite && fs::exists(path)) {
        throw ValidationError("output '" + path.string() + "' already exists");
    }

    std::string header = encode_header(ckpt);
    header.append((8 - (8 + header.size()) % 8) % 8, ' ');
    const std::uint64_t header_len = header.size();

    OutputFile out(temporary_sibling(path));
    std::array<std::byte, 8> prefix{};
    std::memcpy(prefix.data(), &header_len, 8);
    out.write(prefix);
    out.write(std::as_bytes(std::span(header.data(), header.size())));

    WriteSummary summary;
    const auto metas = ckpt.tensors();
    std::vector<TensorDigest> digests;
    digests.reserve(metas.size());
    std::optional<Sha256> running;

    const std::size_t window = std::max(1u, options.threads);
    // all chunks of a window are resident at once
    const std::size_t chunk_bytes = std::min(options.chunk_bytes, std::max<std::size_t>(kWindowBytes / window, 1 << 16));
    const std::vector<Chunk> chunks = plan_chunks(ckpt, std::max<std::size_t>(chunk_bytes, 64));
    std::vector<std::vector<std::byte>> buffers(window);
    std::vector<std::exception_ptr> failures(window);

    for (std::size_t first = 0; first < chunks.size(); first += window) {
        const std::size_t count = std::min(window, chunks.size() - first);
        auto fill = [&](std::size_t slot) {
            try {
                const Chunk& c = chunks[first + slot];
                buffers[slot].resize(static_cast<std::size_t>(c.length));
                ckpt.source(metas[c.tensor].name)->read(c.offset, buffers[slot]);
            } catch (...) {
                failures[slot] = std::current_exception();
            }
        };
        if (count == 1) {
            fill(0);
        } else {
            std::vector<std::jthread> workers;
            workers.reserve(count - 1);
            for (std::size_t slot = 1; slot < count; ++slot) {
                workers.emplace_back(fill, slot);
            }
            fill(0);
        }
        for (std::size_t slot = 0; slot < count; ++slot) {
            if (failures[slot]) {
                std::rethrow_exception(failures[slot]);
            }
        }
        for (std::size_t slot = 0; slot < count; ++slot) {
            const Chunk& c = chunks[first + slot];
            const TensorMeta& m = metas[c.tensor];
            if (!running) {
                running.emplace();
            }
            out.write(buffers[slot]);
            running->update(buffers[slot]);
            if (const std::uint64_t bad = count_nonfinite(m.dtype, buffers[slot]); bad > 0) {
                summary.nonfinite[m.name] += bad;
            }
            if (c.last) {
                digests.push_back({m.name, m.dtype, format_shape(m.shape), running->hex_digest()});
                running.reset();
            }
        }
    }

    summary.file_bytes = out.written();
    out.commit_as(path);
    summary.content_digest = combine_tensor_digests(std::move(digests));
    return summary;
}

}  // namespace exmerge
