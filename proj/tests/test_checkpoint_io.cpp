// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

#include "exmerge/digest.hpp"
#include "exmerge/errors.hpp"
#include "exmerge/safetensors.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace exmerge;
using namespace testsupport;

namespace {

const fs::path kData = EXMERGE_TEST_DATA;

std::string one_tensor_file() {
    return container(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", raw_bytes(std::vector<float>{1.0f, 2.0f}));
}

std::string error_of(const fs::path& p) {
    try {
        read_checkpoint(p);
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

Checkpoint every_dtype_checkpoint(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Checkpoint c;
    for (DType d : kAllDTypes) {
        const std::size_t n = 1 + rng() % 37;
        std::vector<std::byte> bytes(n * element_size(d));
        for (auto& b : bytes) b = static_cast<std::byte>(rng());
        c.add_tensor("t." + std::string(dtype_tag(d)), d, {n}, std::move(bytes));
    }
    c.add_tensor("empty", DType::BF16, {0, 4}, std::vector<std::byte>{});
    c.add_tensor("scalar", DType::F32, {}, as_byte_vector(std::vector<float>{3.5f}));
    c.metadata()["format"] = "pt";
    c.metadata()["note"] = "unicode \xc3\xa9";
    return c;
}

void expect_same_tensors(const Checkpoint& a, const Checkpoint& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const TensorMeta& x = a.tensors()[i];
        const TensorMeta& y = b.tensors()[i];
        EXPECT_EQ(x.name, y.name);
        EXPECT_EQ(x.dtype, y.dtype);
        EXPECT_EQ(x.shape, y.shape);
        EXPECT_EQ(a.read_bytes(x.name), b.read_bytes(y.name)) << x.name;
    }
}

}  // namespace

TEST(Read, OneTensorFixture) {
    TempDir dir;
    write_file(dir / "w.safetensors", one_tensor_file());
    const Checkpoint c = read_checkpoint(dir / "w.safetensors");
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c.tensors()[0].name, "w");
    EXPECT_EQ(c.tensors()[0].dtype, DType::F32);
    EXPECT_EQ(c.tensors()[0].shape, Shape{2});
    EXPECT_EQ(c.read_values("w"), (std::vector<double>{1.0, 2.0}));
    EXPECT_EQ(c.source_path(), dir / "w.safetensors");
    EXPECT_TRUE(c.metadata().empty());
}

TEST(Read, ZeroLengthTensor) {
    TempDir dir;
    write_file(dir / "e.safetensors", container(R"({"e":{"dtype":"F16","shape":[0],"data_offsets":[0,0]}})", ""));
    const Checkpoint c = read_checkpoint(dir / "e.safetensors");
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c.tensors()[0].numel(), 0u);
    EXPECT_TRUE(c.read_bytes("e").empty());
}

TEST(Read, TruncatedDataRegion) {
    TempDir dir;
    std::string file = one_tensor_file();
    file.resize(file.size() - 3);
    write_file(dir / "t.safetensors", file);
    const std::string msg = error_of(dir / "t.safetensors");
    EXPECT_NE(msg.find("truncated data region"), std::string::npos) << msg;
    EXPECT_THROW(read_checkpoint(dir / "t.safetensors"), FormatError);
}

TEST(Read, MalformedHeaders) {
    TempDir dir;
    struct Case {
        std::string file;
        std::string needle;
    };
    const std::vector<Case> cases = {
        {"abc", "8-byte"},
        {container("{\"w\":", ""), "near byte"},
        {container("[1,2]", ""), "not an object"},
        {container(R"({"w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}})", std::string(8, '\0')), "'w'"},
        {container(R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", std::string(8, '\0')), "'w'"},
        {container(R"({"w":{"dtype":"F32","shape":[-1],"data_offsets":[0,8]}})", std::string(8, '\0')), "'w'"},
        {container(R"({"w":{"dtype":"F32","shape":[1]}})", std::string(4, '\0')), "'w'"},
        {container(R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})",
                   std::string(8, '\0')),
         "'b'"},
        {container(R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})", std::string(8, '\0')), "'a'"},
        {container(R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})",
                   std::string(8, '\0')),
         "duplicate tensor name 'w'"},
        {container(R"({"__metadata__":[1]})", ""), "metadata"},
    };
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const fs::path p = dir / ("bad" + std::to_string(i) + ".safetensors");
        write_file(p, cases[i].file);
        const std::string msg = error_of(p);
        EXPECT_NE(msg.find(cases[i].needle), std::string::npos) << "case " << i << ": " << msg;
    }
}

TEST(Read, UnsupportedDtypeNamesTensor) {
    TempDir dir;
    write_file(dir / "f.safetensors",
               container(R"({"layer.0":{"dtype":"F8_E4M3","shape":[1],"data_offsets":[0,1]}})", std::string(1, '\0')));
    const std::string msg = error_of(dir / "f.safetensors");
    EXPECT_NE(msg.find("unsupported dtype 'F8_E4M3'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("layer.0"), std::string::npos) << msg;
}

TEST(Read, HeaderLengthBeyondFile) {
    TempDir dir;
    std::string file = one_tensor_file();
    const std::uint64_t huge = 1u << 20;
    std::memcpy(file.data(), &huge, 8);
    write_file(dir / "h.safetensors", file);
    EXPECT_THROW(read_checkpoint(dir / "h.safetensors"), FormatError);
}

TEST(Read, MissingFileIsIoError) {
    try {
        read_checkpoint("/nonexistent/x.safetensors");
        FAIL();
    } catch (const IoError& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Io);
        EXPECT_EQ(e.exit_code(), 4);
    }
}

TEST(Read, MetadataAndPaddedHeader) {
    TempDir dir;
    const std::string header = R"({"__metadata__":{"format":"pt"},"w":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}})" +
                               std::string(5, ' ');
    write_file(dir / "m.safetensors", container(header, std::string("\x80\x3f", 2)));
    const Checkpoint c = read_checkpoint(dir / "m.safetensors");
    EXPECT_EQ(c.metadata().at("format"), "pt");
    EXPECT_EQ(c.read_values("w"), std::vector<double>{1.0});
}

TEST(Write, OneTensorRoundTripIsBitExact) {
    TempDir dir;
    write_file(dir / "w.safetensors", one_tensor_file());
    const Checkpoint c = read_checkpoint(dir / "w.safetensors");
    write_checkpoint(c, dir / "copy.safetensors");
    const auto original = read_file(dir / "w.safetensors");
    const auto copy = read_file(dir / "copy.safetensors");
    // data region is the trailing 8 bytes of both files
    ASSERT_GE(copy.size(), 8u);
    EXPECT_TRUE(std::equal(original.end() - 8, original.end(), copy.end() - 8));
    EXPECT_EQ(read_checkpoint(dir / "copy.safetensors").read_values("w"), (std::vector<double>{1.0, 2.0}));
}

TEST(Write, EveryDtypeRoundTrips) {
    TempDir dir;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Checkpoint c = every_dtype_checkpoint(seed);
        const fs::path p = dir / "all.safetensors";
        write_checkpoint(c, p);
        const Checkpoint back = read_checkpoint(p);
        expect_same_tensors(c, back);
        EXPECT_EQ(back.metadata(), c.metadata());
        EXPECT_EQ(back.content_digest(), c.content_digest());
        // rewriting the read-back checkpoint reproduces the file byte for byte
        write_checkpoint(back, dir / "again.safetensors");
        EXPECT_EQ(read_file(p), read_file(dir / "again.safetensors"));
    }
}

TEST(Write, Bfloat16PatternsSurviveUntouched) {
    std::vector<std::uint16_t> bits(65536);
    for (std::uint32_t b = 0; b < bits.size(); ++b) bits[b] = static_cast<std::uint16_t>(b);
    Checkpoint c;
    c.add_tensor("all", DType::BF16, {256, 256}, as_byte_vector(bits));
    c.add_tensor("half", DType::F16, {65536}, as_byte_vector(bits));
    TempDir dir;
    write_checkpoint(c, dir / "bf.safetensors");
    const Checkpoint back = read_checkpoint(dir / "bf.safetensors");
    EXPECT_EQ(back.read_bytes("all"), as_byte_vector(bits));
    EXPECT_EQ(back.read_bytes("half"), as_byte_vector(bits));
}

TEST(Write, HeaderIsPaddedAndParsesAsContainer) {
    TempDir dir;
    const Checkpoint c = every_dtype_checkpoint(7);
    write_checkpoint(c, dir / "p.safetensors");
    const auto bytes = read_file(dir / "p.safetensors");
    std::uint64_t n;
    std::memcpy(&n, bytes.data(), 8);
    EXPECT_EQ((8 + n) % 8, 0u);
    const std::string header(reinterpret_cast<const char*>(bytes.data()) + 8, n);
    const auto j = nlohmann::json::parse(header);
    EXPECT_EQ(j["__metadata__"]["format"], "pt");
    EXPECT_EQ(j["t.BOOL"]["dtype"], "BOOL");
    EXPECT_EQ(8 + n + c.data_size(), bytes.size());
}

TEST(Write, DuplicateNamesRejectedBeforeWriting) {
    Checkpoint c;
    c.add_values("w", DType::F32, {1}, std::vector<double>{1.0});
    EXPECT_THROW(c.add_values("w", DType::F32, {1}, std::vector<double>{2.0}), ValidationError);
    EXPECT_THROW(c.add_tensor("x", DType::F32, {2}, std::vector<std::byte>(4)), ValidationError);

    Checkpoint reserved;
    reserved.add_values("__metadata__", DType::F32, {1}, std::vector<double>{1.0});
    TempDir dir;
    EXPECT_THROW(write_checkpoint(reserved, dir / "r.safetensors"), ValidationError);
    EXPECT_FALSE(fs::exists(dir / "r.safetensors"));
    EXPECT_TRUE(fs::is_empty(dir.path()));
}

TEST(Write, NoOverwriteLeavesExistingFile) {
    TempDir dir;
    write_file(dir / "x.safetensors", "keep me");
    WriteOptions opts;
    opts.overwrite = false;
    EXPECT_THROW(write_checkpoint(every_dtype_checkpoint(1), dir / "x.safetensors", opts), ValidationError);
    EXPECT_EQ(read_file(dir / "x.safetensors").size(), 7u);
}

namespace {

class FailingSource final : public TensorSource {
public:
    void read(std::uint64_t, std::span<std::byte>) const override { throw IoError("boom"); }
};

}  // namespace

TEST(Write, FailureLeavesNoPartialFile) {
    TempDir dir;
    write_file(dir / "out.safetensors", "previous");
    Checkpoint c;
    c.add_values("a", DType::F32, {4}, std::vector<double>{1, 2, 3, 4});
    c.add_tensor("b", DType::F32, {4}, std::make_shared<FailingSource>());
    EXPECT_THROW(write_checkpoint(c, dir / "out.safetensors"), IoError);
    EXPECT_EQ(read_file(dir / "out.safetensors").size(), 8u);
    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path())) ++entries;
    EXPECT_EQ(entries, 1u);
}

TEST(Write, ThreadedChunkedOutputMatchesSerial) {
    std::mt19937_64 rng(11);
    Checkpoint c;
    for (int t = 0; t < 9; ++t) {
        std::vector<double> v(1000 + 313 * t);
        for (double& x : v) x = std::uniform_real_distribution<double>(-1, 1)(rng);
        c.add_values("t" + std::to_string(t), t % 3 == 0 ? DType::F32 : t % 3 == 1 ? DType::F16 : DType::BF16,
                     {v.size()}, v);
    }
    TempDir dir;
    WriteOptions serial;
    serial.chunk_bytes = 1 << 20;
    WriteOptions threaded;
    threaded.threads = 4;
    threaded.chunk_bytes = 70;  // rounded down to whole elements per dtype
    const WriteSummary a = write_checkpoint(c, dir / "a.safetensors", serial);
    const WriteSummary b = write_checkpoint(c, dir / "b.safetensors", threaded);
    EXPECT_EQ(read_file(dir / "a.safetensors"), read_file(dir / "b.safetensors"));
    EXPECT_EQ(a.content_digest, b.content_digest);
    EXPECT_EQ(a.content_digest, c.content_digest());
    EXPECT_EQ(a.file_bytes, fs::file_size(dir / "a.safetensors"));
}

TEST(Write, SummaryCountsNonfinite) {
    Checkpoint c;
    c.add_values("ok", DType::F32, {2}, std::vector<double>{1, 2});
    c.add_values("bad", DType::F16, {3}, std::vector<double>{NAN, 1e6, 0});
    TempDir dir;
    const WriteSummary s = write_checkpoint(c, dir / "n.safetensors");
    EXPECT_EQ(s.nonfinite.size(), 1u);
    EXPECT_EQ(s.nonfinite.at("bad"), 2u);
    // values pass through untouched
    const auto back = read_checkpoint(dir / "n.safetensors").read_values("bad");
    EXPECT_TRUE(std::isnan(back[0]));
    EXPECT_TRUE(std::isinf(back[1]));
}

TEST(Signature, IgnoresValuesAndOrder) {
    Checkpoint a;
    a.add_values("x", DType::F32, {2}, std::vector<double>{1, 2});
    a.add_values("y", DType::BF16, {1, 3}, std::vector<double>{1, 2, 3});
    Checkpoint b;
    b.add_values("y", DType::BF16, {1, 3}, std::vector<double>{7, 8, 9});
    b.add_values("x", DType::F32, {2}, std::vector<double>{5, 6});
    EXPECT_EQ(arch_signature(a), arch_signature(b));
    EXPECT_EQ(arch_signature(a), arch_signature(a));

    Checkpoint c = b;
    c.add_values("z", DType::F32, {1}, std::vector<double>{0});
    EXPECT_NE(arch_signature(a), arch_signature(c));
    const auto diffs = signature_differences(arch_signature(a), arch_signature(c));
    ASSERT_EQ(diffs.size(), 1u);
    EXPECT_EQ(diffs[0].tensor, "z");
}

TEST(Signature, PermutedOrderProperty) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> names;
        for (int i = 0; i < 12; ++i) names.push_back("n" + std::to_string(rng() % 1000) + "_" + std::to_string(i));
        auto build = [&](const std::vector<std::string>& order) {
            Checkpoint c;
            for (const auto& n : order) {
                const std::uint64_t len = n.size();
                c.add_values(n, DType::F16, {len}, std::vector<double>(len, 0.5));
            }
            return c;
        };
        auto shuffled = names;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        EXPECT_EQ(arch_signature(build(names)), arch_signature(build(shuffled)));
    }
}

TEST(Signature, MismatchNamesFirstDifferingTensor) {
    Checkpoint a;
    a.add_values("b.weight", DType::F32, {2, 2}, std::vector<double>(4, 1.0));
    a.add_values("a.weight", DType::F32, {3}, std::vector<double>(3, 1.0));
    Checkpoint b;
    b.add_values("b.weight", DType::F32, {4}, std::vector<double>(4, 1.0));
    b.add_values("a.weight", DType::F16, {3}, std::vector<double>(3, 1.0));
    const std::array<const Checkpoint*, 2> pair{&a, &b};
    try {
        require_same_architecture(pair);
        FAIL();
    } catch (const SignatureMismatch& e) {
        EXPECT_EQ(e.tensor(), "a.weight");
        EXPECT_EQ(e.exit_code(), 3);
        EXPECT_NE(std::string(e.what()).find("dtype F32 vs F16"), std::string::npos) << e.what();
    }
}

TEST(Digest, CoversTensorsNotMetadata) {
    Checkpoint a = every_dtype_checkpoint(3);
    Checkpoint b = a;
    b.metadata()["extra"] = "1";
    EXPECT_EQ(a.content_digest(), b.content_digest());
    EXPECT_EQ(a.content_digest().size(), 64u);

    // independent recomputation of the documented formula
    std::vector<TensorMeta> sorted(a.tensors().begin(), a.tensors().end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& x, const auto& y) { return x.name < y.name; });
    std::string manifest;
    for (const TensorMeta& m : sorted) {
        const auto bytes = a.read_bytes(m.name);
        Sha256 h;
        h.update(bytes);
        manifest += m.name + '\0' + std::string(dtype_tag(m.dtype)) + '\0' + format_shape(m.shape) + '\0' +
                    h.hex_digest() + '\n';
    }
    EXPECT_EQ(a.content_digest(), sha256_hex(manifest));

    Checkpoint c;
    for (const TensorMeta& m : a.tensors()) {
        auto bytes = a.read_bytes(m.name);
        if (m.name == "t.U8") bytes[0] ^= std::byte{1};
        c.add_tensor(m.name, m.dtype, m.shape, bytes);
    }
    EXPECT_NE(a.content_digest(), c.content_digest());
}

TEST(Digest, KnownSha256Vectors) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Sharded, IndexUnionsShards) {
    TempDir dir;
    write_file(dir / "model-00001-of-00002.safetensors",
               container(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", raw_bytes(std::vector<float>{1, 2})));
    write_file(dir / "model-00002-of-00002.safetensors",
               container(R"({"__metadata__":{"format":"pt"},"b":{"dtype":"I64","shape":[1],"data_offsets":[0,8]},"c":{"dtype":"F16","shape":[1],"data_offsets":[8,10]}})",
                         raw_bytes(std::vector<std::int64_t>{-3}) + std::string("\x00\x3c", 2)));
    write_file(dir / "model.safetensors.index.json",
               R"({"metadata":{"total_size":18},"weight_map":{"b":"model-00002-of-00002.safetensors","a":"model-00001-of-00002.safetensors","c":"model-00002-of-00002.safetensors"}})");
    const Checkpoint c = read_checkpoint(dir / "model.safetensors.index.json");
    ASSERT_EQ(c.size(), 3u);
    EXPECT_EQ(c.read_values("a"), (std::vector<double>{1, 2}));
    EXPECT_EQ(c.read_values("b"), std::vector<double>{-3});
    EXPECT_EQ(c.read_values("c"), std::vector<double>{1});
    EXPECT_EQ(c.metadata().at("format"), "pt");

    // a sharded checkpoint writes back as one container with the same content
    write_checkpoint(c, dir / "single.safetensors");
    EXPECT_EQ(read_checkpoint(dir / "single.safetensors").content_digest(), c.content_digest());
}

TEST(Sharded, InconsistentIndexIsRejected) {
    TempDir dir;
    write_file(dir / "s1.safetensors",
               container(R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})", raw_bytes(std::vector<float>{1})));
    write_file(dir / "missing.index.json", R"({"weight_map":{"a":"s1.safetensors","z":"s1.safetensors"}})");
    EXPECT_THROW(read_checkpoint(dir / "missing.index.json"), FormatError);
    write_file(dir / "noshard.index.json", R"({"weight_map":{"a":"nope.safetensors"}})");
    EXPECT_THROW(read_checkpoint(dir / "noshard.index.json"), IoError);
    write_file(dir / "nomap.index.json", R"({"metadata":{}})");
    EXPECT_THROW(read_checkpoint(dir / "nomap.index.json"), FormatError);
}

TEST(RealFile, PublishedHadamardCheckpointLoads) {
    const fs::path p = kData / "hadamards.safetensors";
    const Checkpoint c = read_checkpoint(p);
    EXPECT_EQ(c.size(), 66u);
    Sha256 file_hash;
    file_hash.update(read_file(p));
    EXPECT_EQ(file_hash.hex_digest(), "9857751b33687461be89f0352281fed271d8cdfada08ebebabf757db3148d41e");
    // every tensor is a +-1 Hadamard matrix: H H^T = n I
    for (const TensorMeta& m : c.tensors()) {
        ASSERT_EQ(m.dtype, DType::I8);
        ASSERT_EQ(m.shape.size(), 2u);
        const std::size_t n = m.shape[0];
        ASSERT_EQ(m.shape[1], n);
        EXPECT_EQ(std::to_string(n), m.name);
        const auto h = c.read_values(m.name);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0;
                for (std::size_t k = 0; k < n; ++k) dot += h[i * n + k] * h[j * n + k];
                ASSERT_EQ(dot, i == j ? static_cast<double>(n) : 0.0) << m.name;
            }
        }
    }
    TempDir dir;
    write_checkpoint(c, dir / "copy.safetensors");
    const Checkpoint back = read_checkpoint(dir / "copy.safetensors");
    expect_same_tensors(c, back);
    EXPECT_EQ(back.metadata(), c.metadata());
}

TEST(Concurrency, ParallelReadsAgree) {
    TempDir dir;
    Checkpoint c;
    std::mt19937_64 rng(9);
    for (int t = 0; t < 16; ++t) {
        std::vector<double> v(4096);
        for (double& x : v) x = std::uniform_real_distribution<double>(-3, 3)(rng);
        c.add_values("t" + std::to_string(t), DType::F32, {4096}, v);
    }
    write_checkpoint(c, dir / "c.safetensors");
    const Checkpoint file = read_checkpoint(dir / "c.safetensors");
    std::vector<int> ok(8, 1);
    {
        std::vector<std::jthread> threads;
        for (int w = 0; w < 8; ++w) {
            threads.emplace_back([&, w] {
                for (int rep = 0; rep < 20; ++rep) {
                    for (const TensorMeta& m : file.tensors()) {
                        if (file.read_bytes(m.name) != c.read_bytes(m.name)) ok[w] = 0;
                    }
                    if (file.content_digest() != c.content_digest()) ok[w] = 0;
                }
            });
        }
    }
    EXPECT_EQ(std::count(ok.begin(), ok.end(), 1), 8);
}

TEST(Checkpoint, RangedReads) {
    Checkpoint c;
    c.add_values("v", DType::F32, {4}, std::vector<double>{1, 2, 3, 4});
    std::vector<std::byte> out(8);
    c.read_bytes("v", 4, out);
    EXPECT_EQ(as_floats(out), (std::vector<float>{2, 3}));
    EXPECT_THROW(c.read_bytes("v", 12, out), ValidationError);
    EXPECT_THROW(c.read_bytes("nope"), ValidationError);
}
