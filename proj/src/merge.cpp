// SPDX-License-Identifier: Apache-2.0

#include "exmerge/merge.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>

#include "exmerge/errors.hpp"
#include "json.hpp"

namespace exmerge {
namespace {

using Json = nlohmann::ordered_json;

constexpr std::uint64_t kBlockElements = 16384;
constexpr std::uint64_t kStatChunkElements = std::uint64_t{1} << 18;
constexpr std::uint64_t kTiesInMemoryLimit = std::uint64_t{1} << 16;

std::string format_number(double v) { return Json(v).dump(); }

void require_finite(double v, std::string_view what) {
    if (!std::isfinite(v)) {
        throw ValidationError(std::string(what) + " must be finite, got " + format_number(v));
    }
}

void require_unit_interval(double v, std::string_view what) {
    require_finite(v, what);
    if (v < 0.0 || v > 1.0) {
        throw ValidationError(std::string(what) + " must lie in [0, 1], got " + format_number(v));
    }
}

// ---------------------------------------------------------------------------
// Lazy elementwise tensors

using Inputs = std::span<const std::span<const double>>;
using Kernel = std::function<void(Inputs in, std::span<double> out, std::uint64_t first_element)>;
using KernelFactory = std::function<Kernel(const TensorMeta&)>;

using SourceList = std::vector<std::shared_ptr<const TensorSource>>;

void require_element_aligned(std::uint64_t offset, std::size_t size, std::size_t es) {
    if (offset % es != 0 || size % es != 0) {
        throw ValidationError("computed tensors must be read at element boundaries");
    }
}

// Calls fn(first_element, views) for consecutive blocks of decoded input
// values covering [first, first + count).
template <typename Fn>
void for_each_block(const SourceList& inputs, DType dtype, std::uint64_t first, std::uint64_t count, Fn&& fn) {
    const std::size_t es = element_size(dtype);
    const std::size_t block = static_cast<std::size_t>(std::min(kBlockElements, std::max<std::uint64_t>(count, 1)));
    const std::size_t n = inputs.size();
    std::vector<std::byte> raw(block * es);
    std::vector<double> values(n * block);
    std::vector<std::span<const double>> views(n);
    for (std::uint64_t done = 0; done < count;) {
        const std::size_t len = static_cast<std::size_t>(std::min<std::uint64_t>(block, count - done));
        const std::span<std::byte> chunk(raw.data(), len * es);
        for (std::size_t i = 0; i < n; ++i) {
            inputs[i]->read((first + done) * es, chunk);
            std::span<double> dst(values.data() + i * block, len);
            decode_elements(dtype, chunk, dst);
            views[i] = dst;
        }
        fn(first + done, std::span<const std::span<const double>>(views));
        done += len;
    }
}

class ElementwiseSource final : public TensorSource {
public:
    ElementwiseSource(SourceList inputs, DType dtype, Kernel kernel)
        : inputs_(std::move(inputs)), dtype_(dtype), kernel_(std::move(kernel)) {}

    void read(std::uint64_t offset, std::span<std::byte> out) const override {
        const std::size_t es = element_size(dtype_);
        require_element_aligned(offset, out.size(), es);
        std::vector<double> result(std::min<std::uint64_t>(kBlockElements, out.size() / es));
        for_each_block(inputs_, dtype_, offset / es, out.size() / es, [&](std::uint64_t first, Inputs in) {
            const std::size_t len = in[0].size();
            const std::span<double> res(result.data(), len);
            kernel_(in, res, first);
            encode_elements(dtype_, res, out.subspan((first - offset / es) * es, len * es));
        });
    }

    bool is_stored() const noexcept override { return false; }

private:
    SourceList inputs_;
    DType dtype_;
    Kernel kernel_;
};

// ---------------------------------------------------------------------------
// Output assembly

struct Role {
    std::string role;
    const Checkpoint* ckpt;
};

Json input_provenance(const Role& r) {
    Json j;
    j["role"] = r.role;
    if (r.ckpt->is_lazy()) {
        auto it = r.ckpt->metadata().find(std::string(kProvenanceKey));
        if (it != r.ckpt->metadata().end()) {
            Json nested = Json::parse(it->second, nullptr, false);
            if (!nested.is_discarded()) {
                j["derived"] = std::move(nested);
                return j;
            }
        }
    }
    j["digest"] = r.ckpt->content_digest();
    return j;
}

Metadata output_metadata(const std::vector<Role>& roles, std::string_view method, Json params) {
    Metadata md;
    for (const auto& [k, v] : roles.front().ckpt->metadata()) {
        if (!k.starts_with("exmerge.")) {
            md.emplace(k, v);
        }
    }
    Json prov;
    prov["method"] = method;
    prov["params"] = std::move(params);
    Json inputs = Json::array();
    for (const Role& r : roles) {
        inputs.push_back(input_provenance(r));
    }
    prov["inputs"] = std::move(inputs);
    md[std::string(kMethodKey)] = std::string(method);
    md[std::string(kProvenanceKey)] = prov.dump();
    return md;
}

void require_identical_buffers(const std::vector<Role>& roles, const TensorMeta& m) {
    const std::uint64_t total = m.nbytes();
    const std::size_t chunk = static_cast<std::size_t>(std::min<std::uint64_t>(total, std::uint64_t{1} << 20));
    std::vector<std::byte> ref(chunk);
    std::vector<std::byte> other(chunk);
    const auto& first = roles.front().ckpt->source(m.name);
    for (std::size_t i = 1; i < roles.size(); ++i) {
        const auto& src = roles[i].ckpt->source(m.name);
        if (src == first) continue;
        for (std::uint64_t off = 0; off < total; off += chunk) {
            const std::size_t len = static_cast<std::size_t>(std::min<std::uint64_t>(chunk, total - off));
            first->read(off, std::span(ref.data(), len));
            src->read(off, std::span(other.data(), len));
            if (std::memcmp(ref.data(), other.data(), len) != 0) {
                throw SignatureMismatch(m.name, std::string(dtype_tag(m.dtype)) + " tensor '" + m.name +
                                                    "' differs between " + roles.front().role + " and " +
                                                    roles[i].role + "; non-floating tensors must be identical");
            }
        }
    }
}

Checkpoint build(const std::vector<Role>& roles, const KernelFactory& factory, std::string_view method,
                 Json params) {
    std::vector<const Checkpoint*> ptrs;
    ptrs.reserve(roles.size());
    for (const Role& r : roles) ptrs.push_back(r.ckpt);
    require_same_architecture(ptrs);

    Checkpoint out;
    for (const TensorMeta& m : roles.front().ckpt->tensors()) {
        if (!is_floating(m.dtype)) {
            require_identical_buffers(roles, m);
            out.add_tensor(m.name, m.dtype, m.shape, roles.front().ckpt->source(m.name));
            continue;
        }
        SourceList sources;
        for (const Role& r : roles) sources.push_back(r.ckpt->source(m.name));
        out.add_tensor(m.name, m.dtype, m.shape, std::make_shared<ElementwiseSource>(std::move(sources), m.dtype, factory(m)));
    }
    out.metadata() = output_metadata(roles, method, std::move(params));
    return out;
}

// acc = l0*x0 + l1*x1 + ..., evaluated left to right. Shared by weighted and
// DARE so that a zero drop rate reproduces weighted_merge bit for bit.
inline double weighted_sum(const std::vector<double>& lambdas, const double* x) noexcept {
    double acc = lambdas[0] * x[0];
    for (std::size_t i = 1; i < lambdas.size(); ++i) acc += lambdas[i] * x[i];
    return acc;
}

// ---------------------------------------------------------------------------
// DARE mask stream

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h = (h ^ c) * 0x100000001B3ull;
    }
    return h;
}

std::uint64_t dare_stream(std::uint64_t seed, std::string_view tensor, std::size_t model) noexcept {
    std::uint64_t k = mix64(seed + kGamma);
    k = mix64(k ^ fnv1a(tensor));
    return mix64(k + (static_cast<std::uint64_t>(model) + 1) * kGamma);
}

inline bool dare_keep(std::uint64_t stream, std::uint64_t element, double drop_rate) noexcept {
    const double u = static_cast<double>(mix64(stream + (element + 1) * kGamma) >> 11) * 0x1.0p-53;
    return u >= drop_rate;
}

// ---------------------------------------------------------------------------
// TIES

class TiesSource final : public TensorSource {
public:
    TiesSource(SourceList inputs, DType dtype, std::uint64_t numel, std::uint64_t keep)
        : inputs_(std::move(inputs)), dtype_(dtype), numel_(numel), keep_(keep) {}

    void read(std::uint64_t offset, std::span<std::byte> out) const override {
        const std::size_t es = element_size(dtype_);
        require_element_aligned(offset, out.size(), es);
        std::call_once(once_, [this] { compute_cuts(); });

        const std::size_t models = inputs_.size() - 1;
        std::vector<double> result(std::min<std::uint64_t>(kBlockElements, out.size() / es));
        for_each_block(inputs_, dtype_, offset / es, out.size() / es, [&](std::uint64_t first, Inputs in) {
            const std::size_t len = in[0].size();
            for (std::size_t j = 0; j < len; ++j) {
                const double b = in[0][j];
                double sum = 0.0;
                for (std::size_t i = 0; i < models; ++i) {
                    const double d = in[i + 1][j] - b;
                    if (kept(i, first + j, d)) sum += d;
                }
                double agree = 0.0;
                std::size_t n = 0;
                if (sum != 0.0 || std::isnan(sum)) {
                    for (std::size_t i = 0; i < models; ++i) {
                        const double d = in[i + 1][j] - b;
                        if (kept(i, first + j, d) && (std::isnan(sum) || (sum > 0.0 ? d > 0.0 : d < 0.0))) {
                            agree += d;
                            ++n;
                        }
                    }
                }
                result[j] = n == 0 ? b : b + agree / static_cast<double>(n);
            }
            encode_elements(dtype_, std::span(result.data(), len), out.subspan((first - offset / es) * es, len * es));
        });
    }

    bool is_stored() const noexcept override { return false; }

private:
    // Element j of model i is kept iff key > value, or key == value and j <= last.
    struct Cut {
        std::uint64_t value = 0;
        std::uint64_t last = 0;
    };

    static std::uint64_t key_of(double delta) noexcept { return std::bit_cast<std::uint64_t>(std::fabs(delta)); }

    bool kept(std::size_t model, std::uint64_t j, double delta) const noexcept {
        const std::uint64_t key = key_of(delta);
        const Cut& c = cuts_[model];
        return key > c.value || (key == c.value && j <= c.last);
    }

    template <typename Fn>
    void scan_keys(std::size_t model, Fn&& fn) const {
        SourceList pair{inputs_[0], inputs_[model + 1]};
        for_each_block(pair, dtype_, 0, numel_, [&](std::uint64_t first, Inputs in) {
            for (std::size_t j = 0; j < in[0].size(); ++j) {
                fn(first + j, key_of(in[1][j] - in[0][j]));
            }
        });
    }

    Cut select_in_memory(std::size_t model) const {
        std::vector<std::uint64_t> keys(numel_);
        scan_keys(model, [&](std::uint64_t j, std::uint64_t key) { keys[j] = key; });
        std::vector<std::uint64_t> sorted = keys;
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep_ - 1), sorted.end(),
                         std::greater<>());
        const std::uint64_t value = sorted[keep_ - 1];
        std::uint64_t above = 0;
        for (std::uint64_t k : keys) above += k > value;
        return {value, last_tied(keys, value, keep_ - above)};
    }

    static std::uint64_t last_tied(const std::vector<std::uint64_t>& keys, std::uint64_t value, std::uint64_t take) {
        std::uint64_t seen = 0;
        for (std::uint64_t j = 0; j < keys.size(); ++j) {
            if (keys[j] == value && ++seen == take) return j;
        }
        return keys.size();
    }

    // Four 16-bit radix passes find the keep_-th largest key without holding
    // the tensor; a fifth pass locates the index where ties are cut.
    Cut select_streaming(std::size_t model) const {
        std::vector<std::uint64_t> hist(std::size_t{1} << 16);
        std::uint64_t prefix = 0;
        std::uint64_t rank = keep_;
        for (int level = 0; level < 4; ++level) {
            const int shift = 48 - 16 * level;
            std::fill(hist.begin(), hist.end(), 0);
            scan_keys(model, [&](std::uint64_t, std::uint64_t key) {
                if (level == 0 || (key >> (shift + 16)) == prefix) ++hist[(key >> shift) & 0xFFFF];
            });
            std::uint64_t digit = 0;
            for (std::size_t d = hist.size(); d-- > 0;) {
                if (hist[d] >= rank) {
                    digit = d;
                    break;
                }
                rank -= hist[d];
            }
            prefix = (prefix << 16) | digit;
        }
        std::uint64_t seen = 0;
        std::uint64_t last = numel_;
        scan_keys(model, [&](std::uint64_t j, std::uint64_t key) {
            if (key == prefix && seen < rank && ++seen == rank) last = j;
        });
        return {prefix, last};
    }

    void compute_cuts() const {
        const std::size_t models = inputs_.size() - 1;
        cuts_.resize(models);
        for (std::size_t i = 0; i < models; ++i) {
            if (keep_ >= numel_) {
                cuts_[i] = {0, numel_};
            } else if (numel_ <= kTiesInMemoryLimit) {
                cuts_[i] = select_in_memory(i);
            } else {
                cuts_[i] = select_streaming(i);
            }
        }
    }

    SourceList inputs_;  // base first
    DType dtype_;
    std::uint64_t numel_;
    std::uint64_t keep_;
    mutable std::once_flag once_;
    mutable std::vector<Cut> cuts_;
};

// ---------------------------------------------------------------------------
// Norms

struct Accum {
    double sumsq = 0.0;
    double linf = 0.0;

    void add(double d) noexcept {
        const double a = std::fabs(d);
        sumsq += a * a;
        if (!(a <= linf)) linf = a;  // also propagates NaN
    }
};

DiffStats norms(const Checkpoint& a, const Checkpoint* b) {
    DiffStats stats;
    Accum global;
    for (const TensorMeta& m : a.tensors()) {
        SourceList sources{a.source(m.name)};
        if (b) sources.push_back(b->source(m.name));
        Accum acc;
        if (const std::uint64_t n = m.numel(); n > 0) {
            for (std::uint64_t first = 0; first < n; first += kStatChunkElements) {
                for_each_block(sources, m.dtype, first, std::min(kStatChunkElements, n - first),
                               [&](std::uint64_t, Inputs in) {
                                   for (std::size_t j = 0; j < in[0].size(); ++j) {
                                       acc.add(b ? in[0][j] - in[1][j] : in[0][j]);
                                   }
                               });
            }
        }
        global.sumsq += acc.sumsq;
        if (!(acc.linf <= global.linf)) global.linf = acc.linf;
        stats.tensors.push_back({m.name, std::sqrt(acc.sumsq), acc.linf});
    }
    stats.l2 = std::sqrt(global.sumsq);
    stats.linf = global.linf;
    return stats;
}

std::vector<Role> roles_for(std::string_view prefix, std::span<const Checkpoint> list) {
    std::vector<Role> roles;
    for (std::size_t i = 0; i < list.size(); ++i) {
        roles.push_back({std::string(prefix) + "[" + std::to_string(i) + "]", &list[i]});
    }
    return roles;
}

Json numbers(const std::vector<double>& v) {
    Json j = Json::array();
    for (double x : v) j.push_back(x);
    return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter validation

MergeWeights MergeWeights::uniform(std::size_t n) {
    return {std::vector<double>(n, n == 0 ? 0.0 : 1.0 / static_cast<double>(n))};
}

void MergeWeights::validate(std::size_t inputs) const {
    if (lambdas.size() != inputs) {
        throw ValidationError("expected " + std::to_string(inputs) + " merge weights, got " +
                              std::to_string(lambdas.size()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        require_unit_interval(lambdas[i], "lambda[" + std::to_string(i) + "]");
        sum += lambdas[i];
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
        throw ValidationError("merge weights must sum to 1, got " + format_number(sum));
    }
}

void ExpoParams::validate() const {
    require_finite(alpha, "alpha");
    if (alpha < 0.0) {
        throw ValidationError("alpha must be >= 0, got " + format_number(alpha));
    }
}

void ExmeParams::validate() const {
    require_unit_interval(beta, "beta");
    ExpoParams{alpha1}.validate();
    ExpoParams{alpha2}.validate();
}

void TiesParams::validate() const {
    require_finite(density, "density");
    if (!(density > 0.0 && density <= 1.0)) {
        throw ValidationError("density must lie in (0, 1], got " + format_number(density));
    }
}

void DareParams::validate() const {
    require_finite(drop_rate, "drop_rate");
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw ValidationError("drop_rate must lie in [0, 1), got " + format_number(drop_rate));
    }
}

// ---------------------------------------------------------------------------
// Operations

Checkpoint weighted_merge(std::span<const Checkpoint> inputs, const MergeWeights& weights) {
    if (inputs.size() < 2) {
        throw ValidationError("weighted merge needs at least 2 inputs, got " + std::to_string(inputs.size()));
    }
    weights.validate(inputs.size());
    const std::vector<double> l = weights.lambdas;
    auto factory = [l](const TensorMeta&) -> Kernel {
        return [l](Inputs in, std::span<double> out, std::uint64_t) {
            std::array<double, 16> small{};
            std::vector<double> large(l.size() > small.size() ? l.size() : 0);
            double* x = large.empty() ? small.data() : large.data();
            for (std::size_t j = 0; j < out.size(); ++j) {
                for (std::size_t i = 0; i < l.size(); ++i) x[i] = in[i][j];
                out[j] = weighted_sum(l, x);
            }
        };
    };
    Json params;
    params["lambdas"] = numbers(l);
    return build(roles_for("inputs", inputs), factory, "weighted", std::move(params));
}

Checkpoint extrapolate(const Checkpoint& strong, const Checkpoint& weak, const ExpoParams& p) {
    p.validate();
    const double alpha = p.alpha;
    auto factory = [alpha](const TensorMeta&) -> Kernel {
        return [alpha](Inputs in, std::span<double> out, std::uint64_t) {
            for (std::size_t j = 0; j < out.size(); ++j) {
                out[j] = in[0][j] + alpha * (in[0][j] - in[1][j]);
            }
        };
    };
    Json params;
    params["alpha"] = alpha;
    return build({{"strong", &strong}, {"weak", &weak}}, factory, "expo", std::move(params));
}

Checkpoint exme_merge(const Checkpoint& expo1, const Checkpoint& expo2, double beta) {
    require_unit_interval(beta, "beta");
    const std::array<Checkpoint, 2> pair{expo1, expo2};
    Checkpoint out = weighted_merge(pair, MergeWeights::pair(beta));
    Json prov = Json::parse(out.metadata().at(std::string(kProvenanceKey)));
    prov["method"] = "exme";
    prov["params"] = Json{{"beta", beta}};
    prov["inputs"][0]["role"] = "expo1";
    prov["inputs"][1]["role"] = "expo2";
    out.metadata()[std::string(kMethodKey)] = "exme";
    out.metadata()[std::string(kProvenanceKey)] = prov.dump();
    return out;
}

Checkpoint exme_direct(const Checkpoint& base, const Checkpoint& sft1, const Checkpoint& sft2, const ExmeParams& p) {
    p.validate();
    const auto c = exme_coefficients(p.beta, p.alpha1, p.alpha2);
    auto factory = [c](const TensorMeta&) -> Kernel {
        return [c](Inputs in, std::span<double> out, std::uint64_t) {
            for (std::size_t j = 0; j < out.size(); ++j) {
                out[j] = c.sft1 * in[1][j] + c.sft2 * in[2][j] + c.base * in[0][j];
            }
        };
    };
    Json params;
    params["alpha1"] = p.alpha1;
    params["alpha2"] = p.alpha2;
    params["beta"] = p.beta;
    return build({{"base", &base}, {"sft1", &sft1}, {"sft2", &sft2}}, factory, "exme_direct", std::move(params));
}

std::uint64_t ties_keep_count(std::uint64_t numel, double density) {
    if (numel == 0) return 0;
    // the small slack keeps products like 0.3 * 10 from rounding up to 4
    const double want = std::ceil(density * static_cast<double>(numel) - 1e-9);
    if (!(want >= 1.0)) return 1;
    if (want >= static_cast<double>(numel)) return numel;
    return static_cast<std::uint64_t>(want);
}

Checkpoint ties_merge(const Checkpoint& base, std::span<const Checkpoint> tuned, const TiesParams& p) {
    p.validate();
    if (tuned.empty()) {
        throw ValidationError("ties merge needs at least one tuned checkpoint");
    }
    std::vector<Role> roles{{"base", &base}};
    for (Role& r : roles_for("tuned", tuned)) roles.push_back(std::move(r));

    std::vector<const Checkpoint*> ptrs;
    for (const Role& r : roles) ptrs.push_back(r.ckpt);
    require_same_architecture(ptrs);

    Checkpoint out;
    for (const TensorMeta& m : base.tensors()) {
        if (!is_floating(m.dtype)) {
            require_identical_buffers(roles, m);
            out.add_tensor(m.name, m.dtype, m.shape, base.source(m.name));
            continue;
        }
        SourceList sources;
        for (const Role& r : roles) sources.push_back(r.ckpt->source(m.name));
        const std::uint64_t n = m.numel();
        out.add_tensor(m.name, m.dtype, m.shape,
                       std::make_shared<TiesSource>(std::move(sources), m.dtype, n, ties_keep_count(n, p.density)));
    }
    Json params;
    params["density"] = p.density;
    out.metadata() = output_metadata(roles, "ties", std::move(params));
    return out;
}

bool dare_keeps(std::uint64_t seed, std::string_view tensor, std::size_t model, std::uint64_t element,
                double drop_rate) noexcept {
    return dare_keep(dare_stream(seed, tensor, model), element, drop_rate);
}

Checkpoint dare_merge(const Checkpoint& base, std::span<const Checkpoint> tuned, const MergeWeights& weights,
                      const DareParams& p) {
    p.validate();
    if (tuned.empty()) {
        throw ValidationError("dare merge needs at least one tuned checkpoint");
    }
    weights.validate(tuned.size());
    const std::vector<double> l = weights.lambdas;
    const double drop = p.drop_rate;
    const double scale = 1.0 / (1.0 - drop);
    const std::uint64_t seed = p.seed;

    auto factory = [=](const TensorMeta& m) -> Kernel {
        std::vector<std::uint64_t> streams;
        for (std::size_t i = 0; i < l.size(); ++i) streams.push_back(dare_stream(seed, m.name, i));
        return [=](Inputs in, std::span<double> out, std::uint64_t first) {
            std::vector<double> x(l.size());
            for (std::size_t j = 0; j < out.size(); ++j) {
                const double b = in[0][j];
                for (std::size_t i = 0; i < l.size(); ++i) {
                    const bool keep = dare_keep(streams[i], first + j, drop);
                    x[i] = b + (keep ? (in[i + 1][j] - b) * scale : 0.0);
                }
                out[j] = weighted_sum(l, x.data());
            }
        };
    };
    std::vector<Role> roles{{"base", &base}};
    for (Role& r : roles_for("tuned", tuned)) roles.push_back(std::move(r));
    Json params;
    params["drop_rate"] = drop;
    params["seed"] = seed;
    params["lambdas"] = numbers(l);
    return build(roles, factory, "dare", std::move(params));
}

DiffStats checkpoint_diff_norm(const Checkpoint& a, const Checkpoint& b) {
    const std::array<const Checkpoint*, 2> pair{&a, &b};
    require_same_architecture(pair);
    return norms(a, &b);
}

DiffStats checkpoint_norms(const Checkpoint& ckpt) { return norms(ckpt, nullptr); }

std::map<std::string, std::uint64_t> nonfinite_counts(const Checkpoint& ckpt) {
    std::map<std::string, std::uint64_t> counts;
    const std::uint64_t chunk = std::uint64_t{4} << 20;
    std::vector<std::byte> buf;
    for (const TensorMeta& m : ckpt.tensors()) {
        if (!is_floating(m.dtype)) continue;
        std::uint64_t count = 0;
        const auto& src = ckpt.source(m.name);
        const std::uint64_t step = src->supports_ranged_reads() ? chunk : std::max<std::uint64_t>(m.nbytes(), 1);
        for (std::uint64_t off = 0; off < m.nbytes(); off += step) {
            buf.resize(static_cast<std::size_t>(std::min(step, m.nbytes() - off)));
            src->read(off, buf);
            count += count_nonfinite(m.dtype, buf);
        }
        if (count) counts[m.name] = count;
    }
    return counts;
}

Checkpoint materialize(const Checkpoint& ckpt) {
    Checkpoint out;
    for (const TensorMeta& m : ckpt.tensors()) {
        out.add_tensor(m.name, m.dtype, m.shape, ckpt.read_bytes(m.name));
    }
    out.metadata() = ckpt.metadata();
    if (ckpt.source_path()) out.set_source_path(*ckpt.source_path());
    return out;
}

}  // namespace exmerge
