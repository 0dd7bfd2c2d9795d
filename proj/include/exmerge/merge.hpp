// SPDX-License-Identifier: Apache-2.0
//
// Parameter-space algebra over whole checkpoints.
//
// Every operation checks that its inputs share one architecture signature and
// returns a lazily evaluated checkpoint: floating tensors are computed block by
// block when read, so writing a merge of multi-gigabyte inputs only keeps a few
// blocks resident. Arithmetic runs in double precision on the decoded inputs
// and each output element is rounded once (nearest-even) to the storage dtype
// of the first input. Integer and bool tensors are buffers: they must be
// byte-identical across inputs and are copied from the first one.
//
// Outputs carry provenance in their metadata under "exmerge.method" and
// "exmerge.provenance" (a JSON document with the hyperparameters and the
// content digest of each stored input).

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exmerge/checkpoint.hpp"

namespace exmerge {

inline constexpr std::string_view kMethodKey = "exmerge.method";
inline constexpr std::string_view kProvenanceKey = "exmerge.provenance";

/// One coefficient per input. Valid weights are finite, lie in [0, 1] and sum
/// to 1 within 1e-9.
struct MergeWeights {
    std::vector<double> lambdas;

    static MergeWeights pair(double lambda) { return {{lambda, 1.0 - lambda}}; }
    static MergeWeights uniform(std::size_t n);

    void validate(std::size_t inputs) const;
};

struct ExpoParams {
    double alpha = 0.0;  // finite, >= 0

    void validate() const;
};

/// beta weights the first extrapolated model; alpha1/alpha2 extrapolate sft1/sft2.
struct ExmeParams {
    double beta = 0.5;
    double alpha1 = 0.0;
    double alpha2 = 0.0;

    void validate() const;
};

struct TiesParams {
    double density = 0.5;  // fraction of largest-magnitude deltas kept, (0, 1]

    void validate() const;
};

struct DareParams {
    double drop_rate = 0.5;  // [0, 1)
    std::uint64_t seed = 0;

    void validate() const;
};

/// sum_i lambda_i * T_i
Checkpoint weighted_merge(std::span<const Checkpoint> inputs, const MergeWeights& weights);

/// strong + alpha * (strong - weak)
Checkpoint extrapolate(const Checkpoint& strong, const Checkpoint& weak, const ExpoParams& params);

/// beta * expo1 + (1 - beta) * expo2, via weighted_merge.
Checkpoint exme_merge(const Checkpoint& expo1, const Checkpoint& expo2, double beta);

/// Closed form of extrapolating both SFT models against `base` and merging the
/// results with beta, evaluated in one pass (see exme_coefficients).
Checkpoint exme_direct(const Checkpoint& base, const Checkpoint& sft1, const Checkpoint& sft2,
                       const ExmeParams& params);

/// Trim / elect sign / disjoint mean over the deltas tuned_i - base, per tensor.
Checkpoint ties_merge(const Checkpoint& base, std::span<const Checkpoint> tuned, const TiesParams& params);

/// base + sum_i lambda_i * delta'_i where delta'_i drops each element of
/// tuned_i - base with probability drop_rate and rescales survivors by
/// 1 / (1 - drop_rate).
Checkpoint dare_merge(const Checkpoint& base, std::span<const Checkpoint> tuned, const MergeWeights& weights,
                      const DareParams& params);

template <typename T>
struct ExmeCoefficients {
    T sft1;
    T sft2;
    T base;
};

/// beta(1+a1), (1-beta)(1+a2), -(beta a1 + (1-beta) a2). They sum to exactly 1
/// in exact arithmetic; templated so tests can evaluate it over rationals.
template <typename T>
constexpr ExmeCoefficients<T> exme_coefficients(const T& beta, const T& alpha1, const T& alpha2) {
    const T one(1);
    return {beta * (one + alpha1), (one - beta) * (one + alpha2), -(beta * alpha1 + (one - beta) * alpha2)};
}

/// Number of delta entries TIES keeps in a tensor of `numel` elements:
/// ceil(density * numel), at least one for nonempty tensors.
std::uint64_t ties_keep_count(std::uint64_t numel, double density);

/// Whether DARE keeps element `element` of model `model`'s delta for `tensor`.
/// Counter-based, so the result does not depend on evaluation order.
bool dare_keeps(std::uint64_t seed, std::string_view tensor, std::size_t model, std::uint64_t element,
                double drop_rate) noexcept;

struct TensorDiff {
    std::string name;
    double l2 = 0.0;
    double linf = 0.0;
};

struct DiffStats {
    std::vector<TensorDiff> tensors;  // checkpoint order of `a`
    double l2 = 0.0;
    double linf = 0.0;
};

/// L2 and L-infinity norms of a - b per tensor and over the whole checkpoint.
DiffStats checkpoint_diff_norm(const Checkpoint& a, const Checkpoint& b);

/// L2 and L-infinity norms of each tensor's values.
DiffStats checkpoint_norms(const Checkpoint& ckpt);

/// NaN/Inf counts of floating tensors that contain any.
std::map<std::string, std::uint64_t> nonfinite_counts(const Checkpoint& ckpt);

/// Evaluates every tensor into memory.
Checkpoint materialize(const Checkpoint& ckpt);

}  // namespace exmerge
