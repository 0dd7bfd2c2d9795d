// SPDX-License-Identifier: Apache-2.0
//
// Merge recipes: a JSON description of one merge-core operation.
//
//   {
//     "method": "weighted" | "expo" | "exme" | "exme_direct" | "ties" | "dare",
//     "inputs": { role: input, ... },     weighted also accepts a bare array
//     "params": { ... },
//     "output": "path"                    top-level recipes only
//   }
//
// Roles and params per method:
//   weighted     inputs []                  lambdas (default uniform)
//   expo         strong, weak               alpha
//   exme         expo1, expo2               beta (weight of expo1)
//   exme_direct  base, sft1, sft2           beta, alpha1, alpha2
//   ties         base, tuned []             density (default 0.5)
//   dare         base, tuned []             drop_rate (0.5), seed (0), lambdas (uniform)
//
// An input is a checkpoint path (relative paths resolve against the recipe's
// directory) or a nested recipe without "output", evaluated lazily.
// Unknown keys are rejected.

#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <string>

#include "exmerge/checkpoint.hpp"
#include "exmerge/errors.hpp"
#include "json.hpp"

namespace exmerge {

using Recipe = nlohmann::ordered_json;

/// Opened input checkpoints keyed by path, so repeated builds share one
/// memoised content digest per file.
class CheckpointCache {
public:
    Checkpoint open(const std::filesystem::path& path);

private:
    std::mutex mutex_;
    std::map<std::filesystem::path, Checkpoint> open_;
};

/// Throws ValidationError describing the first problem found.
void validate_recipe(const Recipe& recipe);

/// Rewrites every relative input path (and "output") against `base_dir`.
Recipe resolve_recipe_paths(Recipe recipe, const std::filesystem::path& base_dir);

/// Builds the lazily evaluated checkpoint a recipe describes. Paths are used as
/// given; call resolve_recipe_paths first for recipes read from a file.
Checkpoint build_from_recipe(const Recipe& recipe, CheckpointCache* cache = nullptr);

/// Parses a recipe file and resolves its paths.
Recipe load_recipe(const std::filesystem::path& path);

}  // namespace exmerge
