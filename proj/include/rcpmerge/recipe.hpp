// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rcpmerge/checkpoint.hpp"
#include "rcpmerge/merge.hpp"

namespace rcpmerge {

enum class MergeMethod : std::uint8_t { rcp, linear, task_arithmetic, ties, dare_linear, dare_ties };

std::string_view method_name(MergeMethod method);
MergeMethod parse_method(std::string_view name);

struct RecipeDomain {
    std::filesystem::path path;
    std::optional<double> lambda_t;  ///< rcp only, default 1.0
    std::optional<std::filesystem::path> mask_path;  ///< rcp only, required
};

/**
 * @brief Declarative merge job, one JSON document.
 *
 * {
 *   "method": "rcp",
 *   "base_path": "base.safetensors",
 *   "reasoning_path": "reasoning.safetensors",
 *   "domains": [{"path": "domain_1.safetensors", "lambda_t": 1.0, "mask_path": "mask_domain_1.safetensors"}],
 *   "lambda_r": 0.3,
 *   "seed": 0,
 *   "deterministic": true
 * }
 *
 * Baselines take "lambda" (task_arithmetic, ties, dare_*), "trim_keep"
 * (ties, dare_ties), "drop_rate" (dare_*), and optionally "ties_reduce"
 * ("mean" | "sum"). A field that the method does not use is an error.
 * Relative paths resolve against the recipe file's directory.
 */
struct MergeRecipe {
    MergeMethod method = MergeMethod::rcp;
    std::filesystem::path base_path;
    std::filesystem::path reasoning_path;
    std::vector<RecipeDomain> domains;
    std::optional<double> lambda_r;
    std::optional<double> lambda;
    std::optional<double> trim_keep;
    std::optional<double> drop_rate;
    std::optional<TiesReduce> ties_reduce;
    std::uint64_t seed = 0;
    bool deterministic = true;

    /// Throws ValidationError when a required field is missing, an unused one
    /// is present, or a value is out of range.
    void validate() const;
};

MergeRecipe parse_recipe(const std::string& json_text, const std::filesystem::path& base_dir = {});
MergeRecipe load_recipe(const std::filesystem::path& path);
std::string recipe_to_json(const MergeRecipe& recipe);

struct MergeSummary {
    std::uint64_t parameters = 0;
    std::uint64_t accepted = 0;        ///< rcp: coordinates with at least one accepted update
    std::uint64_t sign_conflicts = 0;  ///< rcp: accepted updates disagreeing in sign
    Metadata metadata;
};

/**
 * Runs the recipe tensor by tensor: at any moment only one tensor from each
 * input file is in memory. The output header copies the base checkpoint's
 * names, shapes and dtypes; metadata records the method, every
 * coefficient, and the SHA-256 of every input file.
 */
MergeSummary run_merge(const MergeRecipe& recipe, const std::filesystem::path& out_path, LoadOptions load = {});

}  // namespace rcpmerge
