// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// File-based stages: prepare -> stats -> merge -> eval, plus the ablation
// sweep. Each stage reads the previous stage's files from output_dir and
// writes its own; rerunning a stage with unchanged inputs rewrites
// byte-identical files.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rcpmerge/eval.hpp"
#include "rcpmerge/model.hpp"
#include "rcpmerge/recipe.hpp"
#include "rcpmerge/stats.hpp"

namespace rcpmerge {

struct TrainSpec {
    int steps = 200;
    double lr = 0.05;
};

/// Merge method and coefficients; checkpoint paths come from output_dir.
struct PipelineRecipe {
    MergeMethod method = MergeMethod::rcp;
    double lambda_r = 0.3;
    double lambda_t = 1.0;
    double lambda = 0.3;
    double trim_keep = 0.1;
    double drop_rate = 0.9;
    TiesReduce ties_reduce = TiesReduce::mean;
    std::uint64_t seed = 0;
    bool deterministic = true;
    Ablation ablation = Ablation::none;
    bool abs_sensitivity = false;
};

/**
 * @brief One JSON document describing a whole run.
 *
 * Corpus roles: "base", "domain_1".."domain_T", "reasoning", "eval_<name>",
 * and optional calibration sets "calib_domain_<t>" / "calib_reasoning"
 * (default: the training corpus of the same model). Training keys:
 * "base", "reasoning", "domain" (all domains) or "domain_<t>".
 */
struct PipelineConfig {
    ModelConfig model;
    std::map<std::string, std::filesystem::path> corpora;
    std::map<std::string, TrainSpec> training;
    PipelineRecipe recipe;
    EvalOptions eval;
    std::vector<double> lambda_grid = {0.0, 0.1, 0.3, 1.0, 10.0};
    std::filesystem::path output_dir;

    int domain_count() const;
    TrainSpec training_for(const std::string& role) const;
    /// Throws ValidationError naming the role if it is not configured.
    const std::filesystem::path& corpus_path(const std::string& role) const;
    std::vector<std::string> eval_roles() const;
    /// Roles, numbering, ranges, and existence of every corpus file.
    void validate() const;
    std::string to_json() const;
};

PipelineConfig parse_pipeline_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Command-line overrides, applied on top of the file.
struct Overrides {
    std::optional<double> lambda_r;
    std::optional<Ablation> without;
    bool abs_sensitivity = false;
    bool deterministic = false;
    std::optional<std::uint64_t> seed;  ///< model init and merge seed
};

void apply_overrides(PipelineConfig& config, const Overrides& overrides);

/// File layout under output_dir.
struct ArtifactPaths {
    std::filesystem::path dir;

    std::filesystem::path base() const { return dir / "base.safetensors"; }
    std::filesystem::path reasoning() const { return dir / "reasoning.safetensors"; }
    std::filesystem::path domain(int t) const;
    std::filesystem::path manifest() const { return dir / "manifest.json"; }
    std::filesystem::path fim() const { return dir / "stats" / "fim.safetensors"; }
    std::filesystem::path penalty(int t) const;
    std::filesystem::path votes(int t) const;
    std::filesystem::path mask(int t) const;
    std::filesystem::path merged() const { return dir / "merged.safetensors"; }
    std::filesystem::path merge_recipe() const { return dir / "merge_recipe.json"; }
    std::filesystem::path ablate_dir() const { return dir / "ablate"; }
};

struct StatsReport {
    double lambda_r = 0.0;
    std::vector<std::uint64_t> accepted;  ///< per domain
    std::uint64_t parameters = 0;
};

struct AblationRow {
    std::string label;
    double lambda_r = 0.0;
    Ablation ablation = Ablation::none;
    std::uint64_t accepted = 0;  ///< summed over domains
    std::uint64_t parameters = 0;
    std::map<std::string, double> ppl;  ///< eval role -> perplexity

    double accepted_fraction() const;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<std::string> eval_roles;

    std::string to_table() const;
    std::string to_csv() const;
    std::string to_json() const;
};

void cmd_prepare(const PipelineConfig& config, std::ostream& log);
StatsReport cmd_stats(const PipelineConfig& config, std::ostream& log);
MergeSummary cmd_merge(const PipelineConfig& config, std::ostream& log);
std::vector<MetricsReport> cmd_eval(const PipelineConfig& config, std::ostream& log, bool emit_csv = false);
AblationTable cmd_ablate(const PipelineConfig& config, std::ostream& log, bool emit_csv = false);

/// The recipe cmd_merge runs for `config`, pointing at output_dir artifacts.
/// `masks` replaces the per-domain mask files of the rcp method.
MergeRecipe pipeline_merge_recipe(const PipelineConfig& config, const std::vector<std::filesystem::path>& masks = {});

}  // namespace rcpmerge
