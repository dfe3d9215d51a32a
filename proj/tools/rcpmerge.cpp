// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// rcpmerge {prepare|stats|merge|eval|ablate} --config <path> [options]
//
// Exit codes: 0 success, 2 validation failure, 3 I/O failure, 4 non-finite
// values.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "rcpmerge/error.hpp"
#include "rcpmerge/pipeline.hpp"
#include "rcpmerge/recipe.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Flags {
    std::string config;
    std::string recipe;
    std::string out;
    std::optional<double> lambda_r;
    std::string preset;
    std::string without;
    bool abs_sensitivity = false;
    bool deterministic = false;
    std::optional<std::uint64_t> seed;
    bool emit_csv = false;
    bool print_config = false;
    bool allow_nonfinite = false;
    std::string ties_reduce;
    std::vector<double> lambda_grid;
};

rcpmerge::PipelineConfig effective_config(const Flags& f) {
    if (f.config.empty()) throw rcpmerge::ValidationError("--config is required");
    auto config = rcpmerge::load_pipeline_config(f.config);
    rcpmerge::Overrides o;
    o.lambda_r = f.lambda_r;
    if (!f.preset.empty()) {
        if (f.preset != "small-model")
            throw rcpmerge::ValidationError(fmt::format("unknown preset '{}' (expected small-model)", f.preset));
        if (!o.lambda_r) o.lambda_r = 0.7;
    }
    if (!f.without.empty()) o.without = rcpmerge::parse_ablation(f.without);
    o.abs_sensitivity = f.abs_sensitivity;
    o.deterministic = f.deterministic;
    o.seed = f.seed;
    if (!f.lambda_grid.empty()) config.lambda_grid = f.lambda_grid;
    rcpmerge::apply_overrides(config, o);
    if (f.print_config) std::cout << config.to_json();
    return config;
}

std::optional<rcpmerge::TiesReduce> parse_reduce(const std::string& s) {
    if (s.empty()) return std::nullopt;
    if (s == "mean") return rcpmerge::TiesReduce::mean;
    if (s == "sum") return rcpmerge::TiesReduce::sum;
    throw rcpmerge::ValidationError(fmt::format("--ties-reduce must be mean or sum (got '{}')", s));
}

int run(const std::string& command, const Flags& f) {
    const auto reduce = parse_reduce(f.ties_reduce);
    if (command == "merge" && !f.recipe.empty()) {
        if (!f.config.empty()) throw rcpmerge::ValidationError("merge takes either --recipe or --config, not both");
        if (f.out.empty()) throw rcpmerge::ValidationError("merge --recipe requires --out");
        auto recipe = rcpmerge::load_recipe(f.recipe);
        if (reduce) recipe.ties_reduce = reduce;
        if (f.print_config) std::cout << rcpmerge::recipe_to_json(recipe) << "\n";
        const auto summary = rcpmerge::run_merge(recipe, f.out, {f.allow_nonfinite});
        std::cout << fmt::format("merged with {}: {} parameters", rcpmerge::method_name(recipe.method),
                                 summary.parameters);
        if (recipe.method == rcpmerge::MergeMethod::rcp)
            std::cout << fmt::format(", {} coordinates updated, {} sign conflicts", summary.accepted,
                                     summary.sign_conflicts);
        std::cout << fmt::format("\nwrote {}\n", f.out);
        return 0;
    }
    auto config = effective_config(f);
    if (reduce) config.recipe.ties_reduce = *reduce;
    if (command == "prepare") rcpmerge::cmd_prepare(config, std::cout);
    else if (command == "stats") rcpmerge::cmd_stats(config, std::cout);
    else if (command == "merge") rcpmerge::cmd_merge(config, std::cout);
    else if (command == "eval") rcpmerge::cmd_eval(config, std::cout, f.emit_csv);
    else if (command == "ablate") rcpmerge::cmd_ablate(config, std::cout, f.emit_csv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RCP-Merging checkpoint merge engine"};
    app.require_subcommand(1, 1);
    Flags f;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "Pipeline config (JSON)");
        sub->add_option("--lambda-r", f.lambda_r, "Reasoning-preservation coefficient (default 0.3)");
        sub->add_option("--preset", f.preset, "small-model: lambda_r = 0.7 unless --lambda-r is given");
        sub->add_option("--without", f.without, "Ablation: sensitivity | preservation");
        sub->add_flag("--abs-sensitivity", f.abs_sensitivity, "Use |g * theta| as the sensitivity");
        sub->add_flag("--deterministic", f.deterministic, "Sequential, corpus-ordered accumulation");
        sub->add_option("--seed", f.seed, "Model init and merge seed");
        sub->add_flag("--emit-csv", f.emit_csv, "Also write CSV reports");
        sub->add_flag("--print-effective-config", f.print_config, "Echo the config after overrides");
    };
    auto* prepare = app.add_subcommand("prepare", "Train base, domain and reasoning toy models");
    auto* stats = app.add_subcommand("stats", "Fisher diagonal, penalties, votes and masks");
    auto* merge = app.add_subcommand("merge", "Merge checkpoints");
    auto* eval = app.add_subcommand("eval", "Perplexity, Distinct-N and generation length");
    auto* ablate = app.add_subcommand("ablate", "lambda_r sweep and ablation rows");
    for (auto* sub : {prepare, stats, merge, eval, ablate}) add_common(sub);
    merge->add_option("--recipe", f.recipe, "Merge recipe (JSON); replaces --config");
    merge->add_option("--out", f.out, "Output checkpoint for --recipe");
    merge->add_option("--ties-reduce", f.ties_reduce, "ties / dare_ties: mean (default) or sum of agreeing deltas");
    merge->add_flag("--allow-nonfinite", f.allow_nonfinite, "Accept NaN/Inf in input checkpoints");
    ablate->add_option("--lambda-grid", f.lambda_grid, "Override the lambda_r grid")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return run(command, f);
    } catch (const rcpmerge::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const rcpmerge::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const rcpmerge::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return EXIT_FAILURE;
    }
}
