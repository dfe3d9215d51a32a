// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/recipe.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "rcpmerge/error.hpp"
#include "rcpmerge/hash.hpp"
#include "rcpmerge/model.hpp"

namespace rcpmerge {
namespace fs = std::filesystem;
using nlohmann::json;

std::string_view method_name(MergeMethod method) {
    switch (method) {
    case MergeMethod::rcp: return "rcp";
    case MergeMethod::linear: return "linear";
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::ties: return "ties";
    case MergeMethod::dare_linear: return "dare_linear";
    case MergeMethod::dare_ties: return "dare_ties";
    }
    return "?";
}

MergeMethod parse_method(std::string_view name) {
    for (auto m : {MergeMethod::rcp, MergeMethod::linear, MergeMethod::task_arithmetic, MergeMethod::ties,
                   MergeMethod::dare_linear, MergeMethod::dare_ties})
        if (method_name(m) == name) return m;
    throw ValidationError(fmt::format("unknown merge method '{}'", name));
}

namespace {

bool uses_lambda(MergeMethod m) {
    return m != MergeMethod::rcp && m != MergeMethod::linear;
}
bool uses_trim(MergeMethod m) {
    return m == MergeMethod::ties || m == MergeMethod::dare_ties;
}
bool uses_drop(MergeMethod m) {
    return m == MergeMethod::dare_linear || m == MergeMethod::dare_ties;
}

void require_field(bool present, bool needed, std::string_view field, MergeMethod m) {
    if (needed && !present)
        throw ValidationError(fmt::format("recipe: method '{}' requires '{}'", method_name(m), field));
    if (!needed && present)
        throw ValidationError(fmt::format("recipe: '{}' is not used by method '{}'", field, method_name(m)));
}

void require_finite(std::optional<double> v, std::string_view field) {
    if (v && !std::isfinite(*v)) throw ValidationError(fmt::format("recipe: '{}' must be finite", field));
}

fs::path resolve(const fs::path& base_dir, const std::string& p) {
    fs::path path(p);
    if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
    return path;
}

}  // namespace

void MergeRecipe::validate() const {
    if (base_path.empty()) throw ValidationError("recipe: 'base_path' is required");
    if (reasoning_path.empty()) throw ValidationError("recipe: 'reasoning_path' is required");
    if (domains.empty()) throw ValidationError("recipe: 'domains' must list at least one domain model");
    const bool rcp = method == MergeMethod::rcp;
    require_field(lambda_r.has_value(), rcp && lambda_r.has_value(), "lambda_r", method);
    require_field(lambda.has_value(), uses_lambda(method), "lambda", method);
    require_field(trim_keep.has_value(), uses_trim(method), "trim_keep", method);
    require_field(drop_rate.has_value(), uses_drop(method), "drop_rate", method);
    if (ties_reduce && !uses_trim(method))
        throw ValidationError(fmt::format("recipe: 'ties_reduce' is not used by method '{}'", method_name(method)));
    for (std::size_t t = 0; t < domains.size(); ++t) {
        const auto& d = domains[t];
        if (d.path.empty()) throw ValidationError(fmt::format("recipe: domain {} has no 'path'", t + 1));
        require_field(d.mask_path.has_value(), rcp, "mask_path", method);
        require_field(d.lambda_t.has_value(), rcp && d.lambda_t.has_value(), "lambda_t", method);
        require_finite(d.lambda_t, "lambda_t");
    }
    require_finite(lambda_r, "lambda_r");
    require_finite(lambda, "lambda");
    if (lambda_r && *lambda_r < 0.0) throw ValidationError("recipe: 'lambda_r' must be >= 0");
    if (trim_keep) check_trim_keep(*trim_keep);
    if (drop_rate) check_drop_rate(*drop_rate);
}

MergeRecipe parse_recipe(const std::string& json_text, const fs::path& base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ValidationError(fmt::format("recipe: invalid JSON: {}", e.what()));
    }
    if (!j.is_object()) throw ValidationError("recipe: top level must be an object");

    MergeRecipe r;
    try {
        if (!j.contains("method")) throw ValidationError("recipe: 'method' is required");
        r.method = parse_method(j.at("method").get<std::string>());
        for (auto& [key, value] : j.items()) {
            if (key == "method") continue;
            if (key == "base_path") r.base_path = resolve(base_dir, value.get<std::string>());
            else if (key == "reasoning_path") r.reasoning_path = resolve(base_dir, value.get<std::string>());
            else if (key == "lambda_r") r.lambda_r = value.get<double>();
            else if (key == "lambda") r.lambda = value.get<double>();
            else if (key == "trim_keep") r.trim_keep = value.get<double>();
            else if (key == "drop_rate") r.drop_rate = value.get<double>();
            else if (key == "seed") r.seed = value.get<std::uint64_t>();
            else if (key == "deterministic") r.deterministic = value.get<bool>();
            else if (key == "ties_reduce") {
                const auto s = value.get<std::string>();
                if (s == "mean") r.ties_reduce = TiesReduce::mean;
                else if (s == "sum") r.ties_reduce = TiesReduce::sum;
                else throw ValidationError(fmt::format("recipe: ties_reduce must be 'mean' or 'sum' (got '{}')", s));
            } else if (key == "domains") {
                if (!value.is_array()) throw ValidationError("recipe: 'domains' must be an array");
                for (const auto& d : value) {
                    RecipeDomain dom;
                    for (auto& [dk, dv] : d.items()) {
                        if (dk == "path") dom.path = resolve(base_dir, dv.get<std::string>());
                        else if (dk == "lambda_t") dom.lambda_t = dv.get<double>();
                        else if (dk == "mask_path") dom.mask_path = resolve(base_dir, dv.get<std::string>());
                        else throw ValidationError(fmt::format("recipe: unknown domain field '{}'", dk));
                    }
                    r.domains.push_back(std::move(dom));
                }
            } else {
                throw ValidationError(fmt::format("recipe: unknown field '{}'", key));
            }
        }
    } catch (const json::exception& e) {
        throw ValidationError(fmt::format("recipe: {}", e.what()));
    }
    r.validate();
    return r;
}

MergeRecipe load_recipe(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open recipe '{}'", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_recipe(ss.str(), path.parent_path());
}

std::string recipe_to_json(const MergeRecipe& r) {
    json j;
    j["method"] = method_name(r.method);
    j["base_path"] = r.base_path.string();
    j["reasoning_path"] = r.reasoning_path.string();
    j["domains"] = json::array();
    for (const auto& d : r.domains) {
        json dj = {{"path", d.path.string()}};
        if (d.lambda_t) dj["lambda_t"] = *d.lambda_t;
        if (d.mask_path) dj["mask_path"] = d.mask_path->string();
        j["domains"].push_back(dj);
    }
    if (r.lambda_r) j["lambda_r"] = *r.lambda_r;
    if (r.lambda) j["lambda"] = *r.lambda;
    if (r.trim_keep) j["trim_keep"] = *r.trim_keep;
    if (r.drop_rate) j["drop_rate"] = *r.drop_rate;
    if (r.ties_reduce) j["ties_reduce"] = *r.ties_reduce == TiesReduce::sum ? "sum" : "mean";
    j["seed"] = r.seed;
    j["deterministic"] = r.deterministic;
    return j.dump(2);
}

namespace {

void require_header_match(const CheckpointReader& ref, const CheckpointReader& other, std::string_view what) {
    const auto& a = ref.tensors();
    const auto& b = other.tensors();
    std::vector<std::string> unmatched, shapes;
    std::set<std::string> names_b;
    for (const auto& info : b) names_b.insert(info.name);
    for (const auto& info : a) {
        const auto* o = other.find(info.name);
        if (!o) unmatched.push_back(info.name);
        else if (o->shape != info.shape)
            shapes.push_back(fmt::format("'{}': {} vs {}", info.name, shape_string(info.shape), shape_string(o->shape)));
        names_b.erase(info.name);
    }
    unmatched.insert(unmatched.end(), names_b.begin(), names_b.end());
    if (unmatched.empty() && shapes.empty()) return;
    std::string msg = fmt::format("{}: checkpoint '{}' does not match base '{}'", what, other.path().string(),
                                  ref.path().string());
    if (!unmatched.empty()) msg += fmt::format("; unmatched names: {}", fmt::join(unmatched, ", "));
    if (!shapes.empty()) msg += fmt::format("; shape mismatch: {}", fmt::join(shapes, "; "));
    throw ValidationError(msg);
}

std::string num(double v) {
    return fmt::format("{}", v);
}

}  // namespace

MergeSummary run_merge(const MergeRecipe& recipe, const fs::path& out_path, LoadOptions load) {
    recipe.validate();
    const auto method = recipe.method;
    const bool rcp = method == MergeMethod::rcp;

    CheckpointReader base(recipe.base_path, load);
    CheckpointReader reasoning(recipe.reasoning_path, load);
    require_header_match(base, reasoning, "reasoning model");
    std::vector<std::unique_ptr<CheckpointReader>> domains, masks;
    for (std::size_t t = 0; t < recipe.domains.size(); ++t) {
        domains.push_back(std::make_unique<CheckpointReader>(recipe.domains[t].path, load));
        require_header_match(base, *domains.back(), fmt::format("domain model {}", t + 1));
        if (rcp) {
            masks.push_back(std::make_unique<CheckpointReader>(*recipe.domains[t].mask_path, load));
            require_header_match(base, *masks.back(), fmt::format("mask {}", t + 1));
        }
    }

    MergeSummary summary;
    Metadata& meta = summary.metadata;
    meta["method"] = std::string(method_name(method));
    meta["input.base.sha256"] = sha256_file(recipe.base_path);
    meta["input.reasoning.sha256"] = sha256_file(recipe.reasoning_path);
    for (std::size_t t = 0; t < recipe.domains.size(); ++t) {
        const auto id = t + 1;
        meta[fmt::format("input.domain_{}.sha256", id)] = sha256_file(recipe.domains[t].path);
        if (rcp) {
            meta[fmt::format("input.mask_{}.sha256", id)] = sha256_file(*recipe.domains[t].mask_path);
            meta[fmt::format("lambda_t.{}", id)] = num(recipe.domains[t].lambda_t.value_or(1.0));
            const auto& mm = masks[t]->metadata();
            if (auto it = mm.find("lambda_r"); it != mm.end()) meta[fmt::format("mask_{}.lambda_r", id)] = it->second;
            if (auto it = mm.find("ablation"); it != mm.end()) meta[fmt::format("mask_{}.ablation", id)] = it->second;
        }
    }
    if (recipe.lambda_r) meta["lambda_r"] = num(*recipe.lambda_r);
    if (recipe.lambda) meta["lambda"] = num(*recipe.lambda);
    if (recipe.trim_keep) meta["trim_keep"] = num(*recipe.trim_keep);
    if (recipe.drop_rate) meta["drop_rate"] = num(*recipe.drop_rate);
    if (uses_trim(method)) meta["ties_reduce"] = recipe.ties_reduce.value_or(TiesReduce::mean) == TiesReduce::sum ? "sum" : "mean";
    meta["seed"] = std::to_string(recipe.seed);
    if (auto it = base.metadata().find(kModelConfigKey); it != base.metadata().end()) meta[kModelConfigKey] = it->second;

    std::vector<TensorSpec> specs;
    for (const auto& info : base.tensors()) specs.push_back({info.name, info.dtype, info.shape});
    CheckpointWriter writer(out_path, specs, meta);

    const double lambda = recipe.lambda.value_or(1.0);
    const auto reduce = recipe.ties_reduce.value_or(TiesReduce::mean);
    for (const auto& info : base.tensors()) {
        const auto pre = base.read(info.name).to_f64();
        const auto r = reasoning.read(info.name).to_f64();
        // Task vectors at float64: reasoning first, then domains in recipe order.
        std::vector<std::vector<double>> deltas;
        std::vector<std::vector<double>> fine_tuned;
        deltas.emplace_back(r.size());
        for (std::size_t i = 0; i < r.size(); ++i) deltas[0][i] = r[i] - pre[i];
        for (auto& d : domains) {
            fine_tuned.push_back(d->read(info.name).to_f64());
            std::vector<double> delta(pre.size());
            for (std::size_t i = 0; i < pre.size(); ++i) delta[i] = fine_tuned.back()[i] - pre[i];
            deltas.push_back(std::move(delta));
        }

        std::vector<double> merged;
        switch (method) {
        case MergeMethod::rcp: {
            std::vector<std::vector<double>> mask_values;
            std::vector<RcpTerm> terms;
            for (auto& m : masks) mask_values.push_back(m->read(info.name).to_f64());
            for (std::size_t t = 0; t < domains.size(); ++t)
                terms.push_back({deltas[t + 1], mask_values[t], recipe.domains[t].lambda_t.value_or(1.0)});
            merged = rcp_merge_values(r, terms, &summary.sign_conflicts);
            for (std::size_t i = 0; i < merged.size(); ++i) {
                bool any = false;
                for (const auto& mv : mask_values) any = any || mv[i] == 1.0;
                summary.accepted += any ? 1 : 0;
            }
            break;
        }
        case MergeMethod::linear: {
            merged = r;
            for (const auto& ft : fine_tuned)
                for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += ft[i];
            const double n = static_cast<double>(1 + fine_tuned.size());
            for (auto& x : merged) x /= n;
            break;
        }
        case MergeMethod::task_arithmetic:
        case MergeMethod::dare_linear: {
            if (method == MergeMethod::dare_linear)
                for (std::size_t k = 0; k < deltas.size(); ++k)
                    deltas[k] = dare_values(deltas[k], *recipe.drop_rate, recipe.seed, info.name, k);
            merged = pre;
            std::vector<double> sum(pre.size(), 0.0);
            for (const auto& d : deltas)
                for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += d[i];
            for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += lambda * sum[i];
            break;
        }
        case MergeMethod::ties:
        case MergeMethod::dare_ties: {
            std::vector<std::vector<double>> trimmed;
            for (std::size_t k = 0; k < deltas.size(); ++k) {
                auto d = method == MergeMethod::dare_ties
                             ? dare_values(deltas[k], *recipe.drop_rate, recipe.seed, info.name, k)
                             : std::move(deltas[k]);
                trimmed.push_back(ties_trim_values(d, *recipe.trim_keep));
            }
            const auto elected = ties_elect_values(trimmed, reduce);
            merged = pre;
            for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += lambda * elected[i];
            break;
        }
        }
        for (double v : merged)
            if (!std::isfinite(v)) throw NumericError(fmt::format("merge produced non-finite values in '{}'", info.name));
        summary.parameters += merged.size();
        writer.write(info.name, Tensor::from_values(info.dtype, info.shape, merged));
    }
    writer.finish();
    return summary;
}

}  // namespace rcpmerge
