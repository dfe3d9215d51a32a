// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "rcpmerge/checkpoint.hpp"
#include "rcpmerge/error.hpp"
#include "rcpmerge/hash.hpp"
#include "rcpmerge/parallel.hpp"
#include "rcpmerge/philox.hpp"

namespace rcpmerge {
namespace fs = std::filesystem;
using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

const std::regex kDomainRole(R"(domain_([1-9][0-9]*))");
const std::regex kCalibDomainRole(R"(calib_domain_([1-9][0-9]*))");
const std::regex kEvalRole(R"(eval_[A-Za-z0-9_.-]+)");

std::string domain_role(int t) {
    return fmt::format("domain_{}", t);
}

std::string num(double v) {
    return fmt::format("{}", v);
}

// Rejects repeated keys in any object.
json parse_strict(const std::string& text, std::string_view what) {
    std::vector<std::set<std::string>> seen;
    std::vector<std::string> parents;
    std::string last_key;
    json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
        switch (event) {
        case json::parse_event_t::object_start:
            seen.emplace_back();
            parents.push_back(last_key);
            break;
        case json::parse_event_t::object_end:
            seen.pop_back();
            parents.pop_back();
            break;
        case json::parse_event_t::key: {
            last_key = parsed.get<std::string>();
            if (!seen.back().insert(last_key).second) {
                if (parents.back() == "corpora")
                    throw ValidationError(fmt::format("{}: duplicate corpus role '{}'", what, last_key));
                throw ValidationError(fmt::format("{}: duplicate key '{}'", what, last_key));
            }
            break;
        }
        default: break;
        }
        return true;
    };
    try {
        return json::parse(text, cb);
    } catch (const json::exception& e) {
        throw ValidationError(fmt::format("{}: invalid JSON: {}", what, e.what()));
    }
}

void write_text_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(fmt::format("cannot write '{}'", tmp.string()));
        out << content;
        if (!out.flush()) throw IoError(fmt::format("write failed for '{}'", tmp.string()));
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError(fmt::format("cannot rename '{}' to '{}': {}", tmp.string(), path.string(), ec.message()));
}

void save_with_metadata(TensorMap map, const Metadata& extra, const fs::path& path) {
    for (const auto& [k, v] : extra) map.metadata()[k] = v;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_checkpoint(map, path);
}

TensorMap load_model(const PipelineConfig& config, const fs::path& path) {
    if (!fs::exists(path))
        throw IoError(fmt::format("missing artifact '{}' (run the earlier stage first)", path.string()));
    auto params = load_checkpoint(path);
    const auto stored = config_from_metadata(params.metadata());
    if (!(stored == config.model))
        throw ValidationError(fmt::format("checkpoint '{}' was built for a different model config ({} vs {})",
                                          path.string(), stored.to_json(), config.model.to_json()));
    Transformer(config.model).check_params(params);
    return params;
}

void require_artifact(const fs::path& path) {
    if (!fs::exists(path))
        throw IoError(fmt::format("missing artifact '{}' (run the earlier stage first)", path.string()));
}

CalibrationSet load_role(const PipelineConfig& config, const std::string& role, CorpusRole kind) {
    auto set = load_corpus(config.corpus_path(role), config.model.context_len, kind, config.model.vocab_size);
    set.name = role;
    return set;
}

std::string calib_role_for_domain(const PipelineConfig& config, int t) {
    const auto calib = fmt::format("calib_domain_{}", t);
    return config.corpora.contains(calib) ? calib : domain_role(t);
}

std::string calib_role_for_reasoning(const PipelineConfig& config) {
    return config.corpora.contains("calib_reasoning") ? "calib_reasoning" : "reasoning";
}

std::uint64_t training_seed(const PipelineConfig& config, const std::string& role) {
    return fnv1a64(fmt::format("train/{}/{}", config.model.seed, role));
}

ExecOptions exec_of(const PipelineConfig& config) {
    return ExecOptions{config.recipe.deterministic, 0};
}

void check_nonneg_finite(double v, std::string_view what) {
    if (!std::isfinite(v) || v < 0.0) throw ValidationError(fmt::format("config: {} must be finite and >= 0 (got {})", what, v));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

int PipelineConfig::domain_count() const {
    int t = 0;
    while (corpora.contains(domain_role(t + 1))) ++t;
    return t;
}

TrainSpec PipelineConfig::training_for(const std::string& role) const {
    if (auto it = training.find(role); it != training.end()) return it->second;
    if (std::regex_match(role, kDomainRole))
        if (auto it = training.find("domain"); it != training.end()) return it->second;
    return TrainSpec{};
}

const fs::path& PipelineConfig::corpus_path(const std::string& role) const {
    auto it = corpora.find(role);
    if (it == corpora.end()) throw ValidationError(fmt::format("missing corpus role '{}'", role));
    return it->second;
}

std::vector<std::string> PipelineConfig::eval_roles() const {
    std::vector<std::string> out;
    for (const auto& [role, path] : corpora)
        if (std::regex_match(role, kEvalRole)) out.push_back(role);
    return out;
}

void PipelineConfig::validate() const {
    model.validate();
    if (output_dir.empty()) throw ValidationError("config: 'output_dir' is required");
    if (!corpora.contains("reasoning")) throw ValidationError("missing corpus role 'reasoning'");
    if (!corpora.contains("domain_1")) throw ValidationError("missing corpus role 'domain_1'");
    const int domains = domain_count();
    for (const auto& [role, path] : corpora) {
        std::smatch m;
        if (role == "base" || role == "reasoning" || role == "calib_reasoning" || std::regex_match(role, kEvalRole)) {
        } else if (std::regex_match(role, m, kDomainRole)) {
            if (std::stoi(m[1].str()) > domains)
                throw ValidationError(fmt::format("corpus role '{}': domains must be numbered 1..T without gaps", role));
        } else if (std::regex_match(role, m, kCalibDomainRole)) {
            if (std::stoi(m[1].str()) > domains)
                throw ValidationError(fmt::format("corpus role '{}' has no matching domain model", role));
        } else {
            throw ValidationError(fmt::format("unknown corpus role '{}'", role));
        }
        if (!fs::is_regular_file(path))
            throw IoError(fmt::format("corpus role '{}': file not found: {}", role, path.string()));
    }
    for (const auto& [key, spec] : training) {
        if (key != "base" && key != "reasoning" && key != "domain" && !std::regex_match(key, kDomainRole))
            throw ValidationError(fmt::format("config: unknown training key '{}'", key));
        if (spec.steps < (key == "base" ? 0 : 1))
            throw ValidationError(fmt::format("config: training.{}.steps must be >= {}", key, key == "base" ? 0 : 1));
        check_nonneg_finite(spec.lr, fmt::format("training.{}.lr", key));
    }
    check_nonneg_finite(recipe.lambda_r, "recipe.lambda_r");
    if (!std::isfinite(recipe.lambda_t)) throw ValidationError("config: recipe.lambda_t must be finite");
    if (!std::isfinite(recipe.lambda)) throw ValidationError("config: recipe.lambda must be finite");
    check_trim_keep(recipe.trim_keep);
    check_drop_rate(recipe.drop_rate);
    if (lambda_grid.empty()) throw ValidationError("config: ablate.lambda_grid must not be empty");
    for (double l : lambda_grid) check_nonneg_finite(l, "ablate.lambda_grid entry");
    if (eval.prompt_len < 1) throw ValidationError("config: eval.prompt_len must be >= 1");
    if (eval.max_new < 0) throw ValidationError("config: eval.max_new must be >= 0");
    for (int n : eval.distinct_orders)
        if (n < 1) throw ValidationError("config: eval.distinct_n orders must be >= 1");
    if (eval.stop_token && (*eval.stop_token < 0 || *eval.stop_token >= model.vocab_size))
        throw ValidationError("config: eval.stop_token outside the vocabulary");
}

std::string PipelineConfig::to_json() const {
    ojson j;
    j["model"] = ojson::parse(model.to_json());
    j["corpora"] = ojson::object();
    for (const auto& [role, path] : corpora) j["corpora"][role] = path.generic_string();
    j["training"] = ojson::object();
    for (const auto& [key, spec] : training) j["training"][key] = {{"steps", spec.steps}, {"lr", spec.lr}};
    ojson r;
    r["method"] = method_name(recipe.method);
    r["lambda_r"] = recipe.lambda_r;
    r["lambda_t"] = recipe.lambda_t;
    r["lambda"] = recipe.lambda;
    r["trim_keep"] = recipe.trim_keep;
    r["drop_rate"] = recipe.drop_rate;
    r["ties_reduce"] = recipe.ties_reduce == TiesReduce::sum ? "sum" : "mean";
    r["seed"] = recipe.seed;
    r["deterministic"] = recipe.deterministic;
    r["without"] = ablation_name(recipe.ablation);
    r["abs_sensitivity"] = recipe.abs_sensitivity;
    j["recipe"] = r;
    ojson e;
    e["prompt_len"] = eval.prompt_len;
    e["max_new"] = eval.max_new;
    e["max_prompts"] = eval.max_prompts;
    e["stop_token"] = eval.stop_token ? ojson(*eval.stop_token) : ojson(nullptr);
    e["distinct_n"] = eval.distinct_orders;
    j["eval"] = e;
    j["ablate"] = {{"lambda_grid", lambda_grid}};
    j["output_dir"] = output_dir.generic_string();
    return j.dump(2) + "\n";
}

PipelineConfig parse_pipeline_config(const std::string& json_text, const fs::path& base_dir) {
    const json j = parse_strict(json_text, "config");
    if (!j.is_object()) throw ValidationError("config: top level must be an object");
    auto resolve = [&](const std::string& p) {
        fs::path path(p);
        return path.is_relative() && !base_dir.empty() ? (base_dir / path).lexically_normal() : path;
    };
    auto unknown = [](std::string_view section, const std::string& key) {
        return ValidationError(fmt::format("config: unknown field '{}' in {}", key, section));
    };

    PipelineConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "model") {
                c.model = ModelConfig::from_json(value.dump());
            } else if (key == "corpora") {
                for (const auto& [role, p] : value.items()) c.corpora[role] = resolve(p.get<std::string>());
            } else if (key == "training") {
                for (const auto& [role, spec] : value.items()) {
                    TrainSpec ts;
                    for (const auto& [k, v] : spec.items()) {
                        if (k == "steps") ts.steps = v.get<int>();
                        else if (k == "lr") ts.lr = v.get<double>();
                        else throw unknown(fmt::format("training.{}", role), k);
                    }
                    c.training[role] = ts;
                }
            } else if (key == "recipe") {
                auto& r = c.recipe;
                for (const auto& [k, v] : value.items()) {
                    if (k == "method") r.method = parse_method(v.get<std::string>());
                    else if (k == "lambda_r") r.lambda_r = v.get<double>();
                    else if (k == "lambda_t") r.lambda_t = v.get<double>();
                    else if (k == "lambda") r.lambda = v.get<double>();
                    else if (k == "trim_keep") r.trim_keep = v.get<double>();
                    else if (k == "drop_rate") r.drop_rate = v.get<double>();
                    else if (k == "seed") r.seed = v.get<std::uint64_t>();
                    else if (k == "deterministic") r.deterministic = v.get<bool>();
                    else if (k == "without") r.ablation = parse_ablation(v.get<std::string>());
                    else if (k == "abs_sensitivity") r.abs_sensitivity = v.get<bool>();
                    else if (k == "ties_reduce") {
                        const auto s = v.get<std::string>();
                        if (s == "mean") r.ties_reduce = TiesReduce::mean;
                        else if (s == "sum") r.ties_reduce = TiesReduce::sum;
                        else throw ValidationError(fmt::format("config: ties_reduce must be 'mean' or 'sum' (got '{}')", s));
                    } else throw unknown("recipe", k);
                }
            } else if (key == "eval") {
                for (const auto& [k, v] : value.items()) {
                    if (k == "prompt_len") c.eval.prompt_len = v.get<int>();
                    else if (k == "max_new") c.eval.max_new = v.get<int>();
                    else if (k == "max_prompts") c.eval.max_prompts = v.get<std::size_t>();
                    else if (k == "stop_token") {
                        if (v.is_null()) c.eval.stop_token.reset();
                        else c.eval.stop_token = v.get<Token>();
                    } else if (k == "distinct_n") c.eval.distinct_orders = v.get<std::vector<int>>();
                    else throw unknown("eval", k);
                }
            } else if (key == "ablate") {
                for (const auto& [k, v] : value.items()) {
                    if (k == "lambda_grid") c.lambda_grid = v.get<std::vector<double>>();
                    else throw unknown("ablate", k);
                }
            } else if (key == "output_dir") {
                c.output_dir = resolve(value.get<std::string>());
            } else {
                throw unknown("config", key);
            }
        }
    } catch (const json::exception& e) {
        throw ValidationError(fmt::format("config: {}", e.what()));
    }
    c.validate();
    return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open config '{}'", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_pipeline_config(ss.str(), path.parent_path());
}

void apply_overrides(PipelineConfig& config, const Overrides& o) {
    if (o.lambda_r) config.recipe.lambda_r = *o.lambda_r;
    if (o.without) config.recipe.ablation = *o.without;
    if (o.abs_sensitivity) config.recipe.abs_sensitivity = true;
    if (o.deterministic) config.recipe.deterministic = true;
    if (o.seed) {
        config.model.seed = *o.seed;
        config.recipe.seed = *o.seed;
    }
    config.validate();
}

fs::path ArtifactPaths::domain(int t) const {
    return dir / fmt::format("domain_{}.safetensors", t);
}
fs::path ArtifactPaths::penalty(int t) const {
    return dir / "stats" / fmt::format("penalty_domain_{}.safetensors", t);
}
fs::path ArtifactPaths::votes(int t) const {
    return dir / "stats" / fmt::format("votes_domain_{}.safetensors", t);
}
fs::path ArtifactPaths::mask(int t) const {
    return dir / "stats" / fmt::format("mask_domain_{}.safetensors", t);
}

// ---------------------------------------------------------------------------
// prepare

namespace {

TensorMap train_role(const PipelineConfig& config, const Transformer& model, const TensorMap& start,
                     const std::string& role, CorpusRole kind, const fs::path& parent, std::ostream& log) {
    const auto corpus = load_role(config, role, kind);
    const auto spec = config.training_for(role);
    TrainOptions opts;
    opts.steps = spec.steps;
    opts.lr = spec.lr;
    opts.seed = training_seed(config, role);
    std::string loss_log;
    double first = 0.0, last = 0.0;
    opts.on_step = [&](int step, double loss) {
        if (step == 0) first = loss;
        last = loss;
        loss_log += fmt::format("{} {:.9g}\n", step, loss);
    };
    auto out = train(model, start, corpus, opts);
    const ArtifactPaths paths{config.output_dir};
    write_text_atomic(paths.dir / "logs" / fmt::format("train_{}.log", role), loss_log);
    log << fmt::format("trained {:<10} {} samples, {} steps, lr {}: loss {:.4f} -> {:.4f}\n", role, corpus.size(),
                       spec.steps, spec.lr, first, last);
    auto& meta = out.metadata();
    meta["role"] = role;
    meta["input.corpus.sha256"] = sha256_file(config.corpus_path(role));
    if (!parent.empty()) meta["input.parent.sha256"] = sha256_file(parent);
    meta["train.steps"] = std::to_string(spec.steps);
    meta["train.lr"] = num(spec.lr);
    meta["train.seed"] = std::to_string(opts.seed);
    return out;
}

}  // namespace

void cmd_prepare(const PipelineConfig& config, std::ostream& log) {
    config.validate();
    const ArtifactPaths paths{config.output_dir};
    fs::create_directories(paths.dir);
    const Transformer model(config.model);
    log << fmt::format("model: {} parameters, config {}\n", parameter_count(config.model), config.model.to_json());

    TensorMap base = init_model(config.model);
    base.metadata()["role"] = "base";
    const bool pretrain = config.corpora.contains("base") && config.training_for("base").steps > 0;
    if (pretrain) base = train_role(config, model, base, "base", CorpusRole::other, {}, log);
    else base.metadata()["train.steps"] = "0";
    save_checkpoint(base, paths.base());

    ojson manifest;
    manifest["model.config"] = ojson::parse(config.model.to_json());
    manifest["corpora"] = ojson::object();
    for (const auto& [role, path] : config.corpora) manifest["corpora"][role] = sha256_file(path);
    manifest["checkpoints"] = ojson::object();
    manifest["checkpoints"][paths.base().filename().string()] = sha256_file(paths.base());

    for (int t = 1; t <= config.domain_count(); ++t) {
        const auto domain = train_role(config, model, base, domain_role(t), CorpusRole::domain, paths.base(), log);
        save_checkpoint(domain, paths.domain(t));
        manifest["checkpoints"][paths.domain(t).filename().string()] = sha256_file(paths.domain(t));
    }
    const auto reasoning = train_role(config, model, base, "reasoning", CorpusRole::reasoning, paths.base(), log);
    save_checkpoint(reasoning, paths.reasoning());
    manifest["checkpoints"][paths.reasoning().filename().string()] = sha256_file(paths.reasoning());

    write_text_atomic(paths.manifest(), manifest.dump(2) + "\n");
    for (const auto& [name, hash] : manifest["checkpoints"].items())
        log << fmt::format("wrote {} sha256 {}\n", name, hash.get<std::string>());
}

// ---------------------------------------------------------------------------
// stats

namespace {

struct Penalties {
    FimDiagonal fim;
    std::vector<PenaltyMap> penalties;  ///< index t-1
};

Penalties compute_penalties(const PipelineConfig& config, const TensorMap& theta_r,
                            const std::vector<TensorMap>& domains, const GradientFn& grad_fn) {
    const auto calib_r = load_role(config, calib_role_for_reasoning(config), CorpusRole::reasoning);
    Penalties out;
    out.fim = fim_diagonal(theta_r, calib_r, grad_fn, exec_of(config));
    for (const auto& theta_t : domains) out.penalties.push_back(preservation_penalty(out.fim, theta_t, theta_r));
    return out;
}

Metadata vote_metadata(const PipelineConfig& config, int t, double lambda_r, Ablation ablation,
                       const VoteResult& result, const fs::path& penalty_file) {
    const ArtifactPaths paths{config.output_dir};
    Metadata m;
    m["domain"] = domain_role(t);
    m["lambda_r"] = num(lambda_r);
    m["ablation"] = std::string(ablation_name(ablation));
    m["abs_sensitivity"] = config.recipe.abs_sensitivity ? "true" : "false";
    m["n_samples"] = std::to_string(result.votes.total_samples());
    m["accepted"] = std::to_string(result.votes.accepted_count());
    m["input.domain.sha256"] = sha256_file(paths.domain(t));
    m["input.reasoning.sha256"] = sha256_file(paths.reasoning());
    m["input.calib_domain.sha256"] = sha256_file(config.corpus_path(calib_role_for_domain(config, t)));
    if (!penalty_file.empty()) m["input.penalty.sha256"] = sha256_file(penalty_file);
    return m;
}

VoteResult run_votes(const PipelineConfig& config, int t, const TensorMap& theta_t, const TensorMap& theta_r,
                     const PenaltyMap& penalty, const GradientFn& grad_fn, double lambda_r, Ablation ablation) {
    const auto calib = load_role(config, calib_role_for_domain(config, t), CorpusRole::domain);
    VoteOptions opts;
    opts.lambda_r = lambda_r;
    opts.abs_sensitivity = config.recipe.abs_sensitivity;
    opts.ablation = ablation;
    opts.exec = exec_of(config);
    return vote_mask(theta_t, theta_r, penalty, calib, grad_fn, opts);
}

}  // namespace

StatsReport cmd_stats(const PipelineConfig& config, std::ostream& log) {
    config.validate();
    const ArtifactPaths paths{config.output_dir};
    const Transformer model(config.model);
    const auto grad_fn = make_gradient_fn(model);
    const auto theta_r = load_model(config, paths.reasoning());
    std::vector<TensorMap> domains;
    for (int t = 1; t <= config.domain_count(); ++t) {
        domains.push_back(load_model(config, paths.domain(t)));
        require_same_layout(theta_r, domains.back(), fmt::format("domain {} vs reasoning", t));
    }
    auto pen = compute_penalties(config, theta_r, domains, grad_fn);

    {
        Metadata m;
        m["role"] = "fim";
        m["n_samples"] = std::to_string(pen.fim.n_samples);
        m["input.reasoning.sha256"] = sha256_file(paths.reasoning());
        m["input.calib_reasoning.sha256"] = sha256_file(config.corpus_path(calib_role_for_reasoning(config)));
        save_with_metadata(pen.fim.values, m, paths.fim());
    }
    StatsReport report;
    report.lambda_r = config.recipe.lambda_r;
    log << fmt::format("lambda_r {} ablation {}{}\n", num(config.recipe.lambda_r), ablation_name(config.recipe.ablation),
                       config.recipe.abs_sensitivity ? " (abs sensitivity)" : "");
    for (int t = 1; t <= config.domain_count(); ++t) {
        const auto& theta_t = domains[static_cast<std::size_t>(t - 1)];
        {
            Metadata m;
            m["role"] = "penalty";
            m["domain"] = domain_role(t);
            m["input.fim.sha256"] = sha256_file(paths.fim());
            m["input.domain.sha256"] = sha256_file(paths.domain(t));
            m["input.reasoning.sha256"] = sha256_file(paths.reasoning());
            save_with_metadata(pen.penalties[static_cast<std::size_t>(t - 1)].values, m, paths.penalty(t));
        }
        const auto result = run_votes(config, t, theta_t, theta_r, pen.penalties[static_cast<std::size_t>(t - 1)],
                                      grad_fn, config.recipe.lambda_r, config.recipe.ablation);
        auto meta = vote_metadata(config, t, config.recipe.lambda_r, config.recipe.ablation, result, paths.penalty(t));
        meta["role"] = "votes";
        save_with_metadata(result.votes.to_tensor_map(), meta, paths.votes(t));
        meta["role"] = "mask";
        meta["input.votes.sha256"] = sha256_file(paths.votes(t));
        save_with_metadata(result.mask, meta, paths.mask(t));

        log << fmt::format("{}: accepted {} of {} parameters ({:.4f})\n", domain_role(t), result.votes.accepted_count(),
                           result.votes.parameter_count(),
                           static_cast<double>(result.votes.accepted_count()) /
                               static_cast<double>(result.votes.parameter_count()));
        std::vector<std::vector<std::string>> rows;
        for (const auto& name : result.votes.names()) {
            const auto& v = result.votes.accept_votes(name);
            std::uint64_t acc = 0;
            for (auto a : v) acc += a > result.votes.total_samples() - a ? 1 : 0;
            rows.push_back({name, std::to_string(acc), std::to_string(v.size()),
                            fmt::format("{:.4f}", static_cast<double>(acc) / static_cast<double>(v.size()))});
        }
        log << format_table({"tensor", "accepted", "numel", "fraction"}, rows);
        report.accepted.push_back(result.votes.accepted_count());
        report.parameters = result.votes.parameter_count();
    }
    return report;
}

// ---------------------------------------------------------------------------
// merge

MergeRecipe pipeline_merge_recipe(const PipelineConfig& config, const std::vector<fs::path>& masks) {
    const ArtifactPaths paths{config.output_dir};
    const auto& r = config.recipe;
    MergeRecipe recipe;
    recipe.method = r.method;
    recipe.base_path = paths.base();
    recipe.reasoning_path = paths.reasoning();
    recipe.seed = r.seed;
    recipe.deterministic = r.deterministic;
    for (int t = 1; t <= config.domain_count(); ++t) {
        RecipeDomain d;
        d.path = paths.domain(t);
        if (r.method == MergeMethod::rcp) {
            d.lambda_t = r.lambda_t;
            d.mask_path = masks.empty() ? paths.mask(t) : masks.at(static_cast<std::size_t>(t - 1));
        }
        recipe.domains.push_back(std::move(d));
    }
    switch (r.method) {
    case MergeMethod::rcp:
    case MergeMethod::linear: break;
    case MergeMethod::task_arithmetic: recipe.lambda = r.lambda; break;
    case MergeMethod::ties:
        recipe.lambda = r.lambda;
        recipe.trim_keep = r.trim_keep;
        recipe.ties_reduce = r.ties_reduce;
        break;
    case MergeMethod::dare_linear:
        recipe.lambda = r.lambda;
        recipe.drop_rate = r.drop_rate;
        break;
    case MergeMethod::dare_ties:
        recipe.lambda = r.lambda;
        recipe.drop_rate = r.drop_rate;
        recipe.trim_keep = r.trim_keep;
        recipe.ties_reduce = r.ties_reduce;
        break;
    }
    recipe.validate();
    return recipe;
}

MergeSummary cmd_merge(const PipelineConfig& config, std::ostream& log) {
    config.validate();
    const ArtifactPaths paths{config.output_dir};
    const auto recipe = pipeline_merge_recipe(config);
    require_artifact(recipe.base_path);
    require_artifact(recipe.reasoning_path);
    for (const auto& d : recipe.domains) {
        require_artifact(d.path);
        if (d.mask_path) require_artifact(*d.mask_path);
    }
    write_text_atomic(paths.merge_recipe(), recipe_to_json(recipe) + "\n");
    const auto summary = run_merge(recipe, paths.merged());
    log << fmt::format("merged with {}: {} parameters", method_name(recipe.method), summary.parameters);
    if (recipe.method == MergeMethod::rcp)
        log << fmt::format(", {} coordinates updated, {} sign conflicts", summary.accepted, summary.sign_conflicts);
    log << fmt::format("\nwrote {} sha256 {}\n", paths.merged().string(), sha256_file(paths.merged()));
    return summary;
}

// ---------------------------------------------------------------------------
// eval

std::vector<MetricsReport> cmd_eval(const PipelineConfig& config, std::ostream& log, bool emit_csv) {
    config.validate();
    const ArtifactPaths paths{config.output_dir};
    const auto roles = config.eval_roles();
    if (roles.empty()) throw ValidationError("eval: no 'eval_*' corpus roles configured");
    std::vector<CalibrationSet> corpora;
    for (const auto& role : roles) corpora.push_back(load_role(config, role, CorpusRole::other));

    std::vector<std::pair<std::string, fs::path>> models = {{"base", paths.base()}};
    for (int t = 1; t <= config.domain_count(); ++t) models.emplace_back(domain_role(t), paths.domain(t));
    models.emplace_back("reasoning", paths.reasoning());
    if (fs::exists(paths.merged())) models.emplace_back("merged", paths.merged());

    const Transformer model(config.model);
    auto opts = config.eval;
    opts.threads = default_thread_count();
    std::vector<MetricsReport> reports;
    ojson all = ojson::array();
    std::string table, csv;
    for (const auto& [label, path] : models) {
        const auto params = load_model(config, path);
        MetricsReport report;
        report.model = label;
        report.model_id = sha256_file(path);
        for (const auto& corpus : corpora) report.entries.push_back(evaluate_corpus(model, params, corpus, opts));
        all.push_back(ojson::parse(report.to_json()));
        table += report.to_table() + "\n";
        const auto c = report.to_csv();
        csv += csv.empty() ? c : c.substr(c.find('\n') + 1);
        reports.push_back(std::move(report));
    }
    write_text_atomic(paths.dir / "metrics.json", all.dump(2) + "\n");
    write_text_atomic(paths.dir / "metrics.txt", table);
    if (emit_csv) write_text_atomic(paths.dir / "metrics.csv", csv);
    log << table;
    return reports;
}

// ---------------------------------------------------------------------------
// ablate

double AblationRow::accepted_fraction() const {
    return parameters == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(parameters);
}

namespace {

std::vector<std::string> ablation_header(const AblationTable& t) {
    std::vector<std::string> h = {"config", "lambda_r", "accepted", "parameters", "accepted_fraction"};
    for (const auto& role : t.eval_roles) h.push_back("ppl_" + role);
    return h;
}

std::vector<std::vector<std::string>> ablation_rows(const AblationTable& t, bool full_precision) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : t.rows) {
        std::vector<std::string> row = {r.label, num(r.lambda_r), std::to_string(r.accepted),
                                        std::to_string(r.parameters),
                                        full_precision ? num(r.accepted_fraction())
                                                       : fmt::format("{:.6f}", r.accepted_fraction())};
        for (const auto& role : t.eval_roles) {
            auto it = r.ppl.find(role);
            row.push_back(it == r.ppl.end() ? "" : full_precision ? num(it->second) : fmt::format("{:.4f}", it->second));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

std::string AblationTable::to_table() const {
    return format_table(ablation_header(*this), ablation_rows(*this, false));
}

std::string AblationTable::to_csv() const {
    return format_csv(ablation_header(*this), ablation_rows(*this, true));
}

std::string AblationTable::to_json() const {
    ojson j = ojson::array();
    for (const auto& r : rows) {
        ojson row;
        row["config"] = r.label;
        row["lambda_r"] = r.lambda_r;
        row["ablation"] = ablation_name(r.ablation);
        row["accepted"] = r.accepted;
        row["parameters"] = r.parameters;
        row["accepted_fraction"] = r.accepted_fraction();
        row["ppl"] = ojson::object();
        for (const auto& [role, v] : r.ppl) row["ppl"][role] = v;
        j.push_back(row);
    }
    return j.dump(2) + "\n";
}

AblationTable cmd_ablate(const PipelineConfig& config, std::ostream& log, bool emit_csv) {
    config.validate();
    const ArtifactPaths paths{config.output_dir};
    const Transformer model(config.model);
    const auto grad_fn = make_gradient_fn(model);
    require_artifact(paths.base());
    const auto theta_r = load_model(config, paths.reasoning());
    std::vector<TensorMap> domains;
    for (int t = 1; t <= config.domain_count(); ++t) {
        domains.push_back(load_model(config, paths.domain(t)));
        require_same_layout(theta_r, domains.back(), fmt::format("domain {} vs reasoning", t));
    }
    const auto pen = compute_penalties(config, theta_r, domains, grad_fn);

    AblationTable table;
    table.eval_roles = config.eval_roles();
    std::vector<CalibrationSet> eval_sets;
    for (const auto& role : table.eval_roles) eval_sets.push_back(load_role(config, role, CorpusRole::other));

    struct Variant {
        std::string label, tag;
        double lambda_r;
        Ablation ablation;
    };
    std::vector<Variant> variants;
    for (double l : config.lambda_grid)
        variants.push_back({fmt::format("lambda_r={}", num(l)), fmt::format("lambda_{}", num(l)), l, Ablation::none});
    const double lr = config.recipe.lambda_r;
    variants.push_back({"w/o sensitivity", "wo_sensitivity", lr, Ablation::without_sensitivity});
    variants.push_back({"w/o preservation", "wo_preservation", lr, Ablation::without_preservation});

    PipelineConfig rcp_config = config;
    rcp_config.recipe.method = MergeMethod::rcp;
    const auto dir = paths.ablate_dir();
    fs::create_directories(dir);
    const int threads = default_thread_count();
    for (const auto& v : variants) {
        AblationRow row{v.label, v.lambda_r, v.ablation, 0, 0, {}};
        std::vector<fs::path> masks;
        for (int t = 1; t <= config.domain_count(); ++t) {
            const auto idx = static_cast<std::size_t>(t - 1);
            const auto result =
                run_votes(config, t, domains[idx], theta_r, pen.penalties[idx], grad_fn, v.lambda_r, v.ablation);
            auto meta = vote_metadata(config, t, v.lambda_r, v.ablation, result, {});
            meta["role"] = "mask";
            masks.push_back(dir / fmt::format("mask_domain_{}_{}.safetensors", t, v.tag));
            save_with_metadata(result.mask, meta, masks.back());
            row.accepted += result.votes.accepted_count();
            row.parameters += result.votes.parameter_count();
        }
        const auto merged_path = dir / fmt::format("merged_{}.safetensors", v.tag);
        run_merge(pipeline_merge_recipe(rcp_config, masks), merged_path);
        const auto merged = load_model(config, merged_path);
        for (std::size_t e = 0; e < eval_sets.size(); ++e)
            row.ppl[table.eval_roles[e]] = perplexity(model, merged, eval_sets[e], threads).ppl;
        log << fmt::format("{:<18} accepted {:>8} / {} ({:.6f})\n", row.label, row.accepted, row.parameters,
                           row.accepted_fraction());
        table.rows.push_back(std::move(row));
    }
    write_text_atomic(dir / "ablate.txt", table.to_table());
    write_text_atomic(dir / "ablate.json", table.to_json());
    if (emit_csv) write_text_atomic(dir / "ablate.csv", table.to_csv());
    log << table.to_table();
    return table;
}

}  // namespace rcpmerge
