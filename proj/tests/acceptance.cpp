// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion.
//
//   rcpmerge_acceptance [--only N]
//
// Exit status is 0 only if every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "oracles.hpp"
#include "rcpmerge/checkpoint.hpp"
#include "rcpmerge/eval.hpp"
#include "rcpmerge/hash.hpp"
#include "rcpmerge/merge.hpp"
#include "rcpmerge/pipeline.hpp"
#include "rcpmerge/stats.hpp"
#include "support.hpp"

using namespace rcpmerge;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradStep = 1e-4;
constexpr double kGradFloor = 1e-3;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kTaylorCoarse = 0.06;
constexpr double kTaylorFine = 0.006;
constexpr std::size_t kFimSamples = 128;
constexpr int kVoteInstances = 200;
constexpr double kMonotonicBudgetSeconds = 300.0;
constexpr int kDareSeeds = 1000;
constexpr std::size_t kDareSize = 10000;
constexpr double kDareRate = 0.9;
constexpr double kDareTolerance = 0.05;
constexpr int kTiesInstances = 100;
constexpr int kRoundTripInstances = 50;
constexpr int kToySeeds = 5;
constexpr double kToyBudgetSeconds = 900.0;
constexpr double kDistinctTolerance = 1e-12;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

TensorMap vector_map(const std::vector<double>& v) {
    TensorMap m;
    m.insert("w", Tensor::from_f64({v.size()}, v));
    return m;
}

// Toy triples prepared from configs/toy.json, shared between criteria.
class ToyRuns {
public:
    const PipelineConfig& prepared(std::uint64_t seed) {
        auto it = configs_.find(seed);
        if (it != configs_.end()) return it->second;
        auto config = load_pipeline_config(fs::path(RCPMERGE_SOURCE_DIR) / "configs" / "toy.json");
        apply_overrides(config, {.seed = seed});
        config.output_dir = root_.path() / fmt::format("seed_{}", seed);
        std::ostringstream log;
        cmd_prepare(config, log);
        return configs_.emplace(seed, std::move(config)).first->second;
    }

    const AblationTable& ablated(std::uint64_t seed) {
        auto it = ablations_.find(seed);
        if (it != ablations_.end()) return it->second;
        std::ostringstream log;
        return ablations_.emplace(seed, cmd_ablate(prepared(seed), log)).first->second;
    }

private:
    testing::TempDir root_;
    std::map<std::uint64_t, PipelineConfig> configs_;
    std::map<std::uint64_t, AblationTable> ablations_;
};

ToyRuns& toy() {
    static ToyRuns runs;
    return runs;
}

fs::path ablate_mask(const PipelineConfig& c, const std::string& tag) {
    return ArtifactPaths{c.output_dir}.ablate_dir() / fmt::format("mask_domain_1_{}.safetensors", tag);
}

fs::path ablate_merged(const PipelineConfig& c, const std::string& tag) {
    return ArtifactPaths{c.output_dir}.ablate_dir() / fmt::format("merged_{}.safetensors", tag);
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
    const auto cfg = testing::tiny_config(5);
    const Transformer model(cfg);
    const auto params = init_model(cfg, DType::F64);
    const auto start = std::chrono::steady_clock::now();
    const auto check = testing::finite_difference_check(model, params, to_tokens("abcab!"), kGradStep, kGradFloor);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {check.max_rel_error < kGradTolerance && secs < kGradBudgetSeconds && check.checked == parameter_count(cfg),
            fmt::format("{} parameters, max rel error {:.3e} at {}[{}], {:.2f}s", check.checked, check.max_rel_error,
                        check.worst_tensor, check.worst_index, secs)};
}

Outcome taylor_oracle() {
    const double a = 1.0;
    auto loss = [&](double th) { return a * th + 0.5 * th * th; };
    std::vector<double> errors;
    for (double theta : {0.1, 0.01}) {
        TensorMap t, g;
        t.insert("w", Tensor::from_f64({}, {theta}));
        g.insert("w", Tensor::from_f64({}, {a + theta}));
        const double taylor = domain_sensitivity_sample(t, g).at("w").get(0);
        const double exact = loss(theta) - loss(0.0);
        errors.push_back(std::fabs(taylor - exact) / std::fabs(exact));
    }
    return {errors[0] < kTaylorCoarse && errors[1] < kTaylorFine,
            fmt::format("rel error {:.4f} at 0.1, {:.5f} at 0.01", errors[0], errors[1])};
}

Outcome fim_exactness() {
    const auto& config = toy().prepared(0);
    const Transformer model(config.model);
    const auto theta_r = load_checkpoint(ArtifactPaths{config.output_dir}.reasoning());
    auto corpus = load_corpus(config.corpus_path("reasoning"), config.model.context_len, CorpusRole::reasoning);
    corpus.samples.resize(std::min(corpus.size(), kFimSamples));
    const auto grad_fn = make_gradient_fn(model);

    std::vector<TensorMap> stored;
    for (const auto& s : corpus.samples) stored.push_back(grad_fn(theta_r, s));
    TensorMap expected;
    for (const auto& [name, t] : theta_r) {
        std::vector<double> sum(t.numel(), 0.0);
        for (const auto& g : stored) {
            const auto& gt = g.at(name);
            for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += gt.get(i) * gt.get(i);
        }
        for (auto& v : sum) v /= static_cast<double>(stored.size());
        expected.insert(name, Tensor::from_f64(t.shape(), sum));
    }
    const auto fim = fim_diagonal(theta_r, corpus, grad_fn, {.deterministic = true});
    const bool exact = fim.values.bit_equal(expected);
    return {exact && corpus.size() >= 100,
            fmt::format("{} samples, {} parameters, {}", corpus.size(), expected.total_numel(),
                        exact ? "bit-identical" : "values differ")};
}

Outcome vote_equivalence() {
    std::mt19937_64 rng(2026);
    const std::vector<double> lambdas = {0.0, 0.3, 2.0};
    int ties = 0, mismatches = 0;
    for (int inst = 0; inst < kVoteInstances; ++inst) {
        const std::size_t n = 1 + rng() % 50, K = 1 + rng() % 21;
        const double lambda = lambdas[static_cast<std::size_t>(inst) % lambdas.size()];
        // Quarter-step values make exact C = 0 and split votes common.
        std::vector<std::vector<double>> S(n, std::vector<double>(K));
        std::vector<double> p(n);
        for (auto& row : S)
            for (auto& s : row) s = (static_cast<double>(rng() % 17) - 8.0) / 4.0;
        for (auto& v : p) v = static_cast<double>(rng() % 5) / 4.0;

        std::vector<TensorMap> grads;
        for (std::size_t k = 0; k < K; ++k) {
            std::vector<double> g(n);
            for (std::size_t i = 0; i < n; ++i) g[i] = S[i][k];
            grads.push_back(vector_map(g));
        }
        const GradientFn fn = [&](const TensorMap&, const TokenSeq& s) { return grads.at(testing::sample_index(s)); };
        VoteOptions opts;
        opts.lambda_r = lambda;
        const auto ones = vector_map(std::vector<double>(n, 1.0));
        const auto r = vote_mask(ones, ones, PenaltyMap{vector_map(p)}, testing::index_set(K), fn, opts);
        const auto expected = testing::brute_force_mask(S, p, lambda);
        const auto& votes = r.votes.accept_votes("w");
        for (std::size_t i = 0; i < n; ++i) {
            if (2 * votes[i] == K) ++ties;
            if (static_cast<int>(r.mask.at("w").get(i)) != expected[i]) ++mismatches;
        }
    }
    return {mismatches == 0 && ties > 0,
            fmt::format("{} instances, {} mismatching entries, {} tied vote splits", kVoteInstances, mismatches, ties)};
}

Outcome mask_monotonicity() {
    const auto start = std::chrono::steady_clock::now();
    const auto& config = toy().prepared(0);
    const auto& table = toy().ablated(0);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool nested = true, fraction = true;
    std::vector<std::string> fractions;
    TensorMap prev;
    for (std::size_t g = 0; g < config.lambda_grid.size(); ++g) {
        const auto mask = load_checkpoint(ablate_mask(config, fmt::format("lambda_{}", config.lambda_grid[g])));
        if (g > 0) {
            for (const auto& [name, t] : mask)
                for (std::size_t i = 0; i < t.numel(); ++i)
                    if (t.get(i) > prev.at(name).get(i)) nested = false;
            if (table.rows[g].accepted_fraction() > table.rows[g - 1].accepted_fraction()) fraction = false;
        }
        fractions.push_back(fmt::format("{:.4f}", table.rows[g].accepted_fraction()));
        prev = mask;
    }
    return {nested && fraction && secs < kMonotonicBudgetSeconds,
            fmt::format("accepted fraction [{}], nested: {}, {:.1f}s", fmt::join(fractions, ", "),
                        nested ? "yes" : "no", secs)};
}

Outcome merge_identities() {
    const auto& config = toy().prepared(0);
    const ArtifactPaths paths{config.output_dir};
    const auto theta_r = load_checkpoint(paths.reasoning());
    TensorMap zeros;
    for (const auto& [name, t] : theta_r)
        zeros.insert(name, Tensor::from_f64(t.shape(), std::vector<double>(t.numel(), 0.0)).cast(DType::F32));
    const auto zero_mask = paths.dir / "zero_mask.safetensors";
    save_checkpoint(zeros, zero_mask);
    const auto out = paths.dir / "merged_zero_mask.safetensors";
    run_merge(pipeline_merge_recipe(config, {zero_mask}), out);
    const auto merged = load_checkpoint(out);
    bool zero_identity = merged.names() == theta_r.names();
    for (const auto& [name, t] : theta_r) zero_identity = zero_identity && merged.at(name).bit_equal(t);

    toy().ablated(0);
    const auto a = load_checkpoint(ablate_merged(config, "lambda_0"));
    const auto b = load_checkpoint(ablate_merged(config, "wo_preservation"));
    bool ablation_identity = a.names() == b.names();
    for (const auto& [name, t] : a) ablation_identity = ablation_identity && b.at(name).bit_equal(t);
    return {zero_identity && ablation_identity,
            fmt::format("zero masks -> reasoning model: {}; lambda_r = 0 vs w/o preservation: {}",
                        zero_identity ? "bit-identical" : "differs", ablation_identity ? "bit-identical" : "differs")};
}

Outcome dare_unbiasedness() {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal;
    std::vector<double> delta(kDareSize);
    for (auto& x : delta) x = normal(rng);
    std::vector<double> mean(kDareSize, 0.0);
    for (int s = 0; s < kDareSeeds; ++s) {
        const auto d = dare_values(delta, kDareRate, static_cast<std::uint64_t>(s), "delta", 0);
        for (std::size_t i = 0; i < kDareSize; ++i) mean[i] += d[i];
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < kDareSize; ++i) {
        const double m = mean[i] / kDareSeeds;
        num += (m - delta[i]) * (m - delta[i]);
        den += delta[i] * delta[i];
    }
    const double rel = std::sqrt(num / den);
    const double sampling = std::sqrt(kDareRate / ((1.0 - kDareRate) * kDareSeeds));
    return {rel < kDareTolerance,
            fmt::format("relative Frobenius distance {:.4f} (limit {}); Monte-Carlo standard error at {} seeds is {:.4f}",
                        rel, kDareTolerance, kDareSeeds, sampling)};
}

Outcome ties_oracle() {
    std::mt19937_64 rng(99);
    const std::vector<double> keeps = {0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
    int mismatches = 0;
    for (int inst = 0; inst < kTiesInstances; ++inst) {
        const std::size_t n = 1 + rng() % 30;
        const std::size_t T = 2 + rng() % 3;
        const bool quantized = inst % 2 == 0;
        auto draw = [&]() {
            if (quantized) return (static_cast<double>(rng() % 9) - 4.0) / 4.0;
            return std::normal_distribution<double>()(rng);
        };
        std::vector<double> pre(n);
        for (auto& x : pre) x = draw();
        std::vector<std::vector<double>> deltas(T, std::vector<double>(n));
        std::vector<TensorMap> maps;
        for (auto& d : deltas) {
            for (auto& x : d) x = draw();
            maps.push_back(vector_map(d));
        }
        const double keep = keeps[rng() % keeps.size()];
        const bool sum = inst % 4 >= 2;
        const double lambda = inst % 3 == 0 ? 1.0 : 0.3;
        const auto got = ties_merge(vector_map(pre), maps, keep, lambda, sum ? TiesReduce::sum : TiesReduce::mean);
        const auto expected = testing::brute_force_ties(pre, deltas, keep, lambda, sum);
        if (got.at("w").to_f64() != expected) ++mismatches;
    }
    return {mismatches == 0, fmt::format("{} instances, {} mismatches", kTiesInstances, mismatches)};
}

Outcome format_round_trip() {
    std::mt19937_64 rng(11);
    testing::TempDir dir;
    const DType dtypes[] = {DType::F32, DType::F64};
    int failures = 0;
    for (int inst = 0; inst < kRoundTripInstances; ++inst) {
        auto map = testing::random_map(rng, 1 + static_cast<int>(rng() % 6), dtypes[rng() % std::size(dtypes)]);
        map.metadata()["method"] = "rcp";
        map.metadata()[fmt::format("note.{}", inst)] = fmt::format("value \"{}\" é", rng() % 1000);
        const auto a = dir / "a.safetensors", b = dir / "b.safetensors";
        save_checkpoint(map, a);
        save_checkpoint(map, b);
        const auto back = load_checkpoint(a);
        const bool ok = back.bit_equal(map) && back.metadata() == map.metadata() && sha256_file(a) == sha256_file(b);
        failures += ok ? 0 : 1;
    }
    return {failures == 0, fmt::format("{} random maps, {} failures", kRoundTripInstances, failures)};
}

Outcome toy_balance() {
    const auto start = std::chrono::steady_clock::now();
    std::vector<double> domain_ratio, reasoning_ratio;
    std::vector<std::string> per_seed;
    for (int seed = 0; seed < kToySeeds; ++seed) {
        const auto& config = toy().prepared(static_cast<std::uint64_t>(seed));
        std::ostringstream log;
        cmd_stats(config, log);
        cmd_merge(config, log);
        const ArtifactPaths paths{config.output_dir};
        const Transformer model(config.model);
        const auto a = load_corpus(config.corpus_path("eval_a"), config.model.context_len, CorpusRole::other);
        const auto b = load_corpus(config.corpus_path("eval_b"), config.model.context_len, CorpusRole::other);
        const auto merged = load_checkpoint(paths.merged());
        const auto reasoning = load_checkpoint(paths.reasoning());
        const auto domain = load_checkpoint(paths.domain(1));
        const double merged_a = perplexity(model, merged, a).ppl, reasoning_a = perplexity(model, reasoning, a).ppl;
        const double merged_b = perplexity(model, merged, b).ppl, domain_b = perplexity(model, domain, b).ppl;
        domain_ratio.push_back(merged_a / reasoning_a);
        reasoning_ratio.push_back(merged_b / domain_b);
        per_seed.push_back(fmt::format("{:.3g}/{:.3g}", domain_ratio.back(), reasoning_ratio.back()));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double ma = median(domain_ratio), mb = median(reasoning_ratio);
    return {ma < 1.0 && mb < 1.0 && secs < kToyBudgetSeconds,
            fmt::format("median ppl ratio merged/reasoning on A {:.3f}, merged/domain on B {:.3f} "
                        "(per seed A/B: {}), {:.1f}s",
                        ma, mb, fmt::join(per_seed, " "), secs)};
}

Outcome metric_definitions() {
    auto cfg = testing::tiny_config();
    cfg.n_layers = 0;
    const Transformer model(cfg);
    const auto p = perplexity(model, testing::zero_params(cfg), testing::make_set({"hello", "abc", "merge me"}));
    const std::vector<TokenSeq> abab = {to_tokens("abab")};
    const double d = distinct_n(abab, 2);
    return {p.ppl == 256.0 && std::fabs(d - 2.0 / 3.0) < kDistinctTolerance,
            fmt::format("zero-weight ppl {}, distinct_2(abab) {:.17g}", p.ppl, d)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "gradient correctness", gradient_correctness},
        {2, "sensitivity Taylor oracle", taylor_oracle},
        {3, "Fisher diagonal exactness", fim_exactness},
        {4, "vote/mask brute-force equivalence", vote_equivalence},
        {5, "mask monotonicity", mask_monotonicity},
        {6, "merge identities", merge_identities},
        {7, "DARE unbiasedness", dare_unbiasedness},
        {8, "TIES oracle", ties_oracle},
        {9, "format round-trip", format_round_trip},
        {10, "toy balance", toy_balance},
        {11, "metric definitions", metric_definitions},
    };
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--only" && i + 1 < argc) only = std::stoi(argv[++i]);
        else {
            std::cerr << "usage: rcpmerge_acceptance [--only N]\n";
            return 2;
        }
    }
    int failed = 0;
    for (const auto& c : criteria) {
        if (only != 0 && c.id != only) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, fmt::format("exception: {}", e.what())};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << fmt::format("{} [{}] {}: {} ({:.2f}s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail, secs)
                  << std::flush;
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
