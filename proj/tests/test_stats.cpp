// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>
#include <random>

#include <doctest.h>

#include "oracles.hpp"
#include "rcpmerge/error.hpp"
#include "rcpmerge/stats.hpp"
#include "support.hpp"

using namespace rcpmerge;

namespace {

TensorMap scalar_map(double v) {
    TensorMap m;
    m.insert("w", Tensor::from_f64({}, {v}));
    return m;
}

TensorMap vector_map(const std::vector<double>& v) {
    TensorMap m;
    m.insert("w", Tensor::from_f64({v.size()}, v));
    return m;
}

/// Gradient provider returning grads[k] for the k-th index_set sample.
GradientFn table_grads(std::vector<TensorMap> grads) {
    return [grads = std::move(grads)](const TensorMap&, const TokenSeq& s) { return grads.at(testing::sample_index(s)); };
}

/// Sensitivity S_k = g_k * theta_t = s[k] when theta_t is 1 everywhere.
VoteResult vote_scalar(const std::vector<double>& s, double p, double lambda_r, Ablation ablation = Ablation::none) {
    std::vector<TensorMap> grads;
    for (double v : s) grads.push_back(scalar_map(v));
    PenaltyMap pen{scalar_map(p)};
    VoteOptions opts;
    opts.lambda_r = lambda_r;
    opts.ablation = ablation;
    return vote_mask(scalar_map(1.0), scalar_map(1.0), pen, testing::index_set(s.size()), table_grads(grads), opts);
}

}  // namespace

TEST_CASE("Fisher diagonal examples") {
    const auto model = scalar_map(0.0);
    auto two = fim_diagonal(model, testing::index_set(2), table_grads({scalar_map(1.0), scalar_map(3.0)}));
    CHECK(two.values.at("w").get(0) == 5.0);
    CHECK(two.n_samples == 2);
    CHECK(fim_diagonal(model, testing::index_set(2), table_grads({scalar_map(0.0), scalar_map(0.0)}))
              .values.at("w")
              .get(0) == 0.0);
    CHECK(fim_diagonal(model, testing::index_set(1), table_grads({scalar_map(2.0)})).values.at("w").get(0) == 4.0);
    CHECK_THROWS_AS(fim_diagonal(model, CalibrationSet{}, table_grads({})), ValidationError);
}

TEST_CASE("Fisher diagonal equals the mean of squared gradients") {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> normal;
    const std::size_t n = 137;
    std::vector<TensorMap> grads;
    std::vector<double> expected(4, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        std::vector<double> g(4);
        for (auto& v : g) v = normal(rng);
        for (std::size_t i = 0; i < 4; ++i) expected[i] += g[i] * g[i];
        grads.push_back(vector_map(g));
    }
    const auto fim = fim_diagonal(vector_map({0, 0, 0, 0}), testing::index_set(n), table_grads(grads));
    for (std::size_t i = 0; i < 4; ++i) CHECK(fim.values.at("w").get(i) == expected[i] / static_cast<double>(n));
}

TEST_CASE("parallel Fisher accumulation is bit-identical to sequential") {
    const auto cfg = testing::tiny_config(9);
    const Transformer model(cfg);
    const auto params = init_model(cfg);
    const auto set = testing::make_set({"abc", "hello", "xyzzy", "12+3=15", "qq", "the end", "zz", "ok!"});
    const auto grad_fn = make_gradient_fn(model);
    const auto seq = fim_diagonal(params, set, grad_fn, {.deterministic = true});
    const auto par = fim_diagonal(params, set, grad_fn, {.deterministic = false, .threads = 4});
    CHECK(seq.values.bit_equal(par.values));
}

TEST_CASE("preservation penalty examples") {
    FimDiagonal fim{scalar_map(4.0), 1};
    CHECK(preservation_penalty(fim, scalar_map(1.5), scalar_map(1.0)).values.at("w").get(0) == 0.5);
    CHECK(preservation_penalty(fim, scalar_map(0.7), scalar_map(0.7)).values.at("w").get(0) == 0.0);
    FimDiagonal zero{scalar_map(0.0), 1};
    CHECK(preservation_penalty(zero, scalar_map(9.0), scalar_map(-3.0)).values.at("w").get(0) == 0.0);
}

TEST_CASE("property: penalty is non-negative") {
    std::mt19937_64 rng(32);
    for (int trial = 0; trial < 30; ++trial) {
        const auto like = testing::random_map(rng, 3, DType::F64);
        auto fisher = testing::random_like(rng, like);
        for (auto& [name, t] : fisher)
            for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, t.get(i) * t.get(i));
        const auto p = preservation_penalty({fisher, 1}, testing::random_like(rng, like), testing::random_like(rng, like));
        for (const auto& [name, t] : p.values)
            for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t.get(i) >= 0.0);
    }
}

TEST_CASE("sensitivity examples") {
    CHECK(domain_sensitivity_sample(scalar_map(-0.5), scalar_map(0.8)).at("w").get(0) == -0.5 * 0.8);
    CHECK(domain_sensitivity_sample(scalar_map(0.0), scalar_map(0.8)).at("w").get(0) == 0.0);
}

TEST_CASE("Taylor sensitivity converges to exact nullification loss change") {
    // L(theta) = a * theta + theta^2 / 2, so dL/dtheta = a + theta.
    const double a = 1.0;
    auto loss = [&](double th) { return a * th + 0.5 * th * th; };
    double previous = 0.0;
    for (double theta : {0.1, 0.01}) {
        const double taylor = domain_sensitivity_sample(scalar_map(theta), scalar_map(a + theta)).at("w").get(0);
        const double exact = loss(theta) - loss(0.0);
        const double rel = std::fabs(taylor - exact) / std::fabs(exact);
        CHECK(rel < (theta == 0.1 ? 0.06 : 0.006));
        if (previous > 0.0) CHECK(rel < previous / 5.0);
        previous = rel;
    }
}

TEST_CASE("vote examples") {
    auto r = vote_scalar({-1.0, -0.2, 0.5}, 0.5, 0.3);
    CHECK(r.votes.accept_votes("w") == std::vector<std::uint32_t>{2});
    CHECK(r.mask.at("w").get(0) == 1.0);
    CHECK(r.mask.at("w").dtype() == DType::F32);
    CHECK(vote_scalar({-1.0, 0.5}, 0.0, 0.3).mask.at("w").get(0) == 0.0);
    CHECK(vote_scalar({-0.1, -0.1, 0.2}, 123.0, 0.0).mask.at("w").get(0) == 1.0);
    CHECK(vote_scalar({-0.1, -0.1, 0.2}, 0.5, 0.3).mask.at("w").get(0) == 0.0);
    CHECK(vote_thresholds(PenaltyMap{scalar_map(0.5)}, 0.3).at("w").get(0) == -0.3 * 0.5);
}

TEST_CASE("vote input validation") {
    CHECK_THROWS_AS(vote_scalar({-1.0}, 0.5, -0.1), ValidationError);
    CHECK_THROWS_AS(vote_scalar({-1.0}, 0.5, NAN), ValidationError);
    CHECK_THROWS_AS(vote_scalar({}, 0.5, 0.3), ValidationError);
    CHECK(parse_ablation("sensitivity") == Ablation::without_sensitivity);
    CHECK(parse_ablation("preservation") == Ablation::without_preservation);
    CHECK(parse_ablation("none") == Ablation::none);
    CHECK_THROWS_AS(parse_ablation("fisher"), ValidationError);
}

namespace {

struct RandomVote {
    std::vector<std::vector<double>> S;  // [param][sample]
    std::vector<double> p;
};

RandomVote random_vote(std::mt19937_64& rng, std::size_t params, std::size_t samples) {
    std::normal_distribution<double> normal;
    RandomVote v;
    v.S.assign(params, std::vector<double>(samples));
    v.p.resize(params);
    for (auto& row : v.S)
        for (auto& s : row) s = normal(rng);
    for (auto& p : v.p) p = std::fabs(normal(rng)) * 2.0;
    return v;
}

std::vector<int> library_mask(const RandomVote& v, double lambda, Ablation ablation = Ablation::none) {
    const std::size_t n = v.p.size(), K = v.S.front().size();
    std::vector<TensorMap> grads;
    for (std::size_t k = 0; k < K; ++k) {
        std::vector<double> g(n);
        for (std::size_t i = 0; i < n; ++i) g[i] = v.S[i][k];
        grads.push_back(vector_map(g));
    }
    VoteOptions opts;
    opts.lambda_r = lambda;
    opts.ablation = ablation;
    const auto ones = vector_map(std::vector<double>(n, 1.0));
    const auto r = vote_mask(ones, ones, PenaltyMap{vector_map(v.p)}, testing::index_set(K), table_grads(grads), opts);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<int>(r.mask.at("w").get(i));
    return out;
}

}  // namespace

TEST_CASE("streaming vote equals the literal cost matrix rule") {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 40; ++trial) {
        const auto v = random_vote(rng, 1 + rng() % 20, 1 + rng() % 9);
        const double lambda = std::vector<double>{0.0, 0.1, 0.3, 1.0, 10.0}[trial % 5];
        CHECK(library_mask(v, lambda) == testing::brute_force_mask(v.S, v.p, lambda));
    }
}

TEST_CASE("property: accepted set shrinks as lambda_r grows") {
    std::mt19937_64 rng(34);
    const std::vector<double> grid = {0.0, 0.1, 0.3, 1.0, 10.0};
    for (int trial = 0; trial < 20; ++trial) {
        const auto v = random_vote(rng, 50, 1 + rng() % 8);
        auto prev = library_mask(v, grid[0]);
        for (std::size_t g = 1; g < grid.size(); ++g) {
            const auto cur = library_mask(v, grid[g]);
            for (std::size_t i = 0; i < cur.size(); ++i) CHECK(cur[i] <= prev[i]);
            prev = cur;
        }
    }
}

TEST_CASE("ablations") {
    std::mt19937_64 rng(35);
    const auto v = random_vote(rng, 64, 5);
    CHECK(library_mask(v, 0.0) == library_mask(v, 0.7, Ablation::without_preservation));
    const auto none = library_mask(v, 0.3, Ablation::without_sensitivity);
    CHECK(std::all_of(none.begin(), none.end(), [](int m) { return m == 0; }));
}

TEST_CASE("vote counter persistence") {
    std::mt19937_64 rng(36);
    const auto v = random_vote(rng, 10, 7);
    std::vector<TensorMap> grads;
    for (std::size_t k = 0; k < 7; ++k) {
        std::vector<double> g(10);
        for (std::size_t i = 0; i < 10; ++i) g[i] = v.S[i][k];
        grads.push_back(vector_map(g));
    }
    const auto ones = vector_map(std::vector<double>(10, 1.0));
    VoteOptions opts;
    const auto r = vote_mask(ones, ones, PenaltyMap{vector_map(v.p)}, testing::index_set(7), table_grads(grads), opts);
    const auto stored = r.votes.to_tensor_map();
    const auto back = VoteCounter::from_tensor_map(stored);
    CHECK(back.total_samples() == 7);
    CHECK(back.accept_votes("w") == r.votes.accept_votes("w"));
    CHECK(back.mask().bit_equal(r.mask));
    CHECK(back.parameter_count() == 10);

    auto bad = stored;
    bad.at("w").set(0, 8.0);
    CHECK_THROWS_AS(VoteCounter::from_tensor_map(bad), ValidationError);
    auto untagged = stored;
    untagged.metadata().clear();
    CHECK_THROWS_AS(VoteCounter::from_tensor_map(untagged), ValidationError);
}

TEST_CASE("vote_mask on a real model is identical across execution modes") {
    const auto cfg = testing::tiny_config(12);
    const Transformer model(cfg);
    const auto theta_r = init_model(cfg);
    auto tcfg = cfg;
    tcfg.seed = 13;
    const auto theta_t = init_model(tcfg);
    const auto grad_fn = make_gradient_fn(model);
    const auto set = testing::make_set({"abcd", "bcda", "hello w", "xy", "1+1=2"});
    const auto fim = fim_diagonal(theta_r, set, grad_fn);
    const auto pen = preservation_penalty(fim, theta_t, theta_r);
    VoteOptions seq;
    VoteOptions par;
    par.exec = {.deterministic = false, .threads = 3};
    const auto a = vote_mask(theta_t, theta_r, pen, set, grad_fn, seq);
    const auto b = vote_mask(theta_t, theta_r, pen, set, grad_fn, par);
    CHECK(a.mask.bit_equal(b.mask));
    CHECK(a.votes.to_tensor_map().bit_equal(b.votes.to_tensor_map()));
}
