// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <algorithm>
#include <cmath>
#include <random>

#include <doctest.h>

#include "oracles.hpp"
#include "rcpmerge/error.hpp"
#include "rcpmerge/model.hpp"
#include "reference_transformer.hpp"
#include "support.hpp"

using namespace rcpmerge;

TEST_CASE("config validation") {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 3;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("n_heads must divide d_model"), ValidationError);
    cfg.n_heads = 2;
    cfg.n_layers = -1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.n_layers = 0;
    CHECK_NOTHROW(cfg.validate());
    CHECK(ModelConfig::from_json(cfg.to_json()) == cfg);
    CHECK_THROWS_AS(ModelConfig::from_json(R"({"d_model": 8, "bogus": 1})"), ValidationError);
}

TEST_CASE("parameter naming scheme") {
    const auto cfg = testing::tiny_config();
    std::vector<std::string> names;
    for (const auto& s : parameter_specs(cfg)) names.push_back(s.name);
    CHECK(std::is_sorted(names.begin(), names.end()));
    CHECK(std::find(names.begin(), names.end(), "layers.0.attn.wq") != names.end());
    CHECK(std::find(names.begin(), names.end(), "layers.0.mlp.w2") != names.end());
    CHECK(parameter_count(cfg) == 256 * 8 + 8 * 8 + 2 * 8 + 4 * 64 + 2 * 8 * 32 + 8 + 8 * 256);
}

TEST_CASE("init is seeded and deterministic") {
    const auto cfg = testing::tiny_config(3);
    const auto a = init_model(cfg), b = init_model(cfg);
    CHECK(a.bit_equal(b));
    auto other = cfg;
    other.seed = 4;
    CHECK_FALSE(init_model(other).bit_equal(a));
    CHECK(a.at("final_norm").get(0) == 1.0);
    CHECK(config_from_metadata(a.metadata()) == cfg);
    // Scale: entries are N(0, 1/d).
    const auto& emb = a.at("tok_emb");
    double s2 = 0.0;
    for (std::size_t i = 0; i < emb.numel(); ++i) s2 += emb.get(i) * emb.get(i);
    CHECK(s2 / static_cast<double>(emb.numel()) == doctest::Approx(1.0 / 8.0).epsilon(0.1));
}

TEST_CASE("zero-weight zero-layer model has loss ln(vocab)") {
    auto cfg = testing::tiny_config();
    cfg.n_layers = 0;
    const Transformer model(cfg);
    const auto params = testing::zero_params(cfg);
    for (const auto& text : {std::string("ab"), std::string("hello"), std::string("abcdefgh")})
        CHECK(model.forward_loss(params, to_tokens(text)) == std::log(256.0));
}

TEST_CASE("property: loss is non-negative") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        auto cfg = testing::tiny_config(static_cast<std::uint64_t>(trial));
        cfg.n_layers = trial % 3;
        const Transformer model(cfg);
        const auto params = init_model(cfg);
        TokenSeq s(2 + rng() % 7);
        for (auto& t : s) t = static_cast<Token>(rng() % 256);
        CHECK(model.forward_loss(params, s) >= 0.0);
    }
}

TEST_CASE("forward matches the Eigen reference implementation") {
    ModelConfig cfg;
    cfg.context_len = 16;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.n_layers = 2;
    cfg.seed = 21;
    const Transformer model(cfg);
    const auto params = init_model(cfg, DType::F64);
    const testing::ReferenceTransformer ref(cfg, params);
    for (const auto& text : {"the cat sat", "0123456789abcdef", "xy"}) {
        const auto tokens = to_tokens(text);
        const double a = model.forward_loss(params, tokens);
        const double b = ref.loss(tokens);
        CHECK(std::fabs(a - b) <= 1e-6 * std::fabs(b));
        const auto logits = model.logits(params, tokens);
        const auto expected = ref.logits(tokens);
        double worst = 0.0;
        for (Eigen::Index t = 0; t < expected.rows(); ++t)
            for (Eigen::Index v = 0; v < expected.cols(); ++v)
                worst = std::max(worst, std::fabs(logits[static_cast<std::size_t>(t * expected.cols() + v)] -
                                                  expected(t, v)));
        CHECK(worst < 1e-9);
    }
}

TEST_CASE("backward matches central finite differences") {
    const auto cfg = testing::tiny_config(5);
    const Transformer model(cfg);
    const auto params = init_model(cfg, DType::F64);
    const auto check = testing::finite_difference_check(model, params, to_tokens("abcab!"), 1e-4, 1e-3);
    INFO("worst ", check.worst_tensor, "[", check.worst_index, "] analytic ", check.analytic, " numeric ",
         check.numeric);
    CHECK(check.checked == parameter_count(cfg));
    CHECK(check.max_rel_error < 1e-4);
}

TEST_CASE("gradients of unused embedding rows are exactly zero") {
    const auto cfg = testing::tiny_config(2);
    const Transformer model(cfg);
    const auto params = init_model(cfg);
    const auto sample = to_tokens("abca");
    const auto grad = model.backward(params, sample);
    const auto& g = grad.at("tok_emb");
    for (int token = 0; token < 256; ++token) {
        const bool used = token == 'a' || token == 'b' || token == 'c';
        double row = 0.0;
        for (int j = 0; j < cfg.d_model; ++j) row += std::fabs(g.get(static_cast<std::size_t>(token * cfg.d_model + j)));
        if (!used) CHECK(row == 0.0);
    }
    // The last input token is never an input position with a target.
    const auto& gp = grad.at("pos_emb");
    for (std::size_t i = 4 * 8; i < gp.numel(); ++i) CHECK(gp.get(i) == 0.0);
    CHECK(model.backward(params, sample).bit_equal(grad));
}

TEST_CASE("forward rejects bad inputs") {
    const auto cfg = testing::tiny_config();
    const Transformer model(cfg);
    const auto params = init_model(cfg);
    CHECK_THROWS_AS(model.forward_loss(params, TokenSeq{1}), ValidationError);
    CHECK_THROWS_AS(model.forward_loss(params, TokenSeq{1, 256}), ValidationError);
    CHECK_THROWS_AS(model.forward_loss(params, TokenSeq(9, 1)), ValidationError);
    TensorMap missing = params;
    missing = TensorMap{};
    CHECK_THROWS_AS(model.forward_loss(missing, TokenSeq{1, 2}), ValidationError);
}

TEST_CASE("training") {
    const auto cfg = testing::tiny_config(4);
    const Transformer model(cfg);
    const auto params = init_model(cfg);
    const auto corpus = testing::make_set({"abcabc", "bcabca", "cabcab"});

    SUBCASE("zero steps are rejected") {
        CHECK_THROWS_AS(train(model, params, corpus, {.steps = 0}), ValidationError);
    }
    SUBCASE("zero learning rate leaves weights unchanged") {
        CHECK(train(model, params, corpus, {.steps = 1, .lr = 0.0}).bit_equal(params));
    }
    SUBCASE("empty corpus is rejected") {
        CHECK_THROWS_AS(train(model, params, CalibrationSet{}, {}), ValidationError);
    }
    SUBCASE("deterministic") {
        TrainOptions opts{.steps = 20, .lr = 0.1, .seed = 3};
        CHECK(train(model, params, corpus, opts).bit_equal(train(model, params, corpus, opts)));
    }
}

namespace {

double mean_loss(const Transformer& model, const TensorMap& params, const CalibrationSet& set) {
    double total = 0.0;
    for (const auto& s : set.samples) total += model.forward_loss(params, s);
    return total / static_cast<double>(set.size());
}

}  // namespace

TEST_CASE("500 SGD steps reduce the loss on a repetitive corpus (median of 5 seeds)") {
    ModelConfig cfg;
    cfg.context_len = 16;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    std::vector<std::string> lines;
    const std::vector<std::string> motifs = {"abab", "xyzxyz", "hello "};
    for (int i = 0; i < 50; ++i) lines.push_back((motifs[static_cast<std::size_t>(i % 3)] + "0123456789").substr(0, 10));
    const auto corpus = testing::make_set(lines);
    std::vector<double> ratios;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        cfg.seed = seed;
        const Transformer model(cfg);
        const auto params = init_model(cfg);
        const auto trained = train(model, params, corpus, {.steps = 500, .lr = 0.05, .seed = seed});
        ratios.push_back(mean_loss(model, trained, corpus) / mean_loss(model, params, corpus));
    }
    std::sort(ratios.begin(), ratios.end());
    CHECK(ratios[2] < 1.0);
}

TEST_CASE("greedy generation") {
    const auto cfg = testing::tiny_config(6);
    const Transformer model(cfg);
    const auto params = init_model(cfg);
    const auto prompt = to_tokens("ab");
    CHECK(model.generate(params, prompt, 0) == prompt);
    const auto a = model.generate(params, prompt, 4);
    CHECK(a.size() == 6);
    CHECK(model.generate(params, prompt, 4) == a);
    CHECK(model.generate(params, prompt, 100).size() == static_cast<std::size_t>(cfg.context_len));
    CHECK_THROWS_AS(model.generate(params, TokenSeq(9, 1), 1), ValidationError);
    CHECK_THROWS_AS(model.generate(params, TokenSeq{}, 1), ValidationError);
}

TEST_CASE("greedy generation stops on the stop token and breaks ties low") {
    auto cfg = testing::tiny_config();
    cfg.n_layers = 0;
    const Transformer model(cfg);
    auto params = testing::zero_params(cfg);
    // Uniform logits: argmax ties resolve to token 0.
    CHECK(model.generate(params, to_tokens("a"), 2) == TokenSeq{'a', 0, 0});
    for (int v = 0; v < 256; ++v) params.at("tok_emb").set(static_cast<std::size_t>(v * cfg.d_model), 1.0);
    params.at("final_norm").set(0, 1.0);
    params.at("lm_head").set('\n', 1.0);
    const auto out = model.generate(params, to_tokens("ab"), 5, Token{'\n'});
    CHECK(out == TokenSeq{'a', 'b', '\n'});
}

TEST_CASE("a model trained on repeated patterns continues them") {
    ModelConfig cfg;
    cfg.context_len = 24;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 1;
    cfg.seed = 2;
    const std::vector<std::string> motifs = {"abc", "xyz", "mnop", "qrs", "tuvw", "ijk"};
    std::vector<std::string> lines;
    for (const auto& m : motifs) {
        std::string s;
        while (s.size() < 24) s += m;
        lines.push_back(s.substr(0, 24));
    }
    const auto corpus = testing::make_set(lines);
    const Transformer model(cfg);
    const auto trained = train(model, init_model(cfg), corpus, {.steps = 1500, .lr = 0.05, .seed = 1});
    std::size_t match = 0, total = 0;
    for (const auto& m : motifs) {
        const auto prompt = to_tokens(m + m);
        const auto out = model.generate(trained, prompt, 12);
        for (std::size_t i = prompt.size(); i < out.size(); ++i) {
            match += out[i] == prompt[i % m.size()] ? 1 : 0;
            ++total;
        }
    }
    CHECK(static_cast<double>(match) >= 0.8 * static_cast<double>(total));
}
