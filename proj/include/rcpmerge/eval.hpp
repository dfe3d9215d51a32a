// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Output-quality metrics: corpus perplexity, Distinct-N over byte tokens,
// and greedy generation length.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcpmerge/corpus.hpp"
#include "rcpmerge/model.hpp"

namespace rcpmerge {

struct Perplexity {
    double mean_nll = 0.0;  ///< nats per token
    double ppl = 0.0;
    std::uint64_t tokens = 0;
};

/**
 * Token-weighted over every predicted position of every sample.
 * Log-likelihoods are accumulated in bits and ppl = 2^(mean bits), which
 * makes a uniform predictor over 2^k tokens score exactly 2^k;
 * mean_nll = mean bits * ln 2.
 */
Perplexity perplexity(const Transformer& model, const TensorMap& params, const CalibrationSet& corpus,
                      int threads = 1);

/// Unique n-grams over all texts divided by the n-gram count; 0 when there
/// are no n-grams. Throws ValidationError if n < 1.
double distinct_n(std::span<const TokenSeq> texts, int n);

/// Mean number of new tokens per prompt under greedy decoding; a generated
/// stop token counts toward the length.
double generation_length(const Transformer& model, const TensorMap& params, std::span<const TokenSeq> prompts,
                         int max_new, std::optional<Token> stop_token = std::nullopt, int threads = 1);

struct EvalOptions {
    int prompt_len = 8;
    int max_new = 32;
    std::size_t max_prompts = 16;
    std::optional<Token> stop_token;
    std::vector<int> distinct_orders = {1, 2, 3};
    int threads = 1;
};

struct CorpusMetrics {
    std::string corpus;
    double mean_nll = 0.0;
    double perplexity = 0.0;
    std::uint64_t tokens = 0;
    std::map<int, double> distinct_n;
    double mean_gen_length = 0.0;
};

struct MetricsReport {
    std::string model;     ///< display label
    std::string model_id;  ///< SHA-256 of the evaluated checkpoint
    std::vector<CorpusMetrics> entries;

    std::string to_json() const;
    std::string to_table() const;
    std::string to_csv() const;
};

/// Left-aligned first column, right-aligned numbers, a dashed rule under the header.
std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);
std::string format_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

/// Perplexity on the whole corpus; generation metrics from greedy
/// continuations of the first `prompt_len` tokens of up to `max_prompts` samples.
CorpusMetrics evaluate_corpus(const Transformer& model, const TensorMap& params, const CalibrationSet& corpus,
                              const EvalOptions& options = {});

}  // namespace rcpmerge
