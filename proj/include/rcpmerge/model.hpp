// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level decoder-only transformer with hand-written forward and
// backward passes. See docs/architecture.md for the exact definition.
//
// Parameter names:
//   tok_emb               [vocab, d_model]
//   pos_emb               [context_len, d_model]
//   layers.{i}.attn_norm  [d_model]
//   layers.{i}.attn.wq    [d_model, d_model]   (also wk, wv, wo)
//   layers.{i}.mlp_norm   [d_model]
//   layers.{i}.mlp.w1     [d_model, 4*d_model]
//   layers.{i}.mlp.w2     [4*d_model, d_model]
//   final_norm            [d_model]
//   lm_head               [d_model, vocab]
// Matrices act on row vectors: y = x W.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcpmerge/checkpoint.hpp"
#include "rcpmerge/corpus.hpp"
#include "rcpmerge/tensor.hpp"

namespace rcpmerge {

struct ModelConfig {
    int vocab_size = 256;
    int context_len = 64;
    int d_model = 32;
    int n_heads = 4;
    int n_layers = 2;
    std::uint64_t seed = 0;

    int d_ff() const noexcept { return 4 * d_model; }
    int head_dim() const noexcept { return d_model / n_heads; }

    /// Throws ValidationError ("n_heads must divide d_model", ...).
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

/// Metadata key under which checkpoints carry their ModelConfig.
inline constexpr const char* kModelConfigKey = "model.config";

/// Reads the ModelConfig stored in checkpoint metadata.
ModelConfig config_from_metadata(const Metadata& metadata);

/// Names and shapes of every parameter, sorted by name.
std::vector<TensorSpec> parameter_specs(const ModelConfig& cfg, DType dtype = DType::F32);
std::size_t parameter_count(const ModelConfig& cfg);

/**
 * Deterministic initialization from (cfg, cfg.seed). Matrices and
 * embeddings are N(0, 1/d_model); RMS-norm gains start at 1. The config is
 * recorded in the returned map's metadata.
 */
TensorMap init_model(const ModelConfig& cfg, DType dtype = DType::F32);

class Transformer {
public:
    explicit Transformer(ModelConfig cfg);

    const ModelConfig& config() const noexcept { return cfg_; }

    /// Mean next-token NLL over positions 1..len-1 (nats).
    double forward_loss(const TensorMap& params, std::span<const Token> sample) const;

    /// dLoss/dparam for every parameter, as float64 tensors.
    TensorMap backward(const TensorMap& params, std::span<const Token> sample) const;

    /// Row-major [tokens.size(), vocab] logits, one row per input position.
    std::vector<double> logits(const TensorMap& params, std::span<const Token> tokens) const;

    /**
     * Greedy decoding (argmax, ties to the lowest token id). Stops after
     * `max_new` tokens, after emitting `stop_token`, or when the sequence
     * reaches context_len.
     */
    TokenSeq generate(const TensorMap& params, std::span<const Token> prompt, int max_new,
                      std::optional<Token> stop_token = std::nullopt) const;

    /// Checks names, shapes and finiteness of a parameter map against the config.
    void check_params(const TensorMap& params) const;

private:
    ModelConfig cfg_;
};

/// Per-sample gradient provider: (params, sample) -> dLoss/dparams.
/// Must be safe to call concurrently.
using GradientFn = std::function<TensorMap(const TensorMap&, const TokenSeq&)>;

GradientFn make_gradient_fn(const Transformer& model);

struct TrainOptions {
    int steps = 100;
    double lr = 0.05;
    std::uint64_t seed = 0;
    /// Called after every step with the step index and the pre-update loss.
    std::function<void(int, double)> on_step;
};

/**
 * Plain SGD, one sample per step. The visiting order is a seeded
 * permutation per epoch, so results are a pure function of the inputs.
 * Output keeps the dtype and metadata of `params`.
 */
TensorMap train(const Transformer& model, const TensorMap& params, const CalibrationSet& corpus,
                const TrainOptions& options);

}  // namespace rcpmerge
