// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat float64 parameter layout and the forward/backward kernels shared by
// model.cpp and train.cpp.

#pragma once

#include <span>
#include <vector>

#include "rcpmerge/model.hpp"

namespace rcpmerge::detail {

/// Offsets of every parameter inside one contiguous float64 buffer.
class FlatLayout {
public:
    explicit FlatLayout(const ModelConfig& cfg);

    struct Layer {
        std::size_t attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2;
    };

    const ModelConfig& config() const noexcept { return cfg_; }
    std::size_t size() const noexcept { return size_; }

    std::vector<double> pack(const TensorMap& params) const;
    TensorMap unpack(std::span<const double> flat, DType dtype) const;

    std::size_t tok_emb = 0, pos_emb = 0, final_norm = 0, lm_head = 0;
    std::vector<Layer> layers;

private:
    ModelConfig cfg_;
    std::vector<TensorSpec> specs_;
    std::vector<std::size_t> offsets_;  // parallel to specs_
    std::size_t size_ = 0;
};

struct LayerCache {
    std::vector<double> x_in, r1, n1, h1, q, k, v, att, o, x_mid, r2, n2, h2, u, act;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    std::vector<double> x0, x_final, rf, nf, hf, logits;
    int steps = 0;
};

/// Fills `cache` (including logits) for the given input tokens.
void forward(const FlatLayout& layout, const double* w, std::span<const Token> inputs, ForwardCache& cache);

/// Mean NLL of `targets` under cache.logits.
double mean_nll(const ForwardCache& cache, int vocab, std::span<const Token> targets);

/// Accumulates d(mean NLL)/dw into `grad` (same layout as w).
void backward(const FlatLayout& layout, const double* w, std::span<const Token> inputs,
              std::span<const Token> targets, const ForwardCache& cache, double* grad);

}  // namespace rcpmerge::detail
