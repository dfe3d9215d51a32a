// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "rcpmerge/error.hpp"
#include "rcpmerge/model.hpp"
#include "rcpmerge/philox.hpp"
#include "transformer_impl.hpp"

namespace rcpmerge {

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const KeyedRandom rng(seed, "train.order", epoch);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform(i) * static_cast<double>(i));
        std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    return order;
}

}  // namespace

TensorMap train(const Transformer& model, const TensorMap& params, const CalibrationSet& corpus,
                const TrainOptions& options) {
    const auto& cfg = model.config();
    if (options.steps < 1) throw ValidationError(fmt::format("train: steps must be >= 1 (got {})", options.steps));
    if (!std::isfinite(options.lr) || options.lr < 0.0)
        throw ValidationError(fmt::format("train: learning rate must be finite and non-negative (got {})", options.lr));
    if (corpus.empty()) throw ValidationError("train: empty corpus");
    validate_corpus(corpus, cfg.vocab_size, cfg.context_len);
    model.check_params(params);

    const detail::FlatLayout layout(cfg);
    auto w = layout.pack(params);
    std::vector<double> grad(layout.size());
    detail::ForwardCache cache;

    std::vector<std::size_t> order;
    for (int step = 0; step < options.steps; ++step) {
        const auto n = corpus.size();
        const auto pos = static_cast<std::size_t>(step) % n;
        if (pos == 0) order = epoch_order(n, options.seed, static_cast<std::uint64_t>(step) / n);
        const auto& sample = corpus.samples[order[pos]];
        const std::span<const Token> tokens(sample);
        const auto inputs = tokens.first(tokens.size() - 1);
        const auto targets = tokens.subspan(1);

        detail::forward(layout, w.data(), inputs, cache);
        const double loss = detail::mean_nll(cache, cfg.vocab_size, targets);
        if (!std::isfinite(loss)) throw NumericError(fmt::format("train: non-finite loss at step {}", step));
        std::fill(grad.begin(), grad.end(), 0.0);
        detail::backward(layout, w.data(), inputs, targets, cache, grad.data());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= options.lr * grad[i];
        if (options.on_step) options.on_step(step, loss);
    }

    auto out = layout.unpack(w, params.begin() == params.end() ? DType::F32 : params.begin()->second.dtype());
    out.metadata() = params.metadata();
    return out;
}

}  // namespace rcpmerge
