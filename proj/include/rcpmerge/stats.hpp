// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-parameter statistics that decide which domain updates survive a merge:
//
//   F_i      = mean_k (g^r_{i,k})^2                 reasoning Fisher diagonal
//   p_i      = 1/2 * F_i * (theta_t,i - theta_r,i)^2 preservation penalty
//   S_{i,k}  = g^t_{i,k} * theta_t,i                 signed domain sensitivity
//   C_{i,k}  = S_{i,k} + lambda_r * p_i              sample k votes accept iff C < 0
//   M_i      = 1 iff accept votes > reject votes     (ties reject)
//
// Gradients for F are taken at the reasoning model on reasoning samples;
// gradients for S at the domain model on domain samples.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rcpmerge/corpus.hpp"
#include "rcpmerge/model.hpp"
#include "rcpmerge/tensor.hpp"

namespace rcpmerge {

struct ExecOptions {
    /// Sequential, corpus-ordered accumulation on the calling thread.
    bool deterministic = true;
    /// Worker cap for the parallel mode; <= 0 means default_thread_count().
    int threads = 0;
};

struct FimDiagonal {
    TensorMap values;  ///< float64, same names and shapes as the model
    std::size_t n_samples = 0;
};

struct PenaltyMap {
    TensorMap values;  ///< float64
};

/**
 * Mean of squared per-sample gradients over `reasoning_set`, evaluated at
 * `model`. Accumulation is float64 in corpus order in both modes; the
 * parallel mode only computes gradients concurrently, so the result is
 * bit-identical to the sequential one.
 */
FimDiagonal fim_diagonal(const TensorMap& model, const CalibrationSet& reasoning_set, const GradientFn& grad_fn,
                         const ExecOptions& exec = {});

/// 1/2 * F * (theta_t - theta_r)^2, element-wise.
PenaltyMap preservation_penalty(const FimDiagonal& fim, const TensorMap& theta_t, const TensorMap& theta_r);

/// grad * theta_t element-wise (float64), signed.
TensorMap domain_sensitivity_sample(const TensorMap& theta_t, const TensorMap& grad);

/// Per-parameter accept counts while streaming domain samples.
class VoteCounter {
public:
    VoteCounter() = default;
    /// Zeroed counters shaped like `like`.
    explicit VoteCounter(const TensorMap& like);

    std::uint32_t total_samples() const noexcept { return total_samples_; }
    const std::vector<std::uint32_t>& accept_votes(const std::string& name) const;
    const std::vector<std::string>& names() const noexcept { return names_; }

    /// Counts one sample: votes[name][i] += (sensitivity < threshold).
    /// `threshold` holds -lambda_r * p, precomputed once per parameter.
    void add_sample(const TensorMap& sensitivity, const TensorMap& threshold);
    /// Same as add_sample for a single tensor; the caller bumps the sample count.
    void add_tensor(const std::string& name, std::span<const double> sensitivity, std::span<const double> threshold);
    void finish_sample() { ++total_samples_; }

    /// M_i = 1 iff accept > total - accept. Float32 {0, 1}.
    TensorMap mask() const;
    std::uint64_t accepted_count() const;
    std::uint64_t parameter_count() const;

    /// Counts stored as exact float64 integers, total in metadata "total_samples".
    TensorMap to_tensor_map() const;
    static VoteCounter from_tensor_map(const TensorMap& map);

private:
    std::vector<std::string> names_;
    std::vector<Shape> shapes_;
    std::vector<std::vector<std::uint32_t>> votes_;
    std::uint32_t total_samples_ = 0;
};

/// Which term of C is dropped, for the ablation rows.
enum class Ablation : std::uint8_t { none, without_sensitivity, without_preservation };

Ablation parse_ablation(std::string_view name);
std::string_view ablation_name(Ablation ablation);

struct VoteOptions {
    double lambda_r = 0.3;
    /// Literal |g * theta| reading of the sensitivity, for comparison runs.
    bool abs_sensitivity = false;
    Ablation ablation = Ablation::none;
    ExecOptions exec;
};

struct VoteResult {
    VoteCounter votes;
    TensorMap mask;  ///< float32 {0, 1}
};

/**
 * Streams `domain_set` once: gradient at theta_t, sensitivity, vote. Never
 * materializes the parameter-by-sample matrix.
 */
VoteResult vote_mask(const TensorMap& theta_t, const TensorMap& theta_r, const PenaltyMap& penalty,
                     const CalibrationSet& domain_set, const GradientFn& grad_fn, const VoteOptions& options);

/// -lambda_r * p per element (float64); the accept threshold for S.
TensorMap vote_thresholds(const PenaltyMap& penalty, double lambda_r);

}  // namespace rcpmerge
