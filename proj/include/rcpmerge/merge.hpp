// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Merge kernels. Each map-level function is a loop over per-tensor kernels
// that only see one tensor of each operand, which is what the streaming
// merge driver (recipe.hpp) calls directly. All arithmetic is float64;
// results are stored at the dtype of the base operand.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rcpmerge/tensor.hpp"

namespace rcpmerge {

// ---------------------------------------------------------------------------
// Per-tensor kernels on float64 values.

struct RcpTerm {
    std::span<const double> delta;
    std::span<const double> mask;
    double lambda_t = 1.0;
};

/**
 * theta_r + sum_t lambda_t * (M_t . delta_t). theta_pre + delta_r is folded
 * into theta_r, so coordinates with no accepted update reproduce theta_r
 * bit-for-bit. Returns the number of coordinates where two accepted,
 * non-zero updates disagree in sign through `sign_conflicts`.
 */
std::vector<double> rcp_merge_values(std::span<const double> theta_r, std::span<const RcpTerm> terms,
                                     std::uint64_t* sign_conflicts = nullptr);

/// Zeroes all but the ceil(keep * n) largest-magnitude entries; ties at
/// the cutoff keep the lower flat index.
std::vector<double> ties_trim_values(std::span<const double> delta, double trim_keep);

enum class TiesReduce : std::uint8_t { mean, sum };

/// Sign election and disjoint reduction over already-trimmed deltas.
std::vector<double> ties_elect_values(std::span<const std::vector<double>> trimmed, TiesReduce reduce);

/**
 * Drops each element with probability r and rescales survivors by
 * 1/(1-r). The draw for element i is keyed by (seed, name, stream, i).
 */
std::vector<double> dare_values(std::span<const double> delta, double r, std::uint64_t seed, std::string_view name,
                                std::uint64_t stream);

// ---------------------------------------------------------------------------
// Map-level operations.

struct RcpDomain {
    TensorMap delta;  ///< theta_t - theta_pre
    TensorMap mask;   ///< {0, 1}
    double lambda_t = 1.0;
};

/// theta_pre + (theta_r - theta_pre) + sum_t lambda_t * (M_t . delta_t).
TensorMap rcp_merge(const TensorMap& theta_pre, const TensorMap& theta_r, std::span<const RcpDomain> domains);

/// Coordinates where two accepted domain updates disagree in sign.
std::uint64_t count_sign_conflicts(std::span<const RcpDomain> domains);

/// Unweighted element-wise mean of >= 2 models.
TensorMap linear_merge(std::span<const TensorMap> models);

/// theta_pre + lambda * sum_t delta_t.
TensorMap task_arithmetic(const TensorMap& theta_pre, std::span<const TensorMap> deltas, double lambda);

/// Per-tensor trim, sign election, disjoint merge, then theta_pre + lambda * merged.
TensorMap ties_merge(const TensorMap& theta_pre, std::span<const TensorMap> deltas, double trim_keep, double lambda,
                     TiesReduce reduce = TiesReduce::mean);

/// Random drop with rescale. `stream` separates several deltas merged under one seed.
TensorMap dare(const TensorMap& delta, double r, std::uint64_t seed, std::uint64_t stream = 0);

/// Throws ValidationError unless 0 < trim_keep <= 1.
void check_trim_keep(double trim_keep);
/// Throws ValidationError unless 0 <= r < 1.
void check_drop_rate(double r);

}  // namespace rcpmerge
