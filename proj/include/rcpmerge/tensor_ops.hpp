// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include "rcpmerge/tensor.hpp"

namespace rcpmerge {

enum class CombineOp : std::uint8_t { add, sub, hadamard };

/// Element-wise a (op) b, evaluated at float64 and stored at a's dtype.
Tensor combine(const Tensor& a, const Tensor& b, CombineOp op);
Tensor scale(const Tensor& a, double c);

/// Map-level versions. Key sets and shapes must agree exactly.
TensorMap combine(const TensorMap& a, const TensorMap& b, CombineOp op);
TensorMap scale(const TensorMap& a, double c);

/// theta_t - theta_pre.
inline TensorMap task_vector(const TensorMap& fine_tuned, const TensorMap& base) {
    return combine(fine_tuned, base, CombineOp::sub);
}

/// Throws NumericError naming the first tensor holding a NaN or infinity.
void require_finite(const TensorMap& map, std::string_view what);

}  // namespace rcpmerge
