// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/tensor_ops.hpp"

#include <fmt/format.h>

#include "rcpmerge/error.hpp"

namespace rcpmerge {

Tensor combine(const Tensor& a, const Tensor& b, CombineOp op) {
    if (a.shape() != b.shape())
        throw ValidationError(fmt::format("combine: shape mismatch {} vs {}", shape_string(a.shape()),
                                          shape_string(b.shape())));
    auto x = a.to_f64();
    const auto y = b.to_f64();
    for (std::size_t i = 0; i < x.size(); ++i) {
        switch (op) {
        case CombineOp::add: x[i] += y[i]; break;
        case CombineOp::sub: x[i] -= y[i]; break;
        case CombineOp::hadamard: x[i] *= y[i]; break;
        }
    }
    return Tensor::from_values(a.dtype(), a.shape(), x);
}

Tensor scale(const Tensor& a, double c) {
    auto x = a.to_f64();
    for (auto& v : x) v *= c;
    return Tensor::from_values(a.dtype(), a.shape(), x);
}

TensorMap combine(const TensorMap& a, const TensorMap& b, CombineOp op) {
    require_same_layout(a, b, "combine");
    TensorMap out;
    for (const auto& [name, t] : a) out.insert(name, combine(t, b.at(name), op));
    return out;
}

TensorMap scale(const TensorMap& a, double c) {
    TensorMap out;
    for (const auto& [name, t] : a) out.insert(name, scale(t, c));
    return out;
}

void require_finite(const TensorMap& map, std::string_view what) {
    for (const auto& [name, t] : map)
        if (!t.all_finite()) throw NumericError(fmt::format("{}: tensor '{}' contains non-finite values", what, name));
}

}  // namespace rcpmerge
