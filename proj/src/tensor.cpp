// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "rcpmerge/error.hpp"

namespace rcpmerge {

std::string_view dtype_name(DType dtype) {
    return dtype == DType::F32 ? "F32" : "F64";
}

std::size_t dtype_size(DType dtype) {
    return dtype == DType::F32 ? 4 : 8;
}

DType parse_dtype(std::string_view name) {
    if (name == "F32") return DType::F32;
    if (name == "F64") return DType::F64;
    throw ValidationError(fmt::format("unsupported dtype '{}' (expected F32 or F64)", name));
}

std::uint64_t shape_numel(const Shape& shape) {
    std::uint64_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_string(const Shape& shape) {
    return fmt::format("[{}]", fmt::join(shape, ", "));
}

Tensor::Tensor(DType dtype, Shape shape) : shape_(std::move(shape)) {
    const auto n = static_cast<std::size_t>(shape_numel(shape_));
    if (dtype == DType::F32)
        data_ = std::vector<float>(n, 0.0f);
    else
        data_ = std::vector<double>(n, 0.0);
}

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
    if (shape_numel(shape) != values.size())
        throw ValidationError(fmt::format("shape {} needs {} elements, got {}", shape_string(shape),
                                          shape_numel(shape), values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
        throw ValidationError(fmt::format("shape {} needs {} elements, got {}", shape_string(shape),
                                          shape_numel(shape), values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

Tensor Tensor::from_values(DType dtype, Shape shape, std::span<const double> values) {
    Tensor t(dtype, std::move(shape));
    t.assign(values);
    return t;
}

std::size_t Tensor::numel() const noexcept {
    return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Tensor::get(std::size_t i) const {
    return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, data_);
}

void Tensor::set(std::size_t i, double value) {
    std::visit([&](auto& v) { v.at(i) = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
               data_);
}

std::vector<double> Tensor::to_f64() const {
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
}

void Tensor::assign(std::span<const double> values) {
    if (values.size() != numel())
        throw ValidationError(fmt::format("assign: expected {} values, got {}", numel(), values.size()));
    std::visit(
        [&](auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            std::transform(values.begin(), values.end(), v.begin(), [](double x) { return static_cast<T>(x); });
        },
        data_);
}

Tensor Tensor::cast(DType dtype) const {
    if (dtype == this->dtype()) return *this;
    const auto values = to_f64();
    return from_values(dtype, shape_, values);
}

std::span<const float> Tensor::f32() const {
    if (dtype() != DType::F32) throw ValidationError("tensor is not F32");
    return std::get<0>(data_);
}

std::span<float> Tensor::f32() {
    if (dtype() != DType::F32) throw ValidationError("tensor is not F32");
    return std::get<0>(data_);
}

std::span<const double> Tensor::f64() const {
    if (dtype() != DType::F64) throw ValidationError("tensor is not F64");
    return std::get<1>(data_);
}

std::span<double> Tensor::f64() {
    if (dtype() != DType::F64) throw ValidationError("tensor is not F64");
    return std::get<1>(data_);
}

std::span<const std::byte> Tensor::bytes() const {
    return std::visit([](const auto& v) { return std::as_bytes(std::span(v)); }, data_);
}

std::span<std::byte> Tensor::bytes() {
    return std::visit([](auto& v) { return std::as_writable_bytes(std::span(v)); }, data_);
}

bool Tensor::all_finite() const {
    return std::visit([](const auto& v) { return std::all_of(v.begin(), v.end(), [](auto x) { return std::isfinite(x); }); },
                      data_);
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (dtype() != other.dtype() || shape_ != other.shape_) return false;
    const auto a = bytes();
    const auto b = other.bytes();
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size()) == 0;
}

void TensorMap::insert(std::string name, Tensor tensor) {
    auto [it, inserted] = entries_.try_emplace(std::move(name), std::move(tensor));
    if (!inserted) throw ValidationError(fmt::format("duplicate tensor name '{}'", it->first));
}

void TensorMap::insert_or_assign(std::string name, Tensor tensor) {
    entries_.insert_or_assign(std::move(name), std::move(tensor));
}

const Tensor& TensorMap::at(std::string_view name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError(fmt::format("no tensor named '{}'", name));
    return it->second;
}

Tensor& TensorMap::at(std::string_view name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError(fmt::format("no tensor named '{}'", name));
    return it->second;
}

std::uint64_t TensorMap::total_numel() const {
    std::uint64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

std::vector<std::string> TensorMap::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, t] : entries_) out.push_back(name);
    return out;
}

bool TensorMap::bit_equal(const TensorMap& other) const {
    if (metadata_ != other.metadata_ || entries_.size() != other.entries_.size()) return false;
    auto it = other.entries_.begin();
    for (const auto& [name, t] : entries_) {
        if (name != it->first || !t.bit_equal(it->second)) return false;
        ++it;
    }
    return true;
}

TensorMap TensorMap::cast(DType dtype) const {
    TensorMap out;
    out.metadata_ = metadata_;
    for (const auto& [name, t] : entries_) out.entries_.emplace(name, t.cast(dtype));
    return out;
}

void require_same_layout(const TensorMap& a, const TensorMap& b, std::string_view what) {
    std::vector<std::string> only_a, only_b, shape_errors;
    for (const auto& [name, t] : a) {
        if (!b.contains(name))
            only_a.push_back(name);
        else if (b.at(name).shape() != t.shape())
            shape_errors.push_back(fmt::format("'{}': {} vs {}", name, shape_string(t.shape()),
                                               shape_string(b.at(name).shape())));
    }
    for (const auto& [name, t] : b)
        if (!a.contains(name)) only_b.push_back(name);

    if (only_a.empty() && only_b.empty() && shape_errors.empty()) return;
    std::string msg = fmt::format("{}: tensor maps do not match", what);
    if (!only_a.empty() || !only_b.empty()) {
        std::vector<std::string> unmatched = only_a;
        unmatched.insert(unmatched.end(), only_b.begin(), only_b.end());
        msg += fmt::format("; unmatched names: {}", fmt::join(unmatched, ", "));
    }
    if (!shape_errors.empty()) msg += fmt::format("; shape mismatch: {}", fmt::join(shape_errors, "; "));
    throw ValidationError(msg);
}

}  // namespace rcpmerge
