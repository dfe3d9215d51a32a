// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace rcpmerge {

enum class DType : std::uint8_t { F32, F64 };

std::string_view dtype_name(DType dtype);
std::size_t dtype_size(DType dtype);
/// Parses the checkpoint spelling ("F32", "F64"). Throws ValidationError otherwise.
DType parse_dtype(std::string_view name);

using Shape = std::vector<std::uint64_t>;

/// Product of extents; the empty shape is a scalar with one element.
std::uint64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/**
 * @brief Dense row-major tensor stored at float32 or float64.
 *
 * Arithmetic elsewhere in the library reads elements as double and writes
 * them back rounded to the tensor's dtype, so float32 payloads round-trip
 * bit-exactly as long as nobody writes to them.
 */
class Tensor {
public:
    Tensor() : Tensor(DType::F32, Shape{0}) {}
    Tensor(DType dtype, Shape shape);

    static Tensor from_f32(Shape shape, std::vector<float> values);
    static Tensor from_f64(Shape shape, std::vector<double> values);
    /// Rounds `values` to `dtype`.
    static Tensor from_values(DType dtype, Shape shape, std::span<const double> values);

    DType dtype() const noexcept { return static_cast<DType>(data_.index()); }
    const Shape& shape() const noexcept { return shape_; }
    std::size_t numel() const noexcept;
    std::size_t nbytes() const noexcept { return numel() * dtype_size(dtype()); }

    double get(std::size_t i) const;
    void set(std::size_t i, double value);

    std::vector<double> to_f64() const;
    /// Copies `values` into this tensor, rounding to the stored dtype.
    void assign(std::span<const double> values);
    Tensor cast(DType dtype) const;

    std::span<const float> f32() const;
    std::span<float> f32();
    std::span<const double> f64() const;
    std::span<double> f64();

    std::span<const std::byte> bytes() const;
    std::span<std::byte> bytes();

    bool all_finite() const;
    /// Same dtype, shape and payload bytes.
    bool bit_equal(const Tensor& other) const;

private:
    Shape shape_;
    std::variant<std::vector<float>, std::vector<double>> data_;
};

using Metadata = std::map<std::string, std::string>;

/**
 * @brief Named tensors plus string metadata.
 *
 * Iteration is in lexicographic (byte-wise) name order, which is also the
 * order tensors are serialized in.
 */
class TensorMap {
public:
    using Entries = std::map<std::string, Tensor, std::less<>>;
    using const_iterator = Entries::const_iterator;
    using iterator = Entries::iterator;

    /// Throws ValidationError if `name` already exists.
    void insert(std::string name, Tensor tensor);
    void insert_or_assign(std::string name, Tensor tensor);

    bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
    const Tensor& at(std::string_view name) const;
    Tensor& at(std::string_view name);

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::uint64_t total_numel() const;
    std::vector<std::string> names() const;

    const_iterator begin() const { return entries_.begin(); }
    const_iterator end() const { return entries_.end(); }
    iterator begin() { return entries_.begin(); }
    iterator end() { return entries_.end(); }

    Metadata& metadata() { return metadata_; }
    const Metadata& metadata() const { return metadata_; }

    /// Element-wise bit equality of every tensor plus equal metadata.
    bool bit_equal(const TensorMap& other) const;

    /// Copy with every tensor cast to `dtype`.
    TensorMap cast(DType dtype) const;

private:
    Entries entries_;
    Metadata metadata_;
};

/// Throws ValidationError unless `a` and `b` have identical name sets and
/// per-name shapes. The message lists the symmetric difference of names
/// and every shape disagreement.
void require_same_layout(const TensorMap& a, const TensorMap& b, std::string_view what);

}  // namespace rcpmerge
