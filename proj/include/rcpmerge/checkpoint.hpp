// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint container, byte-compatible with the safetensors
// layout:
//
//   [u64 LE header length N][N bytes of JSON header][raw LE payload]
//
// The header maps tensor names to {"dtype", "shape", "data_offsets"} with
// offsets relative to the first payload byte, plus an optional
// "__metadata__" object of string values. The writer emits tensors in
// lexicographic name order with contiguous payload ranges and pads the
// header with spaces to a multiple of 8 bytes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <memory>
#include <string>
#include <vector>

#include "rcpmerge/tensor.hpp"

namespace rcpmerge {

struct TensorInfo {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::uint64_t begin = 0;  ///< payload-relative byte offset
    std::uint64_t end = 0;
};

struct LoadOptions {
    bool allow_nonfinite = false;
};

/**
 * @brief Header-first reader that loads one tensor at a time.
 *
 * The constructor validates the complete header (dtypes, shapes, offsets
 * within the payload, no overlaps, no duplicate names) before any payload
 * byte is read.
 */
class CheckpointReader {
public:
    explicit CheckpointReader(const std::filesystem::path& path, LoadOptions options = {});
    /// Reads from an in-memory copy of a checkpoint file.
    static CheckpointReader from_bytes(std::string bytes, LoadOptions options = {});

    const std::filesystem::path& path() const noexcept { return path_; }
    /// Sorted by name.
    const std::vector<TensorInfo>& tensors() const noexcept { return infos_; }
    const Metadata& metadata() const noexcept { return metadata_; }
    const TensorInfo* find(std::string_view name) const;

    Tensor read(std::string_view name);
    TensorMap read_all();

private:
    CheckpointReader(std::unique_ptr<std::istream> in, std::uint64_t size, std::filesystem::path label,
                     LoadOptions options);
    void parse_header(std::uint64_t size);

    std::filesystem::path path_;
    LoadOptions options_;
    std::unique_ptr<std::istream> in_;
    std::uint64_t payload_start_ = 0;
    std::vector<TensorInfo> infos_;
    Metadata metadata_;
};

struct TensorSpec {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
};

/**
 * @brief Streaming writer: the header is fixed up front from the specs,
 * then payloads are appended in name order.
 *
 * Output goes to a sibling temporary file which is renamed over `path` by
 * finish(), so an interrupted stage never leaves a half-written checkpoint
 * under the final name.
 */
class CheckpointWriter {
public:
    CheckpointWriter(const std::filesystem::path& path, std::vector<TensorSpec> specs, const Metadata& metadata);
    ~CheckpointWriter();
    CheckpointWriter(const CheckpointWriter&) = delete;
    CheckpointWriter& operator=(const CheckpointWriter&) = delete;

    /// Tensors must arrive in the sorted order of the specs.
    void write(std::string_view name, const Tensor& tensor);
    void finish();

    const std::vector<TensorSpec>& specs() const noexcept { return specs_; }

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_path_;
    std::ofstream out_;
    std::vector<TensorSpec> specs_;
    std::size_t next_ = 0;
    bool finished_ = false;
};

TensorMap load_checkpoint(const std::filesystem::path& path, LoadOptions options = {});
void save_checkpoint(const TensorMap& map, const std::filesystem::path& path);

/// The exact bytes save_checkpoint would write.
std::string serialize_checkpoint(const TensorMap& map);
TensorMap deserialize_checkpoint(const std::string& bytes, LoadOptions options = {});

/// SHA-256 of the serialized form; a stable content id for in-memory maps.
std::string content_hash(const TensorMap& map);

}  // namespace rcpmerge
