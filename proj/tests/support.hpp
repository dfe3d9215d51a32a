// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit and acceptance suites.

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "rcpmerge/corpus.hpp"
#include "rcpmerge/model.hpp"
#include "rcpmerge/tensor.hpp"

namespace rcpmerge::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("rcpmerge_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Random map of `count` tensors with random small shapes and values.
inline TensorMap random_map(std::mt19937_64& rng, int count, DType dtype = DType::F32) {
    std::uniform_int_distribution<int> rank(0, 3), extent(0, 5);
    std::normal_distribution<double> value(0.0, 1.0);
    TensorMap m;
    for (int i = 0; i < count; ++i) {
        Shape shape;
        const int r = rank(rng);
        for (int k = 0; k < r; ++k) shape.push_back(static_cast<std::uint64_t>(extent(rng)));
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = value(rng);
        m.insert("t" + std::to_string(i) + "." + std::to_string(rng() % 1000), Tensor::from_values(dtype, shape, v));
    }
    return m;
}

/// Same names and shapes as `like`, i.i.d. normal values at float64.
inline TensorMap random_like(std::mt19937_64& rng, const TensorMap& like, double sigma = 1.0) {
    std::normal_distribution<double> value(0.0, sigma);
    TensorMap m;
    for (const auto& [name, t] : like) {
        std::vector<double> v(t.numel());
        for (auto& x : v) x = value(rng);
        m.insert(name, Tensor::from_f64(t.shape(), std::move(v)));
    }
    return m;
}

inline CalibrationSet make_set(const std::vector<std::string>& lines, CorpusRole role = CorpusRole::other) {
    CalibrationSet set;
    set.role = role;
    for (const auto& l : lines) set.samples.push_back(to_tokens(l));
    return set;
}

/// Calibration set whose k-th sample is the single token pair {k % 256, k / 256}.
/// Used with gradient fakes that look gradients up by sample index.
inline CalibrationSet index_set(std::size_t n) {
    CalibrationSet set;
    for (std::size_t k = 0; k < n; ++k)
        set.samples.push_back({static_cast<Token>(k % 256), static_cast<Token>(k / 256)});
    return set;
}

inline std::size_t sample_index(const TokenSeq& s) {
    return static_cast<std::size_t>(s[0]) + 256 * static_cast<std::size_t>(s[1]);
}

/// A model config small enough for exhaustive gradient checks.
inline ModelConfig tiny_config(std::uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.context_len = 8;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.seed = seed;
    return cfg;
}

/// Zero-layer model with every weight zero: uniform logits.
inline TensorMap zero_params(const ModelConfig& cfg) {
    TensorMap m;
    for (const auto& s : parameter_specs(cfg, DType::F64))
        m.insert(s.name, Tensor::from_f64(s.shape, std::vector<double>(shape_numel(s.shape), 0.0)));
    m.metadata()[kModelConfigKey] = cfg.to_json();
    return m;
}

}  // namespace rcpmerge::testing
