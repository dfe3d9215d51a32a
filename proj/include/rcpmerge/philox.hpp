// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Philox4x32-10 counter-based generator (Salmon et al., "Parallel random
// numbers: as easy as 1, 2, 3"). Every random draw in the library is a pure
// function of (key, counter), so results never depend on iteration order
// or thread count.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace rcpmerge {

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

constexpr PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) noexcept {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
        const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

/// FNV-1a, used to fold tensor names into counters.
constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/**
 * @brief Keyed random stream: draw(index) is deterministic in
 * (seed, stream, index).
 */
class KeyedRandom {
public:
    constexpr KeyedRandom(std::uint64_t seed, std::uint64_t stream) noexcept
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}
    KeyedRandom(std::uint64_t seed, std::string_view name, std::uint64_t salt = 0) noexcept
        : KeyedRandom(seed, fnv1a64(name) ^ (salt * 0x9E3779B97F4A7C15ull)) {}

    constexpr PhiloxCounter block(std::uint64_t index) const noexcept {
        return philox4x32_10({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                              static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                             key_);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform(std::uint64_t index) const noexcept {
        const auto b = block(index);
        const std::uint64_t bits = (std::uint64_t{b[0]} << 21) ^ (b[1] >> 11);
        return static_cast<double>(bits & ((1ull << 53) - 1)) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller on the two halves of one block.
    double normal(std::uint64_t index) const noexcept {
        const auto b = block(index);
        const double u1 = (static_cast<double>((std::uint64_t{b[0]} << 20) ^ b[1]) + 0.5) * 0x1.0p-52;
        const double u2 = static_cast<double>((std::uint64_t{b[2]} << 20) ^ b[3]) * 0x1.0p-52;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    PhiloxKey key_;
    std::uint64_t stream_;
};

}  // namespace rcpmerge
