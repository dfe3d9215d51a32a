// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>

#include <doctest.h>

#include "rcpmerge/philox.hpp"

using namespace rcpmerge;

TEST_CASE("philox4x32-10 known-answer vectors") {
    CHECK(philox4x32_10({0, 0, 0, 0}, {0, 0}) == PhiloxCounter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
    CHECK(philox4x32_10({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
          PhiloxCounter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
    CHECK(philox4x32_10({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
          PhiloxCounter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("keyed streams are deterministic and distinct") {
    const KeyedRandom a(42, "layers.0.attn.wq"), b(42, "layers.0.attn.wq"), c(43, "layers.0.attn.wq"),
        d(42, "layers.0.attn.wk");
    CHECK(a.uniform(7) == b.uniform(7));
    CHECK(a.uniform(7) != c.uniform(7));
    CHECK(a.uniform(7) != d.uniform(7));
    CHECK(KeyedRandom(1, "x", 0).uniform(0) != KeyedRandom(1, "x", 1).uniform(0));
}

TEST_CASE("uniform and normal moments") {
    const KeyedRandom rng(9, "moments");
    const int n = 200000;
    double su = 0.0, sn = 0.0, sn2 = 0.0;
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform(static_cast<std::uint64_t>(i));
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        su += u;
        const double z = rng.normal(static_cast<std::uint64_t>(i));
        sn += z;
        sn2 += z * z;
    }
    CHECK(lo >= 0.0);
    CHECK(hi < 1.0);
    // Tolerances are about five standard errors.
    CHECK(std::fabs(su / n - 0.5) < 5.0 * std::sqrt(1.0 / 12.0 / n));
    CHECK(std::fabs(sn / n) < 5.0 / std::sqrt(n));
    CHECK(std::fabs(sn2 / n - 1.0) < 5.0 * std::sqrt(2.0 / n));
}
