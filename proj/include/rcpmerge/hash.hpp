// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace rcpmerge {

/// Lower-case hex SHA-256 digests, used for content hashes in lineage metadata.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace rcpmerge
