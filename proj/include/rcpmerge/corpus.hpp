// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace rcpmerge {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

enum class CorpusRole : std::uint8_t { domain, reasoning, other };

std::string_view role_name(CorpusRole role);

/// Ordered token sequences (D_t or D_r). Every sample has 2..context_len tokens.
struct CalibrationSet {
    std::vector<TokenSeq> samples;
    CorpusRole role = CorpusRole::other;
    std::string name;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }
    std::size_t token_count() const;
};

/// Raw bytes as tokens.
TokenSeq to_tokens(std::string_view text);
std::string to_text(const TokenSeq& tokens);

/**
 * Loads a corpus: UTF-8 text with one sample per line, or JSONL (".jsonl"
 * extension) with a "text" field per line. Samples are truncated to
 * `context_len` bytes; blank lines and samples shorter than two bytes are
 * skipped. Throws ValidationError if nothing usable remains.
 */
CalibrationSet load_corpus(const std::filesystem::path& path, int context_len, CorpusRole role,
                           int vocab_size = 256);

/// Throws ValidationError on an empty set, a sample outside [2, context_len]
/// tokens, or a token id outside [0, vocab_size).
void validate_corpus(const CalibrationSet& set, int vocab_size, int context_len);

}  // namespace rcpmerge
