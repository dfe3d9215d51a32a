// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/corpus.hpp"

#include <fstream>

#include <fmt/format.h>

#include "json.hpp"
#include "rcpmerge/error.hpp"

namespace rcpmerge {

std::string_view role_name(CorpusRole role) {
    switch (role) {
    case CorpusRole::domain: return "domain";
    case CorpusRole::reasoning: return "reasoning";
    case CorpusRole::other: break;
    }
    return "other";
}

std::size_t CalibrationSet::token_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.size();
    return n;
}

TokenSeq to_tokens(std::string_view text) {
    TokenSeq out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<Token>(c));
    return out;
}

std::string to_text(const TokenSeq& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (auto t : tokens) out.push_back(static_cast<char>(static_cast<unsigned char>(t & 0xff)));
    return out;
}

CalibrationSet load_corpus(const std::filesystem::path& path, int context_len, CorpusRole role, int vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open corpus '{}'", path.string()));
    const bool jsonl = path.extension() == ".jsonl";

    CalibrationSet set;
    set.role = role;
    set.name = path.filename().string();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::string text;
        if (jsonl) {
            try {
                const auto obj = nlohmann::json::parse(line);
                text = obj.at("text").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError(fmt::format("{}:{}: expected a JSON object with a \"text\" string ({})",
                                                  path.string(), line_no, e.what()));
            }
        } else {
            text = std::move(line);
        }
        if (text.size() > static_cast<std::size_t>(context_len)) text.resize(static_cast<std::size_t>(context_len));
        if (text.size() < 2) continue;
        set.samples.push_back(to_tokens(text));
    }
    if (in.bad()) throw IoError(fmt::format("read error on corpus '{}'", path.string()));
    if (set.empty()) throw ValidationError(fmt::format("corpus '{}' has no usable samples", path.string()));
    validate_corpus(set, vocab_size, context_len);
    return set;
}

void validate_corpus(const CalibrationSet& set, int vocab_size, int context_len) {
    if (set.empty()) throw ValidationError(fmt::format("{} corpus '{}' is empty", role_name(set.role), set.name));
    for (std::size_t k = 0; k < set.samples.size(); ++k) {
        const auto& s = set.samples[k];
        if (s.size() < 2 || s.size() > static_cast<std::size_t>(context_len))
            throw ValidationError(fmt::format("corpus '{}' sample {} has {} tokens (need 2..{})", set.name, k, s.size(),
                                              context_len));
        for (auto t : s)
            if (t < 0 || t >= vocab_size)
                throw ValidationError(fmt::format("corpus '{}' sample {} has token {} outside vocab of {}", set.name, k,
                                                  t, vocab_size));
    }
}

}  // namespace rcpmerge
