// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <fmt/format.h>

#include "json.hpp"
#include "rcpmerge/error.hpp"
#include "rcpmerge/parallel.hpp"

namespace rcpmerge {

namespace {

// Sum over predicted positions of -log2 p(next token).
double sample_bits(const Transformer& model, const TensorMap& params, const TokenSeq& sample) {
    const auto vocab = static_cast<std::size_t>(model.config().vocab_size);
    const auto logits = model.logits(params, sample);
    double bits = 0.0;
    for (std::size_t t = 0; t + 1 < sample.size(); ++t) {
        const double* row = logits.data() + t * vocab;
        const double zmax = *std::max_element(row, row + vocab);
        double sum = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(row[v] - zmax);
        const auto target = static_cast<std::size_t>(sample[t + 1]);
        bits += std::log2(sum) + (zmax - row[target]) * std::numbers::log2e;
    }
    return bits;
}

}  // namespace

Perplexity perplexity(const Transformer& model, const TensorMap& params, const CalibrationSet& corpus, int threads) {
    if (corpus.empty()) throw ValidationError("perplexity: corpus is empty");
    model.check_params(params);
    validate_corpus(corpus, model.config().vocab_size, model.config().context_len);
    std::vector<double> bits(corpus.size());
    parallel_for(corpus.size(), threads, [&](std::size_t i) { bits[i] = sample_bits(model, params, corpus.samples[i]); });
    double total = 0.0;
    std::uint64_t tokens = 0;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        total += bits[i];
        tokens += corpus.samples[i].size() - 1;
    }
    Perplexity out;
    out.tokens = tokens;
    const double mean_bits = total / static_cast<double>(tokens);
    out.mean_nll = mean_bits * std::numbers::ln2;
    out.ppl = std::exp2(mean_bits);
    if (!std::isfinite(out.ppl)) throw NumericError("perplexity: non-finite result");
    return out;
}

double distinct_n(std::span<const TokenSeq> texts, int n) {
    if (n < 1) throw ValidationError(fmt::format("distinct_n: n must be >= 1 (got {})", n));
    const auto order = static_cast<std::size_t>(n);
    std::set<std::vector<Token>> unique;
    std::uint64_t total = 0;
    for (const auto& text : texts) {
        if (text.size() < order) continue;
        for (std::size_t i = 0; i + order <= text.size(); ++i) {
            unique.emplace(text.begin() + static_cast<std::ptrdiff_t>(i),
                           text.begin() + static_cast<std::ptrdiff_t>(i + order));
            ++total;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<double>(unique.size()) / static_cast<double>(total);
}

namespace {

std::vector<TokenSeq> continuations(const Transformer& model, const TensorMap& params,
                                    std::span<const TokenSeq> prompts, int max_new, std::optional<Token> stop_token,
                                    int threads) {
    std::vector<TokenSeq> out(prompts.size());
    parallel_for(prompts.size(), threads, [&](std::size_t i) {
        auto full = model.generate(params, prompts[i], max_new, stop_token);
        out[i].assign(full.begin() + static_cast<std::ptrdiff_t>(prompts[i].size()), full.end());
    });
    return out;
}

double mean_length(const std::vector<TokenSeq>& generated) {
    double total = 0.0;
    for (const auto& g : generated) total += static_cast<double>(g.size());
    return total / static_cast<double>(generated.size());
}

}  // namespace

double generation_length(const Transformer& model, const TensorMap& params, std::span<const TokenSeq> prompts,
                         int max_new, std::optional<Token> stop_token, int threads) {
    if (prompts.empty()) throw ValidationError("generation_length: prompt list is empty");
    if (max_new < 0) throw ValidationError("generation_length: max_new must be >= 0");
    return mean_length(continuations(model, params, prompts, max_new, stop_token, threads));
}

CorpusMetrics evaluate_corpus(const Transformer& model, const TensorMap& params, const CalibrationSet& corpus,
                              const EvalOptions& options) {
    if (options.prompt_len < 1) throw ValidationError("evaluate: prompt_len must be >= 1");
    CorpusMetrics m;
    m.corpus = corpus.name;
    const auto p = perplexity(model, params, corpus, options.threads);
    m.mean_nll = p.mean_nll;
    m.perplexity = p.ppl;
    m.tokens = p.tokens;

    std::vector<TokenSeq> prompts;
    for (const auto& s : corpus.samples) {
        if (prompts.size() == options.max_prompts) break;
        const auto len = std::min(s.size(), static_cast<std::size_t>(options.prompt_len));
        prompts.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(len));
    }
    if (!prompts.empty() && options.max_new > 0) {
        const auto generated =
            continuations(model, params, prompts, options.max_new, options.stop_token, options.threads);
        m.mean_gen_length = mean_length(generated);
        for (int n : options.distinct_orders) m.distinct_n[n] = distinct_n(generated, n);
    } else {
        for (int n : options.distinct_orders) m.distinct_n[n] = 0.0;
    }
    return m;
}

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["model"] = model;
    j["model_id"] = model_id;
    j["corpora"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
        nlohmann::ordered_json c;
        c["corpus"] = e.corpus;
        c["mean_nll"] = e.mean_nll;
        c["perplexity"] = e.perplexity;
        c["tokens"] = e.tokens;
        c["distinct_n"] = nlohmann::ordered_json::object();
        for (const auto& [n, v] : e.distinct_n) c["distinct_n"][std::to_string(n)] = v;
        c["mean_gen_length"] = e.mean_gen_length;
        j["corpora"].push_back(c);
    }
    return j.dump(2) + "\n";
}

namespace {

std::vector<std::vector<std::string>> rows_of(const MetricsReport& r, std::vector<std::string>& header) {
    header = {"corpus", "tokens", "mean_nll", "perplexity"};
    std::set<int> orders;
    for (const auto& e : r.entries)
        for (const auto& [n, v] : e.distinct_n) orders.insert(n);
    for (int n : orders) header.push_back(fmt::format("distinct_{}", n));
    header.push_back("mean_gen_length");
    std::vector<std::vector<std::string>> rows;
    for (const auto& e : r.entries) {
        std::vector<std::string> row = {e.corpus, std::to_string(e.tokens), fmt::format("{:.6f}", e.mean_nll),
                                        fmt::format("{:.4f}", e.perplexity)};
        for (int n : orders) {
            auto it = e.distinct_n.find(n);
            row.push_back(it == e.distinct_n.end() ? "" : fmt::format("{:.4f}", it->second));
        }
        row.push_back(fmt::format("{:.2f}", e.mean_gen_length));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& row : rows)
        for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], row[c].size());
    auto line = [&](const std::vector<std::string>& cells) {
        std::string s;
        for (std::size_t c = 0; c < width.size(); ++c) {
            const std::string& cell = c < cells.size() ? cells[c] : std::string();
            if (c > 0) s += "  ";
            s += c == 0 ? fmt::format("{:<{}}", cell, width[c]) : fmt::format("{:>{}}", cell, width[c]);
        }
        while (!s.empty() && s.back() == ' ') s.pop_back();
        return s + "\n";
    };
    std::string out = line(header);
    std::vector<std::string> rule;
    for (auto w : width) rule.emplace_back(w, '-');
    out += line(rule);
    for (const auto& row : rows) out += line(row);
    return out;
}

std::string format_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    auto cell = [](const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        return q + "\"";
    };
    auto line = [&](const std::vector<std::string>& cells) {
        std::string s;
        for (std::size_t c = 0; c < cells.size(); ++c) s += (c ? "," : "") + cell(cells[c]);
        return s + "\n";
    };
    std::string out = line(header);
    for (const auto& row : rows) out += line(row);
    return out;
}

std::string MetricsReport::to_table() const {
    std::vector<std::string> header;
    const auto rows = rows_of(*this, header);
    return fmt::format("model {} ({})\n", model, model_id) + format_table(header, rows);
}

std::string MetricsReport::to_csv() const {
    std::vector<std::string> header;
    auto rows = rows_of(*this, header);
    header.insert(header.begin(), {"model", "model_id"});
    for (auto& row : rows) row.insert(row.begin(), {model, model_id});
    return format_csv(header, rows);
}

}  // namespace rcpmerge
