// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "rcpmerge/error.hpp"
#include "rcpmerge/philox.hpp"

namespace rcpmerge {

void check_trim_keep(double trim_keep) {
    if (!(trim_keep > 0.0 && trim_keep <= 1.0))
        throw ValidationError(fmt::format("trim_keep must be in (0, 1] (got {})", trim_keep));
}

void check_drop_rate(double r) {
    if (!(r >= 0.0 && r < 1.0)) throw ValidationError(fmt::format("drop rate r must be in [0, 1) (got {})", r));
}

std::vector<double> rcp_merge_values(std::span<const double> theta_r, std::span<const RcpTerm> terms,
                                     std::uint64_t* sign_conflicts) {
    std::vector<double> out(theta_r.begin(), theta_r.end());
    std::uint64_t conflicts = 0;
    for (const auto& term : terms) {
        if (term.delta.size() != out.size() || term.mask.size() != out.size())
            throw ValidationError("rcp_merge: operand sizes differ");
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        int sign_seen = 0;
        bool conflict = false;
        for (const auto& term : terms) {
            const double m = term.mask[i];
            if (m != 0.0 && m != 1.0) throw ValidationError(fmt::format("rcp_merge: mask value {} is not 0 or 1", m));
            if (m == 0.0) continue;
            const double update = term.lambda_t * term.delta[i];
            if (update == 0.0) continue;
            const int sign = update > 0.0 ? 1 : -1;
            if (sign_seen != 0 && sign != sign_seen) conflict = true;
            sign_seen = sign;
            out[i] += update;
        }
        conflicts += conflict ? 1 : 0;
    }
    if (sign_conflicts) *sign_conflicts += conflicts;
    return out;
}

std::vector<double> ties_trim_values(std::span<const double> delta, double trim_keep) {
    check_trim_keep(trim_keep);
    const std::size_t n = delta.size();
    // The slack keeps products like 0.3 * 10 = 3.0000000000000004 from
    // rounding up to an extra element.
    const double raw = trim_keep * static_cast<double>(n);
    const auto k = std::min(n, static_cast<std::size_t>(std::max(1.0, std::ceil(raw - 1e-9 * std::max(1.0, raw)))));
    std::vector<double> out(n, 0.0);
    if (k == 0) return out;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    auto before = [&](std::size_t a, std::size_t b) {
        const double ma = std::fabs(delta[a]), mb = std::fabs(delta[b]);
        return ma != mb ? ma > mb : a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), before);
    for (std::size_t j = 0; j < k; ++j) out[idx[j]] = delta[idx[j]];
    return out;
}

std::vector<double> ties_elect_values(std::span<const std::vector<double>> trimmed, TiesReduce reduce) {
    if (trimmed.empty()) return {};
    const std::size_t n = trimmed.front().size();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (const auto& d : trimmed) total += d[i];
        if (total == 0.0) continue;
        const bool positive = total > 0.0;
        double acc = 0.0;
        int count = 0;
        for (const auto& d : trimmed) {
            if (d[i] != 0.0 && (d[i] > 0.0) == positive) {
                acc += d[i];
                ++count;
            }
        }
        if (count > 0) out[i] = reduce == TiesReduce::mean ? acc / count : acc;
    }
    return out;
}

std::vector<double> dare_values(std::span<const double> delta, double r, std::uint64_t seed, std::string_view name,
                                std::uint64_t stream) {
    check_drop_rate(r);
    std::vector<double> out(delta.begin(), delta.end());
    if (r == 0.0) return out;
    const KeyedRandom rng(seed, name, stream);
    const double rescale = 1.0 / (1.0 - r);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.uniform(i) < r ? 0.0 : out[i] * rescale;
    return out;
}

namespace {

void require_all_match(const TensorMap& reference, std::span<const TensorMap> others, std::string_view what) {
    for (std::size_t i = 0; i < others.size(); ++i)
        require_same_layout(reference, others[i], fmt::format("{} (operand {})", what, i));
}

}  // namespace

TensorMap rcp_merge(const TensorMap& theta_pre, const TensorMap& theta_r, std::span<const RcpDomain> domains) {
    require_same_layout(theta_pre, theta_r, "rcp_merge (theta_pre vs theta_r)");
    for (std::size_t t = 0; t < domains.size(); ++t) {
        require_same_layout(theta_pre, domains[t].delta, fmt::format("rcp_merge (delta {})", t));
        require_same_layout(theta_pre, domains[t].mask, fmt::format("rcp_merge (mask {})", t));
        if (!std::isfinite(domains[t].lambda_t)) throw ValidationError("rcp_merge: lambda_t must be finite");
    }
    TensorMap out;
    for (const auto& [name, pre] : theta_pre) {
        const auto r = theta_r.at(name).to_f64();
        std::vector<std::vector<double>> deltas, masks;
        std::vector<RcpTerm> terms;
        for (const auto& d : domains) {
            deltas.push_back(d.delta.at(name).to_f64());
            masks.push_back(d.mask.at(name).to_f64());
        }
        for (std::size_t t = 0; t < domains.size(); ++t) terms.push_back({deltas[t], masks[t], domains[t].lambda_t});
        const auto merged = rcp_merge_values(r, terms);
        out.insert(name, Tensor::from_values(pre.dtype(), pre.shape(), merged));
    }
    return out;
}

std::uint64_t count_sign_conflicts(std::span<const RcpDomain> domains) {
    if (domains.empty()) return 0;
    std::uint64_t conflicts = 0;
    for (const auto& [name, t] : domains.front().delta) {
        std::vector<std::vector<double>> deltas, masks;
        std::vector<RcpTerm> terms;
        for (const auto& d : domains) {
            deltas.push_back(d.delta.at(name).to_f64());
            masks.push_back(d.mask.at(name).to_f64());
        }
        for (std::size_t k = 0; k < domains.size(); ++k) terms.push_back({deltas[k], masks[k], domains[k].lambda_t});
        const std::vector<double> zeros(t.numel(), 0.0);
        rcp_merge_values(zeros, terms, &conflicts);
    }
    return conflicts;
}

TensorMap linear_merge(std::span<const TensorMap> models) {
    if (models.size() < 2) throw ValidationError("linear_merge: need >= 2 models");
    require_all_match(models.front(), models.subspan(1), "linear_merge");
    TensorMap out;
    const double n = static_cast<double>(models.size());
    for (const auto& [name, first] : models.front()) {
        auto acc = first.to_f64();
        for (std::size_t m = 1; m < models.size(); ++m) {
            const auto v = models[m].at(name).to_f64();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
        }
        for (auto& x : acc) x /= n;
        out.insert(name, Tensor::from_values(first.dtype(), first.shape(), acc));
    }
    return out;
}

TensorMap task_arithmetic(const TensorMap& theta_pre, std::span<const TensorMap> deltas, double lambda) {
    require_all_match(theta_pre, deltas, "task_arithmetic");
    TensorMap out;
    for (const auto& [name, pre] : theta_pre) {
        std::vector<double> sum(pre.numel(), 0.0);
        for (const auto& d : deltas) {
            const auto v = d.at(name).to_f64();
            for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
        }
        auto base = pre.to_f64();
        for (std::size_t i = 0; i < base.size(); ++i) base[i] += lambda * sum[i];
        out.insert(name, Tensor::from_values(pre.dtype(), pre.shape(), base));
    }
    return out;
}

TensorMap ties_merge(const TensorMap& theta_pre, std::span<const TensorMap> deltas, double trim_keep, double lambda,
                     TiesReduce reduce) {
    check_trim_keep(trim_keep);
    require_all_match(theta_pre, deltas, "ties_merge");
    TensorMap out;
    for (const auto& [name, pre] : theta_pre) {
        std::vector<std::vector<double>> trimmed;
        for (const auto& d : deltas) trimmed.push_back(ties_trim_values(d.at(name).to_f64(), trim_keep));
        const auto merged = ties_elect_values(trimmed, reduce);
        auto base = pre.to_f64();
        for (std::size_t i = 0; i < base.size() && !merged.empty(); ++i) base[i] += lambda * merged[i];
        out.insert(name, Tensor::from_values(pre.dtype(), pre.shape(), base));
    }
    return out;
}

TensorMap dare(const TensorMap& delta, double r, std::uint64_t seed, std::uint64_t stream) {
    check_drop_rate(r);
    TensorMap out;
    for (const auto& [name, d] : delta)
        out.insert(name, Tensor::from_values(d.dtype(), d.shape(), dare_values(d.to_f64(), r, seed, name, stream)));
    return out;
}

}  // namespace rcpmerge
