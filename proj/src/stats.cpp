// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/stats.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "rcpmerge/error.hpp"
#include "rcpmerge/parallel.hpp"

namespace rcpmerge {

namespace {

int worker_count(const ExecOptions& exec) {
    if (exec.deterministic) return 1;
    return exec.threads > 0 ? exec.threads : default_thread_count();
}

// Evaluates grad_fn on every sample and hands the gradients to `fold` in
// corpus order. Gradients are produced in batches of `workers` so at most
// that many gradient maps are alive at once.
template <class Fold>
void stream_gradients(const TensorMap& params, const CalibrationSet& set, const GradientFn& grad_fn,
                      const ExecOptions& exec, Fold&& fold) {
    const auto workers = static_cast<std::size_t>(worker_count(exec));
    std::vector<TensorMap> batch(workers);
    for (std::size_t start = 0; start < set.size(); start += workers) {
        const auto count = std::min(workers, set.size() - start);
        parallel_for(count, static_cast<int>(workers),
                     [&](std::size_t j) { batch[j] = grad_fn(params, set.samples[start + j]); });
        for (std::size_t j = 0; j < count; ++j) {
            require_same_layout(params, batch[j], fmt::format("gradient of sample {}", start + j));
            fold(start + j, batch[j]);
            batch[j] = TensorMap{};
        }
    }
}

}  // namespace

FimDiagonal fim_diagonal(const TensorMap& model, const CalibrationSet& reasoning_set, const GradientFn& grad_fn,
                         const ExecOptions& exec) {
    if (reasoning_set.empty()) throw ValidationError("fim_diagonal: reasoning set is empty");
    std::vector<std::vector<double>> acc;
    std::vector<const Tensor*> shapes;
    for (const auto& [name, t] : model) {
        acc.emplace_back(t.numel(), 0.0);
        shapes.push_back(&t);
    }
    stream_gradients(model, reasoning_set, grad_fn, exec, [&](std::size_t, const TensorMap& grad) {
        std::size_t idx = 0;
        for (const auto& [name, g] : grad) {
            const auto values = g.to_f64();
            auto& a = acc[idx++];
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += values[i] * values[i];
        }
    });

    FimDiagonal fim;
    fim.n_samples = reasoning_set.size();
    const auto n = static_cast<double>(fim.n_samples);
    std::size_t idx = 0;
    for (const auto& [name, t] : model) {
        auto& a = acc[idx++];
        for (auto& v : a) v /= n;
        fim.values.insert(name, Tensor::from_f64(t.shape(), std::move(a)));
    }
    return fim;
}

PenaltyMap preservation_penalty(const FimDiagonal& fim, const TensorMap& theta_t, const TensorMap& theta_r) {
    require_same_layout(fim.values, theta_t, "preservation_penalty (fim vs theta_t)");
    require_same_layout(theta_t, theta_r, "preservation_penalty (theta_t vs theta_r)");
    PenaltyMap penalty;
    for (const auto& [name, f] : fim.values) {
        const auto fv = f.to_f64();
        const auto t = theta_t.at(name).to_f64();
        const auto r = theta_r.at(name).to_f64();
        std::vector<double> p(fv.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double dev = t[i] - r[i];
            p[i] = 0.5 * fv[i] * (dev * dev);
        }
        penalty.values.insert(name, Tensor::from_f64(f.shape(), std::move(p)));
    }
    return penalty;
}

TensorMap domain_sensitivity_sample(const TensorMap& theta_t, const TensorMap& grad) {
    require_same_layout(theta_t, grad, "domain_sensitivity_sample");
    TensorMap out;
    for (const auto& [name, t] : theta_t) {
        auto s = grad.at(name).to_f64();
        const auto th = t.to_f64();
        for (std::size_t i = 0; i < s.size(); ++i) s[i] *= th[i];
        out.insert(name, Tensor::from_f64(t.shape(), std::move(s)));
    }
    return out;
}

VoteCounter::VoteCounter(const TensorMap& like) {
    for (const auto& [name, t] : like) {
        names_.push_back(name);
        shapes_.push_back(t.shape());
        votes_.emplace_back(t.numel(), 0u);
    }
}

const std::vector<std::uint32_t>& VoteCounter::accept_votes(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return votes_[i];
    throw ValidationError(fmt::format("vote counter has no tensor '{}'", name));
}

void VoteCounter::add_tensor(const std::string& name, std::span<const double> sensitivity,
                             std::span<const double> threshold) {
    std::size_t idx = names_.size();
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) idx = i;
    if (idx == names_.size()) throw ValidationError(fmt::format("vote counter has no tensor '{}'", name));
    auto& v = votes_[idx];
    if (sensitivity.size() != v.size() || threshold.size() != v.size())
        throw ValidationError(fmt::format("vote counter: size mismatch for '{}'", name));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += sensitivity[i] < threshold[i] ? 1u : 0u;
}

void VoteCounter::add_sample(const TensorMap& sensitivity, const TensorMap& threshold) {
    if (total_samples_ == std::numeric_limits<std::uint32_t>::max())
        throw ValidationError("vote counter: too many samples");
    for (std::size_t i = 0; i < names_.size(); ++i) {
        const auto s = sensitivity.at(names_[i]).to_f64();
        const auto t = threshold.at(names_[i]).to_f64();
        add_tensor(names_[i], s, t);
    }
    finish_sample();
}

TensorMap VoteCounter::mask() const {
    TensorMap out;
    for (std::size_t i = 0; i < names_.size(); ++i) {
        std::vector<float> m(votes_[i].size());
        for (std::size_t j = 0; j < m.size(); ++j) {
            const auto accept = votes_[i][j];
            const auto reject = total_samples_ - accept;
            m[j] = accept > reject ? 1.0f : 0.0f;
        }
        out.insert(names_[i], Tensor::from_f32(shapes_[i], std::move(m)));
    }
    return out;
}

std::uint64_t VoteCounter::accepted_count() const {
    std::uint64_t n = 0;
    for (const auto& v : votes_)
        for (auto accept : v) n += accept > total_samples_ - accept ? 1 : 0;
    return n;
}

std::uint64_t VoteCounter::parameter_count() const {
    std::uint64_t n = 0;
    for (const auto& v : votes_) n += v.size();
    return n;
}

TensorMap VoteCounter::to_tensor_map() const {
    TensorMap out;
    for (std::size_t i = 0; i < names_.size(); ++i) {
        std::vector<double> c(votes_[i].begin(), votes_[i].end());
        out.insert(names_[i], Tensor::from_f64(shapes_[i], std::move(c)));
    }
    out.metadata()["total_samples"] = std::to_string(total_samples_);
    return out;
}

VoteCounter VoteCounter::from_tensor_map(const TensorMap& map) {
    VoteCounter vc(map);
    auto it = map.metadata().find("total_samples");
    if (it == map.metadata().end()) throw ValidationError("vote file has no 'total_samples' metadata");
    try {
        const auto total = std::stoull(it->second);
        if (total > std::numeric_limits<std::uint32_t>::max()) throw std::out_of_range("total_samples");
        vc.total_samples_ = static_cast<std::uint32_t>(total);
    } catch (const std::exception&) {
        throw ValidationError(fmt::format("invalid total_samples '{}'", it->second));
    }
    std::size_t idx = 0;
    for (const auto& [name, t] : map) {
        auto& v = vc.votes_[idx++];
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double c = t.get(j);
            if (!(c >= 0.0) || c > vc.total_samples_ || c != std::floor(c))
                throw ValidationError(fmt::format("vote count {} in '{}' outside [0, {}]", c, name, vc.total_samples_));
            v[j] = static_cast<std::uint32_t>(c);
        }
    }
    return vc;
}

Ablation parse_ablation(std::string_view name) {
    if (name.empty() || name == "none") return Ablation::none;
    if (name == "sensitivity") return Ablation::without_sensitivity;
    if (name == "preservation") return Ablation::without_preservation;
    throw ValidationError(fmt::format("unknown ablation '{}' (expected sensitivity or preservation)", name));
}

std::string_view ablation_name(Ablation ablation) {
    switch (ablation) {
    case Ablation::without_sensitivity: return "sensitivity";
    case Ablation::without_preservation: return "preservation";
    case Ablation::none: break;
    }
    return "none";
}

TensorMap vote_thresholds(const PenaltyMap& penalty, double lambda_r) {
    TensorMap out;
    for (const auto& [name, p] : penalty.values) {
        auto v = p.to_f64();
        for (auto& x : v) x = -(lambda_r * x);
        out.insert(name, Tensor::from_f64(p.shape(), std::move(v)));
    }
    return out;
}

VoteResult vote_mask(const TensorMap& theta_t, const TensorMap& theta_r, const PenaltyMap& penalty,
                     const CalibrationSet& domain_set, const GradientFn& grad_fn, const VoteOptions& options) {
    if (!std::isfinite(options.lambda_r) || options.lambda_r < 0.0)
        throw ValidationError(fmt::format("lambda_r must be finite and >= 0 (got {})", options.lambda_r));
    if (domain_set.empty()) throw ValidationError("vote_mask: domain set is empty");
    require_same_layout(theta_t, theta_r, "vote_mask (theta_t vs theta_r)");
    require_same_layout(theta_t, penalty.values, "vote_mask (theta_t vs penalty)");

    const double lambda = options.ablation == Ablation::without_preservation ? 0.0 : options.lambda_r;
    const auto thresholds = vote_thresholds(penalty, lambda);
    VoteCounter votes(theta_t);

    if (options.ablation == Ablation::without_sensitivity) {
        // S is dropped, so every sample compares 0 against the threshold.
        for (std::size_t k = 0; k < domain_set.size(); ++k) {
            for (const auto& [name, th] : thresholds) {
                const std::vector<double> zero(th.numel(), 0.0);
                votes.add_tensor(name, zero, th.f64());
            }
            votes.finish_sample();
        }
    } else {
        std::vector<std::vector<double>> theta;
        for (const auto& [name, t] : theta_t) theta.push_back(t.to_f64());
        std::vector<double> s;
        stream_gradients(theta_t, domain_set, grad_fn, options.exec, [&](std::size_t, const TensorMap& grad) {
            std::size_t idx = 0;
            for (const auto& [name, g] : grad) {
                const auto& th = theta[idx++];
                s = g.to_f64();
                for (std::size_t i = 0; i < s.size(); ++i) {
                    s[i] *= th[i];
                    if (options.abs_sensitivity) s[i] = std::fabs(s[i]);
                }
                votes.add_tensor(name, s, thresholds.at(name).f64());
            }
            votes.finish_sample();
        });
    }

    VoteResult result{std::move(votes), {}};
    result.mask = result.votes.mask();
    return result;
}

}  // namespace rcpmerge
