// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "rcpmerge/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "json.hpp"
#include "rcpmerge/error.hpp"
#include "rcpmerge/philox.hpp"
#include "rcpmerge/tensor_ops.hpp"
#include "transformer_impl.hpp"

namespace rcpmerge {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size <= 0) throw ValidationError("vocab_size must be positive");
    if (context_len <= 0) throw ValidationError("context_len must be positive");
    if (d_model <= 0) throw ValidationError("d_model must be positive");
    if (n_heads <= 0) throw ValidationError("n_heads must be positive");
    if (n_layers < 0) throw ValidationError("n_layers must be non-negative");
    if (d_model % n_heads != 0)
        throw ValidationError(fmt::format("n_heads must divide d_model (n_heads = {}, d_model = {})", n_heads, d_model));
}

std::string ModelConfig::to_json() const {
    nlohmann::json j = {{"vocab_size", vocab_size}, {"context_len", context_len}, {"d_model", d_model},
                        {"n_heads", n_heads},       {"n_layers", n_layers},       {"seed", seed}};
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig cfg;
    try {
        const auto j = nlohmann::json::parse(text);
        for (auto& [key, value] : j.items()) {
            if (key == "vocab_size") cfg.vocab_size = value.get<int>();
            else if (key == "context_len") cfg.context_len = value.get<int>();
            else if (key == "d_model") cfg.d_model = value.get<int>();
            else if (key == "n_heads") cfg.n_heads = value.get<int>();
            else if (key == "n_layers") cfg.n_layers = value.get<int>();
            else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
            else throw ValidationError(fmt::format("unknown model config field '{}'", key));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(fmt::format("invalid model config: {}", e.what()));
    }
    cfg.validate();
    return cfg;
}

ModelConfig config_from_metadata(const Metadata& metadata) {
    auto it = metadata.find(kModelConfigKey);
    if (it == metadata.end())
        throw ValidationError(fmt::format("checkpoint metadata has no '{}' entry", kModelConfigKey));
    return ModelConfig::from_json(it->second);
}

std::vector<TensorSpec> parameter_specs(const ModelConfig& cfg, DType dtype) {
    cfg.validate();
    const auto V = static_cast<std::uint64_t>(cfg.vocab_size);
    const auto C = static_cast<std::uint64_t>(cfg.context_len);
    const auto d = static_cast<std::uint64_t>(cfg.d_model);
    const auto F = static_cast<std::uint64_t>(cfg.d_ff());
    std::vector<TensorSpec> specs{
        {"tok_emb", dtype, {V, d}},
        {"pos_emb", dtype, {C, d}},
        {"final_norm", dtype, {d}},
        {"lm_head", dtype, {d, V}},
    };
    for (int i = 0; i < cfg.n_layers; ++i) {
        const auto p = fmt::format("layers.{}.", i);
        specs.push_back({p + "attn_norm", dtype, {d}});
        specs.push_back({p + "attn.wq", dtype, {d, d}});
        specs.push_back({p + "attn.wk", dtype, {d, d}});
        specs.push_back({p + "attn.wv", dtype, {d, d}});
        specs.push_back({p + "attn.wo", dtype, {d, d}});
        specs.push_back({p + "mlp_norm", dtype, {d}});
        specs.push_back({p + "mlp.w1", dtype, {d, F}});
        specs.push_back({p + "mlp.w2", dtype, {F, d}});
    }
    std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return specs;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    std::size_t n = 0;
    for (const auto& s : parameter_specs(cfg)) n += shape_numel(s.shape);
    return n;
}

TensorMap init_model(const ModelConfig& cfg, DType dtype) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    TensorMap params;
    for (const auto& spec : parameter_specs(cfg, dtype)) {
        const auto n = shape_numel(spec.shape);
        std::vector<double> values(n);
        const bool gain = spec.name.ends_with("_norm");
        const KeyedRandom rng(cfg.seed, spec.name);
        for (std::uint64_t i = 0; i < n; ++i) values[i] = gain ? 1.0 : scale * rng.normal(i);
        params.insert(spec.name, Tensor::from_values(dtype, spec.shape, values));
    }
    params.metadata()[kModelConfigKey] = cfg.to_json();
    return params;
}

namespace detail {

FlatLayout::FlatLayout(const ModelConfig& cfg) : cfg_(cfg), specs_(parameter_specs(cfg, DType::F64)) {
    for (const auto& s : specs_) {
        offsets_.push_back(size_);
        size_ += shape_numel(s.shape);
    }
    auto offset_of = [&](const std::string& name) {
        for (std::size_t i = 0; i < specs_.size(); ++i)
            if (specs_[i].name == name) return offsets_[i];
        throw Error(fmt::format("internal: no parameter '{}'", name));
    };
    tok_emb = offset_of("tok_emb");
    pos_emb = offset_of("pos_emb");
    final_norm = offset_of("final_norm");
    lm_head = offset_of("lm_head");
    for (int i = 0; i < cfg.n_layers; ++i) {
        const auto p = fmt::format("layers.{}.", i);
        layers.push_back({offset_of(p + "attn_norm"), offset_of(p + "attn.wq"), offset_of(p + "attn.wk"),
                          offset_of(p + "attn.wv"), offset_of(p + "attn.wo"), offset_of(p + "mlp_norm"),
                          offset_of(p + "mlp.w1"), offset_of(p + "mlp.w2")});
    }
}

std::vector<double> FlatLayout::pack(const TensorMap& params) const {
    if (params.size() != specs_.size()) {
        TensorMap expected;
        for (const auto& s : specs_) expected.insert(s.name, Tensor(DType::F32, s.shape));
        require_same_layout(params, expected, "model parameters");
    }
    std::vector<double> flat(size_);
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (!params.contains(specs_[i].name))
            throw ValidationError(fmt::format("model parameters: missing tensor '{}'", specs_[i].name));
        const auto& t = params.at(specs_[i].name);
        if (t.shape() != specs_[i].shape)
            throw ValidationError(fmt::format("model parameters: '{}' has shape {} but config needs {}", specs_[i].name,
                                              shape_string(t.shape()), shape_string(specs_[i].shape)));
        for (std::size_t j = 0; j < t.numel(); ++j) flat[offsets_[i] + j] = t.get(j);
    }
    return flat;
}

TensorMap FlatLayout::unpack(std::span<const double> flat, DType dtype) const {
    TensorMap out;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        const auto n = shape_numel(specs_[i].shape);
        out.insert(specs_[i].name, Tensor::from_values(dtype, specs_[i].shape, flat.subspan(offsets_[i], n)));
    }
    return out;
}

namespace {

// Y[T, out] = X[T, in] * W[in, out]
void matmul(const double* X, const double* W, double* Y, int T, int in, int out) {
    std::fill(Y, Y + static_cast<std::size_t>(T) * out, 0.0);
    for (int t = 0; t < T; ++t) {
        double* y = Y + static_cast<std::size_t>(t) * out;
        for (int i = 0; i < in; ++i) {
            const double x = X[static_cast<std::size_t>(t) * in + i];
            const double* w = W + static_cast<std::size_t>(i) * out;
            for (int j = 0; j < out; ++j) y[j] += x * w[j];
        }
    }
}

// dW[in, out] += X^T dY
void matmul_grad_w(const double* X, const double* dY, double* dW, int T, int in, int out) {
    for (int t = 0; t < T; ++t) {
        const double* dy = dY + static_cast<std::size_t>(t) * out;
        for (int i = 0; i < in; ++i) {
            const double x = X[static_cast<std::size_t>(t) * in + i];
            if (x == 0.0) continue;
            double* dw = dW + static_cast<std::size_t>(i) * out;
            for (int j = 0; j < out; ++j) dw[j] += x * dy[j];
        }
    }
}

// dX[T, in] += dY W^T
void matmul_grad_x(const double* dY, const double* W, double* dX, int T, int in, int out) {
    for (int t = 0; t < T; ++t) {
        const double* dy = dY + static_cast<std::size_t>(t) * out;
        double* dx = dX + static_cast<std::size_t>(t) * in;
        for (int i = 0; i < in; ++i) {
            const double* w = W + static_cast<std::size_t>(i) * out;
            double acc = 0.0;
            for (int j = 0; j < out; ++j) acc += dy[j] * w[j];
            dx[i] += acc;
        }
    }
}

void rms_forward(const double* x, const double* gain, int T, int d, std::vector<double>& r, std::vector<double>& n,
                 std::vector<double>& h) {
    r.assign(T, 0.0);
    n.assign(static_cast<std::size_t>(T) * d, 0.0);
    h.assign(static_cast<std::size_t>(T) * d, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* xt = x + static_cast<std::size_t>(t) * d;
        double ms = 0.0;
        for (int j = 0; j < d; ++j) ms += xt[j] * xt[j];
        r[t] = std::sqrt(ms / d + kRmsEps);
        for (int j = 0; j < d; ++j) {
            n[static_cast<std::size_t>(t) * d + j] = xt[j] / r[t];
            h[static_cast<std::size_t>(t) * d + j] = n[static_cast<std::size_t>(t) * d + j] * gain[j];
        }
    }
}

// Given dh, accumulates into dgain and dx.
void rms_backward(const double* dh, const double* gain, const std::vector<double>& r, const std::vector<double>& n,
                  int T, int d, double* dgain, double* dx) {
    std::vector<double> dn(d);
    for (int t = 0; t < T; ++t) {
        const double* dht = dh + static_cast<std::size_t>(t) * d;
        const double* nt = n.data() + static_cast<std::size_t>(t) * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) {
            dgain[j] += dht[j] * nt[j];
            dn[j] = dht[j] * gain[j];
            dot += dn[j] * nt[j];
        }
        double* dxt = dx + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < d; ++j) dxt[j] += (dn[j] - nt[j] * dot / d) / r[t];
    }
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
    const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace

void forward(const FlatLayout& layout, const double* w, std::span<const Token> inputs, ForwardCache& cache) {
    const auto& cfg = layout.config();
    const int T = static_cast<int>(inputs.size());
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim(), F = cfg.d_ff(), V = cfg.vocab_size;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t Td = static_cast<std::size_t>(T) * d;
    cache.steps = T;

    cache.x0.assign(Td, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* e = w + layout.tok_emb + static_cast<std::size_t>(inputs[t]) * d;
        const double* p = w + layout.pos_emb + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < d; ++j) cache.x0[static_cast<std::size_t>(t) * d + j] = e[j] + p[j];
    }

    cache.layers.resize(layout.layers.size());
    std::vector<double> x = cache.x0;
    for (std::size_t l = 0; l < layout.layers.size(); ++l) {
        const auto& L = layout.layers[l];
        auto& c = cache.layers[l];
        c.x_in = std::move(x);
        rms_forward(c.x_in.data(), w + L.attn_norm, T, d, c.r1, c.n1, c.h1);
        c.q.resize(Td);
        c.k.resize(Td);
        c.v.resize(Td);
        matmul(c.h1.data(), w + L.wq, c.q.data(), T, d, d);
        matmul(c.h1.data(), w + L.wk, c.k.data(), T, d, d);
        matmul(c.h1.data(), w + L.wv, c.v.data(), T, d, d);

        c.att.assign(static_cast<std::size_t>(H) * T * T, 0.0);
        c.o.assign(Td, 0.0);
        for (int h = 0; h < H; ++h) {
            for (int t = 0; t < T; ++t) {
                double* a = c.att.data() + (static_cast<std::size_t>(h) * T + t) * T;
                const double* qt = c.q.data() + static_cast<std::size_t>(t) * d + h * dh;
                double mx = -INFINITY;
                for (int u = 0; u <= t; ++u) {
                    const double* ku = c.k.data() + static_cast<std::size_t>(u) * d + h * dh;
                    double s = 0.0;
                    for (int j = 0; j < dh; ++j) s += qt[j] * ku[j];
                    a[u] = s * att_scale;
                    mx = std::max(mx, a[u]);
                }
                double z = 0.0;
                for (int u = 0; u <= t; ++u) {
                    a[u] = std::exp(a[u] - mx);
                    z += a[u];
                }
                double* ot = c.o.data() + static_cast<std::size_t>(t) * d + h * dh;
                for (int u = 0; u <= t; ++u) {
                    a[u] /= z;
                    const double* vu = c.v.data() + static_cast<std::size_t>(u) * d + h * dh;
                    for (int j = 0; j < dh; ++j) ot[j] += a[u] * vu[j];
                }
            }
        }
        c.x_mid.resize(Td);
        matmul(c.o.data(), w + L.wo, c.x_mid.data(), T, d, d);
        for (std::size_t i = 0; i < Td; ++i) c.x_mid[i] += c.x_in[i];

        rms_forward(c.x_mid.data(), w + L.mlp_norm, T, d, c.r2, c.n2, c.h2);
        c.u.resize(static_cast<std::size_t>(T) * F);
        matmul(c.h2.data(), w + L.w1, c.u.data(), T, d, F);
        c.act.resize(c.u.size());
        for (std::size_t i = 0; i < c.u.size(); ++i) c.act[i] = gelu(c.u[i]);
        x.assign(Td, 0.0);
        matmul(c.act.data(), w + L.w2, x.data(), T, F, d);
        for (std::size_t i = 0; i < Td; ++i) x[i] += c.x_mid[i];
    }
    cache.x_final = std::move(x);

    rms_forward(cache.x_final.data(), w + layout.final_norm, T, d, cache.rf, cache.nf, cache.hf);
    cache.logits.resize(static_cast<std::size_t>(T) * V);
    matmul(cache.hf.data(), w + layout.lm_head, cache.logits.data(), T, d, V);
}

double mean_nll(const ForwardCache& cache, int vocab, std::span<const Token> targets) {
    const int T = cache.steps;
    double total = 0.0;
    for (int t = 0; t < T; ++t) {
        const double* z = cache.logits.data() + static_cast<std::size_t>(t) * vocab;
        const double mx = *std::max_element(z, z + vocab);
        double s = 0.0;
        for (int j = 0; j < vocab; ++j) s += std::exp(z[j] - mx);
        total += mx + std::log(s) - z[targets[t]];
    }
    return total / T;
}

void backward(const FlatLayout& layout, const double* w, std::span<const Token> inputs,
              std::span<const Token> targets, const ForwardCache& cache, double* grad) {
    const auto& cfg = layout.config();
    const int T = cache.steps;
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim(), F = cfg.d_ff(), V = cfg.vocab_size;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t Td = static_cast<std::size_t>(T) * d;

    std::vector<double> dlogits(static_cast<std::size_t>(T) * V);
    for (int t = 0; t < T; ++t) {
        const double* z = cache.logits.data() + static_cast<std::size_t>(t) * V;
        double* dz = dlogits.data() + static_cast<std::size_t>(t) * V;
        const double mx = *std::max_element(z, z + V);
        double s = 0.0;
        for (int j = 0; j < V; ++j) {
            dz[j] = std::exp(z[j] - mx);
            s += dz[j];
        }
        for (int j = 0; j < V; ++j) dz[j] = dz[j] / s / T;
        dz[targets[t]] -= 1.0 / T;
    }

    matmul_grad_w(cache.hf.data(), dlogits.data(), grad + layout.lm_head, T, d, V);
    std::vector<double> dhf(Td, 0.0);
    matmul_grad_x(dlogits.data(), w + layout.lm_head, dhf.data(), T, d, V);
    std::vector<double> dx(Td, 0.0);
    rms_backward(dhf.data(), w + layout.final_norm, cache.rf, cache.nf, T, d, grad + layout.final_norm, dx.data());

    for (std::size_t li = layout.layers.size(); li-- > 0;) {
        const auto& L = layout.layers[li];
        const auto& c = cache.layers[li];

        // MLP block: x_out = x_mid + gelu(h2 W1) W2
        std::vector<double> dact(static_cast<std::size_t>(T) * F, 0.0);
        matmul_grad_w(c.act.data(), dx.data(), grad + L.w2, T, F, d);
        matmul_grad_x(dx.data(), w + L.w2, dact.data(), T, F, d);
        for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(c.u[i]);
        matmul_grad_w(c.h2.data(), dact.data(), grad + L.w1, T, d, F);
        std::vector<double> dh2(Td, 0.0);
        matmul_grad_x(dact.data(), w + L.w1, dh2.data(), T, d, F);
        std::vector<double> dx_mid = dx;
        rms_backward(dh2.data(), w + L.mlp_norm, c.r2, c.n2, T, d, grad + L.mlp_norm, dx_mid.data());

        // Attention block: x_mid = x_in + attn(h1) Wo
        std::vector<double> d_o(Td, 0.0);
        matmul_grad_w(c.o.data(), dx_mid.data(), grad + L.wo, T, d, d);
        matmul_grad_x(dx_mid.data(), w + L.wo, d_o.data(), T, d, d);

        std::vector<double> dq(Td, 0.0), dk(Td, 0.0), dv(Td, 0.0), da(T), ds(T);
        for (int h = 0; h < H; ++h) {
            for (int t = 0; t < T; ++t) {
                const double* a = c.att.data() + (static_cast<std::size_t>(h) * T + t) * T;
                const double* dot_ = d_o.data() + static_cast<std::size_t>(t) * d + h * dh;
                double weighted = 0.0;
                for (int u = 0; u <= t; ++u) {
                    const double* vu = c.v.data() + static_cast<std::size_t>(u) * d + h * dh;
                    double* dvu = dv.data() + static_cast<std::size_t>(u) * d + h * dh;
                    double s = 0.0;
                    for (int j = 0; j < dh; ++j) {
                        s += dot_[j] * vu[j];
                        dvu[j] += a[u] * dot_[j];
                    }
                    da[u] = s;
                    weighted += a[u] * s;
                }
                const double* qt = c.q.data() + static_cast<std::size_t>(t) * d + h * dh;
                double* dqt = dq.data() + static_cast<std::size_t>(t) * d + h * dh;
                for (int u = 0; u <= t; ++u) {
                    ds[u] = a[u] * (da[u] - weighted) * att_scale;
                    const double* ku = c.k.data() + static_cast<std::size_t>(u) * d + h * dh;
                    double* dku = dk.data() + static_cast<std::size_t>(u) * d + h * dh;
                    for (int j = 0; j < dh; ++j) {
                        dqt[j] += ds[u] * ku[j];
                        dku[j] += ds[u] * qt[j];
                    }
                }
            }
        }
        std::vector<double> dh1(Td, 0.0);
        matmul_grad_w(c.h1.data(), dq.data(), grad + L.wq, T, d, d);
        matmul_grad_w(c.h1.data(), dk.data(), grad + L.wk, T, d, d);
        matmul_grad_w(c.h1.data(), dv.data(), grad + L.wv, T, d, d);
        matmul_grad_x(dq.data(), w + L.wq, dh1.data(), T, d, d);
        matmul_grad_x(dk.data(), w + L.wk, dh1.data(), T, d, d);
        matmul_grad_x(dv.data(), w + L.wv, dh1.data(), T, d, d);
        dx = dx_mid;
        rms_backward(dh1.data(), w + L.attn_norm, c.r1, c.n1, T, d, grad + L.attn_norm, dx.data());
    }

    for (int t = 0; t < T; ++t) {
        double* de = grad + layout.tok_emb + static_cast<std::size_t>(inputs[t]) * d;
        double* dp = grad + layout.pos_emb + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < d; ++j) {
            de[j] += dx[static_cast<std::size_t>(t) * d + j];
            dp[j] += dx[static_cast<std::size_t>(t) * d + j];
        }
    }
}

}  // namespace detail

Transformer::Transformer(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
}

void Transformer::check_params(const TensorMap& params) const {
    TensorMap expected;
    for (const auto& s : parameter_specs(cfg_)) expected.insert(s.name, Tensor(DType::F32, s.shape));
    require_same_layout(params, expected, "model parameters");
    require_finite(params, "model parameters");
}

namespace {

void check_sample(const ModelConfig& cfg, std::span<const Token> sample, std::size_t min_len) {
    if (sample.size() < min_len)
        throw ValidationError(fmt::format("sequence has {} tokens, need at least {}", sample.size(), min_len));
    if (sample.size() > static_cast<std::size_t>(cfg.context_len))
        throw ValidationError(fmt::format("sequence of {} tokens exceeds context_len {}", sample.size(), cfg.context_len));
    for (auto t : sample)
        if (t < 0 || t >= cfg.vocab_size)
            throw ValidationError(fmt::format("token id {} out of range for vocab_size {}", t, cfg.vocab_size));
}

}  // namespace

double Transformer::forward_loss(const TensorMap& params, std::span<const Token> sample) const {
    check_sample(cfg_, sample, 2);
    const detail::FlatLayout layout(cfg_);
    const auto w = layout.pack(params);
    detail::ForwardCache cache;
    const auto inputs = sample.first(sample.size() - 1);
    detail::forward(layout, w.data(), inputs, cache);
    return detail::mean_nll(cache, cfg_.vocab_size, sample.subspan(1));
}

TensorMap Transformer::backward(const TensorMap& params, std::span<const Token> sample) const {
    check_sample(cfg_, sample, 2);
    const detail::FlatLayout layout(cfg_);
    const auto w = layout.pack(params);
    detail::ForwardCache cache;
    const auto inputs = sample.first(sample.size() - 1);
    const auto targets = sample.subspan(1);
    detail::forward(layout, w.data(), inputs, cache);
    std::vector<double> grad(layout.size(), 0.0);
    detail::backward(layout, w.data(), inputs, targets, cache, grad.data());
    return layout.unpack(grad, DType::F64);
}

std::vector<double> Transformer::logits(const TensorMap& params, std::span<const Token> tokens) const {
    check_sample(cfg_, tokens, 1);
    const detail::FlatLayout layout(cfg_);
    const auto w = layout.pack(params);
    detail::ForwardCache cache;
    detail::forward(layout, w.data(), tokens, cache);
    return std::move(cache.logits);
}

TokenSeq Transformer::generate(const TensorMap& params, std::span<const Token> prompt, int max_new,
                               std::optional<Token> stop_token) const {
    if (prompt.empty()) throw ValidationError("generate: prompt is empty");
    if (max_new < 0) throw ValidationError("generate: max_new must be non-negative");
    check_sample(cfg_, prompt, 1);
    TokenSeq seq(prompt.begin(), prompt.end());
    if (max_new == 0) return seq;

    const detail::FlatLayout layout(cfg_);
    const auto w = layout.pack(params);
    detail::ForwardCache cache;
    const int V = cfg_.vocab_size;
    for (int step = 0; step < max_new && seq.size() < static_cast<std::size_t>(cfg_.context_len); ++step) {
        detail::forward(layout, w.data(), seq, cache);
        const double* last = cache.logits.data() + (seq.size() - 1) * static_cast<std::size_t>(V);
        // max_element returns the first maximum, i.e. the lowest token id.
        const auto next = static_cast<Token>(std::max_element(last, last + V) - last);
        seq.push_back(next);
        if (stop_token && next == *stop_token) break;
    }
    return seq;
}

GradientFn make_gradient_fn(const Transformer& model) {
    return [model](const TensorMap& params, const TokenSeq& sample) { return model.backward(params, sample); };
}

}  // namespace rcpmerge
