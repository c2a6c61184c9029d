#pragma once

// Template implementation for model.hpp. Kernels accumulate in double and
// keep every computation row-local or causal so the bit-exact causality
// contracts hold.

#include <cassert>

namespace retrolite {

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename T>
using NoDeduce = typename std::type_identity<T>::type;

template <typename T>
void linear_forward(const T* x, size_t n, size_t in, size_t out, const T* W,
                    const NoDeduce<T>* b, T* y) {
    for (size_t i = 0; i < n; ++i) {
        const T* xi = x + i * in;
        T* yi = y + i * out;
        for (size_t o = 0; o < out; ++o) {
            const T* wo = W + o * in;
            double acc = b ? double(b[o]) : 0.0;
            for (size_t k = 0; k < in; ++k) acc += double(xi[k]) * double(wo[k]);
            yi[o] = T(acc);
        }
    }
}

// dx may be null when the input gradient is not needed
template <typename T>
void linear_backward(const T* x, size_t n, size_t in, size_t out, const T* W, const T* dy,
                     NoDeduce<T>* dx, T* dW, NoDeduce<T>* db) {
    for (size_t i = 0; i < n; ++i) {
        const T* xi = x + i * in;
        const T* dyi = dy + i * out;
        for (size_t o = 0; o < out; ++o) {
            const double g = double(dyi[o]);
            if (g == 0.0) continue;
            T* dwo = dW + o * in;
            for (size_t k = 0; k < in; ++k) dwo[k] = T(double(dwo[k]) + g * double(xi[k]));
            if (db) db[o] = T(double(db[o]) + g);
            if (dx) {
                const T* wo = W + o * in;
                T* dxi = dx + i * in;
                for (size_t k = 0; k < in; ++k) dxi[k] = T(double(dxi[k]) + g * double(wo[k]));
            }
        }
    }
}

template <typename T>
void layernorm_forward(const T* x, size_t n, size_t dim, const T* g, const T* b, T* y, T* mean,
                       T* rstd) {
    for (size_t i = 0; i < n; ++i) {
        const T* xi = x + i * dim;
        double mu = 0.0;
        for (size_t k = 0; k < dim; ++k) mu += double(xi[k]);
        mu /= double(dim);
        double var = 0.0;
        for (size_t k = 0; k < dim; ++k) {
            const double d = double(xi[k]) - mu;
            var += d * d;
        }
        var /= double(dim);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[i] = T(mu);
        rstd[i] = T(rs);
        T* yi = y + i * dim;
        for (size_t k = 0; k < dim; ++k)
            yi[k] = T(double(g[k]) * (double(xi[k]) - mu) * rs + double(b[k]));
    }
}

template <typename T>
void layernorm_backward(const T* x, const T* mean, const T* rstd, const T* g, const T* dy,
                        size_t n, size_t dim, T* dx, T* dg, T* db) {
    for (size_t i = 0; i < n; ++i) {
        const T* xi = x + i * dim;
        const T* dyi = dy + i * dim;
        const double mu = double(mean[i]), rs = double(rstd[i]);
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (size_t k = 0; k < dim; ++k) {
            const double xhat = (double(xi[k]) - mu) * rs;
            const double dxhat = double(dyi[k]) * double(g[k]);
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[k] = T(double(dg[k]) + double(dyi[k]) * xhat);
            db[k] = T(double(db[k]) + double(dyi[k]));
        }
        const double inv_d = 1.0 / double(dim);
        T* dxi = dx + i * dim;
        for (size_t k = 0; k < dim; ++k) {
            const double xhat = (double(xi[k]) - mu) * rs;
            const double dxhat = double(dyi[k]) * double(g[k]);
            dxi[k] = T(double(dxi[k]) +
                       rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat));
        }
    }
}

inline double gelu_scalar(double x) {
    const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
    const double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double th = std::tanh(u);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

template <typename T>
void gelu_forward(const T* x, size_t n, T* y) {
    for (size_t i = 0; i < n; ++i) y[i] = T(gelu_scalar(double(x[i])));
}

template <typename T>
void gelu_backward(const T* x, const T* dy, size_t n, T* dx) {
    for (size_t i = 0; i < n; ++i)
        dx[i] = T(double(dx[i]) + double(dy[i]) * gelu_grad_scalar(double(x[i])));
}

// Multi-head attention over row-major [*, stride] buffers where head h uses
// columns [h*hd, (h+1)*hd). probs is [H, nq, nk]; disallowed keys keep
// probability exactly zero, which also zeroes them out of the backward pass.
template <typename T>
void attend_forward(const T* q, const T* k, const T* v, size_t nq, size_t nk, size_t q_stride,
                    size_t kv_stride, uint32_t n_heads, uint32_t hd, bool causal,
                    const uint8_t* key_pad, T* probs, T* ctx, size_t ctx_stride) {
    const double scale = 1.0 / std::sqrt(double(hd));
    std::vector<double> s(nk);
    for (uint32_t h = 0; h < n_heads; ++h) {
        const size_t hoff = size_t(h) * hd;
        for (size_t i = 0; i < nq; ++i) {
            const T* qi = q + i * q_stride + hoff;
            T* pi = probs + (size_t(h) * nq + i) * nk;
            const size_t j_end = causal ? std::min(nk, i + 1) : nk;
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t j = 0; j < j_end; ++j) {
                if (key_pad && !key_pad[j]) continue;
                const T* kj = k + j * kv_stride + hoff;
                double acc = 0.0;
                for (uint32_t t = 0; t < hd; ++t) acc += double(qi[t]) * double(kj[t]);
                s[j] = acc * scale;
                mx = std::max(mx, s[j]);
            }
            T* ci = ctx + i * ctx_stride + hoff;
            for (uint32_t t = 0; t < hd; ++t) ci[t] = T(0);
            for (size_t j = 0; j < nk; ++j) pi[j] = T(0);
            if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
            double denom = 0.0;
            for (size_t j = 0; j < j_end; ++j) {
                if (key_pad && !key_pad[j]) continue;
                denom += std::exp(s[j] - mx);
            }
            for (size_t j = 0; j < j_end; ++j) {
                if (key_pad && !key_pad[j]) continue;
                const double p = std::exp(s[j] - mx) / denom;
                pi[j] = T(p);
                const T* vj = v + j * kv_stride + hoff;
                for (uint32_t t = 0; t < hd; ++t) ci[t] = T(double(ci[t]) + p * double(vj[t]));
            }
        }
    }
}

template <typename T>
void attend_backward(const T* q, const T* k, const T* v, const T* probs, size_t nq, size_t nk,
                     size_t q_stride, size_t kv_stride, uint32_t n_heads, uint32_t hd,
                     const T* dctx, size_t ctx_stride, T* dq, T* dk, T* dv) {
    const double scale = 1.0 / std::sqrt(double(hd));
    std::vector<double> da(nk);
    for (uint32_t h = 0; h < n_heads; ++h) {
        const size_t hoff = size_t(h) * hd;
        for (size_t i = 0; i < nq; ++i) {
            const T* pi = probs + (size_t(h) * nq + i) * nk;
            const T* dci = dctx + i * ctx_stride + hoff;
            const T* qi = q + i * q_stride + hoff;
            double dot_pa = 0.0;
            for (size_t j = 0; j < nk; ++j) {
                const double p = double(pi[j]);
                if (p == 0.0) {
                    da[j] = 0.0;
                    continue;
                }
                const T* vj = v + j * kv_stride + hoff;
                double acc = 0.0;
                for (uint32_t t = 0; t < hd; ++t) acc += double(dci[t]) * double(vj[t]);
                da[j] = acc;
                dot_pa += p * acc;
                T* dvj = dv + j * kv_stride + hoff;
                for (uint32_t t = 0; t < hd; ++t)
                    dvj[t] = T(double(dvj[t]) + p * double(dci[t]));
            }
            T* dqi = dq + i * q_stride + hoff;
            for (size_t j = 0; j < nk; ++j) {
                const double p = double(pi[j]);
                if (p == 0.0) continue;
                const double ds = p * (da[j] - dot_pa) * scale;
                const T* kj = k + j * kv_stride + hoff;
                T* dkj = dk + j * kv_stride + hoff;
                for (uint32_t t = 0; t < hd; ++t) {
                    dqi[t] = T(double(dqi[t]) + ds * double(kj[t]));
                    dkj[t] = T(double(dkj[t]) + ds * double(qi[t]));
                }
            }
        }
    }
}

template <typename T>
void rotate_rows(T* buf, size_t n, size_t stride, uint32_t n_heads, uint32_t hd, bool inverse,
                 size_t pos_base = 0) {
    for (size_t i = 0; i < n; ++i)
        for (uint32_t h = 0; h < n_heads; ++h)
            rotary_apply(buf + i * stride + size_t(h) * hd, hd, pos_base + i, inverse);
}

// cyclic positions: row i takes position i % modulo (chunk- or record-local
// coordinates for the cross-attention sides)
template <typename T>
void rotate_rows_mod(T* buf, size_t n, size_t stride, uint32_t n_heads, uint32_t hd,
                     size_t modulo, bool inverse) {
    for (size_t i = 0; i < n; ++i)
        for (uint32_t h = 0; h < n_heads; ++h)
            rotary_apply(buf + i * stride + size_t(h) * hd, hd, i % modulo, inverse);
}

}  // namespace detail

// ---------------------------------------------------------------------
// config
// ---------------------------------------------------------------------

inline std::vector<uint32_t> ModelConfig::default_cca_layers(uint32_t n_layers) {
    std::vector<uint32_t> out;
    if (n_layers >= 6) {
        for (uint32_t l = 6; l <= n_layers; l += 3) out.push_back(l);
    } else {
        out.push_back((n_layers + 1) / 2);
    }
    return out;
}

inline void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0)
        fail("model config: zero-sized dimension");
    if (d_model % n_heads != 0) fail("model config: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) fail("model config: head dimension must be even for rotary");
    if (seq_len == 0 || chunk_len == 0 || seq_len % chunk_len != 0)
        fail("model config: seq_len must be a positive multiple of chunk_len");
    if (k_neighbors == 0) fail("model config: k_neighbors must be positive");
    if (neighbor_encoder_layers == 0) fail("model config: neighbor encoder needs >= 1 layer");
    for (uint32_t l : resolved_cca_layers())
        if (l < 1 || l > n_layers) fail("model config: cca layer ", l, " outside [1, ", n_layers, "]");
}

inline std::string ModelConfig::serialize() const {
    std::string cca;
    for (uint32_t l : resolved_cca_layers()) cca += concat(l, ",");
    return concat("n_layers=", n_layers, ";d_model=", d_model, ";n_heads=", n_heads, ";d_ff=", d_ff,
                  ";vocab_size=", vocab_size, ";seq_len=", seq_len, ";chunk_len=", chunk_len,
                  ";k_neighbors=", k_neighbors, ";cca=", cca, ";d_emb=", d_emb,
                  ";neighbor_encoder_layers=", neighbor_encoder_layers, ";seed=", seed);
}

inline uint64_t ModelConfig::backbone_hash() const {
    return fnv1a64(concat("n_layers=", n_layers, ";d_model=", d_model, ";n_heads=", n_heads,
                          ";d_ff=", d_ff, ";vocab_size=", vocab_size));
}

inline ModelMode parse_model_mode(const std::string& s) {
    if (s == "off") return ModelMode::Off;
    if (s == "on" || s == "on-ideal" || s == "on-noisy") return ModelMode::On;
    if (s == "no-neighbors" || s == "on-no-neighbors") return ModelMode::NoNeighbors;
    fail("unknown model mode: ", s);
}

inline std::string to_string(ModelMode m) {
    switch (m) {
        case ModelMode::Off: return "off";
        case ModelMode::On: return "on";
        case ModelMode::NoNeighbors: return "no-neighbors";
    }
    return "?";
}

inline NoisePlan NoisePlan::from_regularizer(const RegularizerSpec& reg, Rng& rng) {
    NoisePlan plan;
    plan.rng = &rng;
    if (reg.kind == NoiseKind::None) return plan;
    const double mag = reg.kind == NoiseKind::Gaussian ? reg.lambda_t : reg.alpha;
    if (reg.placement == NoisePlacement::Sequence || reg.placement == NoisePlacement::Both) {
        plan.seq_kind = reg.kind;
        plan.seq_mag = mag;
    }
    if (reg.placement == NoisePlacement::Neighbors || reg.placement == NoisePlacement::Both) {
        plan.nbr_kind = reg.kind;
        plan.nbr_mag = mag;
    }
    return plan;
}

inline NoisePlan NoisePlan::inference(double lambda_i, Rng& rng) {
    NoisePlan plan;
    plan.rng = &rng;
    plan.nbr_kind = NoiseKind::Gaussian;
    plan.nbr_mag = lambda_i;
    return plan;
}

// ---------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------

template <typename T>
Param<T>* ModelT<T>::add_param(const std::string& name, const std::string& group, size_t rows,
                               size_t cols, double init_std) {
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->group = group;
    p->rows = rows;
    p->cols = cols;
    p->w.resize(rows * cols);
    p->g.assign(rows * cols, T(0));
    // per-name stream: backbone tensors initialize identically whether or
    // not the CCA side exists
    Rng rng(derive_seed(cfg_.seed, fnv1a64(name)));
    if (init_std > 0.0)
        for (T& x : p->w) x = T(init_std * rng.gauss());
    Param<T>* raw = p.get();
    store_.push_back(std::move(p));
    return raw;
}

template <typename T>
typename ModelT<T>::LinearRef ModelT<T>::add_linear(const std::string& name,
                                                    const std::string& group, size_t out,
                                                    size_t in, double w_std, bool bias) {
    LinearRef ref;
    ref.W = add_param(name + ".w", group, out, in, w_std);
    if (bias) ref.b = add_param(name + ".b", group, out, 1, 0.0);
    return ref;
}

template <typename T>
typename ModelT<T>::LayerNormRef ModelT<T>::add_layernorm(const std::string& name,
                                                          const std::string& group, size_t dim) {
    LayerNormRef ref;
    ref.g = add_param(name + ".g", group, dim, 1, 0.0);
    std::fill(ref.g->w.begin(), ref.g->w.end(), T(1));
    ref.b = add_param(name + ".b", group, dim, 1, 0.0);
    return ref;
}

template <typename T>
ModelT<T>::ModelT(const ModelConfig& cfg, ModelVariant variant) : cfg_(cfg), variant_(variant) {
    cfg_.validate();
    const uint32_t D = cfg_.d_model, F = cfg_.d_ff, V = cfg_.vocab_size;
    const double std_w = 0.02;
    const double std_proj = 0.02 / std::sqrt(2.0 * double(cfg_.n_layers));

    const auto cca_set = cfg_.resolved_cca_layers();
    first_cca_ = 0;

    tok_emb_ = add_param("embed.tok", "embedding", V, D, std_w);

    layers_.resize(cfg_.n_layers);
    for (uint32_t l = 1; l <= cfg_.n_layers; ++l) {
        DecoderLayer& lay = layers_[l - 1];
        const std::string base = concat("layer", l, ".");
        lay.ln1 = add_layernorm(base + "ln1", "attention", D);
        lay.wqkv = add_linear(base + "attn.wqkv", "attention", size_t(3) * D, D, std_w, true);
        lay.wproj = add_linear(base + "attn.proj", "attention", D, D, std_proj, true);
        lay.ln2 = add_layernorm(base + "ln2", "ffw", D);
        lay.wff1 = add_linear(base + "ffw.fc1", "ffw", F, D, std_w, true);
        lay.wff2 = add_linear(base + "ffw.fc2", "ffw", D, F, std_proj, true);
        const bool cca_here = variant_ == ModelVariant::On &&
                              std::find(cca_set.begin(), cca_set.end(), l) != cca_set.end();
        if (cca_here) {
            if (first_cca_ == 0) first_cca_ = l;
            lay.has_cca = true;
            lay.ln_cca = add_layernorm(base + "cca.ln", "cca", D);
            lay.cq = add_linear(base + "cca.wq", "cca", D, D, std_w, false);
            lay.ck = add_linear(base + "cca.wk", "cca", D, D, std_w, false);
            lay.cv = add_linear(base + "cca.wv", "cca", D, D, std_w, false);
            lay.co = add_linear(base + "cca.wo", "cca", D, D, std_proj, false);
        }
    }

    if (variant_ == ModelVariant::On) {
        enc_layers_.resize(cfg_.neighbor_encoder_layers);
        for (uint32_t e = 0; e < cfg_.neighbor_encoder_layers; ++e) {
            EncoderLayer& lay = enc_layers_[e];
            const std::string base = concat("enc.layer", e + 1, ".");
            lay.ln_s = add_layernorm(base + "lns", "encoder", D);
            lay.wqkv = add_linear(base + "attn.wqkv", "encoder", size_t(3) * D, D, std_w, true);
            lay.wproj = add_linear(base + "attn.proj", "encoder", D, D, std_proj, true);
            if (e == 0) {
                lay.has_cross = true;
                lay.ln_c = add_layernorm(base + "cross.ln", "encoder", D);
                lay.xq = add_linear(base + "cross.wq", "encoder", D, D, std_w, false);
                lay.xk = add_linear(base + "cross.wk", "encoder", D, D, std_w, false);
                lay.xv = add_linear(base + "cross.wv", "encoder", D, D, std_w, false);
                lay.xo = add_linear(base + "cross.wo", "encoder", D, D, std_proj, false);
            }
            lay.ln_f = add_layernorm(base + "lnf", "encoder", D);
            lay.wff1 = add_linear(base + "ffw.fc1", "encoder", F, D, std_w, true);
            lay.wff2 = add_linear(base + "ffw.fc2", "encoder", D, F, std_proj, true);
        }
        enc_ln_out_ = add_layernorm("enc.ln_out", "encoder", D);
    }

    lnf_ = add_layernorm("readout.lnf", "readout", D);
    readout_ = add_linear("readout.out", "readout", V, D, std_w, true);
}

// ---------------------------------------------------------------------
// parameter plumbing
// ---------------------------------------------------------------------

template <typename T>
std::vector<Param<T>*> ModelT<T>::params() {
    std::vector<Param<T>*> out;
    out.reserve(store_.size());
    for (auto& p : store_) out.push_back(p.get());
    return out;
}

template <typename T>
std::vector<const Param<T>*> ModelT<T>::params() const {
    std::vector<const Param<T>*> out;
    out.reserve(store_.size());
    for (auto& p : store_) out.push_back(p.get());
    return out;
}

template <typename T>
Param<T>* ModelT<T>::find_param(const std::string& name) {
    for (auto& p : store_)
        if (p->name == name) return p.get();
    return nullptr;
}

template <typename T>
void ModelT<T>::zero_grads() {
    for (auto& p : store_) std::fill(p->g.begin(), p->g.end(), T(0));
}

template <typename T>
ParamCounts ModelT<T>::count_parameters() const {
    ParamCounts counts;
    for (const auto& p : store_) {
        GroupCount& c = counts[p->group];
        c.total += p->size();
        if (!frozen_.count(p->group)) c.trainable += p->size();
    }
    return counts;
}

// ---------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------

template <typename T>
void ModelT<T>::build_neighbor_inputs(std::span<const TokenId> src, const NeighborSet* neighbors,
                                      ModelMode mode, ForwardState<T>& state) const {
    const uint32_t K = cfg_.k_neighbors, r = cfg_.neighbor_len(), m = cfg_.chunk_len;
    const size_t total = size_t(state.c_att) * K * r;
    state.nbr_tokens.assign(total, 0);
    state.nbr_pad.assign(total, 0);

    if (mode == ModelMode::NoNeighbors) {
        // each chunk's "neighbor" is the chunk itself with a masked continuation
        for (uint32_t c = 0; c < state.c_att; ++c) {
            for (uint32_t j = 0; j < K; ++j) {
                TokenId* tok = state.nbr_tokens.data() + (size_t(c) * K + j) * r;
                uint8_t* pad = state.nbr_pad.data() + (size_t(c) * K + j) * r;
                for (uint32_t t = 0; t < m; ++t) {
                    tok[t] = src[size_t(c) * m + t];
                    pad[t] = 1;
                }
            }
        }
        return;
    }

    if (!neighbors) fail("forward: mode=on requires a neighbor set");
    if (neighbors->k != K)
        fail("forward: neighbor set k=", neighbors->k, " != model k_neighbors=", K);
    if (neighbors->n_chunks < state.c_att)
        fail("forward: neighbor set covers ", neighbors->n_chunks, " chunks, need ", state.c_att);
    for (uint32_t c = 0; c < state.c_att; ++c) {
        for (uint32_t j = 0; j < K; ++j) {
            const NeighborRecord& rec = neighbors->at(c, j);
            if (rec.tokens.size() != r)
                fail("forward: neighbor record length ", rec.tokens.size(), " != ", r);
            TokenId* tok = state.nbr_tokens.data() + (size_t(c) * K + j) * r;
            uint8_t* pad = state.nbr_pad.data() + (size_t(c) * K + j) * r;
            for (uint32_t t = 0; t < r; ++t) {
                tok[t] = rec.tokens[t];
                pad[t] = rec.pad[t];
            }
        }
    }
}

template <typename T>
void ModelT<T>::run_encoder(ForwardState<T>& state) const {
    const uint32_t D = cfg_.d_model, F = cfg_.d_ff, H = cfg_.n_heads, hd = cfg_.head_dim();
    const uint32_t K = cfg_.k_neighbors, r = cfg_.neighbor_len(), m = cfg_.chunk_len;
    const size_t R = size_t(state.c_att) * K;  // records
    const size_t Rq = R * r;                   // total neighbor token rows

    state.enc_layers.assign(enc_layers_.size(), {});
    const std::vector<T>* y_prev = &state.nbr_emb;
    for (size_t e = 0; e < enc_layers_.size(); ++e) {
        const EncoderLayer& lay = enc_layers_[e];
        EncLayerCache<T>& cache = state.enc_layers[e];
        cache.y_in = *y_prev;

        // bidirectional self-attention within each record
        cache.lns_out.resize(Rq * D);
        cache.lns_mean.resize(Rq);
        cache.lns_rstd.resize(Rq);
        detail::layernorm_forward(cache.y_in.data(), Rq, D, lay.ln_s.g->w.data(),
                                  lay.ln_s.b->w.data(), cache.lns_out.data(),
                                  cache.lns_mean.data(), cache.lns_rstd.data());
        cache.qkv.resize(Rq * 3 * D);
        detail::linear_forward(cache.lns_out.data(), Rq, D, size_t(3) * D, lay.wqkv.W->w.data(),
                               lay.wqkv.b->w.data(), cache.qkv.data());
        for (size_t rec = 0; rec < R; ++rec) {
            T* q = cache.qkv.data() + rec * r * 3 * D;
            detail::rotate_rows(q, r, size_t(3) * D, H, hd, false);          // q
            detail::rotate_rows(q + D, r, size_t(3) * D, H, hd, false);      // k
        }
        cache.attn_probs.assign(R * H * r * r, T(0));
        cache.attn_ctx.assign(Rq * D, T(0));
        for (size_t rec = 0; rec < R; ++rec) {
            const T* base = cache.qkv.data() + rec * r * 3 * D;
            detail::attend_forward(base, base + D, base + 2 * D, r, r, size_t(3) * D,
                                   size_t(3) * D, H, hd, false,
                                   state.nbr_pad.data() + rec * r,
                                   cache.attn_probs.data() + rec * H * r * r,
                                   cache.attn_ctx.data() + rec * r * D, D);
        }
        cache.y_attn.resize(Rq * D);
        detail::linear_forward(cache.attn_ctx.data(), Rq, D, D, lay.wproj.W->w.data(),
                               lay.wproj.b->w.data(), cache.y_attn.data());
        for (size_t i = 0; i < Rq * D; ++i)
            cache.y_attn[i] = T(double(cache.y_attn[i]) + double(cache.y_in[i]));

        // one cross-attention sublayer to the retrieving chunk's hidden states
        const std::vector<T>* y_mid = &cache.y_attn;
        if (lay.has_cross) {
            cache.lnc_out.resize(Rq * D);
            cache.lnc_mean.resize(Rq);
            cache.lnc_rstd.resize(Rq);
            detail::layernorm_forward(cache.y_attn.data(), Rq, D, lay.ln_c.g->w.data(),
                                      lay.ln_c.b->w.data(), cache.lnc_out.data(),
                                      cache.lnc_mean.data(), cache.lnc_rstd.data());
            cache.xq.resize(Rq * D);
            detail::linear_forward(cache.lnc_out.data(), Rq, D, D, lay.xq.W->w.data(), nullptr,
                                   cache.xq.data());
            const size_t ch_rows = size_t(state.c_att) * m;
            cache.xk.resize(ch_rows * D);
            cache.xv.resize(ch_rows * D);
            detail::linear_forward(state.chunk_hidden.data(), ch_rows, D, D, lay.xk.W->w.data(),
                                   nullptr, cache.xk.data());
            detail::linear_forward(state.chunk_hidden.data(), ch_rows, D, D, lay.xv.W->w.data(),
                                   nullptr, cache.xv.data());
            detail::rotate_rows_mod(cache.xq.data(), Rq, D, H, hd, r, false);
            detail::rotate_rows_mod(cache.xk.data(), ch_rows, D, H, hd, m, false);
            cache.cross_probs.assign(R * H * r * m, T(0));
            cache.cross_ctx.assign(Rq * D, T(0));
            for (size_t rec = 0; rec < R; ++rec) {
                const size_t chunk = rec / K;
                detail::attend_forward(cache.xq.data() + rec * r * D,
                                       cache.xk.data() + chunk * m * D,
                                       cache.xv.data() + chunk * m * D, r, m, D, D, H, hd, false,
                                       nullptr, cache.cross_probs.data() + rec * H * r * m,
                                       cache.cross_ctx.data() + rec * r * D, D);
            }
            cache.y_cross.resize(Rq * D);
            detail::linear_forward(cache.cross_ctx.data(), Rq, D, D, lay.xo.W->w.data(), nullptr,
                                   cache.y_cross.data());
            for (size_t i = 0; i < Rq * D; ++i)
                cache.y_cross[i] = T(double(cache.y_cross[i]) + double(cache.y_attn[i]));
            y_mid = &cache.y_cross;
        }

        cache.lnf_out.resize(Rq * D);
        cache.lnf_mean.resize(Rq);
        cache.lnf_rstd.resize(Rq);
        detail::layernorm_forward(y_mid->data(), Rq, D, lay.ln_f.g->w.data(), lay.ln_f.b->w.data(),
                                  cache.lnf_out.data(), cache.lnf_mean.data(),
                                  cache.lnf_rstd.data());
        cache.ff1.resize(Rq * F);
        detail::linear_forward(cache.lnf_out.data(), Rq, D, F, lay.wff1.W->w.data(),
                               lay.wff1.b->w.data(), cache.ff1.data());
        cache.ff_gelu.resize(Rq * F);
        detail::gelu_forward(cache.ff1.data(), Rq * F, cache.ff_gelu.data());
        cache.y_out.resize(Rq * D);
        detail::linear_forward(cache.ff_gelu.data(), Rq, F, D, lay.wff2.W->w.data(),
                               lay.wff2.b->w.data(), cache.y_out.data());
        for (size_t i = 0; i < Rq * D; ++i)
            cache.y_out[i] = T(double(cache.y_out[i]) + double((*y_mid)[i]));
        y_prev = &cache.y_out;
    }

    state.encoded.resize(Rq * D);
    state.enc_ln_mean.resize(Rq);
    state.enc_ln_rstd.resize(Rq);
    detail::layernorm_forward(y_prev->data(), Rq, D, enc_ln_out_.g->w.data(),
                              enc_ln_out_.b->w.data(), state.encoded.data(),
                              state.enc_ln_mean.data(), state.enc_ln_rstd.data());
}

template <typename T>
void ModelT<T>::forward(std::span<const TokenId> src, const NeighborSet* neighbors, ModelMode mode,
                        const NoisePlan& noise, ForwardState<T>& state) const {
    const uint32_t D = cfg_.d_model, F = cfg_.d_ff, H = cfg_.n_heads, hd = cfg_.head_dim();
    const uint32_t m = cfg_.chunk_len, K = cfg_.k_neighbors, r = cfg_.neighbor_len();
    const uint32_t V = cfg_.vocab_size;
    const size_t n = src.size();
    if (n < 1 || n > cfg_.seq_len) fail("forward: sequence length ", n, " outside [1, ", cfg_.seq_len, "]");
    for (TokenId t : src)
        if (t >= V) fail("forward: token id ", t, " >= vocab ", V);
    const bool use_cca = mode != ModelMode::Off;
    if (use_cca && variant_ != ModelVariant::On)
        fail("forward: retrieval mode on a model built without CCA blocks");

    state = ForwardState<T>{};
    state.n = n;
    state.mode = mode;
    state.src.assign(src.begin(), src.end());
    state.c_present = uint32_t((n + m - 1) / m);
    state.c_att = use_cca && state.c_present > 0 ? state.c_present - 1 : 0;

    // token embeddings + sequence-side noise
    state.emb.resize(n * D);
    for (size_t i = 0; i < n; ++i)
        std::copy_n(tok_emb_->w.data() + size_t(src[i]) * D, D, state.emb.data() + i * D);
    if (noise.seq_kind == NoiseKind::Gaussian && noise.rng)
        apply_gaussian(std::span<T>(state.emb), noise.seq_mag, *noise.rng);
    else if (noise.seq_kind == NoiseKind::Uniform && noise.rng)
        apply_uniform(std::span<T>(state.emb), n, D, noise.seq_mag, *noise.rng);

    if (state.c_att > 0) {
        build_neighbor_inputs(src, neighbors, mode, state);
        const size_t Rq = size_t(state.c_att) * K * r;
        state.nbr_emb.resize(Rq * D);
        for (size_t i = 0; i < Rq; ++i)
            std::copy_n(tok_emb_->w.data() + size_t(state.nbr_tokens[i]) * D, D,
                        state.nbr_emb.data() + i * D);
        if (noise.nbr_kind == NoiseKind::Gaussian && noise.rng)
            apply_gaussian(std::span<T>(state.nbr_emb), noise.nbr_mag, *noise.rng);
        else if (noise.nbr_kind == NoiseKind::Uniform && noise.rng)
            apply_uniform(std::span<T>(state.nbr_emb), Rq, D, noise.nbr_mag, *noise.rng);
    }

    state.layers.assign(cfg_.n_layers, {});
    const std::vector<T>* x = &state.emb;
    for (uint32_t l = 1; l <= cfg_.n_layers; ++l) {
        const DecoderLayer& lay = layers_[l - 1];
        LayerCache<T>& cache = state.layers[l - 1];
        cache.x_in = *x;

        if (l == first_cca_ && state.c_att > 0) {
            // trunk hidden states entering the first CCA layer condition the
            // neighbor encoder; encode once, share across CCA layers
            const size_t ch_rows = size_t(state.c_att) * m;
            state.chunk_hidden.assign(cache.x_in.begin(), cache.x_in.begin() + ch_rows * D);
            run_encoder(state);
        }

        // causal self-attention
        cache.ln1_out.resize(n * D);
        cache.ln1_mean.resize(n);
        cache.ln1_rstd.resize(n);
        detail::layernorm_forward(cache.x_in.data(), n, D, lay.ln1.g->w.data(),
                                  lay.ln1.b->w.data(), cache.ln1_out.data(),
                                  cache.ln1_mean.data(), cache.ln1_rstd.data());
        cache.qkv.resize(n * 3 * D);
        detail::linear_forward(cache.ln1_out.data(), n, D, size_t(3) * D, lay.wqkv.W->w.data(),
                               lay.wqkv.b->w.data(), cache.qkv.data());
        detail::rotate_rows(cache.qkv.data(), n, size_t(3) * D, H, hd, false);
        detail::rotate_rows(cache.qkv.data() + D, n, size_t(3) * D, H, hd, false);
        cache.attn_probs.assign(size_t(H) * n * n, T(0));
        cache.attn_ctx.assign(n * D, T(0));
        detail::attend_forward(cache.qkv.data(), cache.qkv.data() + D, cache.qkv.data() + 2 * D, n,
                               n, size_t(3) * D, size_t(3) * D, H, hd, true, nullptr,
                               cache.attn_probs.data(), cache.attn_ctx.data(), D);
        cache.x_attn.resize(n * D);
        detail::linear_forward(cache.attn_ctx.data(), n, D, D, lay.wproj.W->w.data(),
                               lay.wproj.b->w.data(), cache.x_attn.data());
        for (size_t i = 0; i < n * D; ++i)
            cache.x_attn[i] = T(double(cache.x_attn[i]) + double(cache.x_in[i]));

        // chunked cross-attention: chunk i attends to the encoded neighbors
        // of chunk i-1; chunk 0 passes through on the residual
        if (lay.has_cca && use_cca && state.c_att > 0) {
            cache.cca_ln_out.resize(n * D);
            cache.cca_ln_mean.resize(n);
            cache.cca_ln_rstd.resize(n);
            detail::layernorm_forward(cache.x_attn.data(), n, D, lay.ln_cca.g->w.data(),
                                      lay.ln_cca.b->w.data(), cache.cca_ln_out.data(),
                                      cache.cca_ln_mean.data(), cache.cca_ln_rstd.data());
            cache.cca_q.resize(n * D);
            detail::linear_forward(cache.cca_ln_out.data(), n, D, D, lay.cq.W->w.data(), nullptr,
                                   cache.cca_q.data());
            const size_t kv_rows = size_t(state.c_att) * K * r;
            cache.cca_k.resize(kv_rows * D);
            cache.cca_v.resize(kv_rows * D);
            detail::linear_forward(state.encoded.data(), kv_rows, D, D, lay.ck.W->w.data(),
                                   nullptr, cache.cca_k.data());
            detail::linear_forward(state.encoded.data(), kv_rows, D, D, lay.cv.W->w.data(),
                                   nullptr, cache.cca_v.data());
            // relative positions across the cross-attention: queries carry
            // their chunk-local position, keys their record position
            detail::rotate_rows_mod(cache.cca_q.data(), n, D, H, hd, m, false);
            detail::rotate_rows_mod(cache.cca_k.data(), kv_rows, D, H, hd, r, false);
            cache.cca_ctx.assign(n * D, T(0));
            size_t probs_total = 0;
            for (uint32_t c = 1; c < state.c_present; ++c)
                probs_total += size_t(H) * (std::min<size_t>(size_t(c + 1) * m, n) - size_t(c) * m) *
                               (size_t(K) * r);
            cache.cca_probs.assign(probs_total, T(0));
            size_t probs_off = 0;
            for (uint32_t c = 1; c < state.c_present; ++c) {
                const size_t row0 = size_t(c) * m;
                const size_t rows = std::min<size_t>(row0 + m, n) - row0;
                const size_t nk = size_t(K) * r;
                detail::attend_forward(cache.cca_q.data() + row0 * D,
                                       cache.cca_k.data() + (size_t(c) - 1) * nk * D,
                                       cache.cca_v.data() + (size_t(c) - 1) * nk * D, rows, nk, D,
                                       D, H, hd, false, state.nbr_pad.data() + (size_t(c) - 1) * nk,
                                       cache.cca_probs.data() + probs_off,
                                       cache.cca_ctx.data() + row0 * D, D);
                probs_off += size_t(H) * rows * nk;
            }
            cache.x_cca.resize(n * D);
            detail::linear_forward(cache.cca_ctx.data(), n, D, D, lay.co.W->w.data(), nullptr,
                                   cache.x_cca.data());
            for (size_t i = 0; i < n * D; ++i)
                cache.x_cca[i] = T(double(cache.x_cca[i]) + double(cache.x_attn[i]));
        } else {
            cache.x_cca = cache.x_attn;
        }

        // feed-forward
        cache.ln2_out.resize(n * D);
        cache.ln2_mean.resize(n);
        cache.ln2_rstd.resize(n);
        detail::layernorm_forward(cache.x_cca.data(), n, D, lay.ln2.g->w.data(),
                                  lay.ln2.b->w.data(), cache.ln2_out.data(),
                                  cache.ln2_mean.data(), cache.ln2_rstd.data());
        cache.ff1.resize(n * F);
        detail::linear_forward(cache.ln2_out.data(), n, D, F, lay.wff1.W->w.data(),
                               lay.wff1.b->w.data(), cache.ff1.data());
        cache.ff_gelu.resize(n * F);
        detail::gelu_forward(cache.ff1.data(), n * F, cache.ff_gelu.data());
        cache.x_out.resize(n * D);
        detail::linear_forward(cache.ff_gelu.data(), n, F, D, lay.wff2.W->w.data(),
                               lay.wff2.b->w.data(), cache.x_out.data());
        for (size_t i = 0; i < n * D; ++i)
            cache.x_out[i] = T(double(cache.x_out[i]) + double(cache.x_cca[i]));
        x = &cache.x_out;
    }

    state.lnf_out.resize(n * D);
    state.lnf_mean.resize(n);
    state.lnf_rstd.resize(n);
    detail::layernorm_forward(x->data(), n, D, lnf_.g->w.data(), lnf_.b->w.data(),
                              state.lnf_out.data(), state.lnf_mean.data(), state.lnf_rstd.data());
    state.logits.resize(n * V);
    detail::linear_forward(state.lnf_out.data(), n, D, V, readout_.W->w.data(),
                           readout_.b->w.data(), state.logits.data());
}

// ---------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------

template <typename T>
double softmax_xent(const T* logits, size_t n, size_t vocab, const TokenId* targets,
                    const uint8_t* mask, T* dlogits) {
    size_t counted = 0;
    for (size_t i = 0; i < n; ++i)
        if (!mask || mask[i]) ++counted;
    if (counted == 0) fail("softmax_xent: no scored positions");
    const double inv_count = 1.0 / double(counted);

    double loss = 0.0;
    std::vector<double> p(vocab);
    for (size_t i = 0; i < n; ++i) {
        const bool scored = !mask || mask[i];
        if (!scored) {
            if (dlogits)
                for (size_t v = 0; v < vocab; ++v) dlogits[i * vocab + v] = T(0);
            continue;
        }
        const T* li = logits + i * vocab;
        double mx = double(li[0]);
        for (size_t v = 1; v < vocab; ++v) mx = std::max(mx, double(li[v]));
        double denom = 0.0;
        for (size_t v = 0; v < vocab; ++v) {
            p[v] = std::exp(double(li[v]) - mx);
            denom += p[v];
        }
        const TokenId t = targets[i];
        if (t >= vocab) fail("softmax_xent: target id ", t, " >= vocab ", vocab);
        loss += -(std::log(p[t] / denom));
        if (dlogits) {
            T* di = dlogits + i * vocab;
            for (size_t v = 0; v < vocab; ++v)
                di[v] = T((p[v] / denom - (v == t ? 1.0 : 0.0)) * inv_count);
        }
    }
    return loss * inv_count;
}

template <typename T>
double ModelT<T>::loss(std::span<const TokenId> src, const NeighborSet* neighbors, ModelMode mode,
                       std::span<const TokenId> targets, std::span<const uint8_t> target_mask,
                       const NoisePlan& noise) const {
    if (targets.size() != src.size()) fail("loss: src/target length mismatch");
    ForwardState<T> state;
    forward(src, neighbors, mode, noise, state);
    return softmax_xent(state.logits.data(), state.n, cfg_.vocab_size, targets.data(),
                        target_mask.empty() ? nullptr : target_mask.data(), (T*)nullptr);
}

// ---------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------

template <typename T>
void ModelT<T>::encoder_backward(ForwardState<T>& state, std::vector<T>& d_encoded,
                                 std::vector<T>& d_chunk_hidden, std::vector<T>& d_nbr_emb) {
    const uint32_t D = cfg_.d_model, F = cfg_.d_ff, H = cfg_.n_heads, hd = cfg_.head_dim();
    const uint32_t K = cfg_.k_neighbors, r = cfg_.neighbor_len(), m = cfg_.chunk_len;
    const size_t R = size_t(state.c_att) * K;
    const size_t Rq = R * r;
    const size_t ch_rows = size_t(state.c_att) * m;

    d_chunk_hidden.assign(ch_rows * D, T(0));

    // final normalizer
    const std::vector<T>& enc_in = state.enc_layers.back().y_out;
    std::vector<T> d_y(Rq * D, T(0));
    detail::layernorm_backward(enc_in.data(), state.enc_ln_mean.data(), state.enc_ln_rstd.data(),
                               enc_ln_out_.g->w.data(), d_encoded.data(), Rq, D, d_y.data(),
                               enc_ln_out_.g->g.data(), enc_ln_out_.b->g.data());

    for (size_t e = enc_layers_.size(); e-- > 0;) {
        const EncoderLayer& lay = enc_layers_[e];
        EncLayerCache<T>& cache = state.enc_layers[e];
        const std::vector<T>& y_mid = lay.has_cross ? cache.y_cross : cache.y_attn;

        // ffw sublayer
        std::vector<T> d_gelu(Rq * F, T(0));
        detail::linear_backward(cache.ff_gelu.data(), Rq, F, D, lay.wff2.W->w.data(), d_y.data(),
                                d_gelu.data(), lay.wff2.W->g.data(), lay.wff2.b->g.data());
        std::vector<T> d_ff1(Rq * F, T(0));
        detail::gelu_backward(cache.ff1.data(), d_gelu.data(), Rq * F, d_ff1.data());
        std::vector<T> d_lnf(Rq * D, T(0));
        detail::linear_backward(cache.lnf_out.data(), Rq, D, F, lay.wff1.W->w.data(), d_ff1.data(),
                                d_lnf.data(), lay.wff1.W->g.data(), lay.wff1.b->g.data());
        detail::layernorm_backward(y_mid.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(),
                                   lay.ln_f.g->w.data(), d_lnf.data(), Rq, D, d_y.data(),
                                   lay.ln_f.g->g.data(), lay.ln_f.b->g.data());

        // cross-attention sublayer
        if (lay.has_cross) {
            std::vector<T> d_ctx(Rq * D, T(0));
            detail::linear_backward(cache.cross_ctx.data(), Rq, D, D, lay.xo.W->w.data(),
                                    d_y.data(), d_ctx.data(), lay.xo.W->g.data(), nullptr);
            std::vector<T> d_xq(Rq * D, T(0));
            std::vector<T> d_xk(ch_rows * D, T(0)), d_xv(ch_rows * D, T(0));
            for (size_t rec = 0; rec < R; ++rec) {
                const size_t chunk = rec / K;
                detail::attend_backward(cache.xq.data() + rec * r * D,
                                        cache.xk.data() + chunk * m * D,
                                        cache.xv.data() + chunk * m * D,
                                        cache.cross_probs.data() + rec * H * r * m, r, m, D, D, H,
                                        hd, d_ctx.data() + rec * r * D, D,
                                        d_xq.data() + rec * r * D, d_xk.data() + chunk * m * D,
                                        d_xv.data() + chunk * m * D);
            }
            detail::rotate_rows_mod(d_xq.data(), Rq, D, H, hd, r, true);
            detail::rotate_rows_mod(d_xk.data(), ch_rows, D, H, hd, m, true);
            std::vector<T> d_lnc(Rq * D, T(0));
            detail::linear_backward(cache.lnc_out.data(), Rq, D, D, lay.xq.W->w.data(),
                                    d_xq.data(), d_lnc.data(), lay.xq.W->g.data(), nullptr);
            detail::layernorm_backward(cache.y_attn.data(), cache.lnc_mean.data(),
                                       cache.lnc_rstd.data(), lay.ln_c.g->w.data(), d_lnc.data(),
                                       Rq, D, d_y.data(), lay.ln_c.g->g.data(),
                                       lay.ln_c.b->g.data());
            detail::linear_backward(state.chunk_hidden.data(), ch_rows, D, D, lay.xk.W->w.data(),
                                    d_xk.data(), d_chunk_hidden.data(), lay.xk.W->g.data(),
                                    nullptr);
            detail::linear_backward(state.chunk_hidden.data(), ch_rows, D, D, lay.xv.W->w.data(),
                                    d_xv.data(), d_chunk_hidden.data(), lay.xv.W->g.data(),
                                    nullptr);
        }

        // self-attention sublayer
        std::vector<T> d_ctx(Rq * D, T(0));
        detail::linear_backward(cache.attn_ctx.data(), Rq, D, D, lay.wproj.W->w.data(), d_y.data(),
                                d_ctx.data(), lay.wproj.W->g.data(), lay.wproj.b->g.data());
        std::vector<T> d_qkv(Rq * 3 * D, T(0));
        for (size_t rec = 0; rec < R; ++rec) {
            const T* base = cache.qkv.data() + rec * r * 3 * D;
            T* dbase = d_qkv.data() + rec * r * 3 * D;
            detail::attend_backward(base, base + D, base + 2 * D,
                                    cache.attn_probs.data() + rec * H * r * r, r, r, size_t(3) * D,
                                    size_t(3) * D, H, hd, d_ctx.data() + rec * r * D, D, dbase,
                                    dbase + D, dbase + 2 * D);
            detail::rotate_rows(dbase, r, size_t(3) * D, H, hd, true);
            detail::rotate_rows(dbase + D, r, size_t(3) * D, H, hd, true);
        }
        std::vector<T> d_lns(Rq * D, T(0));
        detail::linear_backward(cache.lns_out.data(), Rq, D, size_t(3) * D, lay.wqkv.W->w.data(),
                                d_qkv.data(), d_lns.data(), lay.wqkv.W->g.data(),
                                lay.wqkv.b->g.data());
        detail::layernorm_backward(cache.y_in.data(), cache.lns_mean.data(),
                                   cache.lns_rstd.data(), lay.ln_s.g->w.data(), d_lns.data(), Rq,
                                   D, d_y.data(), lay.ln_s.g->g.data(), lay.ln_s.b->g.data());
    }
    d_nbr_emb = std::move(d_y);
}

template <typename T>
double ModelT<T>::backward(ForwardState<T>& state, std::span<const TokenId> targets,
                           std::span<const uint8_t> target_mask) {
    const uint32_t D = cfg_.d_model, F = cfg_.d_ff, H = cfg_.n_heads, hd = cfg_.head_dim();
    const uint32_t m = cfg_.chunk_len, K = cfg_.k_neighbors, r = cfg_.neighbor_len();
    const uint32_t V = cfg_.vocab_size;
    const size_t n = state.n;
    if (targets.size() != n) fail("backward: target length ", targets.size(), " != ", n);

    std::vector<T> dlogits(n * V);
    const double loss_val =
        softmax_xent(state.logits.data(), n, V, targets.data(),
                     target_mask.empty() ? nullptr : target_mask.data(), dlogits.data());

    std::vector<T> d_lnf(n * D, T(0));
    detail::linear_backward(state.lnf_out.data(), n, D, V, readout_.W->w.data(), dlogits.data(),
                            d_lnf.data(), readout_.W->g.data(), readout_.b->g.data());
    std::vector<T> dx(n * D, T(0));
    const std::vector<T>& trunk_top = state.layers.back().x_out;
    detail::layernorm_backward(trunk_top.data(), state.lnf_mean.data(), state.lnf_rstd.data(),
                               lnf_.g->w.data(), d_lnf.data(), n, D, dx.data(), lnf_.g->g.data(),
                               lnf_.b->g.data());

    const bool use_cca = state.mode != ModelMode::Off;
    std::vector<T> d_encoded;
    if (use_cca && state.c_att > 0) d_encoded.assign(size_t(state.c_att) * K * r * D, T(0));

    for (uint32_t l = cfg_.n_layers; l >= 1; --l) {
        const DecoderLayer& lay = layers_[l - 1];
        LayerCache<T>& cache = state.layers[l - 1];

        // ffw sublayer
        {
            std::vector<T> d_gelu(n * F, T(0));
            detail::linear_backward(cache.ff_gelu.data(), n, F, D, lay.wff2.W->w.data(), dx.data(),
                                    d_gelu.data(), lay.wff2.W->g.data(), lay.wff2.b->g.data());
            std::vector<T> d_ff1(n * F, T(0));
            detail::gelu_backward(cache.ff1.data(), d_gelu.data(), n * F, d_ff1.data());
            std::vector<T> d_ln2(n * D, T(0));
            detail::linear_backward(cache.ln2_out.data(), n, D, F, lay.wff1.W->w.data(),
                                    d_ff1.data(), d_ln2.data(), lay.wff1.W->g.data(),
                                    lay.wff1.b->g.data());
            detail::layernorm_backward(cache.x_cca.data(), cache.ln2_mean.data(),
                                       cache.ln2_rstd.data(), lay.ln2.g->w.data(), d_ln2.data(), n,
                                       D, dx.data(), lay.ln2.g->g.data(), lay.ln2.b->g.data());
        }

        // CCA sublayer
        if (lay.has_cca && use_cca && state.c_att > 0) {
            const size_t kv_rows = size_t(state.c_att) * K * r;
            std::vector<T> d_ctx(n * D, T(0));
            detail::linear_backward(cache.cca_ctx.data(), n, D, D, lay.co.W->w.data(), dx.data(),
                                    d_ctx.data(), lay.co.W->g.data(), nullptr);
            std::vector<T> d_q(n * D, T(0));
            std::vector<T> d_k(kv_rows * D, T(0)), d_v(kv_rows * D, T(0));
            size_t probs_off = 0;
            for (uint32_t c = 1; c < state.c_present; ++c) {
                const size_t row0 = size_t(c) * m;
                const size_t rows = std::min<size_t>(row0 + m, n) - row0;
                const size_t nk = size_t(K) * r;
                detail::attend_backward(cache.cca_q.data() + row0 * D,
                                        cache.cca_k.data() + (size_t(c) - 1) * nk * D,
                                        cache.cca_v.data() + (size_t(c) - 1) * nk * D,
                                        cache.cca_probs.data() + probs_off, rows, nk, D, D, H, hd,
                                        d_ctx.data() + row0 * D, D, d_q.data() + row0 * D,
                                        d_k.data() + (size_t(c) - 1) * nk * D,
                                        d_v.data() + (size_t(c) - 1) * nk * D);
                probs_off += size_t(H) * rows * nk;
            }
            detail::rotate_rows_mod(d_q.data(), n, D, H, hd, m, true);
            detail::rotate_rows_mod(d_k.data(), kv_rows, D, H, hd, r, true);
            std::vector<T> d_ln(n * D, T(0));
            detail::linear_backward(cache.cca_ln_out.data(), n, D, D, lay.cq.W->w.data(),
                                    d_q.data(), d_ln.data(), lay.cq.W->g.data(), nullptr);
            detail::layernorm_backward(cache.x_attn.data(), cache.cca_ln_mean.data(),
                                       cache.cca_ln_rstd.data(), lay.ln_cca.g->w.data(),
                                       d_ln.data(), n, D, dx.data(), lay.ln_cca.g->g.data(),
                                       lay.ln_cca.b->g.data());
            detail::linear_backward(state.encoded.data(), kv_rows, D, D, lay.ck.W->w.data(),
                                    d_k.data(), d_encoded.data(), lay.ck.W->g.data(), nullptr);
            detail::linear_backward(state.encoded.data(), kv_rows, D, D, lay.cv.W->w.data(),
                                    d_v.data(), d_encoded.data(), lay.cv.W->g.data(), nullptr);
        }

        // self-attention sublayer
        {
            std::vector<T> d_ctx(n * D, T(0));
            detail::linear_backward(cache.attn_ctx.data(), n, D, D, lay.wproj.W->w.data(),
                                    dx.data(), d_ctx.data(), lay.wproj.W->g.data(),
                                    lay.wproj.b->g.data());
            std::vector<T> d_qkv(n * 3 * D, T(0));
            detail::attend_backward(cache.qkv.data(), cache.qkv.data() + D,
                                    cache.qkv.data() + 2 * D, cache.attn_probs.data(), n, n,
                                    size_t(3) * D, size_t(3) * D, H, hd, d_ctx.data(), D,
                                    d_qkv.data(), d_qkv.data() + D, d_qkv.data() + 2 * D);
            detail::rotate_rows(d_qkv.data(), n, size_t(3) * D, H, hd, true);
            detail::rotate_rows(d_qkv.data() + D, n, size_t(3) * D, H, hd, true);
            std::vector<T> d_ln1(n * D, T(0));
            detail::linear_backward(cache.ln1_out.data(), n, D, size_t(3) * D,
                                    lay.wqkv.W->w.data(), d_qkv.data(), d_ln1.data(),
                                    lay.wqkv.W->g.data(), lay.wqkv.b->g.data());
            detail::layernorm_backward(cache.x_in.data(), cache.ln1_mean.data(),
                                       cache.ln1_rstd.data(), lay.ln1.g->w.data(), d_ln1.data(), n,
                                       D, dx.data(), lay.ln1.g->g.data(), lay.ln1.b->g.data());
        }

        // the neighbor encoder consumed the hidden state entering this layer
        if (l == first_cca_ && use_cca && state.c_att > 0) {
            std::vector<T> d_chunk_hidden, d_nbr_emb;
            encoder_backward(state, d_encoded, d_chunk_hidden, d_nbr_emb);
            for (size_t i = 0; i < d_chunk_hidden.size(); ++i)
                dx[i] = T(double(dx[i]) + double(d_chunk_hidden[i]));
            for (size_t i = 0; i < size_t(state.c_att) * K * r; ++i) {
                T* grow = tok_emb_->g.data() + size_t(state.nbr_tokens[i]) * D;
                const T* drow = d_nbr_emb.data() + i * D;
                for (uint32_t d = 0; d < D; ++d) grow[d] = T(double(grow[d]) + double(drow[d]));
            }
        }
    }

    for (size_t i = 0; i < n; ++i) {
        T* grow = tok_emb_->g.data() + size_t(state.src[i]) * D;
        const T* drow = dx.data() + i * D;
        for (uint32_t d = 0; d < D; ++d) grow[d] = T(double(grow[d]) + double(drow[d]));
    }
    return loss_val;
}

// ---------------------------------------------------------------------
// neighbor-encoder contract surface
// ---------------------------------------------------------------------

// ---------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------

namespace detail {
constexpr uint32_t kCkptMagic = 0x4b434c52;  // "RLCK"
constexpr uint32_t kCkptVersion = 1;
}  // namespace detail

template <typename T>
void ModelT<T>::save_checkpoint(const std::string& path, uint64_t step) const {
    const std::string tmp = path + ".tmp";
    {
        BinaryWriter w(tmp);
        w.u32(detail::kCkptMagic);
        w.u32(detail::kCkptVersion);
        w.u8(variant_ == ModelVariant::On ? 1 : 0);
        w.str(cfg_.serialize());
        w.u64(cfg_.hash());
        w.u64(cfg_.backbone_hash());
        w.u64(step);
        w.u64(cfg_.seed);
        w.u32(uint32_t(store_.size()));
        for (const auto& p : store_) {
            w.str(p->name);
            w.u64(p->rows);
            w.u64(p->cols);
            for (T x : p->w) w.f32(float(x));
        }
        w.close();
    }
    std::rename(tmp.c_str(), path.c_str());
}

template <typename T>
uint64_t ModelT<T>::load_checkpoint(const std::string& path, LoadMode mode) {
    BinaryReader r(path);
    if (r.u32() != detail::kCkptMagic) fail("bad checkpoint magic: ", path);
    if (r.u32() != detail::kCkptVersion) fail("unsupported checkpoint version: ", path);
    (void)r.u8();        // variant
    (void)r.str();       // config text
    const uint64_t config_hash = r.u64();
    const uint64_t backbone_hash = r.u64();
    const uint64_t step = r.u64();
    (void)r.u64();       // seed
    if (mode == LoadMode::Exact && config_hash != cfg_.hash())
        fail("checkpoint config hash mismatch: ", path);
    if (mode == LoadMode::BackboneOnly && backbone_hash != cfg_.backbone_hash())
        fail("checkpoint backbone hash mismatch: ", path);

    std::map<std::string, std::vector<float>> tensors;
    const uint32_t n_tensors = r.u32();
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = r.str();
        const uint64_t rows = r.u64(), cols = r.u64();
        std::vector<float> data(rows * cols);
        r.f32_array(data.data(), data.size());
        tensors.emplace(name, std::move(data));
    }

    for (auto& p : store_) {
        const bool retro_group = p->group == "cca" || p->group == "encoder";
        auto it = tensors.find(p->name);
        if (it == tensors.end()) {
            if (mode == LoadMode::BackboneOnly && retro_group) continue;  // stays at init
            fail("checkpoint missing tensor ", p->name, ": ", path);
        }
        if (it->second.size() != p->size())
            fail("checkpoint tensor ", p->name, " has ", it->second.size(), " values, expected ",
                 p->size());
        for (size_t i = 0; i < p->size(); ++i) p->w[i] = T(it->second[i]);
    }
    return step;
}

// ---------------------------------------------------------------------
// neighbor-encoder contract surface
// ---------------------------------------------------------------------

template <typename T>
std::vector<T> ModelT<T>::encode_neighbors(const NeighborSet& neighbors, uint32_t n_chunks_used,
                                           std::span<const T> chunk_hidden) const {
    if (variant_ != ModelVariant::On) fail("encode_neighbors: model has no encoder");
    const uint32_t m = cfg_.chunk_len, K = cfg_.k_neighbors, r = cfg_.neighbor_len();
    const uint32_t D = cfg_.d_model;
    if (neighbors.n_chunks < n_chunks_used || neighbors.k != K)
        fail("encode_neighbors: neighbor set shape mismatch");
    if (chunk_hidden.size() != size_t(n_chunks_used) * m * D)
        fail("encode_neighbors: chunk_hidden size mismatch");

    ForwardState<T> state;
    state.c_att = n_chunks_used;
    const size_t Rq = size_t(n_chunks_used) * K * r;
    state.nbr_tokens.assign(Rq, 0);
    state.nbr_pad.assign(Rq, 0);
    for (uint32_t c = 0; c < n_chunks_used; ++c)
        for (uint32_t j = 0; j < K; ++j) {
            const NeighborRecord& rec = neighbors.at(c, j);
            std::copy_n(rec.tokens.data(), r, state.nbr_tokens.data() + (size_t(c) * K + j) * r);
            std::copy_n(rec.pad.data(), r, state.nbr_pad.data() + (size_t(c) * K + j) * r);
        }
    state.nbr_emb.resize(Rq * D);
    for (size_t i = 0; i < Rq; ++i)
        std::copy_n(tok_emb_->w.data() + size_t(state.nbr_tokens[i]) * D, D,
                    state.nbr_emb.data() + i * D);
    state.chunk_hidden.assign(chunk_hidden.begin(), chunk_hidden.end());
    run_encoder(state);
    return std::move(state.encoded);
}

}  // namespace retrolite
