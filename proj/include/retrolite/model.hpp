#pragma once

// Decoder-only transformer with rotary positions, optional chunked
// cross-attention (CCA) blocks fed by a small neighbor encoder, per-group
// freezing masks, and the retrieval-off / no-neighbors variants.
//
// The whole model is templated on the scalar type: float for training and
// evaluation, double for the finite-difference gradient harness. Forward
// and backward are hand-written; every position-mixing step is causal by
// construction, so token perturbations cannot reach earlier positions even
// at the bit level.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "retrolite/common.hpp"
#include "retrolite/noise.hpp"
#include "retrolite/retrodb.hpp"

namespace retrolite {

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

struct ModelConfig {
    uint32_t n_layers = 4;
    uint32_t d_model = 64;
    uint32_t n_heads = 4;
    uint32_t d_ff = 256;
    uint32_t vocab_size = 256;
    uint32_t seq_len = 128;
    uint32_t chunk_len = 8;
    uint32_t k_neighbors = 3;
    std::vector<uint32_t> cca_layers;  // 1-based; empty selects the default rule
    uint32_t d_emb = 64;               // retrieval embedding dimension (index side)
    uint32_t neighbor_encoder_layers = 2;
    uint64_t seed = 0;

    uint32_t n_chunks() const { return seq_len / chunk_len; }
    uint32_t neighbor_len() const { return 2 * chunk_len; }
    uint32_t head_dim() const { return d_model / n_heads; }

    // every third layer starting from the sixth when depth allows,
    // otherwise the middle layer
    static std::vector<uint32_t> default_cca_layers(uint32_t n_layers);

    std::vector<uint32_t> resolved_cca_layers() const {
        return cca_layers.empty() ? default_cca_layers(n_layers) : cca_layers;
    }

    void validate() const;
    std::string serialize() const;
    uint64_t hash() const { return fnv1a64(serialize()); }
    // shape-relevant backbone fields only; used when retrofitting CCA onto
    // a checkpoint trained without it
    uint64_t backbone_hash() const;
};

enum class ModelVariant { Off, On };  // On carries CCA + neighbor encoder parameters
enum class ModelMode { Off, On, NoNeighbors };

ModelMode parse_model_mode(const std::string& s);
std::string to_string(ModelMode m);

// Noise applied to embedding matrices right after lookup, before anything
// enters the network. Used both for training regularization (lambda_t /
// alpha per placement) and for inference-time noisy retrieval (lambda_i).
struct NoisePlan {
    NoiseKind seq_kind = NoiseKind::None;
    double seq_mag = 0.0;
    NoiseKind nbr_kind = NoiseKind::None;
    double nbr_mag = 0.0;
    Rng* rng = nullptr;

    static NoisePlan none() { return {}; }
    static NoisePlan from_regularizer(const RegularizerSpec& reg, Rng& rng);
    static NoisePlan inference(double lambda_i, Rng& rng);
};

// ---------------------------------------------------------------------
// Rotary position embedding (norm-preserving pairwise rotation)
// ---------------------------------------------------------------------

template <typename T>
void rotary_apply(T* head_vec, uint32_t head_dim, uint64_t position, bool inverse = false) {
    if (head_dim % 2 != 0) fail("rotary_apply: head dimension must be even");
    for (uint32_t t = 0; t < head_dim / 2; ++t) {
        const double freq = std::pow(10000.0, -2.0 * double(t) / double(head_dim));
        const double angle = double(position) * freq;
        const double c = std::cos(angle), s = inverse ? -std::sin(angle) : std::sin(angle);
        const double x0 = double(head_vec[2 * t]), x1 = double(head_vec[2 * t + 1]);
        head_vec[2 * t] = T(x0 * c - x1 * s);
        head_vec[2 * t + 1] = T(x0 * s + x1 * c);
    }
}

// ---------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------

template <typename T>
struct Param {
    std::string name;
    std::string group;  // embedding | attention | ffw | cca | encoder | readout
    size_t rows = 0, cols = 0;
    std::vector<T> w, g;

    size_t size() const { return w.size(); }
};

struct GroupCount {
    uint64_t total = 0;
    uint64_t trainable = 0;
};
using ParamCounts = std::map<std::string, GroupCount>;

// ---------------------------------------------------------------------
// Forward state (activation cache for one sequence)
// ---------------------------------------------------------------------

template <typename T>
struct LayerCache {
    std::vector<T> x_in;                          // [n,D]
    std::vector<T> ln1_out, ln1_mean, ln1_rstd;   // [n,D],[n],[n]
    std::vector<T> qkv;                           // [n,3D], q/k rotated in place
    std::vector<T> attn_probs;                    // [H,n,n]
    std::vector<T> attn_ctx;                      // [n,D]
    std::vector<T> x_attn;                        // [n,D] after attention residual
    std::vector<T> cca_ln_out, cca_ln_mean, cca_ln_rstd;
    std::vector<T> cca_q;                         // [n,D]
    std::vector<T> cca_k, cca_v;                  // [C_att,K*r,D]
    std::vector<T> cca_probs;                     // per attending chunk: [H,rows,K*r]
    std::vector<T> cca_ctx;                       // [n,D]
    std::vector<T> x_cca;                         // [n,D] after CCA residual
    std::vector<T> ln2_out, ln2_mean, ln2_rstd;
    std::vector<T> ff1, ff_gelu;                  // [n,F]
    std::vector<T> x_out;                         // [n,D]
};

template <typename T>
struct EncLayerCache {
    std::vector<T> y_in;                          // [Rq,D] record-major rows (Rq = R*r)
    std::vector<T> lns_out, lns_mean, lns_rstd;
    std::vector<T> qkv;                           // [Rq,3D]
    std::vector<T> attn_probs;                    // [R,H,r,r]
    std::vector<T> attn_ctx;                      // [Rq,D]
    std::vector<T> y_attn;
    // cross-attention to the retrieving chunk (first encoder layer only)
    std::vector<T> lnc_out, lnc_mean, lnc_rstd;
    std::vector<T> xq;                            // [Rq,D]
    std::vector<T> xk, xv;                        // [C_att,m,D]
    std::vector<T> cross_probs;                   // [R,H,r,m]
    std::vector<T> cross_ctx;                     // [Rq,D]
    std::vector<T> y_cross;
    std::vector<T> lnf_out, lnf_mean, lnf_rstd;
    std::vector<T> ff1, ff_gelu;                  // [Rq,F]
    std::vector<T> y_out;
};

template <typename T>
struct ForwardState {
    size_t n = 0;            // sequence length actually run
    ModelMode mode = ModelMode::Off;
    uint32_t c_present = 0;  // ceil(n / chunk_len)
    uint32_t c_att = 0;      // chunks whose neighbors are consumed (c_present - 1)

    std::vector<TokenId> src;
    std::vector<T> emb;      // [n,D] token embeddings after sequence noise

    // neighbor side (mode != Off and c_att > 0)
    std::vector<TokenId> nbr_tokens;  // [c_att*K*r]
    std::vector<uint8_t> nbr_pad;     // [c_att*K*r]
    std::vector<T> nbr_emb;           // [c_att*K*r, D] after neighbor noise
    std::vector<T> chunk_hidden;      // [c_att*m, D] trunk rows at the first CCA layer
    std::vector<EncLayerCache<T>> enc_layers;
    std::vector<T> enc_ln_mean, enc_ln_rstd;
    std::vector<T> encoded;           // [c_att*K*r, D] final encoder output (E)

    std::vector<LayerCache<T>> layers;
    std::vector<T> lnf_out, lnf_mean, lnf_rstd;
    std::vector<T> logits;            // [n,V]
};

// ---------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------

template <typename T>
class ModelT {
public:
    ModelT(const ModelConfig& cfg, ModelVariant variant);

    const ModelConfig& config() const { return cfg_; }
    ModelVariant variant() const { return variant_; }
    bool has_cca() const { return variant_ == ModelVariant::On; }

    // --- parameters ------------------------------------------------
    std::vector<Param<T>*> params();
    std::vector<const Param<T>*> params() const;
    Param<T>* find_param(const std::string& name);
    void zero_grads();
    ParamCounts count_parameters() const;

    void set_frozen_groups(const std::set<std::string>& groups) { frozen_ = groups; }
    const std::set<std::string>& frozen_groups() const { return frozen_; }
    bool is_trainable(const Param<T>& p) const { return !frozen_.count(p.group); }

    // --- running ----------------------------------------------------
    // src length must be in [1, seq_len]; for mode On a NeighborSet with at
    // least ceil(n/chunk_len)-1 chunk rows is required.
    void forward(std::span<const TokenId> src, const NeighborSet* neighbors, ModelMode mode,
                 const NoisePlan& noise, ForwardState<T>& state) const;

    // Cross-entropy over positions where target_mask is nonzero (or all
    // positions when the mask is empty); accumulates parameter gradients.
    double backward(ForwardState<T>& state, std::span<const TokenId> targets,
                    std::span<const uint8_t> target_mask);

    // loss only, no gradients (used by evaluation and the finite-difference
    // harness); mean NLL over masked positions
    double loss(std::span<const TokenId> src, const NeighborSet* neighbors, ModelMode mode,
                std::span<const TokenId> targets, std::span<const uint8_t> target_mask,
                const NoisePlan& noise = NoisePlan::none()) const;

    // Encoder output for one neighbor set given explicit per-chunk hidden
    // states ([n_chunks_used * chunk_len, D]); exposed for direct contract
    // tests of the neighbor encoder.
    std::vector<T> encode_neighbors(const NeighborSet& neighbors, uint32_t n_chunks_used,
                                    std::span<const T> chunk_hidden) const;

    // --- checkpointing ----------------------------------------------
    void save_checkpoint(const std::string& path, uint64_t step) const;
    // exact: full tensor set and config hash must match.
    // backbone_only: loads everything outside the cca/encoder groups from a
    // checkpoint whose backbone hash matches (the retrofit path).
    enum class LoadMode { Exact, BackboneOnly };
    uint64_t load_checkpoint(const std::string& path, LoadMode mode = LoadMode::Exact);

private:
    struct LinearRef {
        Param<T>* W = nullptr;
        Param<T>* b = nullptr;  // null for bias-free projections
    };
    struct LayerNormRef {
        Param<T>* g = nullptr;
        Param<T>* b = nullptr;
    };
    struct DecoderLayer {
        LayerNormRef ln1, ln2;
        LinearRef wqkv, wproj;
        LinearRef wff1, wff2;
        bool has_cca = false;
        LayerNormRef ln_cca;
        LinearRef cq, ck, cv, co;  // bias-free
    };
    struct EncoderLayer {
        LayerNormRef ln_s, ln_f;
        LinearRef wqkv, wproj;
        LinearRef wff1, wff2;
        bool has_cross = false;
        LayerNormRef ln_c;
        LinearRef xq, xk, xv, xo;  // bias-free
    };

    Param<T>* add_param(const std::string& name, const std::string& group, size_t rows,
                        size_t cols, double init_std);
    LinearRef add_linear(const std::string& name, const std::string& group, size_t out, size_t in,
                         double w_std, bool bias);
    LayerNormRef add_layernorm(const std::string& name, const std::string& group, size_t dim);

    void build_neighbor_inputs(std::span<const TokenId> src, const NeighborSet* neighbors,
                               ModelMode mode, ForwardState<T>& state) const;
    void run_encoder(ForwardState<T>& state) const;
    void encoder_backward(ForwardState<T>& state, std::vector<T>& d_encoded,
                          std::vector<T>& d_chunk_hidden, std::vector<T>& d_nbr_emb);

    ModelConfig cfg_;
    ModelVariant variant_;
    uint32_t first_cca_ = 0;  // 1-based layer index, 0 when variant == Off
    std::set<std::string> frozen_;

    std::vector<std::unique_ptr<Param<T>>> store_;
    Param<T>* tok_emb_ = nullptr;  // [V,D]
    std::vector<DecoderLayer> layers_;
    std::vector<EncoderLayer> enc_layers_;
    LayerNormRef enc_ln_out_;
    LayerNormRef lnf_;
    LinearRef readout_;
};

using Model = ModelT<float>;

// Per-row softmax cross-entropy; returns mean NLL over masked rows and
// writes dlogits (zero for unmasked rows) when dlogits != nullptr.
template <typename T>
double softmax_xent(const T* logits, size_t n, size_t vocab, const TokenId* targets,
                    const uint8_t* mask, T* dlogits);

struct CheckpointInfo {
    bool variant_on = false;
    std::string config_text;
    uint64_t config_hash = 0;
    uint64_t backbone_hash = 0;
    uint64_t step = 0;
    uint64_t seed = 0;
};
CheckpointInfo read_checkpoint_info(const std::string& path);

// parses the key=value;... text produced by ModelConfig::serialize
ModelConfig parse_model_config_text(const std::string& text);

// reconstructs config and variant from the checkpoint itself
Model load_model(const std::string& path, CheckpointInfo* info = nullptr);

}  // namespace retrolite

#include "retrolite/model_impl.hpp"
