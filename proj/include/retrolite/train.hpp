#pragma once

// Training loop with regularizer hooks, freezing policies and seeded
// determinism, plus the domain fine-tuning protocol (15% of the domain
// training windows become update inputs, the remaining 85% become the
// fine-tuning retrieval database).

#include <set>
#include <string>
#include <vector>

#include "retrolite/eval.hpp"
#include "retrolite/model.hpp"
#include "retrolite/retrodb.hpp"

namespace retrolite {

enum class OptimizerKind { RAdam, AdamW };
enum class FreezePolicy { TrainAll, FreezeBackboneTrainCca, FinetuneFfwReadout };

OptimizerKind parse_optimizer(const std::string& s);
FreezePolicy parse_freeze_policy(const std::string& s);
std::string to_string(OptimizerKind k);
std::string to_string(FreezePolicy p);
std::set<std::string> frozen_groups_for(FreezePolicy policy);

struct TrainConfig {
    uint64_t steps = 1000;
    uint32_t batch_size = 2;
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::RAdam;
    uint64_t warmup = 100;
    uint64_t seed = 0;
    FreezePolicy freeze_policy = FreezePolicy::TrainAll;
    RegularizerSpec regularizer;
    double weight_decay = 0.0;  // AdamW only
    double clip_norm = 1.0;     // global gradient norm
    uint64_t ckpt_every = 0;    // 0 = final checkpoint only
};

// Variance-rectified adaptive moments (with plain AdamW as the alternative);
// moment state is kept in double and keyed by parameter registration order.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, double weight_decay, uint64_t warmup,
              double clip_norm);

    // clips trainable gradients to the global norm, then applies one update;
    // returns the pre-clip gradient norm
    double step(Model& model);

    uint64_t steps_taken() const { return t_; }
    double current_lr() const;

    // convex-probe entry point used by the optimizer smoke test
    void step_raw(std::vector<double>& w, const std::vector<double>& g);

private:
    void update_param(std::vector<float>& w, const std::vector<float>& g, std::vector<double>& m,
                      std::vector<double>& v, double scale, double lr);

    OptimizerKind kind_;
    double lr_, weight_decay_, clip_norm_;
    uint64_t warmup_, t_ = 0;
    std::vector<std::vector<double>> m_, v_;
    std::vector<double> m_raw_, v_raw_;
};

struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

// One optimization step over batch records drawn from a neighbor store.
// The regularizer is applied to the embedding matrices per its placement
// before anything enters the network; a non-finite loss aborts with
// diagnostics.
StepStats train_step(Model& model, const std::vector<const NeighborStoreRecord*>& batch,
                     const TrainConfig& cfg, Optimizer& opt, uint64_t step_index);

struct TrainResult {
    std::string final_checkpoint;
    std::string trace_path;
    double final_loss = 0.0;
    uint64_t steps = 0;
};

// Deterministic loop over a neighbor store: seeded sample order, loss trace
// CSV (step,loss,grad_norm,lr), periodic and final checkpoints (atomic
// write-then-rename). `init_from` loads a starting checkpoint; with the
// retrofit policy an off-model checkpoint is accepted for the backbone.
TrainResult train_loop(Model& model, const NeighborStore& store, const TrainConfig& cfg,
                       const std::string& out_dir, const std::string& init_from = "");

struct FinetuneReport {
    std::vector<double> per_epoch_ppl;  // index 0 = before any update
    uint32_t best_epoch = 0;
    std::string split_path;             // persisted 15/85 window split
    std::string final_checkpoint;
};

// Fine-tunes feed-forward + readout on 15% of the domain training windows,
// with the remaining 85% as the fine-tuning retrieval database (mutually
// exclusive to keep retrieval leakage out). Validation perplexity is
// reported per epoch, epoch 0 before any update.
FinetuneReport finetune_domain(Model& model, const std::vector<TokenSequence>& domain_train_docs,
                               const TokenSequence& domain_val, uint32_t epochs,
                               const TrainConfig& cfg, const EmbedderSpec& embedder,
                               const std::string& out_dir);

}  // namespace retrolite
