#include "retrolite/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>

namespace retrolite {

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "radam") return OptimizerKind::RAdam;
    if (s == "adamw") return OptimizerKind::AdamW;
    fail("unknown optimizer: ", s);
}

FreezePolicy parse_freeze_policy(const std::string& s) {
    if (s == "train_all") return FreezePolicy::TrainAll;
    if (s == "freeze_backbone_train_cca") return FreezePolicy::FreezeBackboneTrainCca;
    if (s == "finetune_ffw_readout") return FreezePolicy::FinetuneFfwReadout;
    fail("unknown freeze policy: ", s);
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::RAdam ? "radam" : "adamw"; }

std::string to_string(FreezePolicy p) {
    switch (p) {
        case FreezePolicy::TrainAll: return "train_all";
        case FreezePolicy::FreezeBackboneTrainCca: return "freeze_backbone_train_cca";
        case FreezePolicy::FinetuneFfwReadout: return "finetune_ffw_readout";
    }
    return "?";
}

std::set<std::string> frozen_groups_for(FreezePolicy policy) {
    switch (policy) {
        case FreezePolicy::TrainAll: return {};
        case FreezePolicy::FreezeBackboneTrainCca:
            return {"embedding", "attention", "ffw", "readout"};
        case FreezePolicy::FinetuneFfwReadout:
            return {"embedding", "attention", "cca", "encoder"};
    }
    return {};
}

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;
}  // namespace

Optimizer::Optimizer(OptimizerKind kind, double lr, double weight_decay, uint64_t warmup,
                     double clip_norm)
    : kind_(kind), lr_(lr), weight_decay_(weight_decay), clip_norm_(clip_norm), warmup_(warmup) {}

double Optimizer::current_lr() const {
    const uint64_t t = t_ + 1;
    return warmup_ > 0 ? lr_ * std::min(1.0, double(t) / double(warmup_)) : lr_;
}

void Optimizer::update_param(std::vector<float>& w, const std::vector<float>& g,
                             std::vector<double>& m, std::vector<double>& v, double scale,
                             double lr) {
    const uint64_t t = t_;  // already incremented by step()
    const double bc1 = 1.0 - std::pow(kBeta1, double(t));
    const double bc2 = 1.0 - std::pow(kBeta2, double(t));
    const double rho_inf = 2.0 / (1.0 - kBeta2) - 1.0;
    const double rho_t =
        rho_inf - 2.0 * double(t) * std::pow(kBeta2, double(t)) / bc2;

    double rect = 1.0;
    bool use_adaptive = true;
    if (kind_ == OptimizerKind::RAdam) {
        if (rho_t > 4.0) {
            rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                             ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
        } else {
            use_adaptive = false;  // warmup phase: momentum update only
        }
    }

    for (size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]) * scale;
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * gi * gi;
        const double mhat = m[i] / bc1;
        double update;
        if (use_adaptive) {
            const double vhat = std::sqrt(v[i] / bc2);
            update = lr * rect * mhat / (vhat + kEps);
        } else {
            update = lr * mhat;
        }
        if (weight_decay_ > 0.0) update += lr * weight_decay_ * double(w[i]);
        w[i] = float(double(w[i]) - update);
    }
}

double Optimizer::step(Model& model) {
    auto params = model.params();
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i]->size(), 0.0);
            v_[i].assign(params[i]->size(), 0.0);
        }
    }
    ++t_;
    const double lr = current_lr();

    double norm2 = 0.0;
    for (auto* p : params) {
        if (!model.is_trainable(*p)) continue;
        for (float gi : p->g) norm2 += double(gi) * double(gi);
    }
    const double norm = std::sqrt(norm2);
    const double scale = (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;

    for (size_t i = 0; i < params.size(); ++i) {
        if (!model.is_trainable(*params[i])) continue;
        update_param(params[i]->w, params[i]->g, m_[i], v_[i], scale, lr);
    }
    return norm;
}

void Optimizer::step_raw(std::vector<double>& w, const std::vector<double>& g) {
    if (m_raw_.empty()) {
        m_raw_.assign(w.size(), 0.0);
        v_raw_.assign(w.size(), 0.0);
    }
    ++t_;
    const uint64_t t = t_;
    const double lr = current_lr();
    const double bc1 = 1.0 - std::pow(kBeta1, double(t));
    const double bc2 = 1.0 - std::pow(kBeta2, double(t));
    const double rho_inf = 2.0 / (1.0 - kBeta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * double(t) * std::pow(kBeta2, double(t)) / bc2;
    for (size_t i = 0; i < w.size(); ++i) {
        m_raw_[i] = kBeta1 * m_raw_[i] + (1.0 - kBeta1) * g[i];
        v_raw_[i] = kBeta2 * v_raw_[i] + (1.0 - kBeta2) * g[i] * g[i];
        const double mhat = m_raw_[i] / bc1;
        if (kind_ == OptimizerKind::RAdam && rho_t <= 4.0) {
            w[i] -= lr * mhat;
        } else {
            double rect = 1.0;
            if (kind_ == OptimizerKind::RAdam)
                rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                                 ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
            w[i] -= lr * rect * mhat / (std::sqrt(v_raw_[i] / bc2) + kEps);
        }
    }
}

// ---------------------------------------------------------------------
// Steps and loops
// ---------------------------------------------------------------------

StepStats train_step(Model& model, const std::vector<const NeighborStoreRecord*>& batch,
                     const TrainConfig& cfg, Optimizer& opt, uint64_t step_index) {
    if (batch.empty()) fail("train_step: empty batch");
    model.zero_grads();
    const ModelMode mode = model.has_cca() ? ModelMode::On : ModelMode::Off;

    double loss_sum = 0.0;
    for (size_t b = 0; b < batch.size(); ++b) {
        const NeighborStoreRecord& rec = *batch[b];
        // per-sample noise stream: reproducible regardless of batch layout
        Rng noise_rng(derive_seed(cfg.seed, step_index * cfg.batch_size + b + 0x52454755));
        NoisePlan plan = NoisePlan::from_regularizer(cfg.regularizer, noise_rng);
        ForwardState<float> st;
        model.forward(rec.src, model.has_cca() ? &rec.neighbors : nullptr, mode, plan, st);
        loss_sum += model.backward(st, rec.tgt, {});
    }
    const double loss = loss_sum / double(batch.size());
    if (!std::isfinite(loss))
        fail("train_step: non-finite loss at step ", step_index, " (lr=", opt.current_lr(),
             ", batch=", batch.size(), ")");

    // average gradients over the batch
    if (batch.size() > 1) {
        const float inv = 1.0f / float(batch.size());
        for (auto* p : model.params())
            for (auto& g : p->g) g *= inv;
    }

    StepStats stats;
    stats.lr = opt.current_lr();
    stats.grad_norm = opt.step(model);
    stats.loss = loss;
    if (!std::isfinite(stats.grad_norm))
        fail("train_step: non-finite gradient norm at step ", step_index, " (loss=", loss,
             ", lr=", stats.lr, ")");
    return stats;
}

TrainResult train_loop(Model& model, const NeighborStore& store, const TrainConfig& cfg,
                       const std::string& out_dir, const std::string& init_from) {
    if (store.size() == 0) fail("train_loop: empty neighbor store");
    if (cfg.steps < 1) fail("train_loop: steps must be >= 1");
    std::filesystem::create_directories(out_dir);

    uint64_t start_step = 0;
    if (!init_from.empty()) {
        const CheckpointInfo info = read_checkpoint_info(init_from);
        if (info.config_hash == model.config().hash() && info.variant_on == model.has_cca()) {
            start_step = model.load_checkpoint(init_from, Model::LoadMode::Exact);
        } else if (cfg.freeze_policy == FreezePolicy::FreezeBackboneTrainCca) {
            // retrofit: load an off-model backbone underneath fresh CCA blocks
            model.load_checkpoint(init_from, Model::LoadMode::BackboneOnly);
        } else {
            fail("train_loop: checkpoint config hash mismatch: ", init_from);
        }
    }
    model.set_frozen_groups(frozen_groups_for(cfg.freeze_policy));

    Optimizer opt(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.warmup, cfg.clip_norm);
    Rng order_rng(derive_seed(cfg.seed, 0x44415441));

    const std::string trace_path = out_dir + "/loss_trace.csv";
    std::ofstream trace(trace_path);
    if (!trace) fail("train_loop: cannot open ", trace_path);
    trace << "step,loss,grad_norm,lr\n" << std::setprecision(17);

    TrainResult result;
    for (uint64_t step = 1; step <= cfg.steps; ++step) {
        std::vector<const NeighborStoreRecord*> batch;
        for (uint32_t b = 0; b < cfg.batch_size; ++b)
            batch.push_back(&store.record(order_rng.next_range(store.size())));
        const StepStats stats = train_step(model, batch, cfg, opt, start_step + step);
        trace << start_step + step << ',' << stats.loss << ',' << stats.grad_norm << ','
              << stats.lr << '\n';
        result.final_loss = stats.loss;
        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0)
            model.save_checkpoint(concat(out_dir, "/model_step", start_step + step, ".ckpt"),
                                  start_step + step);
    }
    trace.close();

    result.final_checkpoint = out_dir + "/model_final.ckpt";
    model.save_checkpoint(result.final_checkpoint, start_step + cfg.steps);
    result.trace_path = trace_path;
    result.steps = cfg.steps;
    return result;
}

// ---------------------------------------------------------------------
// Domain fine-tuning
// ---------------------------------------------------------------------

FinetuneReport finetune_domain(Model& model, const std::vector<TokenSequence>& domain_train_docs,
                               const TokenSequence& domain_val, uint32_t epochs,
                               const TrainConfig& cfg, const EmbedderSpec& embedder,
                               const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const uint32_t S = model.config().seq_len;

    // windows over the concatenated domain training stream
    TokenSequence stream;
    for (const auto& d : domain_train_docs)
        stream.tokens.insert(stream.tokens.end(), d.tokens.begin(), d.tokens.end());
    auto windows = make_samples(stream, S).samples;
    if (windows.size() < 2)
        fail("finetune_domain: domain corpus too small for the 15/85 split (",
             windows.size(), " windows)");

    // seeded 15% sample for updates, the rest becomes the retrieval database
    std::vector<size_t> order(windows.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(derive_seed(cfg.seed, 0x53504c54));
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[split_rng.next_range(i)]);
    const size_t n_inputs = std::max<size_t>(1, (windows.size() * 15 + 99) / 100);
    std::vector<size_t> input_idx(order.begin(), order.begin() + long(n_inputs));
    std::sort(input_idx.begin(), input_idx.end());

    FinetuneReport report;
    report.split_path = out_dir + "/finetune_split.txt";
    {
        std::ofstream split(report.split_path);
        split << "# fine-tuning input window indices (seed " << cfg.seed << ", " << n_inputs
              << " of " << windows.size() << ")\n";
        for (size_t i : input_idx) split << i << '\n';
    }

    // database documents: maximal contiguous runs of excluded windows
    std::vector<uint8_t> is_input(windows.size(), 0);
    for (size_t i : input_idx) is_input[i] = 1;
    std::vector<TokenSequence> db_docs;
    for (size_t i = 0; i < windows.size();) {
        if (is_input[i]) {
            ++i;
            continue;
        }
        TokenSequence doc;
        doc.doc_id = uint32_t(db_docs.size());
        while (i < windows.size() && !is_input[i]) {
            doc.tokens.insert(doc.tokens.end(), windows[i].src.tokens.begin(),
                              windows[i].src.tokens.end());
            ++i;
        }
        db_docs.push_back(std::move(doc));
    }
    if (db_docs.empty()) fail("finetune_domain: the 85% database side is empty");
    RetrievalDB ft_db = build_db(db_docs, model.config().chunk_len, embedder, cfg.seed);

    // neighbors for the fine-tuning inputs (inputs and database are already
    // mutually exclusive, so the continuation filter is left off)
    std::vector<SequenceSample> inputs;
    for (size_t i : input_idx) inputs.push_back(windows[i]);
    const std::string store_path = out_dir + "/finetune_neighbors.bin";
    precompute_neighbors(ft_db, inputs, model.config().k_neighbors, ft_db.default_nprobe, false,
                         store_path);
    NeighborStore store(store_path);

    // validation retrieval database from the full domain training tokens,
    // prepared the same way as the plug-and-play evaluation
    RetrievalDB val_db = build_db(domain_train_docs, model.config().chunk_len, embedder, cfg.seed);
    const EvalSetting setting = model.has_cca() ? EvalSetting::OnIdeal : EvalSetting::Off;
    NeighborsSource val_source =
        model.has_cca()
            ? db_neighbors_source(val_db, model.config().k_neighbors, val_db.default_nprobe, false)
            : NeighborsSource{};
    auto eval_val = [&] {
        return sliding_window_perplexity(model, domain_val, val_source, setting, 0.0, cfg.seed)
            .perplexity;
    };

    model.set_frozen_groups(frozen_groups_for(FreezePolicy::FinetuneFfwReadout));
    Optimizer opt(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.warmup, cfg.clip_norm);

    report.per_epoch_ppl.push_back(eval_val());  // epoch 0: before any update
    Rng order_rng(derive_seed(cfg.seed, 0x46545550));
    uint64_t step_index = 0;
    for (uint32_t epoch = 1; epoch <= epochs; ++epoch) {
        std::vector<size_t> epoch_order(store.size());
        for (size_t i = 0; i < epoch_order.size(); ++i) epoch_order[i] = i;
        for (size_t i = epoch_order.size(); i > 1; --i)
            std::swap(epoch_order[i - 1], epoch_order[order_rng.next_range(i)]);
        for (size_t b = 0; b < epoch_order.size(); b += cfg.batch_size) {
            std::vector<const NeighborStoreRecord*> batch;
            for (size_t j = b; j < std::min(b + cfg.batch_size, epoch_order.size()); ++j)
                batch.push_back(&store.record(epoch_order[j]));
            train_step(model, batch, cfg, opt, ++step_index);
        }
        report.per_epoch_ppl.push_back(eval_val());
    }

    report.best_epoch = 0;
    for (uint32_t e = 1; e < report.per_epoch_ppl.size(); ++e)
        if (report.per_epoch_ppl[e] < report.per_epoch_ppl[report.best_epoch])
            report.best_epoch = e;

    report.final_checkpoint = out_dir + "/finetuned.ckpt";
    model.save_checkpoint(report.final_checkpoint, step_index);

    // Table-style rendering: one row per (dataset, retrieval) pair with the
    // best epoch highlighted
    std::ofstream table(out_dir + "/finetune_report.txt");
    table << "epochs:";
    for (uint32_t e = 0; e < report.per_epoch_ppl.size(); ++e) table << ' ' << e;
    table << "\nval_ppl:";
    table << std::fixed << std::setprecision(4);
    for (double p : report.per_epoch_ppl) table << ' ' << p;
    table << "\nbest_epoch: " << report.best_epoch << '\n';
    return report;
}

}  // namespace retrolite
