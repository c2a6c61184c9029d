#pragma once

// Evaluation: sliding-window and full perplexity, plug-and-play domain
// shift, noisy-retrieval sweeps, generation, and embedding-dot similarity
// scoring of generated text.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "retrolite/model.hpp"
#include "retrolite/retrodb.hpp"

namespace retrolite {

struct EvalReport {
    std::string dataset;
    std::string mode;         // off | on-no-neighbors | on-ideal | on-noisy
    std::string regularizer;  // train-time regularizer label
    double lambda_i = 0.0;
    double perplexity = 0.0;
    uint64_t tokens_scored = 0;
    uint64_t seed = 0;
};

// Produces the neighbor set for one evaluation window.
using NeighborsSource = std::function<NeighborSet(const TokenSequence& window)>;

NeighborsSource db_neighbors_source(const RetrievalDB& db, uint32_t k, uint32_t nprobe,
                                    bool filter_continuations);

enum class EvalSetting { Off, OnNoNeighbors, OnIdeal, OnNoisy };
EvalSetting parse_eval_setting(const std::string& s);
std::string to_string(EvalSetting s);

// Windows of seq_len with stride seq_len/4: the first window scores every
// position, later windows score only their final stride positions, so each
// scored token sees at least 75% of a full context.
EvalReport sliding_window_perplexity(const Model& model, const TokenSequence& tokens,
                                     const NeighborsSource& neighbors, EvalSetting setting,
                                     double lambda_i, uint64_t seed);

// exp(mean NLL) over consecutive non-overlapping windows, every position
// scored once regardless of context length
EvalReport full_perplexity(const Model& model, const TokenSequence& tokens,
                           const NeighborsSource& neighbors, EvalSetting setting, double lambda_i,
                           uint64_t seed);

// Builds a retrieval database from the domain training documents, retrieves
// neighbors for the validation windows and evaluates sliding-window
// perplexity. No parameter updates.
EvalReport plug_and_play_eval(const Model& model, const std::vector<TokenSequence>& domain_train,
                              const TokenSequence& domain_val, uint32_t k, double lambda_i,
                              EvalSetting setting, const EmbedderSpec& embedder, uint64_t seed,
                              RetrievalDB* db_out = nullptr);

struct SweepCell {
    double lambda_i = 0.0;
    double mean = 0.0;
    double std_dev = 0.0;
    uint32_t n_seeds = 0;
    bool single_seed = false;
};

std::vector<SweepCell> noisy_retrieval_sweep(const Model& model, const RetrievalDB& db,
                                             const TokenSequence& val_tokens, uint32_t k,
                                             const std::vector<double>& lambdas,
                                             const std::vector<uint64_t>& seeds);

// ---------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------

enum class DecodeKind { Greedy, Multinomial, TopP };

struct DecodeSpec {
    DecodeKind kind = DecodeKind::Greedy;
    double p = 0.9;  // nucleus mass for TopP
};

DecodeSpec parse_decode_spec(const std::string& s, double p);

// Autoregressive decoding; greedy breaks ties toward the lowest token id;
// top-p keeps the smallest descending-probability prefix reaching mass p
// (the crossing token included) and renormalizes.
std::vector<TokenId> generate(const Model& model, const std::vector<TokenId>& context,
                              const DecodeSpec& decode, size_t n_tokens,
                              const NeighborsSource& neighbors, Rng& rng);

// nucleus support for one distribution; exposed for the contract tests
std::vector<size_t> top_p_support(const std::vector<double>& probs, double p);

// dot product of the two builtin embeddings; 1.0 for identical inputs
double semantic_similarity(const std::vector<TokenId>& a, const std::vector<TokenId>& b,
                           const EmbedderSpec& embedder);

// ---------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------

void append_eval_reports_csv(const std::string& path, const std::vector<EvalReport>& reports);
std::vector<EvalReport> load_eval_reports_csv(const std::string& path);
// deterministic text table sorted by (dataset, mode order, lambda_i)
std::string render_report_table(std::vector<EvalReport> reports);
void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells);

}  // namespace retrolite
