#include "retrolite/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace retrolite {

namespace {

ModelMode mode_for(EvalSetting s) {
    switch (s) {
        case EvalSetting::Off: return ModelMode::Off;
        case EvalSetting::OnNoNeighbors: return ModelMode::NoNeighbors;
        default: return ModelMode::On;
    }
}

struct WindowEval {
    double nll_sum = 0.0;
    uint64_t scored = 0;
};

WindowEval eval_window(const Model& model, const TokenSequence& tokens, size_t pos,
                       size_t scored_from, const NeighborsSource& neighbors, EvalSetting setting,
                       double lambda_i, uint64_t seed, uint64_t window_index) {
    const uint32_t S = model.config().seq_len;
    TokenSequence window;
    window.doc_id = tokens.doc_id;
    window.offset = tokens.offset + pos;
    window.tokens.assign(tokens.tokens.begin() + long(pos), tokens.tokens.begin() + long(pos + S));
    std::vector<TokenId> targets(tokens.tokens.begin() + long(pos + 1),
                                 tokens.tokens.begin() + long(pos + S + 1));
    std::vector<uint8_t> mask(S, 0);
    for (size_t i = scored_from; i < S; ++i) mask[i] = 1;

    NeighborSet nbrs;
    const NeighborSet* nbrs_ptr = nullptr;
    if (setting == EvalSetting::OnIdeal || setting == EvalSetting::OnNoisy) {
        if (!neighbors) fail("evaluation with retrieval needs a neighbors source");
        nbrs = neighbors(window);
        nbrs_ptr = &nbrs;
    }

    Rng noise_rng(derive_seed(seed, window_index));
    NoisePlan plan = NoisePlan::none();
    if (setting == EvalSetting::OnNoisy) plan = NoisePlan::inference(lambda_i, noise_rng);

    const double mean_nll =
        model.loss(window.tokens, nbrs_ptr, mode_for(setting), targets, mask, plan);
    WindowEval out;
    out.scored = S - scored_from;
    out.nll_sum = mean_nll * double(out.scored);
    return out;
}

}  // namespace

NeighborsSource db_neighbors_source(const RetrievalDB& db, uint32_t k, uint32_t nprobe,
                                    bool filter_continuations) {
    const RetrievalDB* dbp = &db;
    return [dbp, k, nprobe, filter_continuations](const TokenSequence& window) {
        return get_neighbors(*dbp, window, k, nprobe, filter_continuations);
    };
}

EvalSetting parse_eval_setting(const std::string& s) {
    if (s == "off") return EvalSetting::Off;
    if (s == "on-no-neighbors" || s == "no-neighbors") return EvalSetting::OnNoNeighbors;
    if (s == "on-ideal") return EvalSetting::OnIdeal;
    if (s == "on-noisy") return EvalSetting::OnNoisy;
    fail("unknown eval setting: ", s);
}

std::string to_string(EvalSetting s) {
    switch (s) {
        case EvalSetting::Off: return "off";
        case EvalSetting::OnNoNeighbors: return "on-no-neighbors";
        case EvalSetting::OnIdeal: return "on-ideal";
        case EvalSetting::OnNoisy: return "on-noisy";
    }
    return "?";
}

EvalReport sliding_window_perplexity(const Model& model, const TokenSequence& tokens,
                                     const NeighborsSource& neighbors, EvalSetting setting,
                                     double lambda_i, uint64_t seed) {
    const uint32_t S = model.config().seq_len;
    if (tokens.size() < size_t(S) + 1)
        fail("sliding_window_perplexity: need at least seq_len+1 tokens, have ", tokens.size());
    const size_t stride = std::max<size_t>(1, S / 4);  // >= 75% context for scored tokens

    double nll = 0.0;
    uint64_t scored = 0;
    uint64_t window_index = 0;
    for (size_t pos = 0; pos + S + 1 <= tokens.size(); pos += stride) {
        const size_t scored_from = window_index == 0 ? 0 : S - stride;
        WindowEval we = eval_window(model, tokens, pos, scored_from, neighbors, setting, lambda_i,
                                    seed, window_index);
        nll += we.nll_sum;
        scored += we.scored;
        ++window_index;
    }
    // every target from the stream start to the last window's end is scored
    // exactly once
    if (scored != S + (window_index - 1) * stride)
        fail("sliding_window_perplexity: scored-token accounting failed");

    EvalReport rep;
    rep.mode = to_string(setting);
    rep.lambda_i = setting == EvalSetting::OnNoisy ? lambda_i : 0.0;
    rep.tokens_scored = scored;
    rep.perplexity = std::exp(nll / double(scored));
    rep.seed = seed;
    return rep;
}

EvalReport full_perplexity(const Model& model, const TokenSequence& tokens,
                           const NeighborsSource& neighbors, EvalSetting setting, double lambda_i,
                           uint64_t seed) {
    const uint32_t S = model.config().seq_len;
    if (tokens.size() < size_t(S) + 1)
        fail("full_perplexity: need at least seq_len+1 tokens, have ", tokens.size());
    double nll = 0.0;
    uint64_t scored = 0;
    uint64_t window_index = 0;
    for (size_t pos = 0; pos + S + 1 <= tokens.size(); pos += S) {
        WindowEval we =
            eval_window(model, tokens, pos, 0, neighbors, setting, lambda_i, seed, window_index);
        nll += we.nll_sum;
        scored += we.scored;
        ++window_index;
    }
    EvalReport rep;
    rep.mode = to_string(setting);
    rep.lambda_i = setting == EvalSetting::OnNoisy ? lambda_i : 0.0;
    rep.tokens_scored = scored;
    rep.perplexity = std::exp(nll / double(scored));
    rep.seed = seed;
    return rep;
}

EvalReport plug_and_play_eval(const Model& model, const std::vector<TokenSequence>& domain_train,
                              const TokenSequence& domain_val, uint32_t k, double lambda_i,
                              EvalSetting setting, const EmbedderSpec& embedder, uint64_t seed,
                              RetrievalDB* db_out) {
    NeighborsSource source;
    RetrievalDB built;
    bool have_db = false;
    if (setting == EvalSetting::OnIdeal || setting == EvalSetting::OnNoisy) {
        if (domain_train.empty()) fail("plug_and_play_eval: empty domain corpus");
        built = build_db(domain_train, model.config().chunk_len, embedder, seed);
        have_db = true;
        // validation and database tokens are disjoint by construction, so
        // the continuation filter has nothing to do here
        source = db_neighbors_source(built, k, built.default_nprobe, false);
    }
    EvalReport rep = sliding_window_perplexity(model, domain_val, source, setting, lambda_i, seed);
    if (db_out && have_db) *db_out = std::move(built);
    return rep;
}

std::vector<SweepCell> noisy_retrieval_sweep(const Model& model, const RetrievalDB& db,
                                             const TokenSequence& val_tokens, uint32_t k,
                                             const std::vector<double>& lambdas,
                                             const std::vector<uint64_t>& seeds) {
    if (lambdas.empty()) fail("noisy_retrieval_sweep: empty lambda list");
    if (seeds.empty()) fail("noisy_retrieval_sweep: empty seed list");
    NeighborsSource source = db_neighbors_source(db, k, db.default_nprobe, false);
    std::vector<SweepCell> cells;
    for (double lambda : lambdas) {
        SweepCell cell;
        cell.lambda_i = lambda;
        cell.n_seeds = uint32_t(seeds.size());
        cell.single_seed = seeds.size() < 2;
        std::vector<double> ppl;
        for (uint64_t seed : seeds) {
            const EvalSetting setting = lambda == 0.0 ? EvalSetting::OnIdeal : EvalSetting::OnNoisy;
            ppl.push_back(
                sliding_window_perplexity(model, val_tokens, source, setting, lambda, seed)
                    .perplexity);
        }
        double mean = 0.0;
        for (double p : ppl) mean += p;
        mean /= double(ppl.size());
        double var = 0.0;
        for (double p : ppl) var += (p - mean) * (p - mean);
        cell.mean = mean;
        cell.std_dev = ppl.size() > 1 ? std::sqrt(var / double(ppl.size() - 1)) : 0.0;
        cells.push_back(cell);
    }
    return cells;
}

// ---------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------

DecodeSpec parse_decode_spec(const std::string& s, double p) {
    DecodeSpec spec;
    spec.p = p;
    if (s == "greedy") spec.kind = DecodeKind::Greedy;
    else if (s == "multinomial") spec.kind = DecodeKind::Multinomial;
    else if (s == "top-p" || s == "top_p") spec.kind = DecodeKind::TopP;
    else fail("unknown decode mode: ", s);
    return spec;
}

std::vector<size_t> top_p_support(const std::vector<double>& probs, double p) {
    if (p <= 0.0 || p > 1.0) fail("top-p: p must be in (0, 1]");
    std::vector<size_t> order(probs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return probs[a] != probs[b] ? probs[a] > probs[b] : a < b;
    });
    std::vector<size_t> support;
    double mass = 0.0;
    for (size_t idx : order) {
        support.push_back(idx);
        mass += probs[idx];
        if (mass >= p) break;  // the crossing token stays in
    }
    return support;
}

namespace {

size_t sample_index(const std::vector<double>& weights, Rng& rng) {
    double total = 0.0;
    for (double w : weights) total += w;
    double target = rng.uniform01() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (acc >= target) return i;
    }
    return weights.size() - 1;
}

}  // namespace

std::vector<TokenId> generate(const Model& model, const std::vector<TokenId>& context,
                              const DecodeSpec& decode, size_t n_tokens,
                              const NeighborsSource& neighbors, Rng& rng) {
    const ModelConfig& cfg = model.config();
    if (context.empty()) fail("generate: empty context");
    if (context.size() + n_tokens > cfg.seq_len)
        fail("generate: context ", context.size(), " + ", n_tokens, " tokens exceeds seq_len ",
             cfg.seq_len);
    if (decode.kind == DecodeKind::TopP && (decode.p <= 0.0 || decode.p > 1.0))
        fail("generate: p must be in (0, 1]");

    std::vector<TokenId> seq = context;
    const bool retrieval = model.has_cca() && neighbors;
    std::vector<double> probs(cfg.vocab_size);
    for (size_t step = 0; step < n_tokens; ++step) {
        NeighborSet nbrs;
        const NeighborSet* nbrs_ptr = nullptr;
        ModelMode mode = ModelMode::Off;
        if (model.has_cca()) {
            if (retrieval) {
                // retrieve for the complete chunks generated so far
                const size_t complete = (seq.size() / cfg.chunk_len) * cfg.chunk_len;
                if (complete >= cfg.chunk_len) {
                    TokenSequence prefix;
                    prefix.doc_id = UINT32_MAX;  // not a database document
                    prefix.tokens.assign(seq.begin(), seq.begin() + long(complete));
                    nbrs = neighbors(prefix);
                    nbrs_ptr = &nbrs;
                }
                mode = nbrs_ptr ? ModelMode::On : ModelMode::NoNeighbors;
            } else {
                mode = ModelMode::NoNeighbors;
            }
        }
        ForwardState<float> st;
        model.forward(seq, nbrs_ptr, mode, NoisePlan::none(), st);

        const float* logits = st.logits.data() + (seq.size() - 1) * cfg.vocab_size;
        double mx = logits[0];
        for (uint32_t v = 1; v < cfg.vocab_size; ++v) mx = std::max(mx, double(logits[v]));
        double denom = 0.0;
        for (uint32_t v = 0; v < cfg.vocab_size; ++v) {
            probs[v] = std::exp(double(logits[v]) - mx);
            denom += probs[v];
        }
        for (auto& pv : probs) pv /= denom;

        TokenId next = 0;
        switch (decode.kind) {
            case DecodeKind::Greedy: {
                size_t best = 0;
                for (size_t v = 1; v < probs.size(); ++v)
                    if (probs[v] > probs[best]) best = v;  // ties keep the lowest id
                next = TokenId(best);
                break;
            }
            case DecodeKind::Multinomial: {
                next = TokenId(sample_index(probs, rng));
                break;
            }
            case DecodeKind::TopP: {
                const auto support = top_p_support(probs, decode.p);
                std::vector<double> weights(support.size());
                for (size_t i = 0; i < support.size(); ++i) weights[i] = probs[support[i]];
                next = TokenId(support[sample_index(weights, rng)]);
                break;
            }
        }
        seq.push_back(next);
    }
    return std::vector<TokenId>(seq.begin() + long(context.size()), seq.end());
}

double semantic_similarity(const std::vector<TokenId>& a, const std::vector<TokenId>& b,
                           const EmbedderSpec& embedder) {
    if (a.empty() || b.empty()) fail("semantic_similarity: empty input");
    return dot(embed_tokens(a, embedder), embed_tokens(b, embedder));
}

// ---------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------

void append_eval_reports_csv(const std::string& path, const std::vector<EvalReport>& reports) {
    const bool fresh = !std::ifstream(path).good();
    std::ofstream os(path, std::ios::app);
    if (!os) fail("cannot open report file: ", path);
    os << std::setprecision(17);
    if (fresh) os << "dataset,mode,regularizer,lambda_i,perplexity,tokens_scored,seed\n";
    for (const auto& r : reports)
        os << r.dataset << ',' << r.mode << ',' << r.regularizer << ',' << r.lambda_i << ','
           << r.perplexity << ',' << r.tokens_scored << ',' << r.seed << '\n';
}

std::vector<EvalReport> load_eval_reports_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("cannot open report file: ", path);
    std::vector<EvalReport> out;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        EvalReport r;
        std::string field;
        std::getline(ss, r.dataset, ',');
        std::getline(ss, r.mode, ',');
        std::getline(ss, r.regularizer, ',');
        std::getline(ss, field, ',');
        r.lambda_i = std::stod(field);
        std::getline(ss, field, ',');
        r.perplexity = std::stod(field);
        std::getline(ss, field, ',');
        r.tokens_scored = std::stoull(field);
        std::getline(ss, field, ',');
        r.seed = std::stoull(field);
        out.push_back(std::move(r));
    }
    return out;
}

namespace {
int mode_rank(const std::string& mode) {
    if (mode == "off") return 0;
    if (mode == "on-no-neighbors") return 1;
    if (mode == "on-ideal") return 2;
    if (mode == "on-noisy") return 3;
    return 4;
}
}  // namespace

std::string render_report_table(std::vector<EvalReport> reports) {
    std::sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
        if (a.dataset != b.dataset) return a.dataset < b.dataset;
        const int ra = mode_rank(a.mode), rb = mode_rank(b.mode);
        if (ra != rb) return ra < rb;
        if (a.lambda_i != b.lambda_i) return a.lambda_i < b.lambda_i;
        return a.seed < b.seed;
    });
    std::ostringstream os;
    os << std::left << std::setw(16) << "dataset" << std::setw(18) << "mode" << std::setw(24)
       << "regularizer" << std::right << std::setw(10) << "lambda_i" << std::setw(14)
       << "perplexity" << std::setw(10) << "seed" << '\n';
    for (const auto& r : reports) {
        os << std::left << std::setw(16) << (r.dataset.empty() ? "-" : r.dataset) << std::setw(18)
           << r.mode << std::setw(24) << (r.regularizer.empty() ? "-" : r.regularizer);
        os << std::right << std::setw(10);
        if (r.mode == "on-noisy") {
            std::ostringstream lam;
            lam << std::fixed << std::setprecision(2) << r.lambda_i;
            os << lam.str();
        } else {
            os << "-";
        }
        std::ostringstream ppl;
        ppl << std::fixed << std::setprecision(4) << r.perplexity;
        os << std::setw(14) << ppl.str() << std::setw(10) << r.seed << '\n';
    }
    return os.str();
}

void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
    std::ofstream os(path);
    if (!os) fail("cannot open sweep file: ", path);
    os << std::setprecision(17);
    os << "lambda_i,mean_perplexity,std_perplexity,n_seeds,single_seed_flag\n";
    for (const auto& c : cells)
        os << c.lambda_i << ',' << c.mean << ',' << c.std_dev << ',' << c.n_seeds << ','
           << (c.single_seed ? 1 : 0) << '\n';
}

}  // namespace retrolite
