// retrolite command-line entry point. Subcommands: build-db, precompute,
// train, finetune, eval, domain-shift, noise-sweep, generate, leakage,
// report. Each run locks its output directory, writes its artifacts there
// and finishes with a manifest (inputs/outputs with checksums, seed,
// timings).

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "retrolite/config.hpp"
#include "retrolite/eval.hpp"
#include "retrolite/manifest.hpp"
#include "retrolite/model.hpp"
#include "retrolite/retrodb.hpp"
#include "retrolite/train.hpp"

namespace fs = std::filesystem;
using namespace retrolite;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = "run";
    int64_t seed_flag = -1;  // -1: unset
};

uint64_t resolve_seed(const GlobalArgs& g, const RunConfig& rc) {
    if (g.seed_flag >= 0) return uint64_t(g.seed_flag);
    if (rc.train.seed != 0) return rc.train.seed;
    if (const char* env = std::getenv("RETROLITE_SEED")) return std::strtoull(env, nullptr, 10);
    return 0;
}

RunConfig load_run_config(const GlobalArgs& g) {
    KvConfig kv;
    if (!g.config_path.empty()) kv = KvConfig::from_file(g.config_path);
    return parse_run_config(kv);
}

Corpus load_corpus(const std::string& dir, const RunConfig& rc) {
    ByteTokenizer tok;
    return load_corpus_dir(dir, tok, rc.doc_mode);
}

// domain layout: DIR/train/*.txt and DIR/val/*.txt
struct DomainData {
    Corpus train;
    TokenSequence val_stream;
};

DomainData load_domain(const std::string& dir, const RunConfig& rc) {
    DomainData d;
    d.train = load_corpus(dir + "/train", rc);
    Corpus val = load_corpus(dir + "/val", rc);
    d.val_stream = val.concat_stream(rc.doc_separator);
    return d;
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

RunManifest start_manifest(const std::string& command, uint64_t config_hash, uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.config_hash = config_hash;
    m.seed = seed;
    return m;
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stod(item));
    return out;
}

void run_eval_row(const Model& model, const DomainData& domain, const RunConfig& rc,
                  const std::string& dataset, EvalSetting setting, double lambda_i, uint64_t seed,
                  const std::string& reg_label, const std::string& out_csv) {
    EvalReport rep = plug_and_play_eval(model, domain.train.documents, domain.val_stream,
                                        model.config().k_neighbors, lambda_i, setting,
                                        rc.embedder, seed);
    rep.dataset = dataset;
    rep.regularizer = reg_label;
    append_eval_reports_csv(out_csv, {rep});
    std::cout << rep.dataset << " " << rep.mode
              << (setting == EvalSetting::OnNoisy ? concat(" lambda_i=", lambda_i) : "")
              << " perplexity=" << rep.perplexity << " tokens=" << rep.tokens_scored << "\n";
}

// ------------------------------------------------------------------
// subcommands
// ------------------------------------------------------------------

int cmd_build_db(const GlobalArgs& g, const std::string& corpus_dir, int chunk_len) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    DirLock lock(g.out_dir);

    Corpus corpus = load_corpus(corpus_dir, rc);
    const uint32_t cl = chunk_len > 0 ? uint32_t(chunk_len) : rc.model.chunk_len;
    BuildReport brep;
    RetrievalDB db = build_db(corpus.documents, cl, rc.embedder, seed, &brep);
    save_db(db, g.out_dir);

    std::cout << "database: " << brep.entries << " entries from " << corpus.documents.size()
              << " documents (" << corpus.total_tokens() << " tokens, chunk_len " << cl << ", "
              << brep.skipped_docs << " short documents skipped)\n";
    std::cout << "index: " << db.index.ncentroids() << " centroids, default nprobe "
              << db.default_nprobe << "\n";

    // search-time profile over 16 concurrent chunk queries
    std::vector<EmbeddingVector> probe_queries;
    for (size_t i = 0; i < std::min<size_t>(db.entries.size(), 64); ++i)
        probe_queries.push_back(db.entries[i * db.entries.size() / std::min<size_t>(db.entries.size(), 64)]
                                    .key_embedding);
    const SearchTiming timing = profile_search(db.index, probe_queries, 10, db.default_nprobe, 16);
    std::cout << "search time over " << timing.n_queries << " queries [ms]: avg " << timing.avg_ms
              << ", max " << timing.max_ms << ", min " << timing.min_ms << "\n";

    RunManifest m = start_manifest("build-db", rc.model.hash(), seed);
    m.add_output(g.out_dir + "/db.bin");
    m.add_output(g.out_dir + "/index.bin");
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_precompute(const GlobalArgs& g, const std::string& db_dir, const std::string& corpus_dir,
                   int k_flag, int seq_len_flag, bool no_filter) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    DirLock lock(g.out_dir);

    RetrievalDB db = load_db(db_dir);
    Corpus corpus = load_corpus(corpus_dir, rc);
    TokenSequence stream = corpus.concat_stream(rc.doc_separator);
    stream.doc_id = UINT32_MAX;  // training stream is not a database document
    const uint32_t seq_len = seq_len_flag > 0 ? uint32_t(seq_len_flag) : rc.model.seq_len;
    const uint32_t k = k_flag > 0 ? uint32_t(k_flag) : rc.model.k_neighbors;
    SampleSet samples = make_samples(stream, seq_len);
    if (samples.stream_too_short)
        fail("corpus has only ", stream.size(), " tokens, need at least ", seq_len + 1);

    const uint32_t nprobe = rc.nprobe > 0 ? rc.nprobe : db.default_nprobe;
    const bool filter = !no_filter && rc.filter_continuations;
    const std::string out_path = g.out_dir + "/neighbors.bin";
    Timer search_timer;
    precompute_neighbors(db, samples.samples, k, nprobe, filter, out_path);
    std::cout << "precomputed " << samples.samples.size() << " records (k=" << k
              << ", nprobe=" << nprobe << ", filter=" << (filter ? "on" : "off") << ") in "
              << search_timer.seconds() << "s\n";

    RunManifest m = start_manifest("precompute", rc.model.hash(), seed);
    m.add_input(db_dir + "/db.bin");
    m.add_input(db_dir + "/index.bin");
    m.add_output(out_path);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_train(const GlobalArgs& g, const std::string& store_path, const std::string& init_from,
              const std::string& mode) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    rc.train.seed = resolve_seed(g, rc);
    rc.model.seed = rc.train.seed;
    DirLock lock(g.out_dir);

    NeighborStore store(store_path);
    if (store.header().seq_len != rc.model.seq_len ||
        store.header().chunk_len != rc.model.chunk_len)
        fail("store shape (seq_len ", store.header().seq_len, ", chunk_len ",
             store.header().chunk_len, ") does not match the model config");
    if (mode == "on" && store.header().k != rc.model.k_neighbors)
        fail("store k=", store.header().k, " does not match model k_neighbors=",
             rc.model.k_neighbors);

    Model model(rc.model, mode == "on" ? ModelVariant::On : ModelVariant::Off);
    TrainResult result = train_loop(model, store, rc.train, g.out_dir, init_from);
    std::cout << "trained " << result.steps << " steps, final loss " << result.final_loss
              << ", checkpoint " << result.final_checkpoint << "\n";

    RunManifest m = start_manifest("train", rc.model.hash(), rc.train.seed);
    m.add_input(store_path);
    if (!init_from.empty()) m.add_input(init_from);
    m.add_output(result.final_checkpoint);
    m.add_output(result.trace_path);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_finetune(const GlobalArgs& g, const std::string& ckpt, const std::string& domain_dir,
                 int epochs) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    rc.train.seed = seed;
    DirLock lock(g.out_dir);

    Model model = load_model(ckpt);
    DomainData domain = load_domain(domain_dir, rc);
    FinetuneReport rep = finetune_domain(model, domain.train.documents, domain.val_stream,
                                         uint32_t(epochs), rc.train, rc.embedder, g.out_dir);
    std::cout << "fine-tuning validation perplexity per epoch:";
    for (size_t e = 0; e < rep.per_epoch_ppl.size(); ++e)
        std::cout << " " << e << ":" << rep.per_epoch_ppl[e];
    std::cout << "\nbest epoch: " << rep.best_epoch << "\n";

    RunManifest m = start_manifest("finetune", model.config().hash(), seed);
    m.add_input(ckpt);
    m.add_output(rep.final_checkpoint);
    m.add_output(rep.split_path);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_eval(const GlobalArgs& g, const std::string& ckpt, const std::string& domain_dir,
             const std::string& setting_str, double lambda_i, const std::string& dataset) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    DirLock lock(g.out_dir);

    Model model = load_model(ckpt);
    DomainData domain = load_domain(domain_dir, rc);
    const EvalSetting setting = parse_eval_setting(setting_str);
    const std::string csv = g.out_dir + "/eval_reports.csv";
    run_eval_row(model, domain, rc, dataset, setting, lambda_i, seed,
                 regularizer_label(rc.train.regularizer), csv);

    RunManifest m = start_manifest("eval", model.config().hash(), seed);
    m.add_input(ckpt);
    m.add_output(csv);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_domain_shift(const GlobalArgs& g, const std::string& on_ckpt, const std::string& off_ckpt,
                     const std::string& domain_dir, const std::string& lambda_list,
                     const std::string& dataset) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    DirLock lock(g.out_dir);

    DomainData domain = load_domain(domain_dir, rc);
    const std::string csv = g.out_dir + "/eval_reports.csv";
    const std::string reg = regularizer_label(rc.train.regularizer);

    uint64_t hash = 0;
    if (!off_ckpt.empty()) {
        Model off = load_model(off_ckpt);
        hash = off.config().hash();
        run_eval_row(off, domain, rc, dataset, EvalSetting::Off, 0.0, seed, reg, csv);
    }
    Model on = load_model(on_ckpt);
    hash = on.config().hash();
    run_eval_row(on, domain, rc, dataset, EvalSetting::OnNoNeighbors, 0.0, seed, reg, csv);
    run_eval_row(on, domain, rc, dataset, EvalSetting::OnIdeal, 0.0, seed, reg, csv);
    for (double lambda : parse_double_list(lambda_list))
        run_eval_row(on, domain, rc, dataset, EvalSetting::OnNoisy, lambda, seed, reg, csv);

    RunManifest m = start_manifest("domain-shift", hash, seed);
    m.add_input(on_ckpt);
    if (!off_ckpt.empty()) m.add_input(off_ckpt);
    m.add_output(csv);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_noise_sweep(const GlobalArgs& g, const std::string& ckpt, const std::string& domain_dir,
                    const std::string& lambda_list, int n_seeds) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    DirLock lock(g.out_dir);

    Model model = load_model(ckpt);
    DomainData domain = load_domain(domain_dir, rc);
    RetrievalDB db = build_db(domain.train.documents, model.config().chunk_len, rc.embedder, seed);

    std::vector<double> lambdas = parse_double_list(lambda_list);
    std::vector<uint64_t> seeds;
    for (int s = 0; s < std::max(1, n_seeds); ++s) seeds.push_back(derive_seed(seed, s));
    auto cells = noisy_retrieval_sweep(model, db, domain.val_stream, model.config().k_neighbors,
                                       lambdas, seeds);
    const std::string csv = g.out_dir + "/noise_sweep.csv";
    write_sweep_csv(csv, cells);
    for (const auto& c : cells)
        std::cout << "lambda_i=" << c.lambda_i << " perplexity " << c.mean << " +- " << c.std_dev
                  << (c.single_seed ? " (single seed)" : "") << "\n";

    RunManifest m = start_manifest("noise-sweep", model.config().hash(), seed);
    m.add_input(ckpt);
    m.add_output(csv);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_generate(const GlobalArgs& g, const std::string& ckpt, const std::string& db_dir,
                 const std::string& context_file, const std::string& reference_file,
                 const std::string& mode, double p, int n_tokens) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    DirLock lock(g.out_dir);

    Model model = load_model(ckpt);
    ByteTokenizer tok;
    std::ifstream ctx_is(context_file, std::ios::binary);
    if (!ctx_is) fail("cannot read context file: ", context_file);
    std::string context_text((std::istreambuf_iterator<char>(ctx_is)),
                             std::istreambuf_iterator<char>());
    std::vector<TokenId> context = tok.encode(normalize_text(context_text));
    // paper protocol: feed 75% of the window, generate the rest
    const size_t ctx_budget = model.config().seq_len * 3 / 4;
    if (context.size() > ctx_budget)
        context.erase(context.begin(), context.end() - long(ctx_budget));
    const size_t gen_tokens =
        n_tokens > 0 ? size_t(n_tokens)
                     : std::min<size_t>(model.config().chunk_len,
                                        model.config().seq_len - context.size());

    RetrievalDB db;
    NeighborsSource source;
    if (!db_dir.empty() && model.has_cca()) {
        db = load_db(db_dir);
        const uint32_t nprobe = rc.nprobe > 0 ? rc.nprobe : db.default_nprobe;
        source = db_neighbors_source(db, model.config().k_neighbors, nprobe, false);
    }

    Rng rng(derive_seed(seed, 0x47454e));
    DecodeSpec decode = parse_decode_spec(mode, p);
    std::vector<TokenId> generated = generate(model, context, decode, gen_tokens, source, rng);
    const std::string text = tok.decode(generated);

    const std::string out_path = g.out_dir + "/generated.txt";
    std::ofstream os(out_path, std::ios::binary);
    os << text;
    os.close();
    std::cout << "generated " << generated.size() << " tokens (" << mode << "):\n" << text << "\n";

    if (!reference_file.empty()) {
        std::ifstream ref_is(reference_file, std::ios::binary);
        if (!ref_is) fail("cannot read reference file: ", reference_file);
        std::string ref_text((std::istreambuf_iterator<char>(ref_is)),
                             std::istreambuf_iterator<char>());
        std::vector<TokenId> reference = tok.encode(normalize_text(ref_text));
        std::cout << "similarity to reference [" << semantic_similarity(generated, reference, rc.embedder)
                  << "], reference to itself [" << semantic_similarity(reference, reference, rc.embedder)
                  << "]\n";
    }

    RunManifest m = start_manifest("generate", model.config().hash(), seed);
    m.add_input(ckpt);
    m.add_output(out_path);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_leakage(const GlobalArgs& g, const std::string& store_path, int t) {
    Timer timer;
    RunConfig rc = load_run_config(g);
    const uint64_t seed = resolve_seed(g, rc);
    DirLock lock(g.out_dir);

    NeighborStore store(store_path);
    std::vector<NeighborStoreRecord> records;
    records.reserve(store.size());
    for (size_t i = 0; i < store.size(); ++i) records.push_back(store.record(i));
    LeakageReport rep = leakage_report(records, size_t(t));

    const std::string out_path = g.out_dir + "/leakage.txt";
    std::ofstream os(out_path);
    os << "neighbors checked: " << rep.neighbors_checked << "\n";
    os << "neighbors with >= " << t << " contiguous shared tokens: " << rep.neighbors_with_overlap
       << " (" << rep.overlap_fraction * 100.0 << "%)\n";
    os << "jaccard histogram (bin width 0.05):\n";
    for (size_t b = 0; b < rep.jaccard_histogram.size(); ++b)
        os << "  [" << b * 0.05 << "," << (b + 1) * 0.05 << (b == 19 ? "]" : ")") << " "
           << rep.jaccard_histogram[b] << "\n";
    os << "worst offenders (sample, chunk, rank, jaccard, overlap):\n";
    for (const auto& o : rep.worst)
        os << "  " << o.sample << " " << o.chunk << " " << o.rank << " " << o.jaccard << " "
           << (o.has_overlap ? "yes" : "no") << "\n";
    os.close();
    std::cout << "overlap fraction: " << rep.overlap_fraction << " over " << rep.neighbors_checked
              << " neighbors; report at " << out_path << "\n";

    RunManifest m = start_manifest("leakage", 0, seed);
    m.add_input(store_path);
    m.add_output(out_path);
    m.wall_seconds = timer.seconds();
    m.write(g.out_dir + "/manifest.json");
    return 0;
}

int cmd_report(const std::string& run_dir) {
    std::vector<EvalReport> all;
    for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
        if (!entry.is_regular_file() || entry.path().filename() != "eval_reports.csv") continue;
        auto reports = load_eval_reports_csv(entry.path().string());
        all.insert(all.end(), reports.begin(), reports.end());
    }
    if (all.empty()) fail("no eval_reports.csv found under ", run_dir);
    const std::string table = render_report_table(all);
    std::cout << table;
    std::ofstream os(run_dir + "/report.txt");
    os << table;

    // plot data: perplexity vs lambda_i per regularizer (noisy + ideal rows)
    std::ofstream plot(run_dir + "/ppl_vs_lambda.csv");
    plot << "regularizer,lambda_i,perplexity\n" << std::setprecision(17);
    std::sort(all.begin(), all.end(), [](const EvalReport& a, const EvalReport& b) {
        if (a.regularizer != b.regularizer) return a.regularizer < b.regularizer;
        return a.lambda_i < b.lambda_i;
    });
    for (const auto& r : all)
        if (r.mode == "on-ideal" || r.mode == "on-noisy")
            plot << r.regularizer << ',' << r.lambda_i << ',' << r.perplexity << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"small-scale retrieval-augmented language modeling toolkit"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "key=value config file")->envname("RETROLITE_CONFIG");
    app.add_option("--out", g.out_dir, "output directory");
    app.add_option("--seed", g.seed_flag, "global seed (overrides config and RETROLITE_SEED)");

    std::string corpus_dir, db_dir, store_path, ckpt, off_ckpt, domain_dir, context_file,
        reference_file, dataset = "corpus";
    std::string setting = "on-ideal", decode_mode = "greedy", run_dir = "run";
    std::string lambda_list = "0.2,0.4,1.0", sweep_lambdas = "0,0.2,0.4,1.0";
    std::string train_mode = "on", init_from;
    int chunk_len = 0, k_flag = 0, seq_len_flag = 0, epochs = 7, n_tokens = 0, n_seeds = 3, t = 8;
    double lambda_i = 0.0, top_p = 0.9;
    bool no_filter = false;

    auto* build = app.add_subcommand("build-db", "build the retrieval database and IVF index");
    build->add_option("--corpus", corpus_dir, "corpus directory")->required();
    build->add_option("--chunk-len", chunk_len, "chunk length in tokens");

    auto* pre = app.add_subcommand("precompute", "retrieve neighbors for training windows");
    pre->add_option("--db", db_dir, "database directory")->required();
    pre->add_option("--corpus", corpus_dir, "training corpus directory")->required();
    pre->add_option("--k", k_flag, "neighbors per chunk");
    pre->add_option("--seq-len", seq_len_flag, "window length");
    pre->add_flag("--no-filter", no_filter, "disable the continuation filter");

    auto* train = app.add_subcommand("train", "train a model on a neighbor store");
    train->add_option("--store", store_path, "neighbor store path")->required();
    train->add_option("--mode", train_mode, "on (with CCA) or off")
        ->check(CLI::IsMember({"on", "off"}));
    train->add_option("--init-from", init_from, "starting checkpoint");

    auto* ft = app.add_subcommand("finetune", "fine-tune feed-forward and readout on a domain");
    ft->add_option("--ckpt", ckpt, "checkpoint")->required();
    ft->add_option("--domain", domain_dir, "domain directory with train/ and val/")->required();
    ft->add_option("--epochs", epochs, "fine-tuning epochs");

    auto* ev = app.add_subcommand("eval", "plug-and-play perplexity on a domain");
    ev->add_option("--ckpt", ckpt, "checkpoint")->required();
    ev->add_option("--domain", domain_dir, "domain directory with train/ and val/")->required();
    ev->add_option("--setting", setting, "off | on-no-neighbors | on-ideal | on-noisy");
    ev->add_option("--lambda-i", lambda_i, "inference noise for on-noisy");
    ev->add_option("--dataset", dataset, "dataset label for the report");

    auto* ds = app.add_subcommand("domain-shift", "full setting grid on one domain");
    ds->add_option("--ckpt", ckpt, "retrieval-on checkpoint")->required();
    ds->add_option("--off-ckpt", off_ckpt, "retrieval-off checkpoint (optional)");
    ds->add_option("--domain", domain_dir, "domain directory with train/ and val/")->required();
    ds->add_option("--lambdas", lambda_list, "noisy-retrieval lambda list");
    ds->add_option("--dataset", dataset, "dataset label for the report");

    auto* sweep = app.add_subcommand("noise-sweep", "perplexity vs inference noise");
    sweep->add_option("--ckpt", ckpt, "checkpoint")->required();
    sweep->add_option("--domain", domain_dir, "domain directory with train/ and val/")->required();
    sweep->add_option("--lambdas", sweep_lambdas, "lambda_i list");
    sweep->add_option("--seeds", n_seeds, "number of noise seeds per cell");

    auto* gen = app.add_subcommand("generate", "autoregressive generation from a context file");
    gen->add_option("--ckpt", ckpt, "checkpoint")->required();
    gen->add_option("--db", db_dir, "retrieval database directory (optional)");
    gen->add_option("--context-file", context_file, "UTF-8 context text")->required();
    gen->add_option("--reference-file", reference_file, "reference continuation for similarity");
    gen->add_option("--mode", decode_mode, "greedy | multinomial | top-p");
    gen->add_option("--p", top_p, "nucleus mass for top-p");
    gen->add_option("--n-tokens", n_tokens, "tokens to generate (default one chunk)");

    auto* leak = app.add_subcommand("leakage", "overlap analysis of a neighbor store");
    leak->add_option("--store", store_path, "neighbor store path")->required();
    leak->add_option("--t", t, "contiguous-token threshold");

    auto* rep = app.add_subcommand("report", "summarize eval reports under a run directory");
    rep->add_option("--run-dir", run_dir, "directory to scan")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (build->parsed()) return cmd_build_db(g, corpus_dir, chunk_len);
        if (pre->parsed()) return cmd_precompute(g, db_dir, corpus_dir, k_flag, seq_len_flag, no_filter);
        if (train->parsed()) return cmd_train(g, store_path, init_from, train_mode);
        if (ft->parsed()) return cmd_finetune(g, ckpt, domain_dir, epochs);
        if (ev->parsed()) return cmd_eval(g, ckpt, domain_dir, setting, lambda_i, dataset);
        if (ds->parsed())
            return cmd_domain_shift(g, ckpt, off_ckpt, domain_dir, lambda_list, dataset);
        if (sweep->parsed()) return cmd_noise_sweep(g, ckpt, domain_dir, sweep_lambdas, n_seeds);
        if (gen->parsed())
            return cmd_generate(g, ckpt, db_dir, context_file, reference_file, decode_mode, top_p,
                                n_tokens);
        if (leak->parsed()) return cmd_leakage(g, store_path, t);
        if (rep->parsed()) return cmd_report(run_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
