#include "retrolite/config.hpp"

#include <fstream>
#include <sstream>

namespace retrolite {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("cannot open config file: ", path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str());
}

KvConfig KvConfig::from_text(const std::string& text) {
    KvConfig cfg;
    std::stringstream ss(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) fail("config line ", lineno, " has no '=': ", line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail("config line ", lineno, " has an empty key");
        cfg.kv_[key] = value;
    }
    return cfg;
}

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : std::stoll(it->second);
}

uint64_t KvConfig::get_uint(const std::string& key, uint64_t fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : std::stoull(it->second);
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : std::stod(it->second);
}

std::string KvConfig::serialize() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
    return out;
}

RunConfig parse_run_config(const KvConfig& kv) {
    static const std::set<std::string> known = {
        "model.n_layers", "model.d_model", "model.n_heads", "model.d_ff", "model.vocab_size",
        "model.seq_len", "model.chunk_len", "model.k_neighbors", "model.cca_layers",
        "model.d_emb", "model.neighbor_encoder_layers", "model.seed",
        "train.steps", "train.batch_size", "train.lr", "train.optimizer", "train.warmup",
        "train.seed", "train.freeze_policy", "train.weight_decay", "train.clip_norm",
        "train.ckpt_every",
        "reg.kind", "reg.lambda_t", "reg.alpha", "reg.placement",
        "infer.lambda_i",
        "embed.d_emb", "embed.seed",
        "corpus.doc_mode", "corpus.doc_separator",
        "ivf.nprobe", "retrieval.filter_continuations",
    };
    for (const auto& [k, v] : kv.entries())
        if (!known.count(k)) fail("unknown config key: ", k);

    RunConfig rc;
    rc.model.n_layers = uint32_t(kv.get_uint("model.n_layers", 4));
    rc.model.d_model = uint32_t(kv.get_uint("model.d_model", 64));
    rc.model.n_heads = uint32_t(kv.get_uint("model.n_heads", 4));
    rc.model.d_ff = uint32_t(kv.get_uint("model.d_ff", 256));
    rc.model.vocab_size = uint32_t(kv.get_uint("model.vocab_size", 256));
    rc.model.seq_len = uint32_t(kv.get_uint("model.seq_len", 128));
    rc.model.chunk_len = uint32_t(kv.get_uint("model.chunk_len", 8));
    rc.model.k_neighbors = uint32_t(kv.get_uint("model.k_neighbors", 3));
    rc.model.d_emb = uint32_t(kv.get_uint("model.d_emb", 64));
    rc.model.neighbor_encoder_layers = uint32_t(kv.get_uint("model.neighbor_encoder_layers", 2));
    rc.model.seed = kv.get_uint("model.seed", 0);
    const std::string cca = kv.get_str("model.cca_layers", "auto");
    if (cca != "auto") {
        rc.model.cca_layers.clear();
        std::stringstream ss(cca);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) rc.model.cca_layers.push_back(uint32_t(std::stoul(item)));
    }

    rc.train.steps = kv.get_uint("train.steps", 1000);
    rc.train.batch_size = uint32_t(kv.get_uint("train.batch_size", 2));
    rc.train.lr = kv.get_double("train.lr", 1e-3);
    rc.train.optimizer = parse_optimizer(kv.get_str("train.optimizer", "radam"));
    rc.train.warmup = kv.get_uint("train.warmup", 100);
    rc.train.seed = kv.get_uint("train.seed", 0);
    rc.train.freeze_policy = parse_freeze_policy(kv.get_str("train.freeze_policy", "train_all"));
    rc.train.weight_decay = kv.get_double("train.weight_decay", 0.0);
    rc.train.clip_norm = kv.get_double("train.clip_norm", 1.0);
    rc.train.ckpt_every = kv.get_uint("train.ckpt_every", 0);

    rc.train.regularizer.kind = parse_noise_kind(kv.get_str("reg.kind", "none"));
    rc.train.regularizer.lambda_t = kv.get_double("reg.lambda_t", 0.0);
    rc.train.regularizer.alpha = kv.get_double("reg.alpha", 0.0);
    rc.train.regularizer.placement =
        parse_noise_placement(kv.get_str("reg.placement", "neighbors"));
    if (rc.train.regularizer.lambda_t < 0.0 || rc.train.regularizer.alpha < 0.0)
        fail("config: regularizer magnitudes must be >= 0");

    rc.infer_lambda_i = kv.get_double("infer.lambda_i", 0.0);
    if (rc.infer_lambda_i < 0.0) fail("config: infer.lambda_i must be >= 0");

    rc.embedder.kind = EmbedderKind::BuiltinHash;
    rc.embedder.d_emb = uint32_t(kv.get_uint("embed.d_emb", rc.model.d_emb));
    rc.embedder.seed = kv.get_uint("embed.seed", 0);

    const std::string mode = kv.get_str("corpus.doc_mode", "file");
    if (mode == "file") rc.doc_mode = DocMode::FilePerDoc;
    else if (mode == "line") rc.doc_mode = DocMode::LinePerDoc;
    else fail("config: corpus.doc_mode must be file or line");
    const std::string sep = kv.get_str("corpus.doc_separator", "none");
    if (sep == "none") rc.doc_separator = DocSeparator::None;
    else if (sep == "newline") rc.doc_separator = DocSeparator::Newline;
    else fail("config: corpus.doc_separator must be none or newline");

    rc.nprobe = uint32_t(kv.get_uint("ivf.nprobe", 0));
    rc.filter_continuations = kv.get_uint("retrieval.filter_continuations", 1) != 0;
    rc.model.validate();
    return rc;
}

}  // namespace retrolite
