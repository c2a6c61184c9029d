#include "retrolite/model.hpp"

namespace retrolite {

CheckpointInfo read_checkpoint_info(const std::string& path) {
    BinaryReader r(path);
    if (r.u32() != detail::kCkptMagic) fail("bad checkpoint magic: ", path);
    if (r.u32() != detail::kCkptVersion) fail("unsupported checkpoint version: ", path);
    CheckpointInfo info;
    info.variant_on = r.u8() != 0;
    info.config_text = r.str();
    info.config_hash = r.u64();
    info.backbone_hash = r.u64();
    info.step = r.u64();
    info.seed = r.u64();
    return info;
}

ModelConfig parse_model_config_text(const std::string& text) {
    ModelConfig cfg;
    cfg.cca_layers.clear();
    size_t pos = 0;
    while (pos < text.size()) {
        size_t semi = text.find(';', pos);
        if (semi == std::string::npos) semi = text.size();
        const std::string item = text.substr(pos, semi - pos);
        pos = semi + 1;
        const size_t eq = item.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        if (key == "n_layers") cfg.n_layers = uint32_t(std::stoul(val));
        else if (key == "d_model") cfg.d_model = uint32_t(std::stoul(val));
        else if (key == "n_heads") cfg.n_heads = uint32_t(std::stoul(val));
        else if (key == "d_ff") cfg.d_ff = uint32_t(std::stoul(val));
        else if (key == "vocab_size") cfg.vocab_size = uint32_t(std::stoul(val));
        else if (key == "seq_len") cfg.seq_len = uint32_t(std::stoul(val));
        else if (key == "chunk_len") cfg.chunk_len = uint32_t(std::stoul(val));
        else if (key == "k_neighbors") cfg.k_neighbors = uint32_t(std::stoul(val));
        else if (key == "d_emb") cfg.d_emb = uint32_t(std::stoul(val));
        else if (key == "neighbor_encoder_layers") cfg.neighbor_encoder_layers = uint32_t(std::stoul(val));
        else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "cca") {
            size_t p = 0;
            while (p < val.size()) {
                size_t comma = val.find(',', p);
                if (comma == std::string::npos) comma = val.size();
                if (comma > p) cfg.cca_layers.push_back(uint32_t(std::stoul(val.substr(p, comma - p))));
                p = comma + 1;
            }
        }
    }
    cfg.validate();
    return cfg;
}

Model load_model(const std::string& path, CheckpointInfo* info_out) {
    const CheckpointInfo info = read_checkpoint_info(path);
    const ModelConfig cfg = parse_model_config_text(info.config_text);
    Model model(cfg, info.variant_on ? ModelVariant::On : ModelVariant::Off);
    model.load_checkpoint(path, Model::LoadMode::Exact);
    if (info_out) *info_out = info;
    return model;
}

}  // namespace retrolite
