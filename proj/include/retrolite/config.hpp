#pragma once

// Flat key-value configuration: `key = value` lines, '#' comments. Flags
// override file values; unknown keys are rejected against a documented set.

#include <map>
#include <string>
#include <vector>

#include "retrolite/model.hpp"
#include "retrolite/noise.hpp"
#include "retrolite/train.hpp"

namespace retrolite {

class KvConfig {
public:
    KvConfig() = default;
    static KvConfig from_file(const std::string& path);
    static KvConfig from_text(const std::string& text);

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    uint64_t get_uint(const std::string& key, uint64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }
    std::string serialize() const;

private:
    std::map<std::string, std::string> kv_;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    double infer_lambda_i = 0.0;
    EmbedderSpec embedder;
    DocMode doc_mode = DocMode::FilePerDoc;
    DocSeparator doc_separator = DocSeparator::None;
    uint32_t nprobe = 0;  // 0 = database default
    bool filter_continuations = true;
};

// Reads the documented keys (model.*, train.*, reg.*, infer.*, corpus.*,
// embed.*, ivf.*); rejects anything it does not know.
RunConfig parse_run_config(const KvConfig& kv);

}  // namespace retrolite
