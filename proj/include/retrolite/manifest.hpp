#pragma once

// Run manifest: command, config hash, seed, input/output artifacts with
// checksums, wall-clock timings. Written next to the outputs of every CLI
// subcommand so a run can be reproduced and its outputs verified.

#include <cstdint>
#include <string>
#include <vector>

namespace retrolite {

struct ManifestArtifact {
    std::string path;
    uint32_t crc32 = 0;
    uint64_t bytes = 0;
};

struct RunManifest {
    std::string command;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    std::vector<ManifestArtifact> inputs;
    std::vector<ManifestArtifact> outputs;
    double wall_seconds = 0.0;

    void add_input(const std::string& path);
    void add_output(const std::string& path);
    void write(const std::string& path) const;
    static RunManifest read(const std::string& path);
};

// Exclusive lock on an output directory; throws if another run holds it.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string lock_path_;
};

}  // namespace retrolite
