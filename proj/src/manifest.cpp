#include "retrolite/manifest.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "retrolite/common.hpp"

namespace retrolite {

using nlohmann::json;

namespace {

ManifestArtifact artifact_of(const std::string& path) {
    ManifestArtifact a;
    a.path = path;
    const auto bytes = read_file_bytes(path);
    a.bytes = bytes.size();
    a.crc32 = crc32(bytes.data(), bytes.size());
    return a;
}

json to_json(const ManifestArtifact& a) {
    return json{{"path", a.path}, {"crc32", a.crc32}, {"bytes", a.bytes}};
}

ManifestArtifact from_json(const json& j) {
    ManifestArtifact a;
    a.path = j.at("path").get<std::string>();
    a.crc32 = j.at("crc32").get<uint32_t>();
    a.bytes = j.at("bytes").get<uint64_t>();
    return a;
}

}  // namespace

void RunManifest::add_input(const std::string& path) { inputs.push_back(artifact_of(path)); }
void RunManifest::add_output(const std::string& path) { outputs.push_back(artifact_of(path)); }

void RunManifest::write(const std::string& path) const {
    json j;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["wall_seconds"] = wall_seconds;
    j["inputs"] = json::array();
    for (const auto& a : inputs) j["inputs"].push_back(to_json(a));
    j["outputs"] = json::array();
    for (const auto& a : outputs) j["outputs"].push_back(to_json(a));
    std::ofstream os(path);
    if (!os) fail("cannot write manifest: ", path);
    os << j.dump(2) << '\n';
}

RunManifest RunManifest::read(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("cannot read manifest: ", path);
    json j = json::parse(is);
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_hash = j.at("config_hash").get<uint64_t>();
    m.seed = j.at("seed").get<uint64_t>();
    m.wall_seconds = j.at("wall_seconds").get<double>();
    for (const auto& a : j.at("inputs")) m.inputs.push_back(from_json(a));
    for (const auto& a : j.at("outputs")) m.outputs.push_back(from_json(a));
    return m;
}

DirLock::DirLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    lock_path_ = dir + "/.lock";
    const int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        fail("output directory is locked by another run (remove ", lock_path_,
             " if that run is gone)");
    const std::string pid = concat(::getpid(), "\n");
    (void)!::write(fd, pid.data(), pid.size());
    ::close(fd);
}

DirLock::~DirLock() { ::unlink(lock_path_.c_str()); }

}  // namespace retrolite
