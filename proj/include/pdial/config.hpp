#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "pdial/decoding.hpp"
#include "pdial/training.hpp"

namespace pdial {

struct CorpusSettings {
    CorpusConfig corpus;
    SplitSizes splits;
    std::size_t pretrain_bytes = 1'100'000;
    std::size_t vocab_max = 512;
};

struct PathSettings {
    std::filesystem::path data_dir = "data";
    std::filesystem::path out_dir = "runs";
};

struct ServeSettings {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string cors_origin = "*";
    double session_ttl_s = 3600.0;
    std::size_t threads = 8;
};

/// Everything a CLI run needs. The top-level seed drives every random stream.
struct RunConfig {
    std::uint64_t seed = 7;
    std::string model_preset = "desk";
    ModelConfig model = ModelConfig::desk();
    TrainConfig train = TrainConfig::desk();
    CorpusSettings corpus;
    DecodeConfig decode;
    PathSettings paths;
    ServeSettings serve;

    /// Pushes the run seed into the corpus, training and decoding sections.
    void apply_seed(std::uint64_t s);
    void validate() const;
};

/// Sections: seed, model (optional "preset": desk|paper), train, corpus,
/// decode, paths, serve. Unknown keys anywhere are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

/// Stable per-purpose seed derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

}  // namespace pdial
