#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdial/model.hpp"

namespace pdial {

// Layout: 8-byte magic "PDIALCK\0", u32 format version, u64 header length,
// header JSON, then raw little-endian scalars. The header holds the format
// version, dtype, model config and a manifest of (name, shape, offset).

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointScope {
    full,
    lm_only,  // shared stack and token tables; no attribute tables, no predictor
};

struct ManifestEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;  // bytes from start of the data section
};

struct CheckpointInfo {
    std::uint32_t version = 0;
    std::string dtype;
    ModelConfig config;
    std::vector<ManifestEntry> manifest;
    nlohmann::json meta;
};

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path,
                     CheckpointScope scope = CheckpointScope::full, const nlohmann::json& meta = nlohmann::json::object());

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Copies every parameter present in the file into `model`. Parameters the file
/// lacks keep their current (seeded) values. Shape mismatches or names the model
/// does not know raise FormatError listing the offending names.
template <class T>
void load_parameters(Model<T>& model, const std::filesystem::path& path);

/// Builds a model from the stored config (seeded for any tables the file lacks)
/// and loads the stored parameters.
template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path, std::uint64_t seed = 0);

/// Short content hash used to identify a checkpoint.
std::string checkpoint_id(const std::filesystem::path& path);

}  // namespace pdial
