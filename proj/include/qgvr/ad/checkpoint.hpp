#pragma once

#include <filesystem>

#include <json.hpp>

#include "qgvr/ad/optim.hpp"
#include "qgvr/ad/parameters.hpp"

namespace qgvr::ad {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// JSON container: parameter name -> shape + row-major values, optional Adam
/// moments, and free-form metadata (model config, vocabulary).
void save_checkpoint(const std::filesystem::path& path, const ModelParameters& params, const AdamState* adam,
                     const nlohmann::json& metadata);

/// Reads only the metadata block, so callers can build a matching model first.
nlohmann::json read_checkpoint_metadata(const std::filesystem::path& path);

/// Loads values into an existing parameter set. Every parameter must be
/// present with an identical shape, and the file may not carry extras.
/// Optimizer moments are restored when `adam` is given and the file has them.
nlohmann::json load_checkpoint(const std::filesystem::path& path, ModelParameters& params, AdamState* adam);

}  // namespace qgvr::ad
