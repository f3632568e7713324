#pragma once

#include <string>
#include <vector>

#include "pmlab/matrix.hpp"
#include "pmlab/model.hpp"

#include "json.hpp"

namespace pmlab {

// Container file layout: 8-byte magic "PMLAB\0\0\x01", a u64 little-endian
// manifest length, the UTF-8 JSON manifest, then all tensors as a contiguous
// little-endian float64 blob. The manifest lists (name, shape, byte offset)
// for every tensor plus config and metadata.
struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;  // [rows, cols] for matrices, [n] for vectors
  Vector data;
};

struct CheckpointData {
  int format_version = 1;
  std::string kind;  // "model" or "adapter"
  nlohmann::ordered_json config;
  nlohmann::ordered_json metadata;
  std::vector<NamedTensor> tensors;
};

void write_checkpoint_file(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint_file(const std::string& path);

// Model (de)serialization on top of the container. Round-trips are bit-exact.
void save_checkpoint(const ToyTransformer& model, const std::string& path,
                     const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object());
ToyTransformer load_checkpoint(const std::string& path);
nlohmann::ordered_json checkpoint_metadata(const std::string& path);

nlohmann::ordered_json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

nlohmann::ordered_json plan_to_json(const SuppressionPlan& plan);
SuppressionPlan plan_from_json(const nlohmann::ordered_json& j);

}  // namespace pmlab
