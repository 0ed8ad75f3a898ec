#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "srlora/matrix.hpp"

namespace srlora {

// Checkpoint container: manifest.json + weights.bin. The payload is a
// contiguous little-endian f32 blob, row-major per tensor; values are
// widened to f64 in memory and narrowed back on save.
struct TensorEntry {
  std::string name;
  std::optional<int> layer;  // null for shared tensors (embeddings, head)
  std::string role;
  std::vector<std::size_t> shape;  // 1-D or 2-D
  Matrix data;                     // 1-D tensors held as 1 x n

  std::size_t numel() const;
};

struct WeightBundle {
  std::vector<TensorEntry> tensors;  // manifest order
  nlohmann::json meta;               // optional free-form block, round-trips

  const TensorEntry* find(std::optional<int> layer,
                          const std::string& role) const;
  TensorEntry* find(std::optional<int> layer, const std::string& role);

  // Element count over non-adapter tensors; the manifest declares this as
  // backbone_total and load_bundle checks the declaration.
  long long backbone_total() const;
};

// Adapter factors carry roles "lora_a.<target>" / "lora_b.<target>" so the
// (layer, role) pair stays unique across the three adapted projections.
bool is_adapter_role(const std::string& role);

// `path` is either the bundle directory or its manifest.json.
WeightBundle load_bundle(const std::filesystem::path& path);
void save_bundle(const WeightBundle& bundle, const std::filesystem::path& dir);

}  // namespace srlora
