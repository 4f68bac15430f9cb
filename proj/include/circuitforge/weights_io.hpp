#pragma once

// Single-file weight container:
//   u64 little-endian header length n
//   n bytes of JSON: { "<tensor name>": {"dtype":"f32","shape":[...],"offset":o,"length":len},
//                      "__spec__": {...model spec...} }
//   raw little-endian f32 blob; offset/length are byte positions within the blob.
// Tensors are laid out in name order, so identical stores give identical bytes.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "circuitforge/model.hpp"

namespace circuitforge {

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

void save_weights(const std::filesystem::path& path, const WeightStore& store);

// Validates against `spec`: MissingTensor, ShapeMismatch, NonFiniteValue, FormatError.
WeightStore load_weights(const std::filesystem::path& path, const ModelSpec& spec);
// Uses the spec recorded in the container.
WeightStore load_weights(const std::filesystem::path& path);

// FNV-1a 64-bit digest of the file bytes, as 16 hex chars. Used for provenance.
std::string file_digest(const std::filesystem::path& path);

}  // namespace circuitforge
