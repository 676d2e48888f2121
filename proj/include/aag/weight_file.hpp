#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aag/models.hpp"
#include "json.hpp"

namespace aag {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

std::string to_string(DType d);

// One named tensor as stored on disk: little-endian scalars in row-major
// order. Kept as raw bytes so a load/save cycle reproduces the file exactly.
struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  Shape dims;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const;
  template <typename T>
  static TensorRecord from_values(std::string name, const Shape& dims, std::span<const T> values);
  // Converts to T when the stored type differs.
  template <typename T>
  std::vector<T> values() const;
};

// Layout:
//   "AAGW" | u32 version | u32 header length | header JSON (UTF-8)
//   | u32 tensor count | per tensor: u32 name length, name, u8 dtype,
//   u32 rank, u64 dims[rank], payload
// All integers little-endian. The header holds {"model": spec, ...}.
struct WeightFile {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
  std::vector<std::uint8_t> serialize() const;
  static WeightFile parse(std::span<const std::uint8_t> bytes);

  void save(const std::string& path) const;
  static WeightFile load(const std::string& path);
};

// Parameters and batch-norm buffers of `model` under their dotted names.
template <typename T>
WeightFile weights_from_model(MultiTaskModel<T>& model);

// Rebuilds the model described by the header and copies every tensor in.
// Missing or misshaped tensors throw FormatError.
template <typename T>
MultiTaskModel<T> model_from_weights(const WeightFile& file);

// Copies matching tensors into an existing model.
template <typename T>
void load_into(MultiTaskModel<T>& model, const WeightFile& file);

MultiTaskModelSpec spec_from_weights(const WeightFile& file);

}  // namespace aag
