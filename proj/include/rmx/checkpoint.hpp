#pragma once

// Versioned binary checkpoint:
//   magic "RMXCKPT1" | u32 version | u64 length + model config text |
//   u64 record count | records | u64 FNV-1a checksum of all preceding bytes
// Each record: u32 name length, name bytes, u8 dtype (1 = f64), u32 rank,
// rank x u64 extents, little-endian values. Integers are little-endian.

#include <cstdint>
#include <string>
#include <vector>

#include "rmx/model.hpp"

namespace rmx {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string config_text;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
  /// Throws IoError naming the record when absent.
  const CheckpointRecord& at(const std::string& name) const;
  void put(std::string name, Shape shape, std::vector<double> values);
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws IoError on bad magic, unsupported version, truncation or checksum mismatch.
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Model config, parameters and batch-norm running statistics
/// (stored as "<layer>.running_mean" / "<layer>.running_var").
Checkpoint capture_model(Model& model);
/// Copies every parameter and statistic from `ckpt`; names and shapes must match.
void restore_model(Model& model, const Checkpoint& ckpt);
Model load_model(const Checkpoint& ckpt);

std::uint64_t fnv1a64(const char* data, std::size_t size);

}  // namespace rmx
