#pragma once

#include <string>
#include <vector>

#include "ptrack/tensor.hpp"

namespace ptrack {

/// One named tensor as stored on disk. Values are always f64 regardless of
/// the in-memory element type.
struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Writes params to a flat binary container: 4-byte magic "PTRK", one format
/// version byte, then per tensor (u32 name length, name bytes, u32 rank,
/// u64 extents, f64 values), all little-endian.
template <typename T>
void save_checkpoint(const std::string& path, const ParamList<T>& params);

/// Parses a checkpoint file into records. Throws DataError with the byte
/// offset on truncation, bad magic, or unsupported version.
std::vector<CheckpointRecord> read_checkpoint(const std::string& path);

/// Loads values into an existing parameter list, matching records by name.
/// Every parameter must be present in the file with the exact shape; extra
/// names in the file are also an error.
template <typename T>
void load_checkpoint(const std::string& path, ParamList<T>& params);

}  // namespace ptrack
