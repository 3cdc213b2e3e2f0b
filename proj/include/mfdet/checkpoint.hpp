#pragma once

#include <string>
#include <vector>

#include "mfdet/ops.hpp"

namespace mfdet {

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
};

struct CheckpointManifest {
  std::string precision = "float64";
  std::string config_hash;
  std::vector<CheckpointEntry> entries;
};

// Writes stem + ".manifest" (text: precision, config hash, one name + shape
// row per parameter) and stem + ".bin" (the raw float64 arrays concatenated in
// manifest order, little-endian).
void save_checkpoint(const std::string& stem, const NamedParams<double>& params,
                     const std::string& config_hash);

CheckpointManifest read_manifest(const std::string& stem);

// Copies every stored array into the tensor of the same name; shapes must
// match. Every manifest entry must find a tensor. With require_all, every
// provided tensor must also appear in the manifest; without it, extras keep
// their current values, which is how a base checkpoint seeds a full model.
CheckpointManifest load_checkpoint(const std::string& stem, const NamedParams<double>& params,
                                   bool require_all = true);

}  // namespace mfdet
