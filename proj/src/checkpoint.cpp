#include "mfdet/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace mfdet {

// Raw double writes are the little-endian format on every supported target.
static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559,
              "checkpoint format needs IEEE-754 binary64");

namespace {

constexpr const char* kMagic = "mfdet-checkpoint 1";

std::string manifest_path(const std::string& stem) { return stem + ".manifest"; }
std::string bin_path(const std::string& stem) { return stem + ".bin"; }

}  // namespace

void save_checkpoint(const std::string& stem, const NamedParams<double>& params,
                     const std::string& config_hash) {
  std::ofstream mf(manifest_path(stem));
  if (!mf) throw ConfigError("checkpoint: cannot write " + manifest_path(stem));
  mf << kMagic << "\n";
  mf << "precision float64\n";
  mf << "config_hash " << config_hash << "\n";
  mf << "params " << params.size() << "\n";
  for (const auto& [name, t] : params) {
    mf << name;
    for (int i = 0; i < t->ndim(); ++i) mf << " " << t->dim(i);
    mf << "\n";
  }
  if (!mf.good()) throw ConfigError("checkpoint: write failed for " + manifest_path(stem));

  std::ofstream bf(bin_path(stem), std::ios::binary);
  if (!bf) throw ConfigError("checkpoint: cannot write " + bin_path(stem));
  for (const auto& [name, t] : params) {
    const std::vector<double>& d = t->data();
    bf.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!bf.good()) throw ConfigError("checkpoint: write failed for " + bin_path(stem));
}

CheckpointManifest read_manifest(const std::string& stem) {
  std::ifstream mf(manifest_path(stem));
  if (!mf) throw ConfigError("checkpoint: cannot read " + manifest_path(stem));
  std::string line;
  if (!std::getline(mf, line) || line != kMagic)
    throw ConfigError("checkpoint: bad magic in " + manifest_path(stem));

  CheckpointManifest out;
  std::string key;
  std::size_t count = 0;
  for (int i = 0; i < 3; ++i) {
    if (!std::getline(mf, line)) throw ConfigError("checkpoint: truncated manifest header");
    std::stringstream ss(line);
    ss >> key;
    if (key == "precision") ss >> out.precision;
    else if (key == "config_hash") ss >> out.config_hash;
    else if (key == "params") ss >> count;
    else throw ConfigError("checkpoint: unknown manifest line '" + line + "'");
    if (!ss) throw ConfigError("checkpoint: bad manifest line '" + line + "'");
  }
  if (out.precision != "float64")
    throw ConfigError("checkpoint: unsupported precision " + out.precision);

  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(mf, line)) throw ConfigError("checkpoint: truncated manifest entries");
    std::stringstream ss(line);
    CheckpointEntry e;
    ss >> e.name;
    int d = 0;
    while (ss >> d) {
      if (d < 0) throw ConfigError("checkpoint: negative dim in entry " + e.name);
      e.shape.push_back(d);
    }
    if (e.name.empty()) throw ConfigError("checkpoint: empty entry name");
    out.entries.push_back(std::move(e));
  }
  return out;
}

CheckpointManifest load_checkpoint(const std::string& stem, const NamedParams<double>& params,
                                   bool require_all) {
  const CheckpointManifest man = read_manifest(stem);

  std::map<std::string, Tensor<double>*> by_name;
  for (const auto& [name, t] : params) {
    if (!by_name.emplace(name, t).second)
      throw ConfigError("checkpoint: duplicate parameter name " + name);
  }

  std::ifstream bf(bin_path(stem), std::ios::binary);
  if (!bf) throw ConfigError("checkpoint: cannot read " + bin_path(stem));

  std::size_t loaded = 0;
  for (const CheckpointEntry& e : man.entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end())
      throw ConfigError("checkpoint: stored parameter " + e.name + " has no place in this model");
    Tensor<double>* t = it->second;
    if (t->shape() != e.shape)
      throw ConfigError("checkpoint: shape mismatch for " + e.name);
    std::vector<double>& d = t->data();
    bf.read(reinterpret_cast<char*>(d.data()),
            static_cast<std::streamsize>(d.size() * sizeof(double)));
    if (bf.gcount() != static_cast<std::streamsize>(d.size() * sizeof(double)))
      throw ConfigError("checkpoint: " + bin_path(stem) + " is truncated at " + e.name);
    ++loaded;
  }
  if (require_all && loaded != params.size())
    throw ConfigError("checkpoint: " + std::to_string(params.size() - loaded) +
                      " model parameters missing from " + manifest_path(stem));
  return man;
}

}  // namespace mfdet
