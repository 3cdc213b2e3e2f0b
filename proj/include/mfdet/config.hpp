#pragma once

#include <cstdint>
#include <string>

#include "mfdet/model.hpp"
#include "mfdet/synth.hpp"

namespace mfdet {

// Everything a command run needs, grouped the way the config file sections
// group it. Architecture and grid defaults follow the reference setup; data
// volume and epoch counts default to sizes a desktop CPU can finish.
struct RunConfig {
  std::string out_dir = "runs/exp";   // [run] out
  std::uint64_t seed = 7;             // [run] seed
  int ablate_seeds = 3;               // [run] ablate_seeds

  std::string data_dir = "data";      // [data] dir
  int train_sequences = 200;          // [data] train_sequences
  int val_sequences = 40;             // [data] val_sequences

  SceneConfig scene;                  // [scene], num_classes mirrored from model
  ModelConfig model;                  // [grid], [model], [loss], [eval]

  int base_epochs = 8;                // [train]
  int full_epochs = 6;
  double lr = 2e-3;
  double weight_decay = 0.01;
  double clip_norm = 10.0;

  RunConfig() { scene.half_extent = 51.2; }

  // scene.dt is the single frame-interval knob; model.frame_dt mirrors it
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.frame_dt = scene.dt;
    return m;
  }

  SceneConfig scene_config() const {
    SceneConfig s = scene;
    s.num_classes = model.num_classes;
    return s;
  }

  void validate() const;
};

// %.17g, enough digits to reproduce any double exactly on reparse.
std::string format_double(double v);

// Canonical text form: fixed section and key order, every field present.
std::string serialize_config(const RunConfig& cfg);

// Merges "key = value" lines under "[section]" headers into cfg. '#' starts a
// comment. Unknown keys and malformed values throw ConfigError.
void apply_config_text(RunConfig& cfg, const std::string& text);

RunConfig load_config_file(const std::string& path);

// One "section.key=value" pair, the --set override syntax.
void apply_override(RunConfig& cfg, const std::string& assignment);

// FNV-1a over the canonical serialization, as 16 hex digits.
std::string config_hash_hex(const RunConfig& cfg);

}  // namespace mfdet
