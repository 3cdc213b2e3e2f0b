#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mfdet/boxes.hpp"
#include "mfdet/pillars.hpp"

namespace mfdet {

struct SceneConfig {
  double half_extent = 12.8;     // objects spawn and matter within +-this, world coords
  int min_objects = 3, max_objects = 7;
  double p_static = 0.4;
  double speed_min = 1.0, speed_max = 8.0;
  double base_density = 6.0;     // points per meter of visible edge at the reference range
  double density_ref_range = 10.0;
  int n_walls = 2;               // static occluders, sampled but never ground truth
  double wall_len_min = 2.0, wall_len_max = 5.0;
  int frames = 4;
  double dt = 0.4;
  double ego_speed_max = 3.0;
  int clutter_points = 40;       // low ground returns scattered over the scene
  int num_classes = 2;
};

// A scripted scene: every entity moves at constant velocity, the sensor rides
// the ego. Kept explicit so tests can stage exact geometries.
struct SceneObject {
  int cls = 0;
  double x = 0, y = 0;       // center at t = 0, world
  double yaw = 0;            // heading; equals travel direction when moving
  double l = 4, w = 2, height = 1.6;
  double speed = 0;
  int object_id = 0;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::vector<OrientedRect> walls;
  double wall_height = 2.0;
  double ego_yaw = 0;
  double ego_x0 = 0, ego_y0 = 0;
  double ego_vx = 0, ego_vy = 0;
};

struct SynthSequence {
  std::vector<PointCloudFrame> frames;
  // gt[f] holds the boxes of frame f in that frame's sensor coordinates
  std::vector<std::vector<GroundTruthBox>> gt;
};

SceneSpec random_scene(const SceneConfig& cfg, std::uint64_t seed);
SynthSequence render_sequence(const SceneSpec& spec, const SceneConfig& cfg, std::uint64_t seed);
SynthSequence generate_sequence(const SceneConfig& cfg, std::uint64_t seed);

// One directory per sequence: a text header plus float32 xyzi binary per
// frame, and a gt.csv covering all frames.
void save_sequence(const std::string& dir, const SynthSequence& seq);
SynthSequence load_sequence(const std::string& dir);

}  // namespace mfdet
