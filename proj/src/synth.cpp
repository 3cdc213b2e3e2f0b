#include "mfdet/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mfdet/tensor.hpp"

namespace mfdet {
namespace {

double urand(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

// Knuth's product method; adequate for the small rates used here.
int poisson(std::mt19937_64& rng, double lambda) {
  lambda = std::min(lambda, 200.0);
  if (lambda <= 0) return 0;
  const double limit = std::exp(-lambda);
  int k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= urand(rng, 0, 1);
  } while (p > limit);
  return k - 1;
}

struct EntityAtT {
  OrientedRect rect;
  double height;
  bool is_wall;
  int object_index;  // -1 for walls
};

OrientedRect object_rect_at(const SceneObject& o, double t) {
  const double x = o.x + o.speed * std::cos(o.yaw) * t;
  const double y = o.y + o.speed * std::sin(o.yaw) * t;
  return {x, y, o.l, o.w, o.yaw};
}

bool occluded(const Vec2& sensor, const Vec2& pt, const std::vector<EntityAtT>& ents,
              int self) {
  for (int e = 0; e < static_cast<int>(ents.size()); ++e) {
    if (e == self) continue;
    if (segment_hits_rect(sensor, pt, ents[e].rect, nullptr)) return true;
  }
  return false;
}

void sample_entity(const EntityAtT& ent, const Vec2& sensor, const SceneConfig& cfg,
                   std::mt19937_64& rng, const std::vector<EntityAtT>& ents, int self,
                   double intensity_base, std::vector<PointXYZI>& out) {
  auto corners = rect_corners(ent.rect);
  const Vec2 center{ent.rect.cx, ent.rect.cy};
  double total_edge_len = 0;
  for (int e = 0; e < 4; ++e) {
    const Vec2& a = corners[e];
    const Vec2& b = corners[(e + 1) % 4];
    const Vec2 mid{(a.x + b.x) / 2, (a.y + b.y) / 2};
    // corners are counter-clockwise, so the outward normal of a->b points right
    const Vec2 n{b.y - a.y, -(b.x - a.x)};
    if ((sensor.x - mid.x) * n.x + (sensor.y - mid.y) * n.y <= 0) continue;  // back face
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    total_edge_len += len;
    const double r = std::max(1.0, std::hypot(sensor.x - mid.x, sensor.y - mid.y));
    const double falloff =
        std::clamp(std::pow(cfg.density_ref_range / r, 2.0), 0.05, 4.0);
    const int n_pts = poisson(rng, len * cfg.base_density * falloff);
    for (int i = 0; i < n_pts; ++i) {
      const double u = urand(rng, 0, 1);
      Vec2 p{a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)};
      p.x += urand(rng, -0.02, 0.02);
      p.y += urand(rng, -0.02, 0.02);
      if (occluded(sensor, p, ents, self)) continue;
      out.push_back({p.x, p.y, urand(rng, 0.1, ent.height),
                     std::clamp(intensity_base + urand(rng, -0.1, 0.1), 0.0, 1.0)});
    }
  }
  // sparse returns from the top face
  const double r = std::max(1.0, std::hypot(sensor.x - center.x, sensor.y - center.y));
  const double falloff = std::clamp(std::pow(cfg.density_ref_range / r, 2.0), 0.05, 4.0);
  const int n_top =
      poisson(rng, 0.15 * ent.rect.l * ent.rect.w * cfg.base_density * falloff * 0.25);
  for (int i = 0; i < n_top; ++i) {
    const double lx = urand(rng, -ent.rect.l / 2, ent.rect.l / 2);
    const double ly = urand(rng, -ent.rect.w / 2, ent.rect.w / 2);
    const double cy = std::cos(ent.rect.yaw), sy = std::sin(ent.rect.yaw);
    Vec2 p{ent.rect.cx + cy * lx - sy * ly, ent.rect.cy + sy * lx + cy * ly};
    if (occluded(sensor, p, ents, self)) continue;
    out.push_back({p.x, p.y, ent.height + urand(rng, -0.03, 0.03),
                   std::clamp(intensity_base + urand(rng, -0.1, 0.1), 0.0, 1.0)});
  }
  (void)total_edge_len;
}

}  // namespace

SceneSpec random_scene(const SceneConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
  SceneSpec spec;
  spec.ego_yaw = urand(rng, -M_PI, M_PI);
  spec.ego_x0 = urand(rng, -1, 1);
  spec.ego_y0 = urand(rng, -1, 1);
  const double ego_speed = urand(rng, 0, cfg.ego_speed_max);
  const double ego_dir = urand(rng, -M_PI, M_PI);
  spec.ego_vx = ego_speed * std::cos(ego_dir);
  spec.ego_vy = ego_speed * std::sin(ego_dir);

  const int n_obj = cfg.min_objects +
                    static_cast<int>(rng() % (cfg.max_objects - cfg.min_objects + 1));
  for (int i = 0; i < n_obj; ++i) {
    SceneObject o;
    o.object_id = i;
    o.cls = static_cast<int>(rng() % cfg.num_classes);
    if (o.cls == 0) {
      o.l = urand(rng, 3.6, 4.8);
      o.w = urand(rng, 1.7, 2.1);
      o.height = 1.6;
    } else {
      o.l = urand(rng, 0.8, 1.4);
      o.w = urand(rng, 0.6, 1.0);
      o.height = 1.7;
    }
    o.yaw = urand(rng, -M_PI, M_PI);
    o.speed = urand(rng, 0, 1) < cfg.p_static ? 0.0 : urand(rng, cfg.speed_min, cfg.speed_max);
    bool placed = false;
    for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
      o.x = urand(rng, -(cfg.half_extent - 2), cfg.half_extent - 2);
      o.y = urand(rng, -(cfg.half_extent - 2), cfg.half_extent - 2);
      placed = true;
      for (const SceneObject& other : spec.objects)
        if (std::hypot(o.x - other.x, o.y - other.y) < 4.0) placed = false;
    }
    if (placed) spec.objects.push_back(o);
  }

  for (int i = 0; i < cfg.n_walls; ++i) {
    OrientedRect w;
    w.cx = urand(rng, -(cfg.half_extent - 2), cfg.half_extent - 2);
    w.cy = urand(rng, -(cfg.half_extent - 2), cfg.half_extent - 2);
    w.l = urand(rng, cfg.wall_len_min, cfg.wall_len_max);
    w.w = 0.3;
    w.yaw = urand(rng, -M_PI, M_PI);
    spec.walls.push_back(w);
  }
  return spec;
}

SynthSequence render_sequence(const SceneSpec& spec, const SceneConfig& cfg,
                              std::uint64_t seed) {
  SynthSequence seq;
  for (int f = 0; f < cfg.frames; ++f) {
    std::mt19937_64 rng(seed * 0x2545F4914F6CDD1DULL + 0x9E3779B97F4A7C15ULL * (f + 1));
    const double t = f * cfg.dt;
    Pose2D ego{spec.ego_yaw, spec.ego_x0 + spec.ego_vx * t, spec.ego_y0 + spec.ego_vy * t};
    const Vec2 sensor{ego.tx, ego.ty};

    std::vector<EntityAtT> ents;
    for (int i = 0; i < static_cast<int>(spec.objects.size()); ++i)
      ents.push_back({object_rect_at(spec.objects[i], t), spec.objects[i].height, false, i});
    for (const OrientedRect& w : spec.walls) ents.push_back({w, spec.wall_height, true, -1});

    std::vector<PointXYZI> world_pts;
    for (int e = 0; e < static_cast<int>(ents.size()); ++e) {
      const double intensity = ents[e].is_wall ? 0.35 : 0.65;
      sample_entity(ents[e], sensor, cfg, rng, ents, e, intensity, world_pts);
    }
    for (int i = 0; i < cfg.clutter_points; ++i) {
      Vec2 p{urand(rng, -cfg.half_extent, cfg.half_extent),
             urand(rng, -cfg.half_extent, cfg.half_extent)};
      Vec2 world{p.x + ego.tx, p.y + ego.ty};
      if (occluded(sensor, world, ents, -1)) continue;
      world_pts.push_back({world.x, world.y, urand(rng, 0.0, 0.25), urand(rng, 0.05, 0.2)});
    }

    PointCloudFrame frame;
    frame.timestamp = t;
    frame.ego_pose = ego;
    for (const PointXYZI& wp : world_pts) {
      Vec2 local = pose_apply_inverse(ego, {wp.x, wp.y});
      frame.points.push_back({local.x, local.y, wp.z, wp.intensity});
    }
    seq.frames.push_back(std::move(frame));

    std::vector<GroundTruthBox> boxes;
    for (int i = 0; i < static_cast<int>(spec.objects.size()); ++i) {
      OrientedRect r = object_rect_at(spec.objects[i], t);
      Vec2 local = pose_apply_inverse(ego, {r.cx, r.cy});
      if (std::abs(local.x) > cfg.half_extent || std::abs(local.y) > cfg.half_extent) continue;
      GroundTruthBox g;
      g.x = local.x;
      g.y = local.y;
      g.l = r.l;
      g.w = r.w;
      g.yaw = wrap_angle(r.yaw - spec.ego_yaw);
      g.cls = spec.objects[i].cls;
      g.object_id = spec.objects[i].object_id;
      g.speed = spec.objects[i].speed;
      boxes.push_back(g);
    }
    seq.gt.push_back(std::move(boxes));
  }
  return seq;
}

SynthSequence generate_sequence(const SceneConfig& cfg, std::uint64_t seed) {
  return render_sequence(random_scene(cfg, seed), cfg, seed);
}

void save_sequence(const std::string& dir, const SynthSequence& seq) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  char name[64];
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    const PointCloudFrame& fr = seq.frames[f];
    std::snprintf(name, sizeof(name), "/frame_%02zu.txt", f);
    std::ofstream hdr(dir + name);
    hdr.precision(17);
    hdr << "timestamp " << fr.timestamp << "\n"
        << "ego_yaw " << fr.ego_pose.yaw << "\n"
        << "ego_tx " << fr.ego_pose.tx << "\n"
        << "ego_ty " << fr.ego_pose.ty << "\n"
        << "points " << fr.points.size() << "\n";
    std::snprintf(name, sizeof(name), "/frame_%02zu.bin", f);
    std::ofstream bin(dir + name, std::ios::binary);
    for (const PointXYZI& p : fr.points) {
      const float v[4] = {static_cast<float>(p.x), static_cast<float>(p.y),
                          static_cast<float>(p.z), static_cast<float>(p.intensity)};
      bin.write(reinterpret_cast<const char*>(v), sizeof(v));
    }
  }
  std::ofstream csv(dir + "/gt.csv");
  csv.precision(17);
  csv << "frame,object_id,class,x,y,l,w,yaw,speed\n";
  for (std::size_t f = 0; f < seq.gt.size(); ++f)
    for (const GroundTruthBox& g : seq.gt[f])
      csv << f << "," << g.object_id << "," << g.cls << "," << g.x << "," << g.y << ","
          << g.l << "," << g.w << "," << g.yaw << "," << g.speed << "\n";
}

SynthSequence load_sequence(const std::string& dir) {
  namespace fs = std::filesystem;
  SynthSequence seq;
  char name[64];
  for (int f = 0;; ++f) {
    std::snprintf(name, sizeof(name), "/frame_%02d.txt", f);
    std::ifstream hdr(dir + name);
    if (!hdr) break;
    PointCloudFrame fr;
    std::string key;
    std::size_t n = 0;
    while (hdr >> key) {
      if (key == "timestamp") hdr >> fr.timestamp;
      else if (key == "ego_yaw") hdr >> fr.ego_pose.yaw;
      else if (key == "ego_tx") hdr >> fr.ego_pose.tx;
      else if (key == "ego_ty") hdr >> fr.ego_pose.ty;
      else if (key == "points") hdr >> n;
      else throw std::runtime_error("frame header: unknown key " + key);
    }
    std::snprintf(name, sizeof(name), "/frame_%02d.bin", f);
    std::ifstream bin(dir + name, std::ios::binary);
    if (!bin) throw std::runtime_error(std::string("missing point file ") + dir + name);
    for (std::size_t i = 0; i < n; ++i) {
      float v[4];
      bin.read(reinterpret_cast<char*>(v), sizeof(v));
      if (!bin) throw std::runtime_error(std::string("truncated point file ") + dir + name);
      fr.points.push_back({v[0], v[1], v[2], v[3]});
    }
    seq.frames.push_back(std::move(fr));
  }
  if (seq.frames.empty())
    throw std::runtime_error("no frames found under " + dir);

  seq.gt.resize(seq.frames.size());
  std::ifstream csv(dir + "/gt.csv");
  if (!csv) throw std::runtime_error("missing gt.csv under " + dir);
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    GroundTruthBox g;
    std::size_t frame = 0;
    char c;
    std::istringstream ss(line);
    ss >> frame >> c >> g.object_id >> c >> g.cls >> c >> g.x >> c >> g.y >> c >> g.l >>
        c >> g.w >> c >> g.yaw >> c >> g.speed;
    if (!ss) throw std::runtime_error("bad gt.csv row: " + line);
    if (frame >= seq.gt.size()) throw std::runtime_error("gt.csv row for missing frame");
    seq.gt[frame].push_back(g);
  }
  return seq;
}

}  // namespace mfdet
