#pragma once

#include <algorithm>
#include <map>
#include <random>
#include <tuple>
#include <utility>
#include <vector>

#include "mfdet/geom.hpp"
#include "mfdet/ops.hpp"

namespace mfdet {

struct PointXYZI {
  double x = 0, y = 0, z = 0, intensity = 0;
};

struct PointCloudFrame {
  std::vector<PointXYZI> points;  // sensor-frame coordinates
  double timestamp = 0.0;
  Pose2D ego_pose;  // sensor -> world
};

struct GridConfig {
  double x_min = -51.2, x_max = 51.2;
  double y_min = -51.2, y_max = 51.2;
  double z_min = -3.0, z_max = 3.0;
  double voxel = 0.2;
  int max_points_per_pillar = 32;

  int rows() const { return static_cast<int>(std::lround((y_max - y_min) / voxel)); }
  int cols() const { return static_cast<int>(std::lround((x_max - x_min) / voxel)); }

  void validate() const {
    if (voxel <= 0.0) throw ConfigError("grid: voxel size must be positive");
    if (x_max <= x_min || y_max <= y_min || z_max <= z_min)
      throw ConfigError("grid: extent must have max > min on every axis");
    if (max_points_per_pillar < 1) throw ConfigError("grid: max_points_per_pillar must be >= 1");
    for (double span : {(x_max - x_min) / voxel, (y_max - y_min) / voxel}) {
      if (std::abs(span - std::lround(span)) > 1e-6)
        throw ConfigError("grid: extent must be an integer multiple of the voxel size");
    }
  }
};

// Re-express a frame's points in the coordinate frame of target_pose. An
// identical pose passes points through verbatim so duplicated frames stay
// bitwise equal.
inline PointCloudFrame ego_compensate(const PointCloudFrame& frame, const Pose2D& target_pose) {
  PointCloudFrame out;
  out.timestamp = frame.timestamp;
  out.ego_pose = target_pose;
  if (frame.ego_pose.yaw == target_pose.yaw && frame.ego_pose.tx == target_pose.tx &&
      frame.ego_pose.ty == target_pose.ty) {
    out.points = frame.points;
    return out;
  }
  out.points.reserve(frame.points.size());
  for (const PointXYZI& p : frame.points) {
    Vec2 world = pose_apply(frame.ego_pose, {p.x, p.y});
    Vec2 local = pose_apply_inverse(target_pose, world);
    out.points.push_back({local.x, local.y, p.z, p.intensity});
  }
  return out;
}

// Point features per pillar: x, y, z, intensity, offsets to the pillar mean,
// and xy offsets to the pillar's grid-cell center.
constexpr int kPointFeatDim = 9;

struct PillarSet {
  std::vector<int> rows, cols;   // cell index per pillar, sorted by (row, col)
  std::vector<int> offsets;      // pillar p owns feature rows [offsets[p], offsets[p+1])
  std::vector<double> feats;     // [total_points, kPointFeatDim] row-major
  int grid_rows = 0, grid_cols = 0;

  int count() const { return static_cast<int>(rows.size()); }
  int total_points() const { return static_cast<int>(feats.size()) / kPointFeatDim; }
};

// Bucket in-range points into grid cells. Cells keep at most max_points_per_pillar
// points; overflow is resolved by a seeded shuffle so the kept subset is
// deterministic for a given seed yet unbiased across cells.
inline PillarSet voxelize(const PointCloudFrame& frame, const GridConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  PillarSet out;
  out.grid_rows = cfg.rows();
  out.grid_cols = cfg.cols();

  std::map<std::pair<int, int>, std::vector<int>> cells;
  for (int i = 0; i < static_cast<int>(frame.points.size()); ++i) {
    const PointXYZI& p = frame.points[i];
    if (p.x < cfg.x_min || p.x >= cfg.x_max) continue;
    if (p.y < cfg.y_min || p.y >= cfg.y_max) continue;
    if (p.z < cfg.z_min || p.z >= cfg.z_max) continue;
    int col = static_cast<int>(std::floor((p.x - cfg.x_min) / cfg.voxel));
    int row = static_cast<int>(std::floor((p.y - cfg.y_min) / cfg.voxel));
    col = std::min(col, out.grid_cols - 1);
    row = std::min(row, out.grid_rows - 1);
    cells[{row, col}].push_back(i);
  }

  // Per-cell order is canonicalized by point value, not input position, so
  // both the overflow subset and the mean's summation order are invariant to
  // input permutation down to the last bit.
  const auto key_less = [&](int a, int b) {
    const PointXYZI& pa = frame.points[a];
    const PointXYZI& pb = frame.points[b];
    return std::tie(pa.x, pa.y, pa.z, pa.intensity) < std::tie(pb.x, pb.y, pb.z, pb.intensity);
  };

  out.offsets.push_back(0);
  for (auto& [cell, idx] : cells) {
    std::sort(idx.begin(), idx.end(), key_less);
    if (static_cast<int>(idx.size()) > cfg.max_points_per_pillar) {
      std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL *
                                  (static_cast<std::uint64_t>(cell.first) * out.grid_cols +
                                   cell.second + 1)));
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(cfg.max_points_per_pillar);
      std::sort(idx.begin(), idx.end(), key_less);
    }
    double mx = 0, my = 0, mz = 0;
    for (int i : idx) {
      mx += frame.points[i].x;
      my += frame.points[i].y;
      mz += frame.points[i].z;
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    mx *= inv;
    my *= inv;
    mz *= inv;
    const double cx = cfg.x_min + (cell.second + 0.5) * cfg.voxel;
    const double cy = cfg.y_min + (cell.first + 0.5) * cfg.voxel;
    for (int i : idx) {
      const PointXYZI& p = frame.points[i];
      out.feats.insert(out.feats.end(), {p.x, p.y, p.z, p.intensity, p.x - mx, p.y - my,
                                         p.z - mz, p.x - cx, p.y - cy});
    }
    out.rows.push_back(cell.first);
    out.cols.push_back(cell.second);
    out.offsets.push_back(static_cast<int>(out.feats.size()) / kPointFeatDim);
  }
  return out;
}

template <typename T>
struct PillarEncoderParams {
  Tensor<T> w;  // [kPointFeatDim, channels]
  Tensor<T> b;  // [channels]

  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }

  std::vector<Tensor<T>*> parameters() { return {&w, &b}; }
};

template <typename T>
PillarEncoderParams<T> make_pillar_encoder(int channels, std::mt19937_64& rng) {
  PillarEncoderParams<T> p;
  p.w = Tensor<T>::zeros({kPointFeatDim, channels});
  p.b = Tensor<T>::zeros({channels});
  const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(kPointFeatDim)));
  fill_uniform(p.w, rng, -bound, bound);
  fill_uniform(p.b, rng, -bound, bound);
  return p;
}

// Shared linear + relu over every point, max-pool per pillar, scatter into a
// dense [channels, rows, cols] map. Empty cells stay exactly zero.
template <typename T>
Tensor<T> encode_pillars(const PillarSet& pillars, const PillarEncoderParams<T>& params) {
  const int channels = params.w.dim(1);
  if (pillars.count() == 0)
    return Tensor<T>::zeros({channels, pillars.grid_rows, pillars.grid_cols});

  Tensor<T> pts = Tensor<T>::zeros({pillars.total_points(), kPointFeatDim});
  for (std::size_t i = 0; i < pillars.feats.size(); ++i)
    pts.data()[i] = static_cast<T>(pillars.feats[i]);

  Tensor<T> h = relu(add_rowvec(matmul(pts, params.w), params.b));
  Tensor<T> pooled = segment_max(h, pillars.offsets);

  std::vector<int> flat(pillars.count());
  for (int p = 0; p < pillars.count(); ++p)
    flat[p] = pillars.rows[p] * pillars.grid_cols + pillars.cols[p];
  Tensor<T> base = Tensor<T>::zeros({channels, pillars.grid_rows, pillars.grid_cols});
  return scatter_cells(base, pooled, flat);
}

template <typename T>
struct ConvParams {
  Tensor<T> w;  // [c_out, c_in, kh, kw]
  Tensor<T> b;  // [c_out]

  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }

  std::vector<Tensor<T>*> parameters() { return {&w, &b}; }
};

template <typename T>
ConvParams<T> make_conv(int c_out, int c_in, int k, std::mt19937_64& rng, bool zero = false) {
  ConvParams<T> p;
  p.w = Tensor<T>::zeros({c_out, c_in, k, k});
  p.b = Tensor<T>::zeros({c_out});
  if (!zero) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c_in) * k * k));
    fill_uniform(p.w, rng, -bound, bound);
    fill_uniform(p.b, rng, -bound, bound);
  }
  return p;
}

// One backbone stage: stride-2 downsample followed by two stride-1 convs,
// relu after each.
template <typename T>
struct BackboneStage {
  ConvParams<T> down, c1, c2;

  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    down.named_parameters(prefix + ".down", out);
    c1.named_parameters(prefix + ".c1", out);
    c2.named_parameters(prefix + ".c2", out);
  }

  std::vector<Tensor<T>*> parameters() {
    NamedParams<T> named;
    named_parameters("", named);
    return detail::strip_names(named);
  }
};

// Multi-scale features, f3 finest (input/2) through f1 coarsest (input/8),
// each with a per-scale classification logits map.
template <typename T>
struct MultiScaleFeatures {
  Tensor<T> f3, f2, f1;
  Tensor<T> cls3, cls2, cls1;

  Tensor<T>& feat(int scale) { return scale == 1 ? f1 : scale == 2 ? f2 : f3; }
  Tensor<T>& cls(int scale) { return scale == 1 ? cls1 : scale == 2 ? cls2 : cls3; }
};

template <typename T>
struct BackboneParams {
  BackboneStage<T> s3, s2, s1;           // applied in order: s3 then s2 then s1
  ConvParams<T> cls3, cls2, cls1;        // 1x1 heads on each scale

  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    s3.named_parameters(prefix + ".s3", out);
    s2.named_parameters(prefix + ".s2", out);
    s1.named_parameters(prefix + ".s1", out);
    cls3.named_parameters(prefix + ".cls3", out);
    cls2.named_parameters(prefix + ".cls2", out);
    cls1.named_parameters(prefix + ".cls1", out);
  }

  std::vector<Tensor<T>*> parameters() {
    NamedParams<T> named;
    named_parameters("", named);
    return detail::strip_names(named);
  }
};

template <typename T>
BackboneParams<T> make_backbone(int c_in, int c3, int c2, int c1, int num_classes,
                                std::mt19937_64& rng) {
  BackboneParams<T> p;
  p.s3 = {make_conv<T>(c3, c_in, 3, rng), make_conv<T>(c3, c3, 3, rng),
          make_conv<T>(c3, c3, 3, rng)};
  p.s2 = {make_conv<T>(c2, c3, 3, rng), make_conv<T>(c2, c2, 3, rng),
          make_conv<T>(c2, c2, 3, rng)};
  p.s1 = {make_conv<T>(c1, c2, 3, rng), make_conv<T>(c1, c1, 3, rng),
          make_conv<T>(c1, c1, 3, rng)};
  p.cls3 = make_conv<T>(num_classes, c3, 1, rng);
  p.cls2 = make_conv<T>(num_classes, c2, 1, rng);
  p.cls1 = make_conv<T>(num_classes, c1, 1, rng);
  return p;
}

template <typename T>
Tensor<T> run_stage(const Tensor<T>& x, const BackboneStage<T>& s) {
  Tensor<T> y = relu(conv2d(x, s.down.w, s.down.b, 2, 1));
  y = relu(conv2d(y, s.c1.w, s.c1.b, 1, 1));
  y = relu(conv2d(y, s.c2.w, s.c2.b, 1, 1));
  return y;
}

template <typename T>
MultiScaleFeatures<T> backbone_fpn(const Tensor<T>& pseudo_image, const BackboneParams<T>& p) {
  MultiScaleFeatures<T> out;
  out.f3 = run_stage(pseudo_image, p.s3);
  out.f2 = run_stage(out.f3, p.s2);
  out.f1 = run_stage(out.f2, p.s1);
  out.cls3 = conv2d(out.f3, p.cls3.w, p.cls3.b, 1, 0);
  out.cls2 = conv2d(out.f2, p.cls2.w, p.cls2.b, 1, 0);
  out.cls1 = conv2d(out.f1, p.cls1.w, p.cls1.b, 1, 0);
  return out;
}

}  // namespace mfdet
