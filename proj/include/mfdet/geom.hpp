#pragma once

#include <array>
#include <vector>

namespace mfdet {

// Planar rigid transform, sensor frame -> world: p_world = R(yaw) * p + t.
struct Pose2D {
  double yaw = 0.0;
  double tx = 0.0;
  double ty = 0.0;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

Vec2 pose_apply(const Pose2D& pose, Vec2 p);
Vec2 pose_apply_inverse(const Pose2D& pose, Vec2 p);

// Composition c = a then b, i.e. c(p) = b(a(p)).
Pose2D pose_compose(const Pose2D& b, const Pose2D& a);

// Oriented BEV rectangle: center, full extents, heading of the l axis.
struct OrientedRect {
  double cx = 0.0;
  double cy = 0.0;
  double l = 0.0;
  double w = 0.0;
  double yaw = 0.0;
};

std::array<Vec2, 4> rect_corners(const OrientedRect& r);

bool point_in_rect(const OrientedRect& r, Vec2 p);

// Area of the intersection of two convex quads via polygon clipping.
double rect_intersection_area(const OrientedRect& a, const OrientedRect& b);

double rect_iou(const OrientedRect& a, const OrientedRect& b);

// True when the segment from a to b crosses the rectangle strictly between
// its endpoints; t_hit (if non-null) receives the entry parameter in (0,1).
bool segment_hits_rect(Vec2 a, Vec2 b, const OrientedRect& r, double* t_hit);

}  // namespace mfdet
