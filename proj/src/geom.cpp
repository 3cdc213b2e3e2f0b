#include "mfdet/geom.hpp"

#include <algorithm>
#include <cmath>

namespace mfdet {

double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * M_PI);
  if (r <= -M_PI) r += 2.0 * M_PI;
  return r;
}

Vec2 pose_apply(const Pose2D& pose, Vec2 p) {
  const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
  return {c * p.x - s * p.y + pose.tx, s * p.x + c * p.y + pose.ty};
}

Vec2 pose_apply_inverse(const Pose2D& pose, Vec2 p) {
  const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
  const double dx = p.x - pose.tx, dy = p.y - pose.ty;
  return {c * dx + s * dy, -s * dx + c * dy};
}

Pose2D pose_compose(const Pose2D& b, const Pose2D& a) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  Pose2D out;
  out.yaw = wrap_angle(a.yaw + b.yaw);
  out.tx = c * a.tx - s * a.ty + b.tx;
  out.ty = s * a.tx + c * a.ty + b.ty;
  return out;
}

std::array<Vec2, 4> rect_corners(const OrientedRect& r) {
  const double c = std::cos(r.yaw), s = std::sin(r.yaw);
  const double hl = 0.5 * r.l, hw = 0.5 * r.w;
  // counterclockwise
  const double local[4][2] = {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = {c * local[i][0] - s * local[i][1] + r.cx, s * local[i][0] + c * local[i][1] + r.cy};
  return out;
}

bool point_in_rect(const OrientedRect& r, Vec2 p) {
  const double c = std::cos(r.yaw), s = std::sin(r.yaw);
  const double dx = p.x - r.cx, dy = p.y - r.cy;
  const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * r.l && std::abs(ly) <= 0.5 * r.w;
}

namespace {

double polygon_area(const std::vector<Vec2>& poly) {
  if (poly.size() < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    acc += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(acc);
}

// Keeps the part of poly on the left of edge p1->p2.
std::vector<Vec2> clip_edge(const std::vector<Vec2>& poly, Vec2 p1, Vec2 p2) {
  std::vector<Vec2> out;
  const double ex = p2.x - p1.x, ey = p2.y - p1.y;
  auto side = [&](Vec2 p) { return ex * (p.y - p1.y) - ey * (p.x - p1.x); };
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[(i + 1) % n];
    const double sa = side(a), sb = side(b);
    if (sa >= 0.0) out.push_back(a);
    if ((sa > 0.0 && sb < 0.0) || (sa < 0.0 && sb > 0.0)) {
      const double t = sa / (sa - sb);
      out.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
    }
  }
  return out;
}

}  // namespace

double rect_intersection_area(const OrientedRect& a, const OrientedRect& b) {
  if (a.l <= 0.0 || a.w <= 0.0 || b.l <= 0.0 || b.w <= 0.0) return 0.0;
  const auto ca = rect_corners(a);
  const auto cb = rect_corners(b);
  std::vector<Vec2> poly(ca.begin(), ca.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i) poly = clip_edge(poly, cb[i], cb[(i + 1) % 4]);
  return polygon_area(poly);
}

double rect_iou(const OrientedRect& a, const OrientedRect& b) {
  const double inter = rect_intersection_area(a, b);
  const double uni = a.l * a.w + b.l * b.w - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

bool segment_hits_rect(Vec2 a, Vec2 b, const OrientedRect& r, double* t_hit) {
  // slab test in the rectangle's frame
  const double c = std::cos(r.yaw), s = std::sin(r.yaw);
  auto to_local = [&](Vec2 p) -> Vec2 {
    const double dx = p.x - r.cx, dy = p.y - r.cy;
    return {c * dx + s * dy, -s * dx + c * dy};
  };
  const Vec2 la = to_local(a), lb = to_local(b);
  const double dx = lb.x - la.x, dy = lb.y - la.y;
  double t0 = 0.0, t1 = 1.0;
  const double half[2] = {0.5 * r.l, 0.5 * r.w};
  const double p0[2] = {la.x, la.y};
  const double d[2] = {dx, dy};
  for (int ax = 0; ax < 2; ++ax) {
    if (std::abs(d[ax]) < 1e-12) {
      if (std::abs(p0[ax]) > half[ax]) return false;
      continue;
    }
    double ta = (-half[ax] - p0[ax]) / d[ax];
    double tb = (half[ax] - p0[ax]) / d[ax];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  // strict interior crossing: entering before the far endpoint, leaving after
  // the near one
  if (t0 >= 1.0 - 1e-9 || t1 <= 1e-9) return false;
  if (t_hit) *t_hit = std::max(t0, 0.0);
  return true;
}

}  // namespace mfdet
