#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mfdet/geom.hpp"

namespace mfdet {

struct GroundTruthBox {
  double x = 0, y = 0;
  double l = 1, w = 1;   // length along heading, width across
  double yaw = 0;
  int cls = 0;
  int object_id = -1;
  double speed = 0;      // ground speed, for moving/static splits

  OrientedRect rect() const { return {x, y, l, w, yaw}; }
};

struct BoxPrediction {
  double x = 0, y = 0, l = 1, w = 1, yaw = 0;
  int cls = 0;
  double score = 0;

  OrientedRect rect() const { return {x, y, l, w, yaw}; }
};

struct Anchor {
  double x = 0, y = 0, l = 1, w = 1, yaw = 0;

  double diag() const { return std::sqrt(l * l + w * w); }
};

// Residual layout: dx, dy, dl, dw, dsin, dcos. Center offsets are normalized
// by the anchor diagonal, sizes are log ratios, orientation is the raw
// difference of sin/cos so decode can recover yaw with atan2.
constexpr int kBoxDim = 6;

inline void encode_box(const Anchor& a, const GroundTruthBox& g, double* out) {
  const double d = a.diag();
  out[0] = (g.x - a.x) / d;
  out[1] = (g.y - a.y) / d;
  out[2] = std::log(g.l / a.l);
  out[3] = std::log(g.w / a.w);
  out[4] = std::sin(g.yaw) - std::sin(a.yaw);
  out[5] = std::cos(g.yaw) - std::cos(a.yaw);
}

inline BoxPrediction decode_box(const Anchor& a, const double* r) {
  BoxPrediction p;
  const double d = a.diag();
  p.x = a.x + r[0] * d;
  p.y = a.y + r[1] * d;
  p.l = a.l * std::exp(r[2]);
  p.w = a.w * std::exp(r[3]);
  p.yaw = std::atan2(r[4] + std::sin(a.yaw), r[5] + std::cos(a.yaw));
  return p;
}

// Direction bin disambiguates the sin/cos decode's front/back symmetry in
// training targets: bin 1 for yaw in [0, pi), 0 otherwise.
inline int direction_bin(double yaw) { return wrap_angle(yaw) >= 0.0 ? 1 : 0; }

// Greedy rotated-IoU suppression within each class; input order is not
// assumed sorted.
inline std::vector<BoxPrediction> nms(std::vector<BoxPrediction> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const BoxPrediction& a, const BoxPrediction& b) { return a.score > b.score; });
  std::vector<BoxPrediction> kept;
  std::vector<bool> dead(boxes.size(), false);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(boxes[i]);
    for (std::size_t j = i + 1; j < boxes.size(); ++j) {
      if (dead[j] || boxes[j].cls != boxes[i].cls) continue;
      if (rect_iou(boxes[i].rect(), boxes[j].rect()) > iou_threshold) dead[j] = true;
    }
  }
  return kept;
}

}  // namespace mfdet
