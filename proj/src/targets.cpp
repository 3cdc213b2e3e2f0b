#include <cmath>

#include "mfdet/model.hpp"

namespace mfdet {

namespace {

void mark_heat(std::vector<double>& heat, int& npos, const GroundTruthBox& g,
               const ModelConfig& cfg, int stride) {
  const int rows = cfg.grid.rows() / stride, cols = cfg.grid.cols() / stride;
  const double cell = cfg.grid.voxel * stride;
  const int c = static_cast<int>(std::floor((g.x - cfg.grid.x_min) / cell));
  const int r = static_cast<int>(std::floor((g.y - cfg.grid.y_min) / cell));
  if (c < 0 || c >= cols || r < 0 || r >= rows) return;
  double& v = heat[g.cls * rows * cols + r * cols + c];
  if (v == 0.0) {
    v = 1.0;
    ++npos;
  }
}

}  // namespace

WindowTargets build_targets(const std::vector<GroundTruthBox>& gts, const ModelConfig& cfg) {
  const int rows = cfg.head_rows(), cols = cfg.head_cols();
  const int a_per = cfg.anchors_per_cell();
  const int n_anchor = a_per * rows * cols;

  WindowTargets tg;
  tg.cls.assign(n_anchor, 0);
  tg.gt_index.assign(n_anchor, -1);
  tg.heat3.assign(static_cast<std::size_t>(cfg.num_classes) * (cfg.grid.rows() / 2) *
                      (cfg.grid.cols() / 2),
                  0.0);
  tg.heat2.assign(static_cast<std::size_t>(cfg.num_classes) * (cfg.grid.rows() / 4) *
                      (cfg.grid.cols() / 4),
                  0.0);
  tg.heat1.assign(static_cast<std::size_t>(cfg.num_classes) * (cfg.grid.rows() / 8) *
                      (cfg.grid.cols() / 8),
                  0.0);

  std::vector<double> best_iou(n_anchor, 0.0);
  std::vector<char> forced(n_anchor, 0);
  const double cell = 2.0 * cfg.grid.voxel;

  for (int gi = 0; gi < static_cast<int>(gts.size()); ++gi) {
    const GroundTruthBox& g = gts[gi];
    if (g.cls < 0 || g.cls >= a_per) continue;
    const int a = g.cls;  // one anchor shape per class
    const double reach =
        0.5 * (std::hypot(g.l, g.w) + std::hypot(cfg.anchor_l[a], cfg.anchor_w[a])) + cell;
    int c0 = static_cast<int>(std::floor((g.x - reach - cfg.grid.x_min) / cell));
    int c1 = static_cast<int>(std::floor((g.x + reach - cfg.grid.x_min) / cell));
    int r0 = static_cast<int>(std::floor((g.y - reach - cfg.grid.y_min) / cell));
    int r1 = static_cast<int>(std::floor((g.y + reach - cfg.grid.y_min) / cell));
    c0 = std::max(c0, 0);
    r0 = std::max(r0, 0);
    c1 = std::min(c1, cols - 1);
    r1 = std::min(r1, rows - 1);

    int best_anchor = -1;
    double best_for_gt = 0.0;
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const Anchor an = anchor_at(cfg, a, r, c);
        const double iou = rect_iou({an.x, an.y, an.l, an.w, 0.0}, g.rect());
        if (iou <= 0.0) continue;
        const int idx = a * rows * cols + r * cols + c;
        if (iou > best_iou[idx]) {
          best_iou[idx] = iou;
          if (!forced[idx]) tg.gt_index[idx] = gi;
        }
        if (iou > best_for_gt) {
          best_for_gt = iou;
          best_anchor = idx;
        }
      }
    // every box claims its best overlapping anchor, even below the usual
    // positive threshold; axis-aligned anchors rarely reach it for rotated boxes
    if (best_anchor >= 0 && best_for_gt >= cfg.force_match_min_iou) {
      forced[best_anchor] = 1;
      tg.gt_index[best_anchor] = gi;
    }

    mark_heat(tg.heat3, tg.heat_pos3, g, cfg, 2);
    mark_heat(tg.heat2, tg.heat_pos2, g, cfg, 4);
    mark_heat(tg.heat1, tg.heat_pos1, g, cfg, 8);
  }

  for (int i = 0; i < n_anchor; ++i) {
    if (forced[i] || best_iou[i] >= cfg.match_iou_pos) {
      tg.cls[i] = 1;
      ++tg.num_pos;
    } else if (best_iou[i] > cfg.match_iou_neg) {
      tg.cls[i] = -1;
      tg.gt_index[i] = -1;
    } else {
      tg.gt_index[i] = -1;
    }
  }
  return tg;
}

}  // namespace mfdet
