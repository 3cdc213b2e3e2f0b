#include "mfdet/eval.hpp"

#include <algorithm>
#include <cmath>

namespace mfdet {

MatchResult match_sample(const EvalSample& sample, int cls, double dist_threshold,
                         const GtFilter& subset) {
  MatchResult out;
  std::vector<int> gt_idx;
  for (int i = 0; i < static_cast<int>(sample.gts.size()); ++i)
    if (sample.gts[i].cls == cls) {
      gt_idx.push_back(i);
      if (!subset || subset(sample.gts[i])) ++out.n_gt;
    }

  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(sample.preds.size()); ++i)
    if (sample.preds[i].cls == cls) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (sample.preds[a].score != sample.preds[b].score)
      return sample.preds[a].score > sample.preds[b].score;
    return a < b;
  });

  std::vector<bool> taken(gt_idx.size(), false);
  for (int pi : order) {
    const BoxPrediction& p = sample.preds[pi];
    int best = -1;
    double best_d = dist_threshold;
    for (int j = 0; j < static_cast<int>(gt_idx.size()); ++j) {
      if (taken[j]) continue;
      const GroundTruthBox& g = sample.gts[gt_idx[j]];
      const double d = std::hypot(p.x - g.x, p.y - g.y);
      if (d <= best_d) {
        best_d = d;
        best = j;
      }
    }
    if (best < 0) {
      out.scored.push_back({p.score, 0});
    } else {
      taken[best] = true;
      const GroundTruthBox& g = sample.gts[gt_idx[best]];
      if (!subset || subset(g)) out.scored.push_back({p.score, 1});
      // matched but outside the subset: dropped entirely
    }
  }
  return out;
}

double average_precision(std::vector<std::pair<double, int>> scored, int n_gt) {
  if (n_gt <= 0) return 0.0;
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  });
  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (const auto& [score, is_tp] : scored) {
    (void)score;
    is_tp ? ++tp : ++fp;
    recall.push_back(static_cast<double>(tp) / n_gt);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  double ap = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    double best = 0;
    for (std::size_t j = 0; j < recall.size(); ++j)
      if (recall[j] >= r - 1e-12) best = std::max(best, precision[j]);
    ap += best;
  }
  return ap / 101.0;
}

double evaluate_map(const std::vector<EvalSample>& samples,
                    const std::vector<double>& thresholds, int num_classes,
                    const GtFilter& subset) {
  double sum = 0;
  int terms = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    for (double thr : thresholds) {
      std::vector<std::pair<double, int>> pooled;
      int n_gt = 0;
      for (const EvalSample& s : samples) {
        MatchResult m = match_sample(s, cls, thr, subset);
        pooled.insert(pooled.end(), m.scored.begin(), m.scored.end());
        n_gt += m.n_gt;
      }
      if (n_gt == 0) continue;
      sum += average_precision(std::move(pooled), n_gt);
      ++terms;
    }
  }
  return terms > 0 ? sum / terms : 0.0;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  const std::size_t n = std::min(xs.size(), ys.size());
  if (n < 2) return 0.0;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace mfdet
