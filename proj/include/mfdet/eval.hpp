#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mfdet/boxes.hpp"

namespace mfdet {

struct EvalSample {
  std::vector<BoxPrediction> preds;
  std::vector<GroundTruthBox> gts;
};

// Subset predicate over ground truth (moving-only, range band, ...). Empty
// means all boxes count.
using GtFilter = std::function<bool(const GroundTruthBox&)>;

struct MatchResult {
  std::vector<std::pair<double, int>> scored;  // (score, 1 if true positive)
  int n_gt = 0;
};

// Greedy center-distance matching for one class of one sample: predictions in
// score order claim their nearest unmatched ground truth within the threshold.
// Predictions that claim a box outside the subset are dropped from scoring
// rather than counted as false positives.
MatchResult match_sample(const EvalSample& sample, int cls, double dist_threshold,
                         const GtFilter& subset = {});

// 101-point interpolated average precision from pooled scored detections.
double average_precision(std::vector<std::pair<double, int>> scored, int n_gt);

// Mean AP over classes and center-distance thresholds. Classes absent from
// the ground truth are left out of the mean.
double evaluate_map(const std::vector<EvalSample>& samples,
                    const std::vector<double>& thresholds, int num_classes,
                    const GtFilter& subset = {});

double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace mfdet
