#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "mfdet/train.hpp"

namespace mfdet {

// Training metrics CSV, one flushed row per epoch.
class MetricsWriter {
 public:
  void open(const std::string& path);
  void append(const EpochStats& row);

 private:
  std::ofstream out_;
};

struct EvalRow {
  std::string subset;
  int n_gt = 0;
  double map = 0;
};

// Overall mAP plus near/mid/far range bands and moving/static splits. Band
// edges sit at 0.4 and 2/3 of the grid half-extent, the reference distance
// breakdown rescaled to this grid.
std::vector<EvalRow> evaluate_subsets(const std::vector<EvalSample>& samples, int num_classes,
                                      double half_extent);

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows);
std::string render_eval_table(const std::vector<EvalRow>& rows, double half_extent);

// One scale's dump: per-layer attention records plus the query positions they
// share, in feature-grid cell coordinates.
struct ScaleDump {
  int scale = 3;
  const std::vector<AttnDump>* layers = nullptr;
  const QuerySelection* sel = nullptr;
};

// Rows: scale,layer,query,query_x,query_y,head,frame_age,sample_x,sample_y,weight.
void write_attn_csv(const std::string& path, const std::vector<ScaleDump>& scales);

struct Image {
  int w = 0, h = 0;
  std::vector<unsigned char> rgb;
};

void write_ppm(const std::string& path, const Image& img);

// Feature-magnitude underlay with query cells marked green and the dump's
// sample points drawn as red disks whose radius grows with attention weight.
Image render_attn_overlay(const Tensor<double>& feat, const QuerySelection& sel,
                          const AttnDump& dump, int upscale);

}  // namespace mfdet
