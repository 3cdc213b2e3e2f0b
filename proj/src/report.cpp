#include "mfdet/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mfdet/config.hpp"

namespace mfdet {

void MetricsWriter::open(const std::string& path) {
  out_.open(path, std::ios::trunc);
  if (!out_) throw ConfigError("metrics: cannot write " + path);
  out_ << "epoch,l_base,l_aggr,l_total,mAP\n";
  out_.flush();
}

void MetricsWriter::append(const EpochStats& row) {
  out_ << row.epoch << "," << format_double(row.l_base) << "," << format_double(row.l_aggr)
       << "," << format_double(row.l_total) << "," << format_double(row.map) << "\n";
  out_.flush();
  if (!out_.good()) throw ConfigError("metrics: write failed");
}

namespace {

const std::vector<double>& map_thresholds() {
  static const std::vector<double> t = {0.5, 1.0, 2.0};
  return t;
}

int count_gts(const std::vector<EvalSample>& samples, const GtFilter& f) {
  int n = 0;
  for (const EvalSample& s : samples)
    for (const GroundTruthBox& g : s.gts)
      if (!f || f(g)) ++n;
  return n;
}

EvalRow subset_row(const std::string& name, const std::vector<EvalSample>& samples,
                   int num_classes, const GtFilter& f) {
  EvalRow row;
  row.subset = name;
  row.n_gt = count_gts(samples, f);
  row.map = evaluate_map(samples, map_thresholds(), num_classes, f);
  return row;
}

}  // namespace

std::vector<EvalRow> evaluate_subsets(const std::vector<EvalSample>& samples, int num_classes,
                                      double half_extent) {
  const double near_edge = 0.4 * half_extent;
  const double mid_edge = half_extent * 2.0 / 3.0;
  auto range_of = [](const GroundTruthBox& g) { return std::hypot(g.x, g.y); };

  std::vector<EvalRow> rows;
  rows.push_back(subset_row("all", samples, num_classes, {}));
  rows.push_back(subset_row("near", samples, num_classes,
                            [=](const GroundTruthBox& g) { return range_of(g) < near_edge; }));
  rows.push_back(subset_row("mid", samples, num_classes, [=](const GroundTruthBox& g) {
    const double r = range_of(g);
    return r >= near_edge && r < mid_edge;
  }));
  rows.push_back(subset_row("far", samples, num_classes,
                            [=](const GroundTruthBox& g) { return range_of(g) >= mid_edge; }));
  rows.push_back(subset_row("moving", samples, num_classes,
                            [](const GroundTruthBox& g) { return g.speed > 0.5; }));
  rows.push_back(subset_row("static", samples, num_classes,
                            [](const GroundTruthBox& g) { return g.speed <= 0.5; }));
  return rows;
}

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("eval: cannot write " + path);
  out << "subset,n_gt,mAP\n";
  for (const EvalRow& r : rows)
    out << r.subset << "," << r.n_gt << "," << format_double(r.map) << "\n";
  if (!out.good()) throw ConfigError("eval: write failed for " + path);
}

std::string render_eval_table(const std::vector<EvalRow>& rows, double half_extent) {
  const double near_edge = 0.4 * half_extent;
  const double mid_edge = half_extent * 2.0 / 3.0;
  auto meters = [](double a, double b) {
    char buf[48];
    if (b < 0) std::snprintf(buf, sizeof(buf), "%.1fm+", a);
    else std::snprintf(buf, sizeof(buf), "%.1f-%.1fm", a, b);
    return std::string(buf);
  };

  std::string out;
  char line[96];
  std::snprintf(line, sizeof(line), "%-10s %-14s %6s %8s\n", "subset", "range", "n_gt", "mAP");
  out += line;
  for (const EvalRow& r : rows) {
    std::string range = "-";
    if (r.subset == "near") range = meters(0, near_edge);
    if (r.subset == "mid") range = meters(near_edge, mid_edge);
    if (r.subset == "far") range = meters(mid_edge, -1);
    std::snprintf(line, sizeof(line), "%-10s %-14s %6d %8.4f\n", r.subset.c_str(),
                  range.c_str(), r.n_gt, r.map);
    out += line;
  }
  return out;
}

void write_attn_csv(const std::string& path, const std::vector<ScaleDump>& scales) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("attn: cannot write " + path);
  out << "scale,layer,query,query_x,query_y,head,frame_age,sample_x,sample_y,weight\n";
  for (const ScaleDump& sd : scales) {
    for (std::size_t layer = 0; layer < sd.layers->size(); ++layer) {
      const AttnDump& d = (*sd.layers)[layer];
      for (int q = 0; q < d.queries; ++q) {
        const double qx = sd.sel->pos[2 * q];
        const double qy = sd.sel->pos[2 * q + 1];
        for (int h = 0; h < d.heads; ++h)
          for (int n = 0; n < d.n_past; ++n)
            for (int k = 0; k < d.k_points; ++k) {
              const double sx = d.locs[h][n][(q * d.k_points + k) * 2];
              const double sy = d.locs[h][n][(q * d.k_points + k) * 2 + 1];
              const double w = d.weights[h][(q * d.n_past + n) * d.k_points + k];
              out << sd.scale << "," << layer << "," << q << "," << format_double(qx) << ","
                  << format_double(qy) << "," << h << "," << (n + 1) << ","
                  << format_double(sx) << "," << format_double(sy) << ","
                  << format_double(w) << "\n";
            }
      }
    }
  }
  if (!out.good()) throw ConfigError("attn: write failed for " + path);
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("ppm: cannot write " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out.good()) throw ConfigError("ppm: write failed for " + path);
}

Image render_attn_overlay(const Tensor<double>& feat, const QuerySelection& sel,
                          const AttnDump& dump, int upscale) {
  const int c = feat.dim(0), h = feat.dim(1), w = feat.dim(2);
  Image img;
  img.w = w * upscale;
  img.h = h * upscale;
  img.rgb.assign(static_cast<std::size_t>(img.w) * img.h * 3, 0);

  std::vector<double> mag(static_cast<std::size_t>(h) * w, 0.0);
  double peak = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sq = 0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = feat.data()[(ch * h + y) * w + x];
        sq += v * v;
      }
      mag[y * w + x] = std::sqrt(sq / c);
      peak = std::max(peak, mag[y * w + x]);
    }

  auto put = [&](int px, int py, int r, int g, int b) {
    if (px < 0 || py < 0 || px >= img.w || py >= img.h) return;
    unsigned char* p = &img.rgb[(static_cast<std::size_t>(py) * img.w + px) * 3];
    p[0] = static_cast<unsigned char>(std::min(255, p[0] + r));
    p[1] = static_cast<unsigned char>(std::min(255, p[1] + g));
    p[2] = static_cast<unsigned char>(std::min(255, p[2] + b));
  };

  for (int py = 0; py < img.h; ++py)
    for (int px = 0; px < img.w; ++px) {
      const double m = mag[(py / upscale) * w + px / upscale];
      const int v = peak > 0 ? static_cast<int>(30 + 170 * m / peak) : 30;
      put(px, py, v, v, v);
    }

  for (std::size_t q = 0; 2 * q + 1 < sel.pos.size(); ++q) {
    const int cx = static_cast<int>(sel.pos[2 * q]) * upscale;
    const int cy = static_cast<int>(sel.pos[2 * q + 1]) * upscale;
    for (int i = 0; i < upscale; ++i) {
      put(cx + i, cy, 0, 120, 0);
      put(cx + i, cy + upscale - 1, 0, 120, 0);
      put(cx, cy + i, 0, 120, 0);
      put(cx + upscale - 1, cy + i, 0, 120, 0);
    }
  }

  for (int hd = 0; hd < dump.heads; ++hd)
    for (int n = 0; n < dump.n_past; ++n)
      for (int q = 0; q < dump.queries; ++q)
        for (int k = 0; k < dump.k_points; ++k) {
          const double sx = dump.locs[hd][n][(q * dump.k_points + k) * 2];
          const double sy = dump.locs[hd][n][(q * dump.k_points + k) * 2 + 1];
          const double wt = dump.weights[hd][(q * dump.n_past + n) * dump.k_points + k];
          if (!std::isfinite(sx) || !std::isfinite(sy)) continue;
          const int cx = static_cast<int>(std::lround((sx + 0.5) * upscale));
          const int cy = static_cast<int>(std::lround((sy + 0.5) * upscale));
          const int rad = std::max(1, static_cast<int>(std::lround(wt * upscale)));
          for (int dy = -rad; dy <= rad; ++dy)
            for (int dx = -rad; dx <= rad; ++dx)
              if (dx * dx + dy * dy <= rad * rad) put(cx + dx, cy + dy, 60, 0, 0);
        }
  return img;
}

}  // namespace mfdet
