#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mfdet/boxes.hpp"
#include "mfdet/eval.hpp"
#include "mfdet/fam.hpp"
#include "mfdet/synth.hpp"

namespace mfdet {

enum class FrameMode { kSingle, kConcat, kFull };
enum class AggMode { kHierarchical, kSeparate, kSingleScale };

struct ModelConfig {
  GridConfig grid;
  int num_classes = 2;
  int pseudo_channels = 32;
  int c3 = 64, c2 = 128, c1 = 256;  // finest to coarsest scale widths
  int fam_layers = 6;
  int heads = 8;
  int k_points = 8;
  double query_ratio = 0.05;
  int window = 4;  // frames per detection window
  double frame_dt = 0.4;
  FrameMode frame_mode = FrameMode::kFull;
  AggMode agg_mode = AggMode::kHierarchical;
  AttnMode attn_mode = AttnMode::kQueryKey;
  EncodingMode enc_mode = EncodingMode::kBoth;
  std::vector<double> anchor_l = {4.2, 1.0};
  std::vector<double> anchor_w = {1.9, 0.8};
  double match_iou_pos = 0.6, match_iou_neg = 0.45;
  double force_match_min_iou = 0.1;
  double beta_cls = 1.0, beta_loc = 2.0, beta_dir = 0.2, beta_aux = 1.0;
  double focal_alpha = 0.25, focal_gamma = 2.0;
  double smooth_l1_beta = 1.0 / 9.0;
  double score_threshold = 0.1;
  double nms_iou = 0.3;
  int max_detections = 100;

  int head_rows() const { return grid.rows() / 2; }
  int head_cols() const { return grid.cols() / 2; }
  int anchors_per_cell() const { return num_classes; }

  void validate() const {
    grid.validate();
    if (grid.rows() % 8 != 0 || grid.cols() % 8 != 0)
      throw ConfigError("model: grid size must be divisible by 8 for the three stride-2 stages");
    if (num_classes < 1) throw ConfigError("model: need at least one class");
    if (static_cast<int>(anchor_l.size()) != num_classes ||
        static_cast<int>(anchor_w.size()) != num_classes)
      throw ConfigError("model: anchor dims must list one entry per class");
    if (pseudo_channels < 1) throw ConfigError("model: pseudo_channels must be positive");
    for (int c : {c3, c2, c1}) {
      if (c < 4 || c % 4 != 0)
        throw ConfigError("model: scale widths must be positive multiples of 4");
      if (c % heads != 0)
        throw ConfigError("model: scale widths must be divisible by heads");
    }
    if (heads < 1 || k_points < 1 || fam_layers < 1 || window < 1)
      throw ConfigError("model: heads, k_points, fam_layers and window must be positive");
    if (query_ratio <= 0.0 || query_ratio > 1.0)
      throw ConfigError("model: query_ratio must lie in (0, 1]");
    if (match_iou_neg >= match_iou_pos)
      throw ConfigError("model: negative match threshold must be below the positive one");
  }
};

// Anchor a of cell (r, c) on the half-resolution head grid.
inline Anchor anchor_at(const ModelConfig& cfg, int a, int r, int c) {
  const double cell = 2.0 * cfg.grid.voxel;
  Anchor an;
  an.x = cfg.grid.x_min + (c + 0.5) * cell;
  an.y = cfg.grid.y_min + (r + 0.5) * cell;
  an.l = cfg.anchor_l[a];
  an.w = cfg.anchor_w[a];
  an.yaw = 0;
  return an;
}

// Training targets for one window, all laid out to match the head maps:
// anchor index = a * rows * cols + r * cols + c.
struct WindowTargets {
  std::vector<signed char> cls;  // 1 positive, 0 negative, -1 ignored
  std::vector<int> gt_index;     // matched box for positive anchors, else -1
  int num_pos = 0;
  // center-cell heatmaps per backbone scale, [num_classes * h * w], values 0/1
  std::vector<double> heat3, heat2, heat1;
  int heat_pos3 = 0, heat_pos2 = 0, heat_pos1 = 0;
};

WindowTargets build_targets(const std::vector<GroundTruthBox>& gts, const ModelConfig& cfg);

template <typename T>
struct HeadMaps {
  Tensor<T> cls, box, dir;
};

template <typename T>
struct ModelParams {
  PillarEncoderParams<T> pillar;
  BackboneParams<T> backbone;
  FamScaleParams<T> fam1, fam2, fam3;  // coarsest, middle, finest
  ConvParams<T> up1, up2;              // head upsampling from f1 (x4) and f2 (x2)
  ConvParams<T> head_cls, head_box, head_dir;

  void named_base_parameters(NamedParams<T>& out) {
    pillar.named_parameters("pillar", out);
    backbone.named_parameters("backbone", out);
    up1.named_parameters("up1", out);
    up2.named_parameters("up2", out);
    head_cls.named_parameters("head_cls", out);
    head_box.named_parameters("head_box", out);
    head_dir.named_parameters("head_dir", out);
  }

  NamedParams<T> named_parameters(const ModelConfig& cfg) {
    NamedParams<T> out;
    named_base_parameters(out);
    if (cfg.frame_mode != FrameMode::kFull || cfg.window < 2) return out;
    if (cfg.agg_mode != AggMode::kSingleScale) {
      fam1.named_parameters("fam1", out);
      fam2.named_parameters("fam2", out);
    }
    fam3.named_parameters("fam3", out);
    return out;
  }

  std::vector<Tensor<T>*> base_parameters() {
    NamedParams<T> named;
    named_base_parameters(named);
    return detail::strip_names(named);
  }

  std::vector<Tensor<T>*> parameters(const ModelConfig& cfg) {
    return detail::strip_names(named_parameters(cfg));
  }
};

template <typename T>
ModelParams<T> make_model_params(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ModelParams<T> p;
  p.pillar = make_pillar_encoder<T>(cfg.pseudo_channels, rng);
  p.backbone =
      make_backbone<T>(cfg.pseudo_channels, cfg.c3, cfg.c2, cfg.c1, cfg.num_classes, rng);

  const int n_past = cfg.frame_mode == FrameMode::kFull ? cfg.window - 1 : 0;
  if (cfg.frame_mode == FrameMode::kFull && cfg.window > 1) {
    const bool hier = cfg.agg_mode == AggMode::kHierarchical;
    if (cfg.agg_mode != AggMode::kSingleScale) {
      p.fam1 = make_fam_scale<T>(cfg.c1, 0, cfg.fam_layers, cfg.heads, n_past, cfg.k_points,
                                 cfg.attn_mode, rng);
      p.fam2 = make_fam_scale<T>(cfg.c2, hier ? cfg.c1 : 0, cfg.fam_layers, cfg.heads, n_past,
                                 cfg.k_points, cfg.attn_mode, rng);
    }
    p.fam3 = make_fam_scale<T>(cfg.c3, hier ? cfg.c2 : 0, cfg.fam_layers, cfg.heads, n_past,
                               cfg.k_points, cfg.attn_mode, rng);
  }

  p.up1 = ConvParams<T>{Tensor<T>::zeros({cfg.c1, cfg.c1, 4, 4}), Tensor<T>::zeros({cfg.c1})};
  p.up2 = ConvParams<T>{Tensor<T>::zeros({cfg.c2, cfg.c2, 2, 2}), Tensor<T>::zeros({cfg.c2})};
  for (ConvParams<T>* c : {&p.up1, &p.up2}) {
    const int fan = c->w.dim(0) * c->w.dim(2) * c->w.dim(3);
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan)));
    fill_uniform(c->w, rng, -bound, bound);
    fill_uniform(c->b, rng, -bound, bound);
  }
  const int head_in = cfg.c1 + cfg.c2 + cfg.c3;
  const int a = cfg.anchors_per_cell();
  p.head_cls = make_conv<T>(a, head_in, 1, rng);
  p.head_box = make_conv<T>(6 * a, head_in, 1, rng);
  p.head_dir = make_conv<T>(2 * a, head_in, 1, rng);
  return p;
}

template <typename T>
HeadMaps<T> run_head(const Tensor<T>& a1, const Tensor<T>& a2, const Tensor<T>& a3,
                     const ModelParams<T>& p) {
  Tensor<T> u1 = relu(transpose_conv2d(a1, p.up1.w, p.up1.b, 4, 0));
  Tensor<T> u2 = relu(transpose_conv2d(a2, p.up2.w, p.up2.b, 2, 0));
  Tensor<T> cat = concat_channels(std::vector<Tensor<T>>{u1, u2, a3});
  HeadMaps<T> out;
  out.cls = conv2d(cat, p.head_cls.w, p.head_cls.b, 1, 0);
  out.box = conv2d(cat, p.head_box.w, p.head_box.b, 1, 0);
  out.dir = conv2d(cat, p.head_dir.w, p.head_dir.b, 1, 0);
  return out;
}

template <typename T>
struct ModelOutput {
  HeadMaps<T> head;
  std::vector<HeadMaps<T>> layer_heads;  // one per aggregation layer, multi-frame only
  MultiScaleFeatures<T> cur;             // reference-frame backbone pyramid
  std::vector<AttnDump> dumps1, dumps2, dumps3;  // cross-attention per layer, by scale
  QuerySelection sel1, sel2, sel3;
};

namespace detail_model {

inline std::uint64_t frame_seed(std::uint64_t seed, int age) {
  // age 0 (the reference frame) keeps the raw seed so the single-frame and
  // multi-frame paths voxelize the current frame identically
  return seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(age));
}

}  // namespace detail_model

template <typename T>
ModelOutput<T> forward_window(const std::vector<PointCloudFrame>& window,
                              const ModelParams<T>& p, const ModelConfig& cfg,
                              std::uint64_t seed, bool want_dumps = false) {
  if (window.empty()) throw ShapeError("forward: empty frame window");
  const PointCloudFrame& ref = window.back();

  auto encode_frame = [&](const PointCloudFrame& f, std::uint64_t s) {
    PillarSet ps = voxelize(f, cfg.grid, s);
    Tensor<T> img = encode_pillars(ps, p.pillar);
    return backbone_fpn(img, p.backbone);
  };

  const bool base_path = cfg.frame_mode != FrameMode::kFull || window.size() == 1;
  if (base_path) {
    ModelOutput<T> out;
    if (cfg.frame_mode == FrameMode::kConcat && window.size() > 1) {
      PointCloudFrame merged = ref;
      for (std::size_t i = 0; i + 1 < window.size(); ++i) {
        PointCloudFrame comp = ego_compensate(window[i], ref.ego_pose);
        merged.points.insert(merged.points.end(), comp.points.begin(), comp.points.end());
      }
      out.cur = encode_frame(merged, seed);
    } else {
      out.cur = encode_frame(ref, seed);
    }
    out.head = run_head(out.cur.f1, out.cur.f2, out.cur.f3, p);
    return out;
  }

  if (static_cast<int>(window.size()) != cfg.window)
    throw ShapeError("forward: window holds " + std::to_string(window.size()) +
                     " frames, config expects " + std::to_string(cfg.window));

  const int n = static_cast<int>(window.size());
  std::vector<MultiScaleFeatures<T>> feats(n);
  for (int i = 0; i < n; ++i) {
    const int age = n - 1 - i;
    if (age == 0) {
      feats[i] = encode_frame(ref, detail_model::frame_seed(seed, 0));
    } else {
      feats[i] = encode_frame(ego_compensate(window[i], ref.ego_pose),
                              detail_model::frame_seed(seed, age));
    }
  }
  ModelOutput<T> out;
  out.cur = feats[n - 1];

  // past frames ordered most recent first
  auto past_of = [&](int scale) {
    std::pair<std::vector<Tensor<T>>, std::vector<Tensor<T>>> maps;
    for (int age = 1; age < n; ++age) {
      maps.first.push_back(feats[n - 1 - age].feat(scale));
      maps.second.push_back(feats[n - 1 - age].cls(scale));
    }
    return maps;
  };

  const int layers = cfg.fam_layers;
  Tensor<T> agg1, agg2, agg3;
  std::vector<Tensor<T>> layer1, layer2, layer3;  // per-layer scattered maps

  auto run_scale = [&](const Tensor<T>& fused, const Tensor<T>& cls_map,
                       const FamScaleParams<T>& fam, int scale, bool dumps,
                       std::vector<Tensor<T>>& layer_maps) {
    auto past = past_of(scale);
    AggregateResult<T> res = aggregate_scale(fused, cls_map, past.first, past.second, fam,
                                             cfg.query_ratio, cfg.enc_mode, dumps);
    for (int l = 0; l < layers; ++l)
      layer_maps.push_back(scatter_cells(fused, res.layer_queries[l], res.sel.cells));
    if (scale == 1) {
      out.dumps1 = std::move(res.dumps);
      out.sel1 = res.sel;
    } else if (scale == 2) {
      out.dumps2 = std::move(res.dumps);
      out.sel2 = res.sel;
    } else {
      out.dumps3 = std::move(res.dumps);
      out.sel3 = res.sel;
    }
    return res.agg;
  };

  if (cfg.agg_mode == AggMode::kSingleScale) {
    agg1 = out.cur.f1;
    agg2 = out.cur.f2;
    agg3 = run_scale(out.cur.f3, out.cur.cls3, p.fam3, 3, want_dumps, layer3);
    for (int l = 0; l < layers; ++l) {
      layer1.push_back(agg1);
      layer2.push_back(agg2);
    }
  } else if (cfg.agg_mode == AggMode::kSeparate) {
    agg1 = run_scale(out.cur.f1, out.cur.cls1, p.fam1, 1, want_dumps, layer1);
    agg2 = run_scale(out.cur.f2, out.cur.cls2, p.fam2, 2, want_dumps, layer2);
    agg3 = run_scale(out.cur.f3, out.cur.cls3, p.fam3, 3, want_dumps, layer3);
  } else {
    agg1 = run_scale(out.cur.f1, out.cur.cls1, p.fam1, 1, want_dumps, layer1);
    Tensor<T> fused2 = fuse_scales(agg1, out.cur.f2, p.fam2);
    agg2 = run_scale(fused2, out.cur.cls2, p.fam2, 2, want_dumps, layer2);
    Tensor<T> fused3 = fuse_scales(agg2, out.cur.f3, p.fam3);
    agg3 = run_scale(fused3, out.cur.cls3, p.fam3, 3, want_dumps, layer3);
  }

  out.head = run_head(agg1, agg2, agg3, p);
  for (int l = 0; l < layers; ++l)
    out.layer_heads.push_back(run_head(layer1[l], layer2[l], layer3[l], p));
  return out;
}

// Classification focal loss over the full anchor map plus box and direction
// terms on positive anchors, each normalized by the positive count.
template <typename T>
Tensor<T> detection_loss(const HeadMaps<T>& head, const WindowTargets& tg,
                         const std::vector<GroundTruthBox>& gts, const ModelConfig& cfg) {
  const int rows = cfg.head_rows(), cols = cfg.head_cols();
  const int a_per = cfg.anchors_per_cell();
  const int n_anchor = a_per * rows * cols;

  Tensor<T> cls_target = Tensor<T>::zeros({a_per, rows, cols});
  Tensor<T> cls_mask = Tensor<T>::zeros({a_per, rows, cols});
  for (int i = 0; i < n_anchor; ++i) {
    if (tg.cls[i] == 1) cls_target.data()[i] = static_cast<T>(1);
    if (tg.cls[i] >= 0) cls_mask.data()[i] = static_cast<T>(1);
  }
  const T inv_pos = static_cast<T>(1.0 / std::max(1, tg.num_pos));
  Tensor<T> focal = focal_bce_logits(head.cls, cls_target, static_cast<T>(cfg.focal_alpha),
                                     static_cast<T>(cfg.focal_gamma));
  Tensor<T> cls_loss = scale(reduce_sum(mul(focal, cls_mask)), inv_pos);

  Tensor<T> box_sum, dir_sum;
  for (int a = 0; a < a_per; ++a) {
    std::vector<int> cells;
    std::vector<T> residuals;
    std::vector<int> bins;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const int idx = a * rows * cols + r * cols + c;
        if (tg.cls[idx] != 1) continue;
        cells.push_back(r * cols + c);
        const GroundTruthBox& g = gts[tg.gt_index[idx]];
        double enc[kBoxDim];
        encode_box(anchor_at(cfg, a, r, c), g, enc);
        for (double v : enc) residuals.push_back(static_cast<T>(v));
        bins.push_back(direction_bin(g.yaw));
      }
    if (cells.empty()) continue;
    const int np = static_cast<int>(cells.size());

    Tensor<T> box_rows = slice_cols(gather_cells(head.box, cells), a * kBoxDim, kBoxDim);
    Tensor<T> target = Tensor<T>::from({np, kBoxDim}, residuals);
    Tensor<T> huber =
        reduce_sum(smooth_l1(box_rows, target, static_cast<T>(cfg.smooth_l1_beta)));
    box_sum = box_sum.defined() ? add(box_sum, huber) : huber;

    Tensor<T> dir_rows = slice_cols(gather_cells(head.dir, cells), a * 2, 2);
    Tensor<T> xent = reduce_sum(softmax_xent_rows(dir_rows, bins));
    dir_sum = dir_sum.defined() ? add(dir_sum, xent) : xent;
  }

  Tensor<T> loss = scale(cls_loss, static_cast<T>(cfg.beta_cls));
  if (box_sum.defined())
    loss = add(loss, scale(box_sum, static_cast<T>(cfg.beta_loc) * inv_pos));
  if (dir_sum.defined())
    loss = add(loss, scale(dir_sum, static_cast<T>(cfg.beta_dir) * inv_pos));
  return loss;
}

// Focal supervision of the per-scale class maps toward center-cell heatmaps.
// This is what makes the query selection scores informative.
template <typename T>
Tensor<T> heatmap_loss(const MultiScaleFeatures<T>& cur, const WindowTargets& tg,
                       const ModelConfig& cfg) {
  auto one = [&](const Tensor<T>& cls_map, const std::vector<double>& heat, int npos) {
    Tensor<T> target = Tensor<T>::zeros(cls_map.shape());
    for (int i = 0; i < cls_map.numel(); ++i) target.data()[i] = static_cast<T>(heat[i]);
    Tensor<T> focal = focal_bce_logits(cls_map, target, static_cast<T>(cfg.focal_alpha),
                                       static_cast<T>(cfg.focal_gamma));
    return scale(reduce_sum(focal), static_cast<T>(1.0 / std::max(1, npos)));
  };
  Tensor<T> loss = one(cur.cls3, tg.heat3, tg.heat_pos3);
  loss = add(loss, one(cur.cls2, tg.heat2, tg.heat_pos2));
  loss = add(loss, one(cur.cls1, tg.heat1, tg.heat_pos1));
  return loss;
}

template <typename T>
struct LossBundle {
  Tensor<T> base, aggr, total;
};

template <typename T>
LossBundle<T> compute_losses(const ModelOutput<T>& out, const WindowTargets& tg,
                             const std::vector<GroundTruthBox>& gts, const ModelConfig& cfg) {
  LossBundle<T> lb;
  lb.base = detection_loss(out.head, tg, gts, cfg);
  lb.base = add(lb.base, scale(heatmap_loss(out.cur, tg, cfg), static_cast<T>(cfg.beta_aux)));
  if (!out.layer_heads.empty()) {
    Tensor<T> sum;
    for (const HeadMaps<T>& h : out.layer_heads) {
      Tensor<T> dl = detection_loss(h, tg, gts, cfg);
      sum = sum.defined() ? add(sum, dl) : dl;
    }
    lb.aggr = scale(sum, static_cast<T>(1.0 / out.layer_heads.size()));
  } else {
    lb.aggr = Tensor<T>::scalar(0);
  }
  lb.total = add(lb.base, lb.aggr);
  return lb;
}

template <typename T>
std::vector<BoxPrediction> decode_predictions(const HeadMaps<T>& head, const ModelConfig& cfg) {
  const int rows = cfg.head_rows(), cols = cfg.head_cols();
  const int a_per = cfg.anchors_per_cell();
  std::vector<BoxPrediction> cands;
  for (int a = 0; a < a_per; ++a)
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const int cell = r * cols + c;
        const double logit = static_cast<double>(head.cls.data()[a * rows * cols + cell]);
        const double score = 1.0 / (1.0 + std::exp(-logit));
        if (!(score >= cfg.score_threshold)) continue;  // also drops NaN scores
        double res[kBoxDim];
        bool ok = true;
        for (int j = 0; j < kBoxDim; ++j) {
          res[j] = static_cast<double>(
              head.box.data()[(a * kBoxDim + j) * rows * cols + cell]);
          ok = ok && std::isfinite(res[j]);
        }
        if (!ok) continue;
        BoxPrediction p = decode_box(anchor_at(cfg, a, r, c), res);
        p.cls = a;
        p.score = score;
        cands.push_back(p);
      }
  std::vector<BoxPrediction> kept = nms(std::move(cands), cfg.nms_iou);
  if (static_cast<int>(kept.size()) > cfg.max_detections) kept.resize(cfg.max_detections);
  return kept;
}

struct WindowSample {
  std::vector<PointCloudFrame> frames;
  std::vector<GroundTruthBox> gts;  // reference (latest) frame of the window
};

// Split a sequence into disjoint windows; trailing frames that do not fill a
// window are dropped.
inline std::vector<WindowSample> make_windows(const SynthSequence& seq, int window) {
  std::vector<WindowSample> out;
  if (window < 1) throw ConfigError("make_windows: window must be positive");
  for (std::size_t start = 0; start + window <= seq.frames.size(); start += window) {
    WindowSample s;
    for (int i = 0; i < window; ++i) s.frames.push_back(seq.frames[start + i]);
    s.gts = seq.gt[start + window - 1];
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mfdet
