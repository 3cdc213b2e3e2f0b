#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mfdet/attention.hpp"
#include "mfdet/pillars.hpp"

namespace mfdet {

// Fixed sinusoidal map over a feature grid: the first half of the channels
// encodes x (column), the second half y (row), sin/cos interleaved with
// geometric frequencies. Channel count must be a multiple of 4.
template <typename T>
Tensor<T> positional_encoding(int d, int h, int w) {
  if (d % 4 != 0) throw ConfigError("positional encoding: channels must be a multiple of 4");
  Tensor<T> out = Tensor<T>::zeros({d, h, w});
  const int half = d / 2;
  const int pairs = half / 2;
  for (int i = 0; i < pairs; ++i) {
    const double freq = std::pow(10000.0, -4.0 * i / d);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        out.data()[(2 * i) * h * w + r * w + c] = static_cast<T>(std::sin(c * freq));
        out.data()[(2 * i + 1) * h * w + r * w + c] = static_cast<T>(std::cos(c * freq));
        out.data()[(half + 2 * i) * h * w + r * w + c] = static_cast<T>(std::sin(r * freq));
        out.data()[(half + 2 * i + 1) * h * w + r * w + c] = static_cast<T>(std::cos(r * freq));
      }
  }
  return out;
}

enum class EncodingMode { kBoth, kNoPositional, kNoObjectiveness, kNone };

// Objectiveness encoding: squash the strongest class logit per cell and
// project it up to the feature width with a learned 1x1 conv.
template <typename T>
Tensor<T> objectiveness_encoding(const Tensor<T>& cls_map, const ConvParams<T>& proj) {
  const int h = cls_map.dim(1), w = cls_map.dim(2);
  Tensor<T> strongest = sigmoid(reduce_max(cls_map, 0)).reshaped({1, h, w});
  return conv2d(strongest, proj.w, proj.b, 1, 0);
}

template <typename T>
Tensor<T> combined_encoding(const Tensor<T>& cls_map, const ConvParams<T>& proj, int d,
                            EncodingMode mode) {
  const int h = cls_map.dim(1), w = cls_map.dim(2);
  const bool want_pos = mode == EncodingMode::kBoth || mode == EncodingMode::kNoObjectiveness;
  const bool want_obj = mode == EncodingMode::kBoth || mode == EncodingMode::kNoPositional;
  Tensor<T> enc;
  if (want_pos) enc = positional_encoding<T>(d, h, w);
  if (want_obj) {
    Tensor<T> obj = objectiveness_encoding(cls_map, proj);
    enc = enc.defined() ? add(enc, obj) : obj;
  }
  if (!enc.defined()) enc = Tensor<T>::zeros({d, h, w});
  return enc;
}

struct QuerySelection {
  std::vector<int> cells;    // flat row*W + col, score-descending
  std::vector<double> pos;   // (x, y) per query in this scale's pixel coords
};

// Keep the top ceil(ratio * H * W) cells by sigmoid of the strongest class
// logit. Ties break toward the lower flat index so selection is total-ordered.
template <typename T>
QuerySelection select_queries(const Tensor<T>& cls_map, double ratio) {
  const int ncls = cls_map.dim(0), h = cls_map.dim(1), w = cls_map.dim(2);
  const int cells = h * w;
  int count = static_cast<int>(std::ceil(ratio * cells));
  count = std::max(1, std::min(count, cells));
  std::vector<double> score(cells, -1e30);
  for (int j = 0; j < cells; ++j) {
    for (int c = 0; c < ncls; ++c)
      score[j] = std::max(score[j], static_cast<double>(cls_map.data()[c * cells + j]));
    score[j] = 1.0 / (1.0 + std::exp(-score[j]));
    // a NaN logit must not poison the sort ordering
    if (!std::isfinite(score[j])) score[j] = -1.0;
  }
  std::vector<int> order(cells);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return a < b;
  });
  QuerySelection out;
  for (int i = 0; i < count; ++i) {
    const int j = order[i];
    out.cells.push_back(j);
    out.pos.push_back(static_cast<double>(j % w));
    out.pos.push_back(static_cast<double>(j / w));
  }
  return out;
}

template <typename T>
struct FamScaleParams {
  std::vector<SelfAttentionParams<T>> self_layers;
  std::vector<CrossAttentionParams<T>> cross_layers;  // empty when no past frames
  ConvParams<T> obj_proj;   // 1x1, 1 channel in
  bool has_fuse = false;
  ConvParams<T> fuse_up;    // stride-2 transpose conv from the coarser scale
  ConvParams<T> fuse_conv;  // 3x3 after channel concat

  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    for (std::size_t l = 0; l < self_layers.size(); ++l)
      self_layers[l].named_parameters(prefix + ".self" + std::to_string(l), out);
    for (std::size_t l = 0; l < cross_layers.size(); ++l)
      cross_layers[l].named_parameters(prefix + ".cross" + std::to_string(l), out);
    obj_proj.named_parameters(prefix + ".obj_proj", out);
    if (has_fuse) {
      fuse_up.named_parameters(prefix + ".fuse_up", out);
      fuse_conv.named_parameters(prefix + ".fuse_conv", out);
    }
  }

  std::vector<Tensor<T>*> parameters() {
    NamedParams<T> named;
    named_parameters("", named);
    return detail::strip_names(named);
  }
};

template <typename T>
FamScaleParams<T> make_fam_scale(int d, int d_coarser, int layers, int heads, int n_past,
                                 int k_points, AttnMode mode, std::mt19937_64& rng) {
  if (layers < 1) throw ConfigError("fam: need at least one aggregation layer");
  FamScaleParams<T> p;
  const int ffn_dim = 2 * d;
  for (int l = 0; l < layers; ++l) {
    p.self_layers.push_back(make_self_attention<T>(d, heads, ffn_dim, rng));
    if (n_past > 0)
      p.cross_layers.push_back(
          make_cross_attention<T>(d, heads, n_past, k_points, mode, ffn_dim, rng));
  }
  p.obj_proj = make_conv<T>(d, 1, 1, rng);
  if (d_coarser > 0) {
    p.has_fuse = true;
    p.fuse_up = ConvParams<T>{Tensor<T>::zeros({d_coarser, d, 2, 2}), Tensor<T>::zeros({d})};
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_coarser) * 4));
    fill_uniform(p.fuse_up.w, rng, -bound, bound);
    fill_uniform(p.fuse_up.b, rng, -bound, bound);
    p.fuse_conv = make_conv<T>(d, 2 * d, 3, rng);
  }
  return p;
}

// Upsample the coarser scale's aggregated map and blend it into this scale's
// features. At the coarsest scale there is nothing above: the input passes
// through untouched.
template <typename T>
Tensor<T> fuse_scales(const Tensor<T>& coarser_agg, const Tensor<T>& cur,
                      const FamScaleParams<T>& p) {
  if (!coarser_agg.defined()) return cur;
  if (!p.has_fuse) throw ShapeError("fuse: scale built without fuse parameters");
  Tensor<T> up = transpose_conv2d(coarser_agg, p.fuse_up.w, p.fuse_up.b, 2, 0);
  return relu(conv2d(concat_channels(std::vector<Tensor<T>>{up, cur}), p.fuse_conv.w,
                     p.fuse_conv.b, 1, 1));
}

template <typename T>
struct AggregateResult {
  Tensor<T> agg;                        // fused map with refined queries written back
  std::vector<Tensor<T>> layer_queries; // query features after each layer; size = layers
  QuerySelection sel;
  std::vector<AttnDump> dumps;          // one per layer when requested
};

// One fusion-aggregation pass at a single scale: pick sparse queries from the
// current cls map, refine them through alternating self- and cross-attention
// layers against the past frames, then scatter the refined features back into
// the fused map. With no past frames only the self-attention runs.
template <typename T>
AggregateResult<T> aggregate_scale(const Tensor<T>& fused, const Tensor<T>& cls_map,
                                   const std::vector<Tensor<T>>& past_maps,
                                   const std::vector<Tensor<T>>& past_cls,
                                   const FamScaleParams<T>& p, double query_ratio,
                                   EncodingMode enc_mode, bool want_dumps = false) {
  const int d = fused.dim(0);
  if (past_maps.size() != past_cls.size())
    throw ShapeError("aggregate: past maps and cls maps must pair up");

  AggregateResult<T> out;
  out.sel = select_queries(cls_map, query_ratio);

  Tensor<T> enc_cur = combined_encoding(cls_map, p.obj_proj, d, enc_mode);
  std::vector<Tensor<T>> past_encs;
  for (std::size_t n = 0; n < past_maps.size(); ++n)
    past_encs.push_back(combined_encoding(past_cls[n], p.obj_proj, d, enc_mode));

  Tensor<T> x = gather_cells(fused, out.sel.cells);
  Tensor<T> enc_q = gather_cells(enc_cur, out.sel.cells);

  const bool have_past = !past_maps.empty();
  if (have_past && p.cross_layers.size() != p.self_layers.size())
    throw ShapeError("aggregate: scale built without cross-attention layers");
  for (std::size_t l = 0; l < p.self_layers.size(); ++l) {
    x = self_attention_block(x, enc_q, p.self_layers[l]);
    if (have_past) {
      AttnDump dump;
      x = cross_attention_block(x, enc_q, out.sel.pos, past_maps, past_encs, p.cross_layers[l],
                                want_dumps ? &dump : nullptr);
      if (want_dumps) out.dumps.push_back(std::move(dump));
    }
    out.layer_queries.push_back(x);
  }
  Tensor<T> last = out.layer_queries.empty() ? x : out.layer_queries.back();
  out.agg = scatter_cells(fused, last, out.sel.cells);
  return out;
}

}  // namespace mfdet
