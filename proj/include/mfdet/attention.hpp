#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mfdet/ops.hpp"

namespace mfdet {

template <typename T>
struct LinearParams {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  std::vector<Tensor<T>*> parameters() { return {&w, &b}; }
  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

template <typename T>
LinearParams<T> make_linear(int in, int out, std::mt19937_64& rng, bool zero = false) {
  LinearParams<T> p;
  p.w = Tensor<T>::zeros({in, out});
  p.b = Tensor<T>::zeros({out});
  if (!zero) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    fill_uniform(p.w, rng, -bound, bound);
    fill_uniform(p.b, rng, -bound, bound);
  }
  return p;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  return add_rowvec(matmul(x, p.w), p.b);
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;

  std::vector<Tensor<T>*> parameters() { return {&gamma, &beta}; }
  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

template <typename T>
LayerNormParams<T> make_layer_norm(int d) {
  LayerNormParams<T> p;
  p.gamma = Tensor<T>::full({d}, static_cast<T>(1));
  p.beta = Tensor<T>::zeros({d});
  return p;
}

template <typename T>
struct SelfAttentionParams {
  int heads = 1;
  LinearParams<T> q, k, v, o, ffn1, ffn2;
  LayerNormParams<T> ln1, ln2;

  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    q.named_parameters(prefix + ".q", out);
    k.named_parameters(prefix + ".k", out);
    v.named_parameters(prefix + ".v", out);
    o.named_parameters(prefix + ".o", out);
    ffn1.named_parameters(prefix + ".ffn1", out);
    ffn2.named_parameters(prefix + ".ffn2", out);
    ln1.named_parameters(prefix + ".ln1", out);
    ln2.named_parameters(prefix + ".ln2", out);
  }
  std::vector<Tensor<T>*> parameters() {
    NamedParams<T> named;
    named_parameters("", named);
    return detail::strip_names(named);
  }
};

template <typename T>
SelfAttentionParams<T> make_self_attention(int d, int heads, int ffn_dim,
                                           std::mt19937_64& rng) {
  if (heads < 1 || d % heads != 0)
    throw ConfigError("attention: feature dim must be a positive multiple of heads");
  SelfAttentionParams<T> p;
  p.heads = heads;
  p.q = make_linear<T>(d, d, rng);
  p.k = make_linear<T>(d, d, rng);
  p.v = make_linear<T>(d, d, rng);
  p.o = make_linear<T>(d, d, rng);
  p.ffn1 = make_linear<T>(d, ffn_dim, rng);
  p.ffn2 = make_linear<T>(ffn_dim, d, rng);
  p.ln1 = make_layer_norm<T>(d);
  p.ln2 = make_layer_norm<T>(d);
  return p;
}

// Scaled dot-product attention over the query set itself. Positional encodings
// go into queries and keys only, never values. Returns the pre-residual output.
template <typename T>
Tensor<T> mhsa_core(const Tensor<T>& x, const Tensor<T>& enc,
                    const SelfAttentionParams<T>& p) {
  const int d = x.dim(1);
  const int dh = d / p.heads;
  Tensor<T> qin = enc.defined() ? add(x, enc) : x;
  Tensor<T> qq = linear(qin, p.q);
  Tensor<T> kk = linear(qin, p.k);
  Tensor<T> vv = linear(x, p.v);
  std::vector<Tensor<T>> heads;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < p.heads; ++h) {
    Tensor<T> qh = slice_cols(qq, h * dh, dh);
    Tensor<T> kh = slice_cols(kk, h * dh, dh);
    Tensor<T> vh = slice_cols(vv, h * dh, dh);
    Tensor<T> logits = scale(matmul(qh, transpose2d(kh)), inv_scale);
    Tensor<T> w = softmax(logits, 1);
    heads.push_back(matmul(w, vh));
  }
  return linear(concat_cols(heads), p.o);
}

template <typename T>
Tensor<T> ffn_apply(const Tensor<T>& y, const LinearParams<T>& f1, const LinearParams<T>& f2) {
  return linear(relu(linear(y, f1)), f2);
}

template <typename T>
Tensor<T> self_attention_block(const Tensor<T>& x, const Tensor<T>& enc,
                               const SelfAttentionParams<T>& p) {
  Tensor<T> y = layer_norm(add(x, mhsa_core(x, enc, p)), p.ln1.gamma, p.ln1.beta);
  return layer_norm(add(y, ffn_apply(y, p.ffn1, p.ffn2)), p.ln2.gamma, p.ln2.beta);
}

enum class AttnMode { kQueryKey, kProjected };

template <typename T>
struct CrossAttentionParams {
  AttnMode mode = AttnMode::kQueryKey;
  int heads = 1, n_past = 1, k_points = 1;
  LinearParams<T> offset;       // [d, heads*n_past*k_points*2], zero weights,
                                // bias a per-head ray of k_points radii
  LinearParams<T> q, k, v, o;   // k is query-key mode only
  LinearParams<T> weight_proj;  // projected mode only, zero at init, fed q(x)
  LinearParams<T> ffn1, ffn2;
  LayerNormParams<T> ln1, ln2;

  void named_parameters(const std::string& prefix, NamedParams<T>& out) {
    offset.named_parameters(prefix + ".offset", out);
    q.named_parameters(prefix + ".q", out);
    v.named_parameters(prefix + ".v", out);
    o.named_parameters(prefix + ".o", out);
    ffn1.named_parameters(prefix + ".ffn1", out);
    ffn2.named_parameters(prefix + ".ffn2", out);
    if (mode == AttnMode::kQueryKey) {
      k.named_parameters(prefix + ".k", out);
    } else {
      weight_proj.named_parameters(prefix + ".weight_proj", out);
    }
    ln1.named_parameters(prefix + ".ln1", out);
    ln2.named_parameters(prefix + ".ln2", out);
  }
  std::vector<Tensor<T>*> parameters() {
    NamedParams<T> named;
    named_parameters("", named);
    return detail::strip_names(named);
  }
};

template <typename T>
CrossAttentionParams<T> make_cross_attention(int d, int heads, int n_past, int k_points,
                                             AttnMode mode, int ffn_dim,
                                             std::mt19937_64& rng) {
  if (heads < 1 || d % heads != 0)
    throw ConfigError("attention: feature dim must be a positive multiple of heads");
  if (n_past < 1 || k_points < 1)
    throw ConfigError("attention: n_past and k_points must be positive");
  CrossAttentionParams<T> p;
  p.mode = mode;
  p.heads = heads;
  p.n_past = n_past;
  p.k_points = k_points;
  p.offset = make_linear<T>(d, heads * n_past * k_points * 2, rng, /*zero=*/true);
  // Zero weights keep start-of-training samples independent of content, but
  // the bias must spread each head's points along its own ray; points left
  // coincident see identical gradients and never separate.
  for (int h = 0; h < heads; ++h) {
    const double th = 2.0 * M_PI * h / heads;
    for (int n = 0; n < n_past; ++n)
      for (int k = 0; k < k_points; ++k) {
        const double r = 0.5 * (k + 1);
        const int at = ((h * n_past + n) * k_points + k) * 2;
        p.offset.b.data()[at] = static_cast<T>(std::cos(th) * r);
        p.offset.b.data()[at + 1] = static_cast<T>(std::sin(th) * r);
      }
  }
  p.q = make_linear<T>(d, d, rng);
  p.v = make_linear<T>(d, d, rng);
  p.o = make_linear<T>(d, d, rng);
  if (mode == AttnMode::kQueryKey) {
    p.k = make_linear<T>(d, d, rng);
  } else {
    p.weight_proj = make_linear<T>(d, heads * n_past * k_points, rng, /*zero=*/true);
  }
  p.ffn1 = make_linear<T>(d, ffn_dim, rng);
  p.ffn2 = make_linear<T>(ffn_dim, d, rng);
  p.ln1 = make_layer_norm<T>(d);
  p.ln2 = make_layer_norm<T>(d);
  return p;
}

// Running count of attention samples (query x head x frame x point), for
// checking that cost scales with the query set rather than the map area.
inline std::uint64_t& attn_sample_ops() {
  static std::uint64_t n = 0;
  return n;
}

struct AttnDump {
  int heads = 0, n_past = 0, k_points = 0, queries = 0;
  // locs[h][n] holds queries*k_points*2 sample coordinates (x then y);
  // weights[h] holds queries*(n_past*k_points) softmax weights, frame-major.
  std::vector<std::vector<std::vector<double>>> locs;
  std::vector<std::vector<double>> weights;
};

// Deformable cross-attention from current-frame queries into past feature
// maps. Sample locations are the query position plus a learned offset, one set
// per (head, frame, point). Attention weights are a joint softmax across all
// frames' points. In kQueryKey mode logits come from query-key dot products at
// the sampled locations; kProjected predicts them from the query feature alone.
template <typename T>
Tensor<T> deformable_cross_core(const Tensor<T>& x, const Tensor<T>& enc,
                                const std::vector<double>& query_pos,
                                const std::vector<Tensor<T>>& past_maps,
                                const std::vector<Tensor<T>>& past_encs,
                                const CrossAttentionParams<T>& p,
                                AttnDump* dump = nullptr) {
  const int m = x.dim(0);
  const int d = x.dim(1);
  const int dh = d / p.heads;
  const int np = p.n_past;
  const int kp = p.k_points;
  if (static_cast<int>(past_maps.size()) != np || static_cast<int>(past_encs.size()) != np)
    throw ShapeError("cross attention: expected " + std::to_string(np) + " past maps");
  if (static_cast<int>(query_pos.size()) != 2 * m)
    throw ShapeError("cross attention: query_pos must hold one (x, y) pair per query");

  Tensor<T> qin = enc.defined() ? add(x, enc) : x;
  Tensor<T> offs = linear(qin, p.offset);  // [m, heads*np*kp*2]

  Tensor<T> pos_tile = Tensor<T>::zeros({m, kp * 2});
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < kp; ++k) {
      pos_tile.data()[i * kp * 2 + k * 2] = static_cast<T>(query_pos[i * 2]);
      pos_tile.data()[i * kp * 2 + k * 2 + 1] = static_cast<T>(query_pos[i * 2 + 1]);
    }

  // [m, heads*np*kp] logits, projected mode; both modes share the query
  // projection so only the weight mechanism differs between them
  Tensor<T> proj_w;
  if (p.mode == AttnMode::kProjected) proj_w = linear(linear(qin, p.q), p.weight_proj);

  attn_sample_ops() += static_cast<std::uint64_t>(m) * p.heads * np * kp;
  if (dump) {
    dump->heads = p.heads;
    dump->n_past = np;
    dump->k_points = kp;
    dump->queries = m;
    dump->locs.assign(p.heads, std::vector<std::vector<double>>(np));
    dump->weights.assign(p.heads, {});
  }

  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor<T>> head_outs;
  for (int h = 0; h < p.heads; ++h) {
    Tensor<T> qh;
    if (p.mode == AttnMode::kQueryKey) {
      Tensor<T> wq = slice_cols(p.q.w, h * dh, dh);
      Tensor<T> bq = slice_cols(p.q.b.reshaped({1, d}), h * dh, dh).reshaped({dh});
      qh = add_rowvec(matmul(qin, wq), bq);
    }
    std::vector<Tensor<T>> frame_logits;   // each [m, kp]
    std::vector<Tensor<T>> frame_vals;     // each [m*kp, dh]
    for (int n = 0; n < np; ++n) {
      Tensor<T> o_slice = slice_cols(offs, ((h * np + n) * kp) * 2, kp * 2);
      Tensor<T> locs = add(o_slice, pos_tile).reshaped({m * kp, 2});
      Tensor<T> feat = bilinear_sample(past_maps[n], locs);  // [m*kp, d]

      Tensor<T> wv = slice_cols(p.v.w, h * dh, dh);
      Tensor<T> bv = slice_cols(p.v.b.reshaped({1, d}), h * dh, dh).reshaped({dh});
      frame_vals.push_back(add_rowvec(matmul(feat, wv), bv));

      if (p.mode == AttnMode::kQueryKey) {
        Tensor<T> kenc = bilinear_sample(past_encs[n], locs);
        Tensor<T> kin = add(feat, kenc);
        Tensor<T> wk = slice_cols(p.k.w, h * dh, dh);
        Tensor<T> bk = slice_cols(p.k.b.reshaped({1, d}), h * dh, dh).reshaped({dh});
        Tensor<T> kh = add_rowvec(matmul(kin, wk), bk);
        frame_logits.push_back(block_dot(qh, kh, kp));
      } else {
        frame_logits.push_back(slice_cols(proj_w, (h * np + n) * kp, kp));
      }

      if (dump) {
        dump->locs[h][n].resize(static_cast<std::size_t>(m) * kp * 2);
        for (int i = 0; i < m * kp * 2; ++i)
          dump->locs[h][n][i] = static_cast<double>(locs.data()[i]);
      }
    }
    Tensor<T> joint = concat_cols(frame_logits);  // [m, np*kp]
    if (p.mode == AttnMode::kQueryKey) joint = scale(joint, inv_scale);
    Tensor<T> w = softmax(joint, 1);
    if (dump) {
      dump->weights[h].resize(static_cast<std::size_t>(m) * np * kp);
      for (int i = 0; i < m * np * kp; ++i)
        dump->weights[h][i] = static_cast<double>(w.data()[i]);
    }
    Tensor<T> mixed;
    for (int n = 0; n < np; ++n) {
      Tensor<T> part = block_mix(slice_cols(w, n * kp, kp), frame_vals[n]);
      mixed = mixed.defined() ? add(mixed, part) : part;
    }
    head_outs.push_back(mixed);
  }
  return linear(concat_cols(head_outs), p.o);
}

template <typename T>
Tensor<T> cross_attention_block(const Tensor<T>& x, const Tensor<T>& enc,
                                const std::vector<double>& query_pos,
                                const std::vector<Tensor<T>>& past_maps,
                                const std::vector<Tensor<T>>& past_encs,
                                const CrossAttentionParams<T>& p,
                                AttnDump* dump = nullptr) {
  Tensor<T> core = deformable_cross_core(x, enc, query_pos, past_maps, past_encs, p, dump);
  Tensor<T> y = layer_norm(add(x, core), p.ln1.gamma, p.ln1.beta);
  return layer_norm(add(y, ffn_apply(y, p.ffn1, p.ffn2)), p.ln2.gamma, p.ln2.beta);
}

}  // namespace mfdet
