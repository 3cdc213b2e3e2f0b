#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "mfdet/attention.hpp"
#include "mfdet/gradcheck.hpp"

using namespace mfdet;

namespace {

Tensor<double> none;

std::vector<double> project(const std::vector<double>& x, const LinearParams<double>& p,
                            int col0, int ncols) {
  const int in = p.w.dim(0);
  std::vector<double> out(ncols);
  for (int j = 0; j < ncols; ++j) {
    double acc = p.b.data()[col0 + j];
    for (int i = 0; i < in; ++i) acc += x[i] * p.w.data()[i * p.w.dim(1) + col0 + j];
    out[j] = acc;
  }
  return out;
}

// Dense single-query attention over every cell of a small map, computed with
// plain loops. The deformable core with K = H*W samples pinned at the cell
// centers must match this exactly.
std::vector<double> dense_attention_oracle(const std::vector<double>& x_plus_enc,
                                           const Tensor<double>& map,
                                           const Tensor<double>& enc_map,
                                           const CrossAttentionParams<double>& p) {
  const int d = map.dim(0);
  const int cells = map.dim(1) * map.dim(2);
  const int dh = d / p.heads;
  std::vector<double> concat(d);
  for (int h = 0; h < p.heads; ++h) {
    std::vector<double> q = project(x_plus_enc, p.q, h * dh, dh);
    std::vector<double> logits(cells);
    for (int j = 0; j < cells; ++j) {
      std::vector<double> kin(d);
      for (int c = 0; c < d; ++c) kin[c] = map.data()[c * cells + j] + enc_map.data()[c * cells + j];
      std::vector<double> k = project(kin, p.k, h * dh, dh);
      double dot = 0;
      for (int c = 0; c < dh; ++c) dot += q[c] * k[c];
      logits[j] = dot / std::sqrt(static_cast<double>(dh));
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0;
    for (double& v : logits) {
      v = std::exp(v - mx);
      z += v;
    }
    for (int j = 0; j < cells; ++j) {
      std::vector<double> vin(d);
      for (int c = 0; c < d; ++c) vin[c] = map.data()[c * cells + j];
      std::vector<double> val = project(vin, p.v, h * dh, dh);
      for (int c = 0; c < dh; ++c) concat[h * dh + c] += logits[j] / z * val[c];
    }
  }
  return project(concat, p.o, 0, d);
}

Tensor<double> rand_t(std::vector<int> shape, std::mt19937_64& rng, double lo = -1,
                      double hi = 1) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  fill_uniform(t, rng, lo, hi);
  return t;
}

}  // namespace

TEST_CASE("deformable attention with samples at every cell equals dense attention") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 24; ++trial) {
    const int hgrid = 2 + static_cast<int>(rng() % 3);  // 2..4
    const int wgrid = 2 + static_cast<int>(rng() % 3);
    const int cells = hgrid * wgrid;
    const int d = 8;
    const int heads = (trial % 2 == 0) ? 2 : 4;
    auto p = make_cross_attention<double>(d, heads, 1, cells, AttnMode::kQueryKey, 2 * d, rng);

    const double qx = 0.3 + 0.4 * (wgrid - 1), qy = 0.6;
    for (int h = 0; h < heads; ++h)
      for (int k = 0; k < cells; ++k) {
        const int row = k / wgrid, col = k % wgrid;
        p.offset.b.data()[(h * cells + k) * 2] = col - qx;
        p.offset.b.data()[(h * cells + k) * 2 + 1] = row - qy;
      }

    Tensor<double> map = rand_t({d, hgrid, wgrid}, rng);
    Tensor<double> enc_map = rand_t({d, hgrid, wgrid}, rng);
    Tensor<double> x = rand_t({1, d}, rng);
    Tensor<double> enc = rand_t({1, d}, rng);

    Tensor<double> out = deformable_cross_core(x, enc, {qx, qy}, {map}, {enc_map}, p);

    std::vector<double> xe(d);
    for (int i = 0; i < d; ++i) xe[i] = x.data()[i] + enc.data()[i];
    std::vector<double> want = dense_attention_oracle(xe, map, enc_map, p);
    for (int i = 0; i < d; ++i)
      CHECK(out.data()[i] == doctest::Approx(want[i]).epsilon(1e-9));
  }
}

TEST_CASE("attention weights are a joint softmax across frames") {
  std::mt19937_64 rng(7);
  const int d = 8, m = 5, np = 3, kp = 4;
  auto p = make_cross_attention<double>(d, 2, np, kp, AttnMode::kQueryKey, 16, rng);
  fill_uniform(p.offset.b, rng, -0.5, 0.5);
  std::vector<Tensor<double>> maps, encs;
  for (int n = 0; n < np; ++n) {
    maps.push_back(rand_t({d, 6, 6}, rng));
    encs.push_back(rand_t({d, 6, 6}, rng));
  }
  Tensor<double> x = rand_t({m, d}, rng);
  std::vector<double> pos;
  for (int i = 0; i < m; ++i) {
    pos.push_back(1.0 + 0.7 * i);
    pos.push_back(2.0 + 0.4 * i);
  }
  AttnDump dump;
  deformable_cross_core(x, none, pos, maps, encs, p, &dump);
  REQUIRE(dump.heads == 2);
  REQUIRE(dump.n_past == np);
  for (int h = 0; h < 2; ++h)
    for (int q = 0; q < m; ++q) {
      double sum = 0;
      for (int i = 0; i < np * kp; ++i) sum += dump.weights[h][q * np * kp + i];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  // with random init the two heads should not produce identical weights
  bool differ = false;
  for (std::size_t i = 0; i < dump.weights[0].size(); ++i)
    if (std::abs(dump.weights[0][i] - dump.weights[1][i]) > 1e-6) differ = true;
  CHECK(differ);
}

TEST_CASE("fresh offsets ring each query identically regardless of content") {
  std::mt19937_64 rng(13);
  const int d = 4, m = 3, np = 2, kp = 3, heads = 2;
  auto p = make_cross_attention<double>(d, heads, np, kp, AttnMode::kQueryKey, 8, rng);
  std::vector<Tensor<double>> maps = {rand_t({d, 5, 5}, rng), rand_t({d, 5, 5}, rng)};
  std::vector<Tensor<double>> encs = {rand_t({d, 5, 5}, rng), rand_t({d, 5, 5}, rng)};
  Tensor<double> x1 = rand_t({m, d}, rng);
  Tensor<double> x2 = rand_t({m, d}, rng);
  std::vector<double> pos = {1.25, 2.5, 3.0, 0.75, 2.0, 4.0};

  AttnDump d1, d2;
  deformable_cross_core(x1, none, pos, maps, encs, p, &d1);
  deformable_cross_core(x2, none, pos, maps, encs, p, &d2);

  for (int h = 0; h < heads; ++h) {
    const double th = 2.0 * M_PI * h / heads;
    for (int n = 0; n < np; ++n)
      for (int q = 0; q < m; ++q)
        for (int k = 0; k < kp; ++k) {
          const double ex = pos[q * 2] + std::cos(th) * 0.5 * (k + 1);
          const double ey = pos[q * 2 + 1] + std::sin(th) * 0.5 * (k + 1);
          CHECK(d1.locs[h][n][(q * kp + k) * 2] == doctest::Approx(ex));
          CHECK(d1.locs[h][n][(q * kp + k) * 2 + 1] == doctest::Approx(ey));
          // zero offset weights make the ring independent of query content
          CHECK(d1.locs[h][n][(q * kp + k) * 2] == d2.locs[h][n][(q * kp + k) * 2]);
        }
  }

  // distinct start locations per point and per head, so gradients can differ
  CHECK(d1.locs[0][0][0] != d1.locs[0][0][2]);
  CHECK(d1.locs[0][0][0] != d1.locs[1][0][0]);
}

TEST_CASE("projected mode at zero init gives uniform weights independent of content") {
  std::mt19937_64 rng(17);
  const int d = 4, m = 2, np = 2, kp = 4;
  auto p = make_cross_attention<double>(d, 2, np, kp, AttnMode::kProjected, 8, rng);
  std::vector<Tensor<double>> maps1 = {rand_t({d, 4, 4}, rng), rand_t({d, 4, 4}, rng)};
  std::vector<Tensor<double>> maps2 = {rand_t({d, 4, 4}, rng), rand_t({d, 4, 4}, rng)};
  std::vector<Tensor<double>> encs = {rand_t({d, 4, 4}, rng), rand_t({d, 4, 4}, rng)};
  Tensor<double> x = rand_t({m, d}, rng);
  std::vector<double> pos = {1.0, 1.0, 2.0, 2.0};

  AttnDump d1, d2;
  deformable_cross_core(x, none, pos, maps1, encs, p, &d1);
  deformable_cross_core(x, none, pos, maps2, encs, p, &d2);
  const double uniform = 1.0 / (np * kp);
  for (std::size_t i = 0; i < d1.weights[0].size(); ++i) {
    CHECK(d1.weights[0][i] == doctest::Approx(uniform));
    CHECK(d1.weights[1][i] == doctest::Approx(uniform));
  }
  // weights never see the maps in projected mode
  std::mt19937_64 rng2(29);
  fill_uniform(p.weight_proj.w, rng2, -1.0, 1.0);
  fill_uniform(p.weight_proj.b, rng2, -1.0, 1.0);
  AttnDump d3, d4;
  deformable_cross_core(x, none, pos, maps1, encs, p, &d3);
  deformable_cross_core(x, none, pos, maps2, encs, p, &d4);
  for (int h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < d3.weights[h].size(); ++i)
      CHECK(d3.weights[h][i] == doctest::Approx(d4.weights[h][i]).epsilon(1e-12));
}

TEST_CASE("sample count scales with queries, not map size") {
  std::mt19937_64 rng(19);
  const int d = 4, np = 2, kp = 4, heads = 2;
  auto p = make_cross_attention<double>(d, heads, np, kp, AttnMode::kQueryKey, 8, rng);
  auto run = [&](int m, int grid) {
    std::vector<Tensor<double>> maps = {rand_t({d, grid, grid}, rng),
                                        rand_t({d, grid, grid}, rng)};
    std::vector<Tensor<double>> encs = {rand_t({d, grid, grid}, rng),
                                        rand_t({d, grid, grid}, rng)};
    Tensor<double> x = rand_t({m, d}, rng);
    std::vector<double> pos(2 * m, 1.5);
    attn_sample_ops() = 0;
    deformable_cross_core(x, none, pos, maps, encs, p);
    return attn_sample_ops();
  };
  CHECK(run(3, 4) == 3ull * heads * np * kp);
  CHECK(run(6, 4) == 6ull * heads * np * kp);
  CHECK(run(3, 32) == run(3, 4));  // 64x the cells, same sample count
}

TEST_CASE("self-attention with one query reduces to the value path") {
  std::mt19937_64 rng(23);
  const int d = 6;
  auto p = make_self_attention<double>(d, 3, 12, rng);
  Tensor<double> x = rand_t({1, d}, rng);
  Tensor<double> out = mhsa_core(x, none, p);
  // softmax over a single key is 1, so the core is o(v(x)) regardless of q, k
  std::vector<double> xv(x.data().begin(), x.data().end());
  std::vector<double> v = project(xv, p.v, 0, d);
  std::vector<double> want = project(v, p.o, 0, d);
  for (int i = 0; i < d; ++i)
    CHECK(out.data()[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("self-attention is permutation equivariant") {
  std::mt19937_64 rng(31);
  const int d = 8, m = 6;
  auto p = make_self_attention<double>(d, 2, 16, rng);
  Tensor<double> x = rand_t({m, d}, rng);
  Tensor<double> enc = rand_t({m, d}, rng);
  std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  Tensor<double> xp = Tensor<double>::zeros({m, d});
  Tensor<double> encp = Tensor<double>::zeros({m, d});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) {
      xp.data()[i * d + j] = x.data()[perm[i] * d + j];
      encp.data()[i * d + j] = enc.data()[perm[i] * d + j];
    }
  Tensor<double> a = self_attention_block(x, enc, p);
  Tensor<double> b = self_attention_block(xp, encp, p);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(b.data()[i * d + j] == doctest::Approx(a.data()[perm[i] * d + j]).epsilon(1e-10));
}

TEST_CASE("self-attention block gradients match finite differences") {
  std::mt19937_64 rng(37);
  const int d = 4, m = 3;
  auto p = make_self_attention<double>(d, 2, 8, rng);
  Tensor<double> x = rand_t({m, d}, rng);
  Tensor<double> enc = rand_t({m, d}, rng);
  Tensor<double> probe = rand_t({m, d}, rng);
  double err = finite_diff_check_multi(
      [&]() { return reduce_sum(mul(self_attention_block(x, enc, p), probe)); },
      {&x, &p.q.w, &p.v.b, &p.o.w, &p.ffn1.w, &p.ln1.gamma, &p.ln2.beta});
  CHECK(err < 1e-4);
}

TEST_CASE("cross-attention block gradients match finite differences") {
  std::mt19937_64 rng(47);
  const int d = 4, m = 2, np = 2, kp = 2;
  for (AttnMode mode : {AttnMode::kQueryKey, AttnMode::kProjected}) {
    auto p = make_cross_attention<double>(d, 2, np, kp, mode, 8, rng);
    fill_uniform(p.offset.b, rng, -0.6, 0.6);  // keep samples off the pixel lattice
    if (mode == AttnMode::kProjected) {
      fill_uniform(p.weight_proj.w, rng, -0.3, 0.3);
      fill_uniform(p.weight_proj.b, rng, -0.3, 0.3);
    }
    std::vector<Tensor<double>> maps = {rand_t({d, 5, 5}, rng), rand_t({d, 5, 5}, rng)};
    std::vector<Tensor<double>> encs = {rand_t({d, 5, 5}, rng), rand_t({d, 5, 5}, rng)};
    Tensor<double> x = rand_t({m, d}, rng);
    Tensor<double> enc = rand_t({m, d}, rng);
    std::vector<double> pos = {1.3, 2.6, 3.1, 1.9};
    Tensor<double> probe = rand_t({m, d}, rng);
    std::vector<Tensor<double>*> checked = {&x, &p.offset.w, &p.offset.b, &p.v.w,
                                            &p.o.w, &maps[0], &maps[1]};
    if (mode == AttnMode::kQueryKey) {
      checked.push_back(&p.q.w);
      checked.push_back(&p.k.w);
      checked.push_back(&encs[1]);
    } else {
      checked.push_back(&p.weight_proj.w);
    }
    double err = finite_diff_check_multi(
        [&]() {
          return reduce_sum(mul(cross_attention_block(x, enc, pos, maps, encs, p), probe));
        },
        checked);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("attention constructors validate dimensions") {
  std::mt19937_64 rng(43);
  CHECK_THROWS_AS(make_self_attention<double>(6, 4, 8, rng), ConfigError);
  CHECK_THROWS_AS(make_cross_attention<double>(6, 4, 1, 1, AttnMode::kQueryKey, 8, rng),
                  ConfigError);
  CHECK_THROWS_AS(make_cross_attention<double>(8, 2, 0, 4, AttnMode::kQueryKey, 8, rng),
                  ConfigError);
}
