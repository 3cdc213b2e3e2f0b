#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "mfdet/gradcheck.hpp"
#include "mfdet/ops.hpp"
#include "oracles.hpp"

using namespace mfdet;

namespace {
Tensor<double> no_bias;
}

TEST_CASE("matmul matches the frozen example and the cubic-loop oracle") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  auto c = matmul(a, b);
  CHECK(c.data() == std::vector<double>{19, 22, 43, 50});

  auto eye = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::mt19937_64 rng(7);
  auto x = oracle::rand_tensor({3, 3}, rng);
  auto ix = matmul(eye, x);
  for (int i = 0; i < 9; ++i) CHECK(ix.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));

  auto p = oracle::rand_tensor({7, 3}, rng);
  auto q = oracle::rand_tensor({3, 5}, rng);
  auto r = matmul(p, q);
  auto ref = oracle::matmul_naive(p.data(), q.data(), 7, 3, 5);
  for (int i = 0; i < r.numel(); ++i) CHECK(r.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  CHECK_THROWS_AS(matmul(p, p), ShapeError);
}

TEST_CASE("matmul gradients pass the finite-difference oracle") {
  std::mt19937_64 rng(11);
  auto a = oracle::rand_tensor({4, 3}, rng);
  auto b = oracle::rand_tensor({3, 5}, rng);
  const double err =
      finite_diff_check_multi([&] { return reduce_sum(matmul(a, b)); }, {&a, &b}, 1e-5);
  CHECK(err < 1e-7);
}

TEST_CASE("sum of squares has the textbook gradient") {
  auto x = Tensor<double>::from({3}, {1, 2, 3});
  x.set_requires_grad(true);
  {
    GradTape<double> tape;
    TapeScope<double> scope(&tape);
    auto loss = reduce_sum(mul(x, x));
    backward(loss);
  }
  CHECK(x.grad() == std::vector<double>{2, 4, 6});
  x.zero_grad();
  const double err = finite_diff_check([&] { return reduce_sum(mul(x, x)); }, x, 1e-5);
  CHECK(err < 1e-7);
}

TEST_CASE("conv2d identity, constant-input example, and oracle agreement") {
  std::mt19937_64 rng(3);
  auto x = oracle::rand_tensor({2, 5, 5}, rng);
  auto ident = Tensor<double>::from({2, 2, 1, 1}, {1, 0, 0, 1});
  auto y = conv2d(x, ident, no_bias, 1, 0);
  for (int i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  auto c5 = Tensor<double>::full({1, 8, 8}, 5.0);
  auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto conv = conv2d(c5, ones, no_bias, 1, 0);
  CHECK(conv.shape() == std::vector<int>{1, 6, 6});
  for (int i = 0; i < conv.numel(); ++i) CHECK(conv.data()[i] == doctest::Approx(45.0));

  auto xr = oracle::rand_tensor({3, 9, 7}, rng);
  auto wr = oracle::rand_tensor({4, 3, 3, 3}, rng);
  auto br = oracle::rand_tensor({4}, rng);
  auto yr = conv2d(xr, wr, br, 2, 1);
  auto ref = oracle::conv2d_naive(xr.data(), wr.data(), br.data(), 3, 9, 7, 4, 3, 3, 2, 1);
  REQUIRE(yr.numel() == static_cast<int>(ref.size()));
  for (int i = 0; i < yr.numel(); ++i) CHECK(yr.data()[i] == doctest::Approx(ref[i]).epsilon(1e-10));

  auto big = Tensor<double>::zeros({1, 64, 64});
  auto k3 = Tensor<double>::zeros({1, 1, 3, 3});
  CHECK(conv2d(big, k3, no_bias, 2, 1).shape() == std::vector<int>{1, 32, 32});
}

TEST_CASE("conv2d and transpose_conv2d gradients") {
  std::mt19937_64 rng(5);
  auto x = oracle::rand_tensor({2, 6, 5}, rng);
  auto w = oracle::rand_tensor({3, 2, 3, 3}, rng);
  auto b = oracle::rand_tensor({3}, rng);
  const double err = finite_diff_check_multi(
      [&] { return reduce_sum(conv2d(x, w, b, 1, 1)); }, {&x, &w, &b}, 1e-5);
  CHECK(err < 1e-6);

  auto xt = oracle::rand_tensor({3, 4, 4}, rng);
  auto wt = oracle::rand_tensor({3, 2, 2, 2}, rng);
  auto bt = oracle::rand_tensor({2}, rng);
  const double errt = finite_diff_check_multi(
      [&] { return reduce_sum(transpose_conv2d(xt, wt, bt, 2, 0)); }, {&xt, &wt, &bt}, 1e-5);
  CHECK(errt < 1e-6);
}

TEST_CASE("transpose_conv2d upsamples and is the exact adjoint of conv2d") {
  std::mt19937_64 rng(13);
  auto x = oracle::rand_tensor({2, 8, 8}, rng);
  auto w = oracle::rand_tensor({2, 3, 2, 2}, rng);
  auto up = transpose_conv2d(x, w, no_bias, 2, 0);
  CHECK(up.shape() == std::vector<int>{3, 16, 16});

  auto unit = Tensor<double>::from({1, 1, 1, 1}, {1});
  auto same = transpose_conv2d(x.reshaped({1, 8, 16}), unit, no_bias, 1, 0);
  for (int i = 0; i < x.numel(); ++i) CHECK(same.data()[i] == doctest::Approx(x.data()[i]));

  // <conv(x), y> == <x, tconv(y)> for the same kernel, stride and padding
  for (int trial = 0; trial < 5; ++trial) {
    auto cx = oracle::rand_tensor({3, 9, 7}, rng);
    auto cw = oracle::rand_tensor({4, 3, 3, 3}, rng);
    auto cy = conv2d(cx, cw, no_bias, 2, 1);
    auto ty = oracle::rand_tensor(cy.shape(), rng);
    auto back = transpose_conv2d(ty, cw, no_bias, 2, 1);
    REQUIRE(back.shape() == cx.shape());
    const double lhs = oracle::dot(cy.data(), ty.data());
    const double rhs = oracle::dot(cx.data(), back.data());
    CHECK(std::abs(lhs - rhs) <= 1e-8 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("softmax frozen values, normalization, and gradient") {
  auto flat = softmax(Tensor<double>::full({4}, 1.7), 0);
  for (int i = 0; i < 4; ++i) CHECK(flat.data()[i] == doctest::Approx(0.25).epsilon(1e-12));

  auto two = softmax(Tensor<double>::from({2}, {0.0, std::log(2.0)}), 0);
  CHECK(two.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(two.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  std::mt19937_64 rng(17);
  auto x = oracle::rand_tensor({3, 7}, rng, -5.0, 5.0);
  auto s = softmax(x, 1);
  for (int i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) sum += s.data()[i * 7 + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  // large inputs must not overflow
  auto huge = softmax(Tensor<double>::from({2}, {1000.0, 1000.0}), 0);
  CHECK(huge.data()[0] == doctest::Approx(0.5));

  auto y = oracle::rand_tensor({2, 3, 4}, rng);
  auto w = oracle::rand_tensor({2, 3, 4}, rng);
  const double err = finite_diff_check_multi(
      [&] { return reduce_sum(mul(softmax(y, 1), w)); }, {&y}, 1e-6);
  CHECK(err < 1e-7);
}

TEST_CASE("bilinear sampling hits lattice points exactly and is differentiable") {
  // single channel 2x2 with values 0,2,4,6
  auto map = Tensor<double>::from({1, 2, 2}, {0, 2, 4, 6});
  auto center = bilinear_sample(map, Tensor<double>::from({1, 2}, {0.5, 0.5}));
  CHECK(center.data()[0] == doctest::Approx(3.0).epsilon(1e-12));

  std::mt19937_64 rng(23);
  auto big = oracle::rand_tensor({3, 5, 6}, rng);
  auto lat = bilinear_sample(big, Tensor<double>::from({2, 2}, {4.0, 2.0, 0.0, 0.0}));
  for (int ch = 0; ch < 3; ++ch) {
    CHECK(lat.data()[0 * 3 + ch] == doctest::Approx(big.data()[ch * 30 + 2 * 6 + 4]).epsilon(1e-12));
    CHECK(lat.data()[1 * 3 + ch] == doctest::Approx(big.data()[ch * 30 + 0]).epsilon(1e-12));
  }

  // clamped coordinates reproduce the border value
  auto clamped = bilinear_sample(big, Tensor<double>::from({1, 2}, {-3.5, 1.0}));
  for (int ch = 0; ch < 3; ++ch)
    CHECK(clamped.data()[ch] == doctest::Approx(big.data()[ch * 30 + 1 * 6 + 0]).epsilon(1e-12));

  auto locs = Tensor<double>::from({3, 2}, {1.3, 2.6, 3.2, 0.4, 2.7, 3.3});
  auto wsum = oracle::rand_tensor({3, 3}, rng);
  const double err = finite_diff_check_multi(
      [&] { return reduce_sum(mul(bilinear_sample(big, locs), wsum)); }, {&big, &locs}, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("backward requires a scalar loss and an active tape") {
  auto x = Tensor<double>::from({2}, {1, 2});
  x.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(&tape);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ShapeError);
  auto s = reduce_sum(y);
  {
    GradTape<double>* saved = GradTape<double>::active();
    GradTape<double>::active() = nullptr;
    CHECK_THROWS_AS(backward(s), std::logic_error);
    GradTape<double>::active() = saved;
  }
}

TEST_CASE("a tensor used twice accumulates both contributions") {
  auto x = Tensor<double>::from({3}, {1, 2, 3});
  x.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(&tape);
  auto loss = reduce_sum(add(x, x));
  backward(loss);
  CHECK(x.grad() == std::vector<double>{2, 2, 2});
}

TEST_CASE("clearing the tape releases saved intermediates") {
  auto x = Tensor<double>::from({4}, {1, 2, 3, 4});
  x.set_requires_grad(true);
  GradTape<double> tape;
  std::weak_ptr<std::vector<double>> probe;
  {
    TapeScope<double> scope(&tape);
    auto mid = mul(x, x);
    probe = mid.data_handle();
    auto loss = reduce_sum(mid);
    backward(loss);
  }
  CHECK_FALSE(probe.expired());
  tape.clear();
  CHECK(probe.expired());
}

TEST_CASE("gradients are additive across separately summed losses") {
  std::mt19937_64 rng(29);
  auto w = oracle::rand_tensor({3, 4}, rng);
  auto x1 = oracle::rand_tensor({2, 3}, rng);
  auto x2 = oracle::rand_tensor({5, 3}, rng);
  w.set_requires_grad(true);

  w.zero_grad();
  std::vector<double> joint;
  {
    GradTape<double> tape;
    TapeScope<double> scope(&tape);
    auto loss = add(reduce_sum(matmul(x1, w)), reduce_sum(matmul(x2, w)));
    backward(loss);
    joint = w.grad();
  }

  w.zero_grad();
  {
    GradTape<double> tape;
    TapeScope<double> scope(&tape);
    auto l1 = reduce_sum(matmul(x1, w));
    backward(l1);
  }
  {
    GradTape<double> tape;
    TapeScope<double> scope(&tape);
    auto l2 = reduce_sum(matmul(x2, w));
    backward(l2);
  }
  for (int i = 0; i < w.numel(); ++i) CHECK(joint[i] == doctest::Approx(w.grad()[i]).epsilon(1e-12));
}

TEST_CASE("elementwise, slicing, and reduction ops pass finite differences") {
  std::mt19937_64 rng(31);
  auto a = oracle::rand_tensor({4, 6}, rng);
  auto b = oracle::rand_tensor({4, 6}, rng);
  auto v = oracle::rand_tensor({6}, rng);

  CHECK(finite_diff_check_multi([&] { return reduce_sum(mul(add(a, b), sub(a, b))); }, {&a, &b},
                                1e-6) < 1e-7);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(add_rowvec(a, v)); }, {&a, &v}, 1e-6) <
        1e-7);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(scale(a, 2.5)); }, {&a}, 1e-5) < 1e-7);
  CHECK(finite_diff_check_multi([&] { return mean_all(transpose2d(a)); }, {&a}, 1e-5) < 1e-7);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(slice_cols(a, 2, 3)); }, {&a}, 1e-6) <
        1e-7);
  CHECK(finite_diff_check_multi(
            [&] {
              return reduce_sum(concat_cols(std::vector<Tensor<double>>{a, b}));
            },
            {&a, &b}, 1e-5) < 1e-7);

  // keep relu/sigmoid inputs away from the origin kink
  auto pos = oracle::rand_tensor({3, 5}, rng, 0.2, 1.5);
  auto neg = oracle::rand_tensor({3, 5}, rng, -1.5, -0.2);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(relu(mul(pos, neg))); }, {&pos, &neg},
                                1e-6) < 1e-6);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(sigmoid(a)); }, {&a}, 1e-5) < 1e-7);
}

TEST_CASE("map access ops gather, scatter, and concat channels with exact gradients") {
  std::mt19937_64 rng(37);
  auto map = oracle::rand_tensor({3, 4, 5}, rng);
  auto rows = oracle::rand_tensor({2, 3}, rng);
  std::vector<int> cells{7, 13};

  auto gathered = gather_cells(map, cells);
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c)
      CHECK(gathered.data()[i * 3 + c] == doctest::Approx(map.data()[c * 20 + cells[i]]));

  auto scattered = scatter_cells(map, rows, cells);
  for (int c = 0; c < 3; ++c)
    for (int s = 0; s < 20; ++s) {
      const double expect = (s == 7)    ? rows.data()[0 * 3 + c]
                            : (s == 13) ? rows.data()[1 * 3 + c]
                                        : map.data()[c * 20 + s];
      CHECK(scattered.data()[c * 20 + s] == expect);
    }

  auto wsum = oracle::rand_tensor({3, 4, 5}, rng);
  CHECK(finite_diff_check_multi(
            [&] { return reduce_sum(mul(scatter_cells(map, rows, cells), wsum)); }, {&map, &rows},
            1e-6) < 1e-7);
  auto wg = oracle::rand_tensor({2, 3}, rng);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(mul(gather_cells(map, cells), wg)); },
                                {&map}, 1e-5) < 1e-7);

  auto m2 = oracle::rand_tensor({2, 4, 5}, rng);
  CHECK(finite_diff_check_multi(
            [&] {
              return reduce_sum(concat_channels(std::vector<Tensor<double>>{map, m2}));
            },
            {&map, &m2}, 1e-5) < 1e-7);
}

TEST_CASE("block_dot and block_mix agree with per-row loops and differentiate") {
  std::mt19937_64 rng(41);
  const int m = 3, kq = 4, d = 5;
  auto q = oracle::rand_tensor({m, d}, rng);
  auto k = oracle::rand_tensor({m * kq, d}, rng);
  auto scores = block_dot(q, k, kq);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < kq; ++j) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += q.data()[i * d + c] * k.data()[(i * kq + j) * d + c];
      CHECK(scores.data()[i * kq + j] == doctest::Approx(acc).epsilon(1e-12));
    }

  auto w = oracle::rand_tensor({m, kq}, rng);
  auto vv = oracle::rand_tensor({m * kq, d}, rng);
  auto mixed = block_mix(w, vv);
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int j = 0; j < kq; ++j) acc += w.data()[i * kq + j] * vv.data()[(i * kq + j) * d + c];
      CHECK(mixed.data()[i * d + c] == doctest::Approx(acc).epsilon(1e-12));
    }

  auto ws = oracle::rand_tensor({m, kq}, rng);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(mul(block_dot(q, k, kq), ws)); }, {&q, &k},
                                1e-6) < 1e-7);
  auto wm = oracle::rand_tensor({m, d}, rng);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(mul(block_mix(w, vv), wm)); }, {&w, &vv},
                                1e-6) < 1e-7);
}

TEST_CASE("layer_norm normalizes rows and differentiates") {
  std::mt19937_64 rng(43);
  auto x = oracle::rand_tensor({4, 8}, rng, -2.0, 2.0);
  auto gamma = Tensor<double>::full({8}, 1.0);
  auto beta = Tensor<double>::zeros({8});
  auto y = layer_norm(x, gamma, beta, 1e-5);
  for (int i = 0; i < 4; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 8; ++j) mean += y.data()[i * 8 + j];
    mean /= 8;
    for (int j = 0; j < 8; ++j) var += (y.data()[i * 8 + j] - mean) * (y.data()[i * 8 + j] - mean);
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var / 8 == doctest::Approx(1.0).epsilon(1e-3));
  }

  auto g2 = oracle::rand_tensor({8}, rng, 0.5, 1.5);
  auto b2 = oracle::rand_tensor({8}, rng);
  auto wsum = oracle::rand_tensor({4, 8}, rng);
  CHECK(finite_diff_check_multi(
            [&] { return reduce_sum(mul(layer_norm(x, g2, b2, 1e-5), wsum)); }, {&x, &g2, &b2},
            1e-6) < 1e-6);
}

TEST_CASE("reduce_max and segment_max route gradients to the maxima") {
  auto x = Tensor<double>::from({2, 3}, {1, 5, 2, 7, 0, 3});
  auto mx = reduce_max(x, 1);
  CHECK(mx.data() == std::vector<double>{5, 7});

  x.set_requires_grad(true);
  {
    GradTape<double> tape;
    TapeScope<double> scope(&tape);
    auto loss = reduce_sum(reduce_max(x, 1));
    backward(loss);
  }
  CHECK(x.grad() == std::vector<double>{0, 1, 0, 1, 0, 0});

  std::mt19937_64 rng(47);
  auto seg = oracle::rand_tensor({6, 3}, rng);
  std::vector<int> offsets{0, 2, 6};
  auto sm = segment_max(seg, offsets);
  CHECK(sm.shape() == std::vector<int>{2, 3});
  for (int c = 0; c < 3; ++c) {
    CHECK(sm.data()[c] == doctest::Approx(std::max(seg.data()[c], seg.data()[3 + c])));
  }
  CHECK_THROWS_AS(segment_max(seg, std::vector<int>{0, 2, 2, 6}), ShapeError);

  auto w = oracle::rand_tensor({2, 3}, rng);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(mul(segment_max(seg, offsets), w)); },
                                {&seg}, 1e-5) < 1e-7);

  auto xm = oracle::rand_tensor({3, 4, 5}, rng);
  auto wm = oracle::rand_tensor({4, 5}, rng);
  CHECK(finite_diff_check_multi(
            [&] { return reduce_sum(mul(reduce_max(xm, 0), wm)); }, {&xm}, 1e-5) < 1e-7);
}

TEST_CASE("loss primitives match hand values and differentiate") {
  auto pred = Tensor<double>::from({2}, {0.5, 3.0});
  auto target = Tensor<double>::zeros({2});
  auto sl = smooth_l1(pred, target, 1.0);
  CHECK(sl.data()[0] == doctest::Approx(0.125));
  CHECK(sl.data()[1] == doctest::Approx(2.5));

  std::mt19937_64 rng(53);
  auto p = oracle::rand_tensor({3, 4}, rng, -2.0, 2.0);
  auto t = oracle::rand_tensor({3, 4}, rng, -0.5, 0.5);
  CHECK(finite_diff_check_multi([&] { return reduce_sum(smooth_l1(p, t, 1.0 / 9.0)); }, {&p},
                                1e-6) < 1e-5);

  auto logits = oracle::rand_tensor({4, 5}, rng, -3.0, 3.0);
  auto labels = Tensor<double>::zeros({4, 5});
  labels.data()[2] = 1.0;
  labels.data()[7] = 1.0;
  auto fl = focal_bce_logits(logits, labels, 0.25, 2.0);
  // spot-check one positive and one negative element against the formula
  {
    const double x = logits.data()[2];
    const double s = 1.0 / (1.0 + std::exp(-x));
    CHECK(fl.data()[2] == doctest::Approx(-0.25 * (1 - s) * (1 - s) * std::log(s)).epsilon(1e-10));
    const double xn = logits.data()[0];
    const double sn = 1.0 / (1.0 + std::exp(-xn));
    CHECK(fl.data()[0] == doctest::Approx(-0.75 * sn * sn * std::log(1 - sn)).epsilon(1e-10));
  }
  CHECK(finite_diff_check_multi([&] { return reduce_sum(focal_bce_logits(logits, labels, 0.25, 2.0)); },
                                {&logits}, 1e-5) < 1e-6);

  auto xl = Tensor<double>::from({1, 2}, {0.0, 0.0});
  auto ce = softmax_xent_rows(xl, std::vector<int>{0});
  CHECK(ce.data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  auto xr = oracle::rand_tensor({5, 3}, rng, -2.0, 2.0);
  std::vector<int> cls{0, 2, 1, 1, 0};
  CHECK(finite_diff_check_multi([&] { return reduce_sum(softmax_xent_rows(xr, cls)); }, {&xr},
                                1e-6) < 1e-6);
  // the composite softmax cross-entropy stays accurate through the chain
  auto wproj = oracle::rand_tensor({3, 3}, rng);
  CHECK(finite_diff_check_multi(
            [&] { return mean_all(softmax_xent_rows(matmul(xr, wproj), cls)); }, {&xr, &wproj},
            1e-6) < 1e-5);
}

TEST_CASE("reshape shares storage so gradients pass through views") {
  std::mt19937_64 rng(59);
  auto x = oracle::rand_tensor({2, 6}, rng);
  auto w = oracle::rand_tensor({3, 4}, rng);
  CHECK(finite_diff_check_multi(
            [&] { return reduce_sum(mul(x.reshaped({3, 4}), w)); }, {&x}, 1e-5) < 1e-7);
  CHECK_THROWS_AS(x.reshaped({5, 2}), ShapeError);
}
