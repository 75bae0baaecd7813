#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "convrec/rng.hpp"
#include "convrec/tape.hpp"
#include "testutil.hpp"

#include <cstring>
#include <random>

using namespace convrec;
using convrec::test::finite_diff;
using convrec::test::grad_close;

namespace {

template <class S>
Tensor<S> random_tensor(std::vector<Index> shape, std::mt19937& rng, double lo = -1.0,
                        double hi = 1.0) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data) v = static_cast<S>(dist(rng));
  return t;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tape<float> tape;
  TensorF eye = TensorF::matrix(2, 2, {1, 0, 0, 1});
  TensorF a = TensorF::matrix(2, 2, {1, 2, 3, 4});
  TensorF out = matmul(tape, eye, a);
  CHECK(out.data == std::vector<float>{1, 2, 3, 4});

  TensorF row = TensorF::matrix(1, 2, {1, 2});
  TensorF col = TensorF::matrix(2, 1, {3, 4});
  CHECK(matmul(tape, row, col).data == std::vector<float>{11});

  TensorF bad = TensorF::matrix(3, 1, {1, 2, 3});
  CHECK_THROWS_AS(matmul(tape, row, bad), std::invalid_argument);
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937 rng(11);
  Tensor<double> a = random_tensor<double>({3, 4}, rng);
  Tensor<double> b = random_tensor<double>({4, 2}, rng);
  std::vector<Tensor<double>*> params{&a, &b};

  Tape<double> tape;
  tape.watch(a);
  tape.watch(b);
  Tensor<double> loss = mean(tape, gelu(tape, matmul(tape, a, b)));
  tape.backward(loss);
  auto ga = tape.grad(a);
  auto gb = tape.grad(b);

  auto loss_fn = [&]() {
    Tape<double> t2;
    return mean(t2, gelu(t2, matmul(t2, a, b)))[0];
  };
  for (const auto& probe : finite_diff(params, loss_fn, 1e-3, 64, rng)) {
    const double ad = probe.param == 0 ? ga[probe.coord] : gb[probe.coord];
    CHECK_MESSAGE(grad_close(ad, probe.fd, 1e-3, 1e-10), "param ", probe.param, " coord ",
                  probe.coord, " ad=", ad, " fd=", probe.fd);
  }
}

TEST_CASE("softmax rows") {
  Tape<float> tape;
  TensorF uniform = TensorF::vector({0, 0, 0});
  auto u = softmax_rows(tape, uniform);
  for (float v : u.data) CHECK(v == doctest::Approx(1.0f / 3).epsilon(1e-6));

  TensorF big = TensorF::vector({1000, 0, 0});
  auto s = softmax_rows(tape, big);
  CHECK(s[0] == doctest::Approx(1.0f));
  CHECK(std::isfinite(s[0]));
  CHECK(s[1] == doctest::Approx(0.0f));

  std::mt19937 rng(3);
  TensorF x = random_tensor<float>({5, 7}, rng, -4, 4);
  auto y = softmax_rows(tape, x);
  for (Index r = 0; r < 5; ++r) {
    double sum = 0;
    for (Index c = 0; c < 7; ++c) {
      sum += y.at(r, c);
      CHECK(y.at(r, c) >= 0.0f);
      CHECK(y.at(r, c) <= 1.0f);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm values and gradient") {
  Tape<float> tape;
  TensorF gamma = TensorF::vector({1, 1});
  TensorF beta = TensorF::vector({0, 0});

  TensorF constant = TensorF::vector({5, 5});
  auto z = layer_norm(tape, constant, gamma, beta);
  CHECK(z[0] == doctest::Approx(0.0f).epsilon(1e-4));
  CHECK(z[1] == doctest::Approx(0.0f).epsilon(1e-4));

  TensorF two = TensorF::vector({1, 3});
  auto n = layer_norm(tape, two, gamma, beta);
  CHECK(n[0] == doctest::Approx(-1.0f).epsilon(1e-5));
  CHECK(n[1] == doctest::Approx(1.0f).epsilon(1e-5));

  std::mt19937 rng(7);
  Tensor<double> x = random_tensor<double>({3, 6}, rng);
  Tensor<double> g = random_tensor<double>({6}, rng, 0.5, 1.5);
  Tensor<double> b = random_tensor<double>({6}, rng);
  std::vector<Tensor<double>*> params{&x, &g, &b};
  Tape<double> t;
  for (auto* p : params) t.watch(*p);
  auto loss = mean(t, sigmoid(t, layer_norm(t, x, g, b)));
  t.backward(loss);
  std::vector<std::span<const double>> grads{t.grad(x), t.grad(g), t.grad(b)};
  auto loss_fn = [&]() {
    Tape<double> t2;
    return mean(t2, sigmoid(t2, layer_norm(t2, x, g, b)))[0];
  };
  for (const auto& probe : finite_diff(params, loss_fn, 1e-3, 32, rng))
    CHECK_MESSAGE(grad_close(grads[probe.param][probe.coord], probe.fd, 1e-3, 1e-10),
                  "param ", probe.param, " coord ", probe.coord);
}

TEST_CASE("backward basics") {
  Tape<float> tape;
  TensorF w = TensorF::vector({1, 2, 3, 4});
  tape.watch(w);
  auto loss = sum(tape, w);
  tape.backward(loss);
  for (float g : tape.grad(w)) CHECK(g == 1.0f);

  // non-scalar loss rejected
  Tape<float> t2;
  TensorF v = TensorF::vector({1, 2});
  t2.watch(v);
  auto y = scale(t2, v, 2.0f);
  CHECK_THROWS_AS(t2.backward(y), std::invalid_argument);
}

TEST_CASE("backward sigmoid closed form") {
  std::mt19937 rng(21);
  TensorF w = random_tensor<float>({6}, rng);
  TensorF x = random_tensor<float>({6}, rng);
  Tape<float> tape;
  tape.watch(w);
  auto loss = sigmoid(tape, dot(tape, w, x));
  tape.backward(loss);
  const double z = static_cast<double>(w.vec().dot(x.vec()));
  const double sig = 1.0 / (1.0 + std::exp(-z));
  auto g = tape.grad(w);
  for (Index i = 0; i < 6; ++i)
    CHECK(g[static_cast<size_t>(i)] ==
          doctest::Approx(static_cast<float>(sig * (1 - sig) * x[i])).epsilon(1e-4));
}

TEST_CASE("composite bilinear logit graph matches finite differences") {
  // same shape as the masked-item head: sigmoid-of-bilinear over two encodings
  std::mt19937 rng(5);
  Tensor<double> f = random_tensor<double>({8}, rng);
  Tensor<double> s = random_tensor<double>({8}, rng);
  Tensor<double> wm = random_tensor<double>({16, 8}, rng);
  Tensor<double> e = random_tensor<double>({8}, rng);
  std::vector<Tensor<double>*> params{&f, &s, &wm, &e};

  auto forward = [&](Tape<double>& t) {
    auto cat = concat_vec(t, f, s);
    auto proj = vecmat(t, cat, wm);
    return softplus(t, neg(t, dot(t, proj, e)));
  };
  Tape<double> tape;
  for (auto* p : params) tape.watch(*p);
  auto loss = forward(tape);
  tape.backward(loss);
  std::vector<std::span<const double>> grads;
  for (auto* p : params) grads.push_back(tape.grad(*p));

  auto loss_fn = [&]() {
    Tape<double> t2;
    return forward(t2)[0];
  };
  for (const auto& probe : finite_diff(params, loss_fn, 1e-3, 48, rng))
    CHECK_MESSAGE(grad_close(grads[probe.param][probe.coord], probe.fd, 1e-3, 1e-10),
                  "param ", probe.param, " coord ", probe.coord);
}

TEST_CASE("all differentiable ops pass a float32 finite-difference check") {
  // float path sanity at h=1e-3; noise floor of float32 central differences
  // is ~1e-4 absolute, hence the atol term.
  std::mt19937 rng(100);
  TensorF a = random_tensor<float>({4, 5}, rng);
  TensorF b = random_tensor<float>({4, 5}, rng);
  TensorF m = random_tensor<float>({5, 3}, rng);
  TensorF bias = random_tensor<float>({5}, rng);
  std::vector<Tensor<float>*> params{&a, &b, &m, &bias};

  auto forward = [&](Tape<float>& t) {
    auto x = add(t, mul(t, a, b), add_bias(t, a, bias));
    auto h = matmul(t, softmax_rows(t, x), m);
    auto g = gelu(t, h);
    auto row = select_row(t, g, 2);
    auto cat = concat_vec(t, row, row);
    return mean(t, softplus(t, cat));
  };
  Tape<float> tape;
  for (auto* p : params) tape.watch(*p);
  auto loss = forward(tape);
  tape.backward(loss);
  std::vector<std::span<const float>> grads;
  for (auto* p : params) grads.push_back(tape.grad(*p));
  auto loss_fn = [&]() {
    Tape<float> t2;
    return forward(t2)[0];
  };
  for (const auto& probe : finite_diff(params, loss_fn, 1e-3, 16, rng))
    CHECK_MESSAGE(grad_close(grads[probe.param][probe.coord], probe.fd, 1e-3, 3e-4),
                  "param ", probe.param, " coord ", probe.coord, " ad=",
                  grads[probe.param][probe.coord], " fd=", probe.fd);
}

TEST_CASE("slice, concat and stack ops round gradients correctly") {
  std::mt19937 rng(42);
  Tensor<double> x = random_tensor<double>({4, 6}, rng);
  std::vector<Tensor<double>*> params{&x};
  auto forward = [&](Tape<double>& t) {
    auto left = slice_cols(t, x, 0, 3);
    auto right = slice_cols(t, x, 3, 3);
    std::vector<Tensor<double>> parts{left, right};
    auto glued = concat_cols<double>(t, parts);
    auto rows = slice_rows(t, glued, 1, 2);
    std::vector<Tensor<double>> scalars;
    scalars.push_back(select_elem(t, rows, 0));
    scalars.push_back(mean(t, rows));
    scalars.push_back(sum(t, rows));
    auto stacked = stack_scalars<double>(t, scalars);
    return mean(t, stacked);
  };
  Tape<double> tape;
  tape.watch(x);
  auto loss = forward(tape);
  tape.backward(loss);
  auto g = tape.grad(x);
  auto loss_fn = [&]() {
    Tape<double> t2;
    return forward(t2)[0];
  };
  for (const auto& probe : finite_diff(params, loss_fn, 1e-3, 64, rng))
    CHECK(grad_close(g[probe.coord], probe.fd, 1e-3, 1e-10));
}

TEST_CASE("embedding lookup scatters gradients to the right rows") {
  Tape<float> tape;
  TensorF table = TensorF::matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  tape.watch(table);
  std::vector<int> ids{2, 0, 2};
  auto emb = embedding_lookup(tape, table, ids);
  CHECK(emb.at(0, 0) == 5.0f);
  CHECK(emb.at(1, 1) == 2.0f);
  auto loss = sum(tape, emb);
  tape.backward(loss);
  auto g = tape.grad(table);
  CHECK(g[0] == 1.0f);  // row 0 used once
  CHECK(g[4] == 2.0f);  // row 2 used twice
  CHECK(g[6] == 0.0f);  // row 3 unused

  std::vector<int> bad{9};
  CHECK_THROWS_AS(embedding_lookup(tape, table, bad), std::invalid_argument);
}

TEST_CASE("replaying an identical graph gives bit-identical gradients") {
  std::mt19937 rng(77);
  TensorF a = random_tensor<float>({6, 6}, rng);
  TensorF b = random_tensor<float>({6, 6}, rng);
  auto run = [&]() {
    Tape<float> t;
    t.watch(a);
    t.watch(b);
    auto loss = mean(t, softmax_rows(t, matmul(t, a, b)));
    t.backward(loss);
    auto g = t.grad(a);
    return std::vector<float>(g.begin(), g.end());
  };
  auto g1 = run();
  auto g2 = run();
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("dropout mask is inverted-scale and deterministic under a seed") {
  std::mt19937 rng1 = make_rng(9, 1);
  std::mt19937 rng2 = make_rng(9, 1);
  auto m1 = dropout_mask<float>(std::vector<Index>{8, 8}, 0.5f, rng1);
  auto m2 = dropout_mask<float>(std::vector<Index>{8, 8}, 0.5f, rng2);
  CHECK(m1.data == m2.data);
  for (float v : m1.data) CHECK((v == 0.0f || v == 2.0f));
}
