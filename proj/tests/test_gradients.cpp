#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssdctx/nn.hpp"
#include "ssdctx/ops.hpp"
#include "support/gradcheck.hpp"

using namespace ssdctx;
using gradcheck::check;
using gradcheck::fill_uniform;

// Unit-level sweep: a few seeds per op. The acceptance suite re-runs the
// same harness at >= 20 seeds per operator.

TEST_CASE("grad: conv2d") {
  for (uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    TensorD x = TensorD::zeros({1, 2, 5, 5}, true);
    TensorD w = TensorD::zeros({3, 2, 3, 3}, true);
    TensorD b = TensorD::zeros({1, 3, 1, 1}, true);
    fill_uniform(x, rng, -1, 1);
    fill_uniform(w, rng, -1, 1);
    fill_uniform(b, rng, -0.5, 0.5);
    auto f = [&] { return sum(conv2d(x, w, b, ConvGeom::make(2, 1))); };
    auto r = check(f, {x, w, b});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("grad: conv2d dilated") {
  Rng rng(4);
  TensorD x = TensorD::zeros({1, 1, 7, 7}, true);
  TensorD w = TensorD::zeros({2, 1, 3, 3}, true);
  fill_uniform(x, rng, -1, 1);
  fill_uniform(w, rng, -1, 1);
  auto f = [&] { return sum(conv2d(x, w, TensorD{}, ConvGeom::make(1, 2, 2))); };
  auto r = check(f, {x, w});
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("grad: conv_transpose2d with crop") {
  for (uint64_t seed : {5, 6}) {
    Rng rng(seed);
    TensorD x = TensorD::zeros({1, 2, 4, 4}, true);
    TensorD w = TensorD::zeros({3, 2, 4, 4}, true);
    TensorD b = TensorD::zeros({1, 3, 1, 1}, true);
    fill_uniform(x, rng, -1, 1);
    fill_uniform(w, rng, -1, 1);
    fill_uniform(b, rng, -1, 1);
    // raw (4-1)*4+4 = 16, cropped to 14
    auto f = [&] { return sum(conv_transpose2d(x, w, b, ConvGeom::make(4, 0), 14, 14)); };
    auto r = check(f, {x, w, b});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("grad: batch_norm training mode") {
  for (uint64_t seed : {7, 8}) {
    Rng rng(seed);
    TensorD x = TensorD::zeros({2, 3, 3, 3}, true);
    TensorD gm = TensorD::zeros({1, 3, 1, 1}, true);
    TensorD bt = TensorD::zeros({1, 3, 1, 1}, true);
    TensorD rm = TensorD::zeros({1, 3, 1, 1});
    TensorD rv = TensorD::full({1, 3, 1, 1}, 1.0);
    fill_uniform(x, rng, -2, 2);
    fill_uniform(gm, rng, 0.5, 1.5);
    fill_uniform(bt, rng, -0.5, 0.5);
    auto f = [&] {
      TensorD rm2 = rm.detached(), rv2 = rv.detached();  // keep stats fixed across FD calls
      return gradcheck::wsum(batch_norm(x, gm, bt, rm2, rv2, true));
    };
    // weight the sum so per-element grads are distinct
    auto r = check(f, {x, gm, bt}, 1e-5, 1e-4);
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("grad: batch_norm eval mode") {
  Rng rng(9);
  TensorD x = TensorD::zeros({1, 2, 3, 3}, true);
  TensorD gm = TensorD::zeros({1, 2, 1, 1}, true);
  TensorD bt = TensorD::zeros({1, 2, 1, 1}, true);
  TensorD rm = TensorD::zeros({1, 2, 1, 1});
  TensorD rv = TensorD::full({1, 2, 1, 1}, 2.0);
  fill_uniform(x, rng, -2, 2);
  fill_uniform(gm, rng, 0.5, 1.5);
  fill_uniform(bt, rng, -0.5, 0.5);
  auto f = [&] { return gradcheck::wsum(batch_norm(x, gm, bt, rm, rv, false)); };
  auto r = check(f, {x, gm, bt});
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("grad: activations") {
  Rng rng(10);
  TensorD x = TensorD::zeros({1, 2, 4, 4}, true);
  fill_uniform(x, rng, -2, 2, 0.05);  // stay off the relu kink
  {
    auto f = [&] { return gradcheck::wsum(relu(x)); };
    auto r = check(f, {x});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    auto f = [&] { return gradcheck::wsum(sigmoid(x)); };
    auto r = check(f, {x});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    auto f = [&] { return gradcheck::wsum(softmax(x, 1)); };
    auto r = check(f, {x});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("grad: l2_normalize_channels") {
  for (uint64_t seed : {11, 12}) {
    Rng rng(seed);
    TensorD x = TensorD::zeros({1, 3, 3, 3}, true);
    TensorD s = TensorD::zeros({1, 3, 1, 1}, true);
    fill_uniform(x, rng, -2, 2, 0.1);
    fill_uniform(s, rng, 0.5, 2.0);
    auto f = [&] { return gradcheck::wsum(l2_normalize_channels(x, s)); };
    auto r = check(f, {x, s});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("grad: max_pool2d") {
  Rng rng(13);
  TensorD x = TensorD::zeros({1, 2, 5, 5}, true);
  // distinct values avoid argmax ties under the FD step
  for (Index i = 0; i < x.numel(); ++i) x.value()[i] = rng.uniform(-1, 1) + 0.001 * double(i);
  auto f = [&] { return gradcheck::wsum(max_pool2d(x, 2, 2, 0, true)); };
  auto r = check(f, {x});
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("grad: upsample / resize / concat / slice / mul / flatten") {
  Rng rng(14);
  TensorD a = TensorD::zeros({1, 2, 3, 3}, true);
  TensorD b = TensorD::zeros({1, 2, 3, 3}, true);
  fill_uniform(a, rng, -1, 1);
  fill_uniform(b, rng, -1, 1);
  {
    auto f = [&] { return gradcheck::wsum(upsample_nearest(a, 5, 5)); };
    auto r = check(f, {a});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    auto f = [&] { return gradcheck::wsum(resize_center(a, 2, 2)); };
    auto r = check(f, {a});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    auto f = [&] { return gradcheck::wsum(resize_center(a, 5, 5)); };
    auto r = check(f, {a});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    auto f = [&] {
      return gradcheck::wsum(concat_channels<double>({a, b}));
    };
    auto r = check(f, {a, b});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    auto f = [&] { return gradcheck::wsum(slice_channels(a, 1, 1)); };
    auto r = check(f, {a});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    auto f = [&] { return gradcheck::wsum(elementwise_mul(a, b)); };
    auto r = check(f, {a, b});
    CHECK_MESSAGE(r.ok, r.detail);
  }
  {
    TensorD h = TensorD::zeros({1, 6, 2, 2}, true);
    fill_uniform(h, rng, -1, 1);
    auto f = [&] { return gradcheck::wsum(flatten_head(h, 3)); };
    auto r = check(f, {h});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("grad: residual block") {
  Rng rng(15);
  ParamStore<double> store;
  ResidualBlock<double> block(store, "rb", rng, 16);
  TensorD x = TensorD::zeros({1, 16, 4, 4}, true);
  fill_uniform(x, rng, -1, 1, 0.05);
  std::vector<TensorD> wrt = {x};
  for (auto& e : store.entries())
    if (e.trainable) wrt.push_back(e.tensor);
  auto f = [&] { return gradcheck::wsum(block(x, true)); };
  auto r = check(f, wrt);
  CHECK_MESSAGE(r.ok, r.detail);
}
