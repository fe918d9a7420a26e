#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssdctx/nn.hpp"
#include "ssdctx/ops.hpp"
#include "ssdctx/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace ssdctx;

TEST_CASE("tensor basics") {
  TensorF t = TensorF::zeros({2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.shape().str() == "(2,3,4,5)");
  t.at(1, 2, 3, 4) = 7.f;
  CHECK(t.value()[119] == 7.f);

  CHECK_THROWS_AS(TensorF::from({1, 1, 1, 2}, {1.f}), std::invalid_argument);

  TensorF s = TensorF::from({1, 1, 1, 3}, {1.f, 2.f, 3.f});
  CHECK(sum(s).item() == 6.f);
}

TEST_CASE("checked mode rejects non-finite values") {
  set_checked_mode(true);
  TensorF x = TensorF::full({1, 1, 2, 2}, 1e30f);
  TensorF w = TensorF::full({1, 1, 1, 1}, 1e30f);
  CHECK_THROWS_AS(conv2d(x, w, TensorF{}, ConvGeom::make(1, 0)), std::domain_error);
  set_checked_mode(false);
  CHECK_NOTHROW(conv2d(x, w, TensorF{}, ConvGeom::make(1, 0)));
}

TEST_CASE("conv2d identity 1x1 kernel") {
  Rng rng(7);
  TensorF x = TensorF::zeros({1, 3, 4, 4});
  for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(rng.uniform(-1, 1));
  // identity matrix over channels
  TensorF w = TensorF::zeros({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.f;
  TensorF y = conv2d(x, w, TensorF{}, ConvGeom::make(1, 0));
  CHECK(y.shape() == x.shape());
  for (Index i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("conv2d same-padding shape and errors") {
  TensorF x = TensorF::zeros({1, 1, 4, 4});
  Rng rng(1);
  TensorF w = TensorF::zeros({5, 1, 3, 3});
  init::he_uniform(w, 9, rng);
  TensorF y = conv2d(x, w, TensorF{}, ConvGeom::make(1, 1));
  CHECK(y.shape() == Shape4{1, 5, 4, 4});

  TensorF wbad = TensorF::zeros({5, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(x, wbad, TensorF{}, ConvGeom::make(1, 1)), std::invalid_argument);
  TensorF wbig = TensorF::zeros({5, 1, 9, 9});
  CHECK_THROWS_AS(conv2d(x, wbig, TensorF{}, ConvGeom::make(1, 0)), std::invalid_argument);
}

TEST_CASE("conv2d output dim follows floor arithmetic") {
  TensorF x = TensorF::zeros({1, 1, 10, 10});
  TensorF w = TensorF::zeros({1, 1, 3, 3});
  // stride 2, pad 1: floor((10 + 2 - 3)/2) + 1 = 5
  CHECK(conv2d(x, w, TensorF{}, ConvGeom::make(2, 1)).shape().h == 5);
  // dilation 2: effective kernel 5, floor((10 - 5)/1) + 1 = 6
  CHECK(conv2d(x, w, TensorF{}, ConvGeom::make(1, 0, 2)).shape().h == 6);
}

TEST_CASE("conv_transpose2d sizing") {
  Rng rng(3);
  SUBCASE("19 -> 38 exact with k=s=2") {
    TensorF x = TensorF::zeros({1, 2, 19, 19});
    TensorF w = TensorF::zeros({3, 2, 2, 2});
    init::he_uniform(w, 8, rng);
    TensorF y = conv_transpose2d(x, w, TensorF{}, ConvGeom::make(2, 0), 38, 38);
    CHECK(y.shape() == Shape4{1, 3, 38, 38});
  }
  SUBCASE("10 -> 38 via raw 40 center-cropped") {
    TensorF x = TensorF::full({1, 1, 10, 10}, 1.f);
    TensorF w = TensorF::full({1, 1, 4, 4}, 1.f);
    TensorF raw = conv_transpose2d_raw(x, w, TensorF{}, ConvGeom::make(4, 0));
    CHECK(raw.shape() == Shape4{1, 1, 40, 40});
    TensorF y = conv_transpose2d(x, w, TensorF{}, ConvGeom::make(4, 0), 38, 38);
    CHECK(y.shape() == Shape4{1, 1, 38, 38});
    // cropped content must match the raw interior
    for (Index i = 0; i < 38; ++i)
      for (Index j = 0; j < 38; ++j)
        CHECK(y.at(0, 0, i, j) == raw.at(0, 0, i + 1, j + 1));
  }
  SUBCASE("shape-preserving k=1 s=1") {
    TensorF x = TensorF::zeros({1, 2, 7, 7});
    TensorF w = TensorF::zeros({2, 2, 1, 1});
    TensorF y = conv_transpose2d(x, w, TensorF{}, ConvGeom::make(1, 0), 7, 7);
    CHECK(y.shape() == Shape4{1, 2, 7, 7});
  }
  SUBCASE("target smaller than input rejected") {
    TensorF x = TensorF::zeros({1, 1, 10, 10});
    TensorF w = TensorF::zeros({1, 1, 2, 2});
    CHECK_THROWS_AS(conv_transpose2d(x, w, TensorF{}, ConvGeom::make(2, 0), 8, 8),
                    std::invalid_argument);
  }
}

TEST_CASE("batch_norm modes") {
  SUBCASE("constant input in training mode collapses to beta") {
    TensorF x = TensorF::full({2, 3, 4, 4}, 5.f);
    ParamStore<float> store;
    BatchNorm2d<float> bn(store, "bn", 3);
    bn.beta().value().setConstant(0.25f);
    TensorF y = bn(x, true);
    for (Index i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == doctest::Approx(0.25f));
  }
  SUBCASE("eval mode with unit running stats is the identity") {
    Rng rng(5);
    TensorF x = TensorF::zeros({1, 2, 3, 3});
    for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(rng.uniform(-2, 2));
    ParamStore<float> store;
    BatchNorm2d<float> bn(store, "bn", 2);
    TensorF y = bn(x, false);
    for (Index i = 0; i < y.numel(); ++i)
      CHECK(y.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-4));
  }
  SUBCASE("training mode normalizes per-channel stats to (0,1)") {
    Rng rng(11);
    TensorF x = TensorF::zeros({2, 3, 5, 5});
    for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(rng.uniform(-3, 7));
    ParamStore<float> store;
    BatchNorm2d<float> bn(store, "bn", 3);
    TensorF y = bn(x, true);
    const Index HW = 25, M = 2 * HW;
    for (Index c = 0; c < 3; ++c) {
      double s = 0, sq = 0;
      for (Index n = 0; n < 2; ++n)
        for (Index p = 0; p < HW; ++p) {
          double v = y.at(n, c, p / 5, p % 5);
          s += v;
          sq += v * v;
        }
      double mean = s / M, var = sq / M - mean * mean;
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-3);  // eps shifts variance slightly below 1
    }
  }
  SUBCASE("eval forward is deterministic") {
    Rng rng(2);
    TensorF x = TensorF::zeros({1, 2, 4, 4});
    for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(rng.uniform(-1, 1));
    ParamStore<float> store;
    BatchNorm2d<float> bn(store, "bn", 2);
    bn.running_mean().value().setConstant(0.3f);
    bn.running_var().value().setConstant(2.0f);
    TensorF y1 = bn(x, false), y2 = bn(x, false);
    for (Index i = 0; i < y1.numel(); ++i) CHECK(y1.value()[i] == y2.value()[i]);
  }
  SUBCASE("channel mismatch") {
    ParamStore<float> store;
    BatchNorm2d<float> bn(store, "bn", 4);
    TensorF x = TensorF::zeros({1, 3, 2, 2});
    CHECK_THROWS_AS(bn(x, true), std::invalid_argument);
  }
}

TEST_CASE("activations") {
  TensorF x = TensorF::from({1, 1, 1, 3}, {-3.f, 0.f, 3.f});
  TensorF r = relu(x);
  CHECK(r.value()[0] == 0.f);
  CHECK(r.value()[1] == 0.f);
  CHECK(r.value()[2] == 3.f);

  TensorF zero = TensorF::zeros({1, 1, 1, 1});
  CHECK(sigmoid(zero).item() == doctest::Approx(0.5));

  // large magnitudes stay finite and strictly inside (0,1)
  TensorF big = TensorF::from({1, 1, 1, 2}, {500.f, -500.f});
  TensorF sb = sigmoid(big);
  CHECK(sb.value()[0] > 0.f);
  CHECK(sb.value()[0] <= 1.f);
  CHECK(sb.value()[1] > 0.f);
  CHECK(sb.value()[1] < 1.f);

  // equal logits over K classes -> 1/K each
  TensorF logits = TensorF::full({1, 1, 1, 5}, 2.f);
  TensorF sm = softmax(logits, 3);
  for (Index i = 0; i < 5; ++i) CHECK(sm.value()[i] == doctest::Approx(0.2));

  Rng rng(9);
  TensorF rl = TensorF::zeros({2, 3, 2, 7});
  for (Index i = 0; i < rl.numel(); ++i) rl.value()[i] = float(rng.uniform(-30, 30));
  TensorF sm2 = softmax(rl, 1);
  // sums to one along the axis
  for (Index n = 0; n < 2; ++n)
    for (Index h = 0; h < 2; ++h)
      for (Index w = 0; w < 7; ++w) {
        double s = 0;
        for (Index c = 0; c < 3; ++c) s += sm2.at(n, c, h, w);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
}

TEST_CASE("l2 normalization") {
  SUBCASE("3-4-5 triangle") {
    TensorF x = TensorF::from({1, 2, 1, 1}, {3.f, 4.f});
    TensorF s = TensorF::full({1, 2, 1, 1}, 1.f);
    TensorF y = l2_normalize_channels(x, s);
    CHECK(y.value()[0] == doctest::Approx(0.6));
    CHECK(y.value()[1] == doctest::Approx(0.8));
  }
  SUBCASE("zero vector stays zero") {
    TensorF x = TensorF::zeros({1, 3, 2, 2});
    TensorF s = TensorF::full({1, 3, 1, 1}, 20.f);
    TensorF y = l2_normalize_channels(x, s);
    for (Index i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == 0.f);
  }
  SUBCASE("post-normalization norms equal the scale") {
    Rng rng(13);
    TensorF x = TensorF::zeros({2, 4, 3, 3});
    for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(rng.uniform(-2, 2));
    TensorF s = TensorF::full({1, 4, 1, 1}, 7.f);
    TensorF y = l2_normalize_channels(x, s);
    for (Index n = 0; n < 2; ++n)
      for (Index h = 0; h < 3; ++h)
        for (Index w = 0; w < 3; ++w) {
          double sq = 0;
          for (Index c = 0; c < 4; ++c) sq += double(y.at(n, c, h, w)) * y.at(n, c, h, w);
          CHECK(std::sqrt(sq) == doctest::Approx(7.0).epsilon(1e-5));
        }
  }
}

TEST_CASE("pooling") {
  SUBCASE("2x2 stride 2 halves 38 to 19") {
    TensorF x = TensorF::zeros({1, 1, 38, 38});
    CHECK(max_pool2d(x, 2, 2).shape().h == 19);
  }
  SUBCASE("ceil mode keeps the partial window") {
    TensorF x = TensorF::zeros({1, 1, 19, 19});
    CHECK(max_pool2d(x, 2, 2).shape().h == 9);
    CHECK(max_pool2d(x, 2, 2, 0, true).shape().h == 10);
    // 75 -> 38 (the VGG pool3 case)
    TensorF y = TensorF::zeros({1, 1, 75, 75});
    CHECK(max_pool2d(y, 2, 2, 0, true).shape().h == 38);
  }
  SUBCASE("values are window maxima") {
    TensorF x = TensorF::from({1, 1, 2, 4}, {1.f, 5.f, 2.f, 0.f, 7.f, -1.f, 3.f, 9.f});
    TensorF y = max_pool2d(x, 2, 2);
    CHECK(y.shape() == Shape4{1, 1, 1, 2});
    CHECK(y.value()[0] == 7.f);
    CHECK(y.value()[1] == 9.f);
  }
}

TEST_CASE("upsample_nearest round trips recorded sizes") {
  Rng rng(17);
  TensorF x = TensorF::zeros({1, 2, 10, 10});
  for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(rng.uniform(-1, 1));
  TensorF up = upsample_nearest(x, 19, 19);
  CHECK(up.shape() == Shape4{1, 2, 19, 19});
  TensorF up2 = upsample_nearest(x, 20, 20);
  // every source pixel appears in the 2x upsample
  for (Index i = 0; i < 10; ++i)
    for (Index j = 0; j < 10; ++j)
      CHECK(up2.at(0, 0, 2 * i, 2 * j) == x.at(0, 0, i, j));
}

TEST_CASE("concat and slice recover inputs bit-exactly") {
  Rng rng(23);
  TensorF a = TensorF::zeros({2, 5, 3, 4});
  TensorF b = TensorF::zeros({2, 2, 3, 4});
  TensorF c = TensorF::zeros({2, 3, 3, 4});
  for (auto* t : {&a, &b, &c})
    for (Index i = 0; i < t->numel(); ++i) t->value()[i] = float(rng.uniform(-5, 5));
  TensorF cat = concat_channels<float>({a, b, c});
  CHECK(cat.shape() == Shape4{2, 10, 3, 4});
  TensorF ra = slice_channels(cat, 0, 5), rb = slice_channels(cat, 5, 2),
          rc = slice_channels(cat, 7, 3);
  for (Index i = 0; i < a.numel(); ++i) CHECK(ra.value()[i] == a.value()[i]);
  for (Index i = 0; i < b.numel(); ++i) CHECK(rb.value()[i] == b.value()[i]);
  for (Index i = 0; i < c.numel(); ++i) CHECK(rc.value()[i] == c.value()[i]);

  TensorF bad = TensorF::zeros({2, 2, 3, 5});
  CHECK_THROWS_AS(concat_channels<float>({a, bad}), std::invalid_argument);
  CHECK_THROWS_AS(concat_channels<float>({}), std::invalid_argument);
}

TEST_CASE("fusion channel arithmetic example") {
  // 512 target + two half-width contexts = 1024 channels at 38x38
  TensorF t = TensorF::zeros({1, 512, 38, 38});
  TensorF c1 = TensorF::zeros({1, 256, 38, 38});
  TensorF c2 = TensorF::zeros({1, 256, 38, 38});
  CHECK(concat_channels<float>({t, c1, c2}).shape() == Shape4{1, 1024, 38, 38});
}

TEST_CASE("elementwise mul identity under all-ones mask") {
  Rng rng(29);
  TensorF x = TensorF::zeros({1, 3, 4, 4});
  for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(rng.uniform(-2, 2));
  TensorF ones = TensorF::full(x.shape(), 1.f);
  TensorF y = elementwise_mul(x, ones);
  for (Index i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("flatten_head layout") {
  // (1, A*k, 2, 2) with A=2, k=3
  TensorF x = TensorF::zeros({1, 6, 2, 2});
  for (Index i = 0; i < x.numel(); ++i) x.value()[i] = float(i);
  TensorF y = flatten_head(x, 3);
  CHECK(y.shape() == Shape4{1, 8, 3, 1});
  // cell (h=0,w=1), anchor a=1, item j=2 reads channel a*k+j=5 at that cell
  CHECK(y.at(0, 1 * 2 + 1, 2, 0) == x.at(0, 5, 0, 1));
}

TEST_CASE("sgd step with momentum") {
  ParamStore<float> store;
  TensorF p = store.add("p", TensorF::full({1, 1, 1, 1}, 1.f));
  Sgd<float> opt(0.1f, 0.9f, 0.f);
  p.grad()[0] = 1.f;
  opt.step(store);
  CHECK(p.value()[0] == doctest::Approx(0.9));
  opt.step(store);  // velocity carries over: v = 0.9*1 + 1 = 1.9
  CHECK(p.value()[0] == doctest::Approx(0.9 - 0.19));
}
