// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "diversenet/nn.hpp"
#include "diversenet/rng.hpp"

using namespace diversenet;

namespace {

Tensor<double> random_tensor(const Shape& dims, Rng& rng, double scale = 1.0) {
  Tensor<double> t(dims);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.next_normal();
  return t;
}

/// Reference convolution written as the plainest possible loop nest.
Tensor<double> naive_conv(const Tensor<double>& in, const Tensor<double>& w,
                          const Tensor<double>& b, std::int64_t stride, std::int64_t pad) {
  const std::int64_t bn = in.dim(0), h = in.dim(1), wd = in.dim(2), ci = in.dim(3);
  const std::int64_t co = w.dim(0), k = w.dim(1);
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> out({bn, ho, wo, co});
  for (std::int64_t n = 0; n < bn; ++n)
    for (std::int64_t y = 0; y < ho; ++y)
      for (std::int64_t x = 0; x < wo; ++x)
        for (std::int64_t c = 0; c < co; ++c) {
          double acc = b[c];
          for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx)
              for (std::int64_t f = 0; f < ci; ++f) {
                const std::int64_t iy = y * stride + ky - pad;
                const std::int64_t ix = x * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += in.at(n, iy, ix, f) * w.at(c, ky, kx, f);
              }
          out.at(n, y, x, c) = acc;
        }
  return out;
}

double sum_weighted(const Tensor<double>& t, const Tensor<double>& weights) {
  double s = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i] * weights[i];
  return s;
}

}  // namespace

TEST_CASE("conv forward matches the naive loop nest") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t stride = 1 + static_cast<std::int64_t>(rng.next_below(2));
    Conv2d<double> conv(3, 4, 3, stride, 1);
    conv.init(rng);
    Tensor<double> in = random_tensor({2, 7, 6, 3}, rng);
    Tensor<double> out = conv.forward(in);
    Tensor<double> ref = naive_conv(in, conv.weight(), conv.bias(), stride, 1);
    REQUIRE(out.dims() == ref.dims());
    for (std::int64_t i = 0; i < out.numel(); ++i)
      REQUIRE_THAT(out[i], Catch::Matchers::WithinAbs(ref[i], 1e-12));
  }
}

TEST_CASE("conv backward matches central differences") {
  Rng rng(17);
  Conv2d<double> conv(2, 3, 3, 2, 1);
  conv.init(rng);
  Tensor<double> in = random_tensor({1, 5, 5, 2}, rng);
  Tensor<double> probe = random_tensor(conv.forward(in).dims(), rng);

  // loss(x) = <conv(x), probe>
  conv.zero_grad();
  conv.forward(in);
  Tensor<double> gin = conv.backward(probe);

  const double h = 1e-6;
  for (std::int64_t i = 0; i < in.numel(); i += 7) {
    Tensor<double> shift = in;
    shift[i] += h;
    const double up = sum_weighted(conv.forward(shift), probe);
    shift[i] -= 2 * h;
    const double down = sum_weighted(conv.forward(shift), probe);
    const double numeric = (up - down) / (2 * h);
    REQUIRE_THAT(gin[i], Catch::Matchers::WithinAbs(numeric, 1e-5));
  }

  // weight gradient via the same probe
  for (std::int64_t i = 0; i < conv.weight().numel(); i += 11) {
    const double saved = conv.weight()[i];
    conv.weight()[i] = saved + h;
    const double up = sum_weighted(conv.forward(in), probe);
    conv.weight()[i] = saved - h;
    const double down = sum_weighted(conv.forward(in), probe);
    conv.weight()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    Tensor<double>& wgrad = *conv.params()[0].grad;
    REQUIRE_THAT(wgrad[i], Catch::Matchers::WithinAbs(numeric, 1e-5));
  }
}

TEST_CASE("relu forward/backward") {
  Relu<double> relu;
  Tensor<double> in({1, 1, 1, 4}, {-1.0, 0.0, 2.0, -0.5});
  Tensor<double> out = relu.forward(in);
  CHECK(out[0] == 0.0);
  CHECK(out[2] == 2.0);
  Tensor<double> g({1, 1, 1, 4}, {1.0, 1.0, 1.0, 1.0});
  Tensor<double> gin = relu.backward(g);
  CHECK(gin[0] == 0.0);
  CHECK(gin[2] == 1.0);
}

TEST_CASE("bilinear resize preserves constants and matches finite differences") {
  Rng rng(23);
  BilinearResize<double> up(9, 11);
  Tensor<double> in({1, 3, 4, 2}, 1.5);
  Tensor<double> out = up.forward(in);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    REQUIRE_THAT(out[i], Catch::Matchers::WithinAbs(1.5, 1e-12));

  Tensor<double> x = random_tensor({1, 3, 4, 2}, rng);
  Tensor<double> probe = random_tensor({1, 9, 11, 2}, rng);
  up.forward(x);
  Tensor<double> gin = up.backward(probe);
  const double h = 1e-6;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    Tensor<double> shift = x;
    shift[i] += h;
    const double upv = sum_weighted(up.forward(shift), probe);
    shift[i] -= 2 * h;
    const double downv = sum_weighted(up.forward(shift), probe);
    REQUIRE_THAT(gin[i], Catch::Matchers::WithinAbs((upv - downv) / (2 * h), 1e-6));
  }
}

TEST_CASE("channel dropout zeroes whole channels and rescales the rest") {
  Rng rng(31);
  const double rate = 0.5;
  Tensor<double> mask = ChannelDropout<double>::make_mask(4, 8, rate, rng);
  ChannelDropout<double> drop;
  Tensor<double> in({4, 3, 3, 8}, 1.0);
  Tensor<double> out = drop.forward(in, mask, rate);
  for (std::int64_t b = 0; b < 4; ++b)
    for (std::int64_t p = 0; p < 9; ++p)
      for (std::int64_t c = 0; c < 8; ++c) {
        const double v = out[(b * 9 + p) * 8 + c];
        if (mask.at(b, c) == 0.0) {
          REQUIRE(v == 0.0);
        } else {
          REQUIRE_THAT(v, Catch::Matchers::WithinAbs(2.0, 1e-12));
        }
      }
  // backward applies the same mask and scale
  Tensor<double> g({4, 3, 3, 8}, 1.0);
  Tensor<double> gin = drop.backward(g);
  for (std::int64_t b = 0; b < 4; ++b)
    for (std::int64_t c = 0; c < 8; ++c)
      CHECK(gin[(b * 9) * 8 + c] == (mask.at(b, c) == 0.0 ? 0.0 : 2.0));
}

TEST_CASE("inactive dropout is a strict identity") {
  ChannelDropout<double> drop;
  Tensor<double> in({2, 2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12,
                                   13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24});
  Tensor<double> out = drop.forward(in, Tensor<double>{}, 0.0);
  CHECK(out == in);
  Tensor<double> g = drop.backward(in);
  CHECK(g == in);
}

TEST_CASE("concat and split are inverse") {
  Rng rng(37);
  Tensor<double> a = random_tensor({2, 3, 3, 4}, rng);
  Tensor<double> b = random_tensor({2, 3, 3, 2}, rng);
  Tensor<double> joint = concat_channels(a, b);
  auto [a2, b2] = split_channels(joint, 4);
  CHECK(a2 == a);
  CHECK(b2 == b);
  Tensor<double> bad({1, 3, 3, 2});
  CHECK_THROWS_AS(concat_channels(a, bad), ShapeError);
}

TEST_CASE("global average pooling and broadcast backward sum correctly") {
  Rng rng(41);
  GlobalAvgPool<double> gap;
  Tensor<double> in = random_tensor({2, 4, 3, 5}, rng);
  Tensor<double> out = gap.forward(in);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 5; ++c) {
      double s = 0;
      for (std::int64_t y = 0; y < 4; ++y)
        for (std::int64_t x = 0; x < 3; ++x) s += in.at(b, y, x, c);
      REQUIRE_THAT(out.at(b, 0, 0, c), Catch::Matchers::WithinAbs(s / 12.0, 1e-12));
    }
  Tensor<double> probe = random_tensor({2, 1, 1, 5}, rng);
  gap.forward(in);
  Tensor<double> gin = gap.backward(probe);
  const double h = 1e-6;
  for (std::int64_t i = 0; i < in.numel(); i += 5) {
    Tensor<double> shift = in;
    shift[i] += h;
    double up = sum_weighted(gap.forward(shift), probe);
    shift[i] -= 2 * h;
    double down = sum_weighted(gap.forward(shift), probe);
    REQUIRE_THAT(gin[i], Catch::Matchers::WithinAbs((up - down) / (2 * h), 1e-6));
  }

  BroadcastSpatial<double> bc(4, 3);
  Tensor<double> small = random_tensor({2, 1, 1, 5}, rng);
  Tensor<double> wide = bc.forward(small);
  CHECK(wide.dims() == Shape{2, 4, 3, 5});
  Tensor<double> gprobe = random_tensor({2, 4, 3, 5}, rng);
  Tensor<double> gsmall = bc.backward(gprobe);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 5; ++c) {
      double s = 0;
      for (std::int64_t p = 0; p < 12; ++p) s += gprobe[(b * 12 + p) * 5 + c];
      REQUIRE_THAT(gsmall[b * 5 + c], Catch::Matchers::WithinAbs(s, 1e-12));
    }
}
