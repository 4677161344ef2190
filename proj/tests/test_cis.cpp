#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "sa3/cis.hpp"
#include "sa3/rng.hpp"

using namespace sa3;

TEST_CASE("kernel_size on the documented channel counts", "[cis]") {
  CHECK(kernel_size(2048) == 5);  // t = 5, already odd
  CHECK(kernel_size(256) == 3);   // t = 3.5 -> nearest odd is 3
  CHECK(kernel_size(512) == 5);   // t = 4, tie resolved upward
  CHECK(kernel_size(128) == 3);
  CHECK(kernel_size(2) == 1);
  CHECK_THROWS_AS(kernel_size(1), std::invalid_argument);
}

TEST_CASE("kernel_size clamps to the largest odd <= C", "[cis]") {
  // gamma=1, b=-3 makes t = log2(C)+3 exceed tiny channel counts
  CHECK(kernel_size(2, 1, -3) == 1);
  CHECK(kernel_size(4, 1, -3) == 3);
}

TEST_CASE("kernel_size matches a brute-force nearest-odd search for C in 2..4096", "[cis]") {
  for (int c = 2; c <= 4096; ++c) {
    const double t = std::fabs((std::log2(static_cast<double>(c)) - 1.0) / 2.0);
    int expect = oracles::brute_nearest_odd(t);
    const int cap = c % 2 == 1 ? c : c - 1;
    if (expect > cap) expect = cap;
    REQUIRE(kernel_size(c) == expect);
    REQUIRE(kernel_size(c) % 2 == 1);
  }
}

TEST_CASE("channel_dim inverts kernel_size where t lands on an odd integer", "[cis]") {
  CHECK(channel_dim(3) == 128);
  CHECK(channel_dim(1) == 8);
  CHECK_THROWS_AS(channel_dim(2), std::invalid_argument);
  CHECK_THROWS_AS(channel_dim(0), std::invalid_argument);
  for (int k : {1, 3, 5, 7}) CHECK(kernel_size(channel_dim(k)) == k);
}

TEST_CASE("cis_forward forced values", "[cis]") {
  auto cfg = CisConfig::adaptive(8);

  // all-zero input: omega = 0.5 per channel, output all zeros
  auto out = cis_forward(Tensor::zeros({2, 2, 8}), cfg);
  for (double w : out.omega.values()) CHECK(w == 0.5);
  for (double v : out.reweighted.values()) CHECK(v == 0.0);

  // zero kernel: omega = 0.5 exactly, output = 0.5 * chi
  Lcg64 rng(7);
  std::vector<double> vals(2 * 2 * 8);
  for (auto& v : vals) v = rng.uniform(-2, 2);
  Tensor chi({2, 2, 8}, vals);
  auto halved = cis_forward(chi, cfg, Tensor::zeros({cfg.kernel_weights.extent(0)}));
  for (std::size_t i = 0; i < vals.size(); ++i)
    CHECK(halved.reweighted.values()[i] == 0.5 * vals[i]);

  CHECK_THROWS_AS(cis_forward(Tensor::zeros({2, 2, 4}), cfg), std::invalid_argument);
}

TEST_CASE("cis_forward matches the straight-line oracle to 1e-12", "[cis]") {
  Lcg64 rng(7);
  const int h = 4, w = 4, c = 8;
  std::vector<double> vals(static_cast<std::size_t>(h) * w * c);
  for (auto& v : vals) v = rng.uniform(-2, 2);
  std::vector<double> kernel{0.4, -0.3, 0.25};

  auto got = cis_forward(Tensor({h, w, c}, vals), CisConfig::adaptive(c), Tensor({3}, kernel));
  auto expect = oracles::brute_cis(vals, h, w, c, kernel);
  for (int i = 0; i < c; ++i)
    CHECK(std::fabs(got.omega.values()[i] - expect.omega[i]) <= 1e-12);
  for (std::size_t i = 0; i < vals.size(); ++i)
    CHECK(std::fabs(got.reweighted.values()[i] - expect.reweighted[i]) <= 1e-12);
}

TEST_CASE("omega stays strictly inside (0,1) and ignores spatial layout", "[cis]") {
  Lcg64 rng(19);
  const int h = 3, w = 5, c = 16;
  auto cfg = CisConfig::adaptive(c);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> vals(static_cast<std::size_t>(h) * w * c);
    for (auto& v : vals) v = rng.uniform(-40, 40);
    auto out = cis_forward(Tensor({h, w, c}, vals), cfg);
    for (double x : out.omega.values()) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
    }
    CHECK(out.reweighted.shape() == std::vector<int>{h, w, c});

    // spatial permutation leaves omega exactly unchanged
    std::vector<double> shuffled(vals.size());
    std::vector<int> perm(h * w);
    for (int i = 0; i < h * w; ++i) perm[i] = i;
    for (int i = h * w - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    for (int p = 0; p < h * w; ++p)
      for (int ch = 0; ch < c; ++ch)
        shuffled[static_cast<std::size_t>(p) * c + ch] = vals[static_cast<std::size_t>(perm[p]) * c + ch];
    auto out2 = cis_forward(Tensor({h, w, c}, shuffled), cfg);
    CHECK(out2.omega.values() == out.omega.values());
  }
}

TEST_CASE("scaling the input composes through pooling, not past the sigmoid", "[cis]") {
  Lcg64 rng(23);
  const int h = 2, w = 2, c = 8;
  auto cfg = CisConfig::adaptive(c);
  std::vector<double> vals(static_cast<std::size_t>(h) * w * c);
  for (auto& v : vals) v = rng.uniform(-1, 1);
  const double s = 2.5;
  std::vector<double> scaled(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) scaled[i] = s * vals[i];

  Tensor chi({h, w, c}, vals);
  Tensor chi_s({h, w, c}, scaled);
  auto pooled = global_avg_pool(chi).values();
  auto pooled_s = global_avg_pool(chi_s).values();
  for (int i = 0; i < c; ++i) CHECK(pooled_s[i] == Catch::Approx(s * pooled[i]).margin(1e-12));

  // output equals chi_s * sigmoid(conv(s*y)) elementwise: the compositional identity
  auto out = cis_forward(chi_s, cfg);
  Tensor conv = conv1d(Tensor({c}, pooled_s), cfg.kernel_weights);
  Tensor omega = sigmoid(conv);
  for (std::size_t i = 0; i < scaled.size(); ++i)
    CHECK(out.reweighted.values()[i] ==
          Catch::Approx(scaled[i] * omega.values()[i % static_cast<std::size_t>(c)]).margin(1e-12));
}

TEST_CASE("cis_forward is differentiable w.r.t. input and kernel", "[cis]") {
  Lcg64 rng(29);
  std::vector<double> vals(2 * 2 * 8);
  for (auto& v : vals) v = rng.uniform(-2, 2);
  const double err = oracles::max_grad_rel_err(
      [](GradTape&, const std::vector<Tensor>& in) {
        CisConfig cfg;
        cfg.expected_channels = 8;
        auto out = cis_forward(in[0], cfg, in[1]);
        return mean(mul(out.reweighted, out.reweighted));
      },
      {{{2, 2, 8}, vals}, {{3}, {0.5, 0.2, -0.1}}});
  CHECK(err <= 1e-4);
}
