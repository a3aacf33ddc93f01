#include <cmath>

#include "doctest.h"
#include "naln/alignment.hpp"
#include "naln/error.hpp"
#include "support.hpp"

using namespace naln;
using naln::test::max_abs_diff;
using naln::test::random_tensor;
using naln::test::to_vec;

namespace {

// Population mean / std per channel of [K,C,T] by two passes.
std::pair<std::vector<double>, std::vector<double>> two_pass(const Tensor& x) {
  const std::size_t K = x.dim(0), C = x.dim(1), T = x.rank() == 3 ? x.dim(2) : 1;
  std::vector<double> mean(C, 0), var(C, 0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < T; ++t) mean[c] += x.data()[(k * C + c) * T + t];
    mean[c] /= static_cast<double>(K * T);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < T; ++t) {
        const double d = x.data()[(k * C + c) * T + t] - mean[c];
        var[c] += d * d;
      }
    var[c] = std::sqrt(var[c] / static_cast<double>(K * T));
  }
  return {mean, var};
}

Tensor affine_channels(const Tensor& x, const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t K = x.dim(0), C = x.dim(1), T = x.rank() == 3 ? x.dim(2) : 1;
  std::vector<double> v(x.numel());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t i = (k * C + c) * T + t;
        v[i] = a[c] * x.data()[i] + b[c];
      }
  return Tensor(x.shape(), std::move(v));
}

}  // namespace

TEST_CASE("compute_stats") {
  auto s = compute_stats(Tensor({2, 1, 2}, {0, 0, 2, 2}));
  CHECK(s.mean[0] == doctest::Approx(1.0));
  CHECK(s.std[0] == doctest::Approx(1.0));
  CHECK(s.n_trials == 2);
  CHECK(s.n_timepoints == 2);

  auto c = compute_stats(Tensor::full({3, 2, 5}, 4.25));
  CHECK(c.mean[1] == 4.25);
  CHECK(c.std[1] == 0.0);

  Rng rng(1);
  Tensor r = random_tensor({7, 4, 50}, rng, -5, 5);
  auto st = compute_stats(r);
  auto [m, sd] = two_pass(r);
  CHECK(max_abs_diff(st.mean, m) <= 1e-12);
  CHECK(max_abs_diff(st.std, sd) <= 1e-12);

  Tensor r2 = random_tensor({9, 3}, rng);
  auto st2 = compute_stats(r2);
  auto [m2, sd2] = two_pass(r2);
  CHECK(max_abs_diff(st2.mean, m2) <= 1e-12);
  CHECK(max_abs_diff(st2.std, sd2) <= 1e-12);

  CHECK_THROWS_AS(compute_stats(Tensor::zeros({0, 3, 4})), EmptySetError);
}

TEST_CASE("standardize") {
  const auto layer = StatAlignLayer::create(1);
  Tensor x({2, 1, 2}, {0, 0, 2, 2});
  auto y = standardize(x, compute_stats(x), layer);
  CHECK(max_abs_diff(y.data(), std::vector<double>{-1, -1, 1, 1}) <= 1e-4);

  auto layer2 = StatAlignLayer::create(3);
  layer2.bias.mutable_data()[1] = 0.7;
  Tensor k = Tensor::full({4, 3, 6}, -3.0);
  auto yk = standardize(k, compute_stats(k), layer2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t t = 0; t < 6; ++t) CHECK(yk.data()[(i * 3 + 1) * 6 + t] == doctest::Approx(0.7));

  Rng rng(2);
  Tensor r = random_tensor({6, 3, 40}, rng, -4, 4);
  auto yr = standardize(r, compute_stats(r), layer2);
  layer2.bias.mutable_data()[1] = 0.0;
  yr = standardize(r, compute_stats(r), layer2);
  auto [m, sd] = two_pass(yr);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(std::abs(m[c]) <= 1e-9);
    CHECK(std::abs(sd[c] - 1) <= 1e-6);
  }

  Tensor shifted = affine_channels(r, {3.7, 3.7, 3.7}, {-2.1, -2.1, -2.1});
  CHECK(max_abs_diff(standardize(shifted, compute_stats(shifted), layer2).data(), yr.data()) <= 1e-6);
}

TEST_CASE("affine-shift nulling down to std 1e-3") {
  Rng rng(3);
  const auto layer = StatAlignLayer::create(4);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor({5, 4, 30}, rng, -1, 1);
    // Channel std 2.1e-3, so the smallest corrupted std (a >= 0.5) stays above 1e-3.
    const auto sd = two_pass(x).second;
    std::vector<double> to_target(4);
    for (std::size_t c = 0; c < 4; ++c) to_target[c] = 2.1e-3 / sd[c];
    x = affine_channels(x, to_target, std::vector<double>(4, 0.0));
    std::vector<double> a(4), b(4);
    for (std::size_t c = 0; c < 4; ++c) {
      a[c] = rng.uniform(0.5, 3);
      b[c] = rng.uniform(-2, 2);
    }
    Tensor y = affine_channels(x, a, b);
    const auto ys = compute_stats(y);
    REQUIRE(*std::min_element(ys.std.begin(), ys.std.end()) >= 1e-3);
    CHECK(max_abs_diff(standardize(y, compute_stats(y), layer).data(),
                       standardize(x, compute_stats(x), layer).data()) <= 1e-6);
  }
}

TEST_CASE("standardized std is 1 whenever std/eps exceeds 1e4") {
  const auto layer = StatAlignLayer::create(1, 1e-5);
  Rng rng(4);
  Tensor x = random_tensor({8, 1, 25}, rng, -1, 1);
  const double s = compute_stats(x).std[0];
  // Scale to std just over 1e4 * eps.
  Tensor y = affine_channels(x, {0.1 / s * 1.0001}, {5.0});
  REQUIRE(compute_stats(y).std[0] / 1e-5 > 1e4);
  auto out = standardize(y, compute_stats(y), layer);
  CHECK(std::abs(compute_stats(out).std[0] - 1) <= 1e-6);
}

TEST_CASE("StatAlignLayer groups use their own statistics") {
  Rng rng(5);
  auto layer = StatAlignLayer::create(3);
  for (std::size_t c = 0; c < 3; ++c) {
    layer.weight.mutable_data()[c] = rng.uniform(0.5, 2);
    layer.bias.mutable_data()[c] = rng.uniform(-1, 1);
  }
  Tensor x = random_tensor({7, 3, 10}, rng);
  auto y = layer.forward(x, {0, 3, 7});
  auto y1 = layer.forward(ops::slice_rows(x, 0, 3), {0, 3});
  auto y2 = layer.forward(ops::slice_rows(x, 3, 7), {0, 4});
  CHECK(max_abs_diff(std::span<const double>(y.data().data(), 90), y1.data()) <= 1e-12);
  CHECK(max_abs_diff(std::span<const double>(y.data().data() + 90, 120), y2.data()) <= 1e-12);
  CHECK(max_abs_diff(ops::slice_rows(y, 0, 3).data(), standardize(ops::slice_rows(x, 0, 3), compute_stats(ops::slice_rows(x, 0, 3)), layer).data()) <= 1e-12);
  CHECK_THROWS_AS(layer.forward(x, {0, 3, 3, 7}), EmptySetError);
}

TEST_CASE("deep-set alignment") {
  Rng rng(6);
  const std::size_t N = 12;
  const auto ds = DeepSetAlign::create(N, Rng(7));
  CHECK(ds.readout_size() == 3);
  CHECK(ds.readout_size() < N);
  CHECK(DeepSetAlign::readout_dim(3) == 1);

  Tensor x = random_tensor({9, N}, rng);
  auto y = deepset_forward(x, ds);
  CHECK(y.shape() == Shape{9, N});

  SUBCASE("singleton set") {
    auto one = ops::slice_rows(x, 2, 3);
    auto y1 = ds.forward(one);
    for (double v : y1.data()) CHECK(std::isfinite(v));
    // Readout of one trial is gamma(that trial).
    auto r = ops::elu(ops::linear(one, ds.gamma_weight, ds.gamma_bias));
    auto manual = ops::elu(ops::linear(ops::concat({one, r}, 1), ds.lambda_weight, ds.lambda_bias));
    CHECK(max_abs_diff(y1.data(), manual.data()) <= 1e-12);
  }
  SUBCASE("duplicating every trial leaves outputs unchanged") {
    auto yd = ds.forward(ops::concat({x, x}, 0));
    CHECK(max_abs_diff(std::span<const double>(yd.data().data(), 9 * N), y.data()) <= 1e-12);
  }
  SUBCASE("permutation equivariance is bitwise") {
    for (int rep = 0; rep < 10; ++rep) {
      auto p = rng.permutation(9);
      std::vector<double> px(9 * N);
      for (std::size_t i = 0; i < 9; ++i) std::copy_n(x.data().begin() + p[i] * N, N, px.begin() + i * N);
      auto yp = ds.forward(Tensor({9, N}, px));
      for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < N; ++j) CHECK(yp.data()[i * N + j] == y.data()[p[i] * N + j]);
    }
  }
  SUBCASE("groups are independent") {
    auto yg = ds.forward_groups(x, {0, 4, 9});
    CHECK(max_abs_diff(ops::slice_rows(yg, 0, 4).data(), ds.forward(ops::slice_rows(x, 0, 4)).data()) == 0.0);
    CHECK(max_abs_diff(ops::slice_rows(yg, 4, 9).data(), ds.forward(ops::slice_rows(x, 4, 9)).data()) == 0.0);
  }
  SUBCASE("gradient reaches both paths") {
    Tensor xg = random_tensor({5, N}, rng, -1, 1, true);
    std::vector<std::pair<std::string, Tensor>> params{{"x", xg},
                                                       {"gamma.w", ds.gamma_weight},
                                                       {"gamma.b", ds.gamma_bias},
                                                       {"lambda.w", ds.lambda_weight},
                                                       {"lambda.b", ds.lambda_bias}};
    auto r = test::check_gradients([&] { return test::project(ds.forward(xg)); }, params);
    INFO(r.worst);
    CHECK(r.max_rel_err < 1e-4);
    double gsum = 0;
    for (double g : ds.gamma_weight.grad()) gsum += std::abs(g);
    CHECK(gsum > 0);
  }
  SUBCASE("channel sets over trials and time") {
    const auto dc = DeepSetAlign::create(4, Rng(8));
    Tensor f = random_tensor({3, 4, 5}, rng, -1, 1, true);
    auto out = dc.forward_channels(f, {0, 1, 3});
    CHECK(out.shape() == f.shape());
    // Permuting trials within the second subject permutes outputs bitwise.
    std::vector<double> sw(to_vec(f));
    std::swap_ranges(sw.begin() + 20, sw.begin() + 40, sw.begin() + 40);
    auto out2 = dc.forward_channels(Tensor(f.shape(), sw), {0, 1, 3});
    CHECK(max_abs_diff(std::span<const double>(out.data().data(), 20), std::span<const double>(out2.data().data(), 20)) == 0.0);
    CHECK(max_abs_diff(std::span<const double>(out.data().data() + 20, 20), std::span<const double>(out2.data().data() + 40, 20)) == 0.0);
    auto r = test::check_gradients([&] { return test::project(dc.forward_channels(f, {0, 1, 3})); },
                                   {{"x", f}, {"gamma.w", dc.gamma_weight}, {"lambda.w", dc.lambda_weight}});
    INFO(r.worst);
    CHECK(r.max_rel_err < 1e-4);
  }
  CHECK_THROWS_AS(ds.forward(Tensor::zeros({0, N})), EmptySetError);
}
