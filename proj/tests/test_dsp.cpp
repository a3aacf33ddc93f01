#include <cmath>
#include <numbers>

#include "doctest.h"
#include "naln/datapipe.hpp"
#include "naln/dsp.hpp"
#include "naln/error.hpp"
#include "support.hpp"

using namespace naln;
using std::numbers::pi;

namespace {

std::vector<double> sine(double f, double fs, std::size_t n, double phase = 0.0) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::sin(2 * pi * f * static_cast<double>(i) / fs + phase);
  return v;
}

double rms(const std::vector<double>& v, std::size_t from) {
  double s = 0;
  for (std::size_t i = from; i < v.size(); ++i) s += v[i] * v[i];
  return std::sqrt(s / static_cast<double>(v.size() - from));
}

double correlation(const std::vector<double>& a, const std::vector<double>& b, std::size_t from, std::size_t to) {
  double ma = 0, mb = 0;
  const double n = static_cast<double>(to - from);
  for (std::size_t i = from; i < to; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = from; i < to; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// |H| evaluated from the raw biquad coefficients, independent of response().
double magnitude(const dsp::BiquadCascade& c, double f) {
  const std::complex<double> z1 = std::polar(1.0, -2 * pi * f / c.fs_hz);
  std::complex<double> h = 1.0;
  for (const auto& s : c.sections) {
    h *= (s.b0 + s.b1 * z1 + s.b2 * z1 * z1) / (1.0 + s.a1 * z1 + s.a2 * z1 * z1);
  }
  return std::abs(h);
}

}  // namespace

TEST_CASE("butterworth highpass response") {
  const auto hp = dsp::design_butter_highpass(4, 2.0, 160.0);
  CHECK(hp.sections.size() == 2);
  CHECK(hp.stable());
  CHECK(std::abs(magnitude(hp, 2.0) - 1 / std::sqrt(2.0)) <= 1e-6);
  CHECK(magnitude(hp, 0.0) < 1e-12);
  CHECK(magnitude(hp, 80.0) >= 0.999);
  CHECK(std::abs(std::abs(hp.response(2.0)) - magnitude(hp, 2.0)) < 1e-12);
  // Maximally flat: magnitude rises monotonically through the band.
  double prev = 0;
  for (double f = 0.1; f < 80; f += 0.1) {
    const double m = magnitude(hp, f);
    CHECK(m >= prev - 1e-12);
    prev = m;
  }
  for (int order : {1, 2, 3, 5, 8}) {
    const auto h = dsp::design_butter_highpass(order, 5.0, 100.0);
    CHECK(h.stable());
    CHECK(std::abs(magnitude(h, 5.0) - 1 / std::sqrt(2.0)) <= 1e-6);
    // Butterworth in the analog prototype: |H|^2 = 1 / (1 + (wc/w)^(2n)) with prewarped frequencies.
    const double wc = std::tan(pi * 5.0 / 100.0), w = std::tan(pi * 2.0 / 100.0);
    CHECK(magnitude(h, 2.0) == doctest::Approx(1 / std::sqrt(1 + std::pow(wc / w, 2 * order))).epsilon(1e-9));
  }
  CHECK_THROWS_AS(dsp::design_butter_highpass(4, 80.0, 160.0), ParameterError);
  CHECK_THROWS_AS(dsp::design_butter_highpass(0, 2.0, 160.0), ParameterError);
}

TEST_CASE("notch response") {
  const auto n50 = dsp::design_notch(50.0, 30.0, 160.0);
  CHECK(n50.stable());
  CHECK(magnitude(n50, 50.0) < 1e-12);
  CHECK(std::abs(magnitude(n50, 0.0) - 1) <= 1e-9);
  CHECK(std::abs(magnitude(n50, 80.0) - 1) <= 1e-9);

  const std::size_t n = 4000;
  auto x = sine(50.0, 160.0, n);
  auto y = dsp::filt(n50, x);
  CHECK(rms(y, 2000) < 1e-3 * rms(x, 2000));

  std::vector<double> dc(n, 3.0);
  auto ydc = dsp::filt(n50, dc);
  CHECK(std::abs(ydc.back() - 3.0) < 1e-9);

  const auto n60 = dsp::design_notch(60.0, 30.0, 160.0);
  auto x10 = sine(10.0, 160.0, n);
  CHECK(rms(dsp::filt(n60, x10), 2000) / rms(x10, 2000) > 0.99);
  CHECK_THROWS_AS(dsp::design_notch(80.0, 30.0, 160.0), ParameterError);
  CHECK_THROWS_AS(dsp::design_notch(50.0, 0.0, 160.0), ParameterError);
}

TEST_CASE("filt") {
  Rng rng(1);
  std::vector<double> x(64), z(64);
  for (auto& v : x) v = rng.normal();
  for (auto& v : z) v = rng.normal();

  dsp::BiquadCascade id;
  id.sections.push_back({});
  CHECK(dsp::filt(id, x) == x);

  SUBCASE("impulse against the hand recurrence") {
    dsp::BiquadCascade c;
    c.sections.push_back({0.5, 0.2, -0.1, -0.3, 0.2});
    std::vector<double> imp(5, 0.0);
    imp[0] = 1;
    auto h = dsp::filt(c, imp);
    // y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]
    const double y0 = 0.5;
    const double y1 = 0.2 + 0.3 * y0;
    const double y2 = -0.1 + 0.3 * y1 - 0.2 * y0;
    const double y3 = 0.3 * y2 - 0.2 * y1;
    const double y4 = 0.3 * y3 - 0.2 * y2;
    const std::vector<double> want{y0, y1, y2, y3, y4};
    for (std::size_t i = 0; i < 5; ++i) CHECK(h[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
  SUBCASE("linearity") {
    const auto hp = dsp::design_butter_highpass(4, 2.0, 160.0);
    for (int trial = 0; trial < 10; ++trial) {
      const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3);
      std::vector<double> mix(64);
      for (std::size_t i = 0; i < 64; ++i) mix[i] = a * x[i] + b * z[i];
      auto fx = dsp::filt(hp, x), fz = dsp::filt(hp, z), fm = dsp::filt(hp, mix);
      double err = 0;
      for (std::size_t i = 0; i < 64; ++i) err = std::max(err, std::abs(fm[i] - (a * fx[i] + b * fz[i])));
      CHECK(err <= 1e-9);
    }
  }
  SUBCASE("NaN names the sample") {
    x[17] = std::nan("");
    try {
      dsp::filt(id, x);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("17") != std::string::npos);
    }
  }
}

TEST_CASE("resample") {
  Rng rng(2);
  std::vector<double> x(100);
  for (auto& v : x) v = rng.normal();
  CHECK(dsp::resample(x, 250.0, 250.0) == x);
  CHECK(dsp::resample(std::vector<double>(512, 0.0), 200.0, 160.0).size() == 410);
  CHECK(dsp::resample(std::vector<double>(300, 0.0), 100.0, 160.0).size() == 480);
  CHECK_THROWS_AS(dsp::resample(std::vector<double>{}, 200.0, 160.0), DataError);
  CHECK_THROWS_AS(dsp::resample(x, 0.0, 160.0), ParameterError);

  SUBCASE("8 Hz sine from 200 Hz to 160 Hz") {
    const std::size_t n = 1024;
    auto y = dsp::resample(sine(8.0, 200.0, n), 200.0, 160.0);
    REQUIRE(y.size() == 819);
    auto ideal = sine(8.0, 160.0, y.size());
    // Skip the filter edges; compare the interior.
    CHECK(correlation(y, ideal, 80, y.size() - 80) > 0.999);
    // Peak of the DFT magnitude over the interior sits at the 8 Hz bin.
    const std::size_t m = 640;
    std::size_t best = 0;
    double best_mag = 0;
    for (std::size_t k = 1; k < m / 2; ++k) {
      std::complex<double> s = 0;
      for (std::size_t t = 0; t < m; ++t) s += y[80 + t] * std::polar(1.0, -2 * pi * k * t / m);
      if (std::abs(s) > best_mag) {
        best_mag = std::abs(s);
        best = k;
      }
    }
    CHECK(static_cast<double>(best) * 160.0 / m == doctest::Approx(8.0));
  }
  SUBCASE("upsampling keeps band-limited content") {
    auto y = dsp::resample(sine(11.0, 100.0, 600), 100.0, 160.0);
    CHECK(correlation(y, sine(11.0, 160.0, y.size()), 100, y.size() - 100) > 0.999);
  }
}

TEST_CASE("common average reference") {
  auto y = dsp::common_average_reference(Tensor({2, 3}, {1, 1, 1, 3, 3, 3}));
  CHECK(test::to_vec(y) == std::vector<double>{-1, -1, -1, 1, 1, 1});

  Tensor zm({2, 3}, {1, -2, 0.5, -1, 2, -0.5});
  CHECK(test::to_vec(dsp::common_average_reference(zm)) == test::to_vec(zm));

  Rng rng(3);
  Tensor r = test::random_tensor({30, 320}, rng, -50, 50);
  auto c = dsp::common_average_reference(r);
  for (std::size_t t = 0; t < 320; ++t) {
    double s = 0;
    for (std::size_t ch = 0; ch < 30; ++ch) s += c.data()[ch * 320 + t];
    CHECK(std::abs(s / 30) < 1e-12);
  }
  CHECK_THROWS_AS(dsp::common_average_reference(Tensor({1, 4}, {1, 2, 3, 4})), ParameterError);
}

TEST_CASE("channel selection") {
  SynthSpec spec;
  spec.n_subjects = 1;
  spec.trials_per_class = 2;
  spec.n_channels = 64;
  spec.n_samples = 32;
  const TrialSet set = synth_generate(spec, 1);

  auto same = dsp::select_channels(set, set.channel_names);
  CHECK(test::to_vec(same.data) == test::to_vec(set.data));

  std::vector<std::string> rev(set.channel_names.rbegin(), set.channel_names.rend());
  auto r = dsp::select_channels(set, rev);
  CHECK(r.channel_names == rev);
  for (std::size_t i = 0; i < set.n_trials(); ++i)
    for (std::size_t c = 0; c < 64; ++c)
      for (std::size_t t = 0; t < 32; ++t)
        CHECK(r.data.data()[(i * 64 + c) * 32 + t] == set.data.data()[(i * 64 + 63 - c) * 32 + t]);

  auto sub = dsp::select_channels(set, dsp::default_common_channels());
  CHECK(sub.data.shape() == Shape{set.n_trials(), 30, 32});
  try {
    dsp::select_channels(set, {"Cz", "XYZ"});
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("XYZ") != std::string::npos);
  }
}

TEST_CASE("preprocess runs the fixed stage order") {
  const auto opt = dsp::PreprocessOptions::defaults();
  REQUIRE(opt.describe().size() == 6);
  CHECK(opt.describe()[0].rfind("select_channels", 0) == 0);
  CHECK(opt.describe()[1].rfind("resample(160", 0) == 0);
  CHECK(opt.describe()[2].rfind("butter_highpass(order 4, 2 Hz", 0) == 0);
  CHECK(opt.describe()[3].rfind("notch(50", 0) == 0);
  CHECK(opt.describe()[4].rfind("notch(60", 0) == 0);
  CHECK(opt.describe()[5] == "common_average_reference");

  SynthSpec spec;
  spec.n_subjects = 2;
  spec.trials_per_class = 2;
  spec.n_channels = 64;
  spec.n_samples = 200;
  spec.fs_hz = 100;
  const TrialSet set = synth_generate(spec, 2);
  const TrialSet a = dsp::preprocess(set, opt), b = dsp::preprocess(set, opt);
  CHECK(a.fs_hz == 160.0);
  CHECK(a.data.shape() == Shape{set.n_trials(), 30, 320});
  CHECK(test::to_vec(a.data) == test::to_vec(b.data));

  // The chain by hand on one channel of one trial (before CAR) matches.
  dsp::PreprocessOptions no_car = opt;
  no_car.car = false;
  const TrialSet p = dsp::preprocess(set, no_car);
  const std::size_t src_c = 10;  // Cz in the source montage
  REQUIRE(set.channel_names[src_c] == "Cz");
  std::vector<double> ch(set.data.data().begin() + src_c * 200, set.data.data().begin() + src_c * 200 + 200);
  auto v = dsp::resample(ch, 100, 160);
  v = dsp::filt(dsp::design_butter_highpass(4, 2, 160), v);
  v = dsp::filt(dsp::design_notch(50, 30, 160), v);
  v = dsp::filt(dsp::design_notch(60, 30, 160), v);
  const auto& names = dsp::default_common_channels();
  const std::size_t dst_c = static_cast<std::size_t>(std::find(names.begin(), names.end(), "Cz") - names.begin());
  CHECK(test::max_abs_diff(v, std::span<const double>(p.data.data().data() + dst_c * 320, 320)) == 0.0);
}
