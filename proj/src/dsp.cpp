#include "naln/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "naln/error.hpp"

namespace naln::dsp {

using std::numbers::pi;

std::complex<double> BiquadCascade::response(double f_hz) const {
  const std::complex<double> z = std::polar(1.0, 2.0 * pi * f_hz / fs_hz);
  const std::complex<double> zi = 1.0 / z, zi2 = zi * zi;
  std::complex<double> h = 1.0;
  for (const auto& s : sections) h *= (s.b0 + s.b1 * zi + s.b2 * zi2) / (1.0 + s.a1 * zi + s.a2 * zi2);
  return h;
}

bool BiquadCascade::stable() const {
  for (const auto& s : sections) {
    for (double v : {s.b0, s.b1, s.b2, s.a1, s.a2}) {
      if (!std::isfinite(v)) return false;
    }
    // Stability triangle for z^2 + a1 z + a2.
    if (!(std::abs(s.a2) < 1.0 && std::abs(s.a1) < 1.0 + s.a2)) return false;
  }
  return true;
}

BiquadCascade design_butter_highpass(int order, double cutoff_hz, double fs_hz) {
  if (order < 1) throw ParameterError("butterworth: order must be >= 1");
  if (!(fs_hz > 0) || !(cutoff_hz > 0) || !(cutoff_hz < fs_hz / 2)) {
    throw ParameterError("butterworth: cutoff " + std::to_string(cutoff_hz) + " Hz must lie in (0, " +
                         std::to_string(fs_hz / 2) + ") Hz");
  }
  BiquadCascade c{{}, "butter_highpass", cutoff_hz, order, fs_hz};
  // Bilinear transform with prewarping: s = (1/K) (z-1)/(z+1), K = tan(pi fc / fs).
  const double K = std::tan(pi * cutoff_hz / fs_hz);
  const double K2 = K * K;
  for (int k = 0; k < order / 2; ++k) {
    const double zeta = std::sin(pi * (2 * k + 1) / (2.0 * order));
    const double a0 = 1 + 2 * zeta * K + K2;
    c.sections.push_back({1 / a0, -2 / a0, 1 / a0, 2 * (K2 - 1) / a0, (1 - 2 * zeta * K + K2) / a0});
  }
  if (order % 2) {
    const double a0 = 1 + K;
    c.sections.push_back({1 / a0, -1 / a0, 0, (K - 1) / a0, 0});
  }
  return c;
}

BiquadCascade design_notch(double f0_hz, double q, double fs_hz) {
  if (!(fs_hz > 0) || !(f0_hz > 0) || !(f0_hz < fs_hz / 2)) {
    throw ParameterError("notch: center " + std::to_string(f0_hz) + " Hz must lie in (0, " + std::to_string(fs_hz / 2) +
                         ") Hz");
  }
  if (!(q > 0)) throw ParameterError("notch: quality factor must be > 0");
  const double w0 = 2 * pi * f0_hz / fs_hz;
  const double alpha = std::sin(w0) / (2 * q);
  const double cw = std::cos(w0);
  const double a0 = 1 + alpha;
  BiquadCascade c{{}, "notch", f0_hz, 2, fs_hz};
  c.sections.push_back({1 / a0, -2 * cw / a0, 1 / a0, -2 * cw / a0, (1 - alpha) / a0});
  return c;
}

std::vector<double> filt(const BiquadCascade& cascade, std::span<const double> signal) {
  for (std::size_t i = 0; i < signal.size(); ++i) {
    if (std::isnan(signal[i])) throw DataError("filt: NaN at sample " + std::to_string(i));
  }
  std::vector<double> y(signal.begin(), signal.end());
  for (const auto& s : cascade.sections) {
    double z1 = 0, z2 = 0;
    for (auto& v : y) {
      const double x = v;
      const double out = s.b0 * x + z1;
      z1 = s.b1 * x - s.a1 * out + z2;
      z2 = s.b2 * x - s.a2 * out;
      v = out;
    }
  }
  return y;
}

namespace {

constexpr std::size_t kTapsPerPhase = 64;
constexpr double kKaiserBeta = 8.0;
constexpr double kCutoffFraction = 0.9;  // of the lower Nyquist frequency

// Smallest up/down pair with fs_out / fs_in == up / down.
std::pair<std::size_t, std::size_t> rational_ratio(double fs_in, double fs_out) {
  const double ratio = fs_out / fs_in;
  for (std::size_t down = 1; down <= 1000; ++down) {
    const double up = ratio * static_cast<double>(down);
    const double r = std::round(up);
    if (r >= 1 && std::abs(up - r) <= 1e-9 * up) {
      const auto u = static_cast<std::size_t>(r);
      const std::size_t g = std::gcd(u, down);
      return {u / g, down / g};
    }
  }
  throw ParameterError("resample: ratio " + std::to_string(fs_out) + "/" + std::to_string(fs_in) +
                       " has no rational form with denominator <= 1000");
}

}  // namespace

std::vector<double> resample(std::span<const double> signal, double fs_in, double fs_out) {
  if (!(fs_in > 0) || !(fs_out > 0)) throw ParameterError("resample: sampling rates must be > 0");
  if (signal.empty()) throw DataError("resample: empty input");
  if (fs_in == fs_out) return {signal.begin(), signal.end()};
  const auto [up, down] = rational_ratio(fs_in, fs_out);

  // Prototype at the upsampled rate, centered on tap `center`.
  const std::size_t center = kTapsPerPhase / 2 * up;
  const std::size_t n_taps = 2 * center + 1;
  const double fc = 0.5 * kCutoffFraction * std::min(fs_in, fs_out) / (static_cast<double>(up) * fs_in);
  std::vector<double> h(n_taps);
  const double i0b = std::cyl_bessel_i(0.0, kKaiserBeta);
  for (std::size_t i = 0; i < n_taps; ++i) {
    const double m = static_cast<double>(i) - static_cast<double>(center);
    const double x = 2 * fc * m;
    const double sinc = m == 0 ? 1.0 : std::sin(pi * x) / (pi * x);
    const double r = m / static_cast<double>(center);
    const double w = std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(std::max(0.0, 1 - r * r))) / i0b;
    h[i] = 2 * fc * sinc * w;
  }
  // Normalize each phase to unit DC gain.
  for (std::size_t p = 0; p < up; ++p) {
    double s = 0;
    for (std::size_t i = p; i < n_taps; i += up) s += h[i];
    for (std::size_t i = p; i < n_taps; i += up) h[i] /= s;
  }

  const std::size_t n = signal.size();
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n) * static_cast<double>(up) /
                                                           static_cast<double>(down)));
  std::vector<double> out(n_out);
  const long c = static_cast<long>(center), L = static_cast<long>(up);
  for (std::size_t j = 0; j < n_out; ++j) {
    // Output j sits at upsampled position m = j*down; tap index i = m - n*up + center.
    const long m = static_cast<long>(j * down);
    long n_lo = (m + c - static_cast<long>(n_taps) + 1 + L - 1);
    n_lo = n_lo > 0 ? n_lo / L : -((-n_lo) / L);
    n_lo = std::max(0L, n_lo);
    const long n_hi = std::min(static_cast<long>(n) - 1, (m + c) / L);
    double acc = 0;
    for (long k = n_lo; k <= n_hi; ++k) {
      const long i = m - k * L + c;
      if (i >= 0 && i < static_cast<long>(n_taps)) acc += h[static_cast<std::size_t>(i)] * signal[k];
    }
    out[j] = acc;
  }
  return out;
}

Tensor common_average_reference(const Tensor& trial) {
  if (trial.rank() != 2) throw DimensionError("car: expected [C,T], got " + shape_str(trial.shape()));
  const std::size_t C = trial.dim(0), T = trial.dim(1);
  if (C < 2) throw ParameterError("car: needs at least 2 channels, got " + std::to_string(C));
  auto x = trial.data();
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += x[c * T + t];
    const double m = s / static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) out[c * T + t] -= m;
  }
  return Tensor({C, T}, std::move(out));
}

TrialSet select_channels(const TrialSet& trials, const std::vector<std::string>& names) {
  std::vector<std::size_t> rows;
  for (const auto& name : names) {
    auto it = std::find(trials.channel_names.begin(), trials.channel_names.end(), name);
    if (it == trials.channel_names.end()) throw DataError("unknown channel '" + name + "'");
    rows.push_back(static_cast<std::size_t>(it - trials.channel_names.begin()));
  }
  const std::size_t N = trials.n_trials(), C = trials.n_channels(), T = trials.n_samples();
  auto d = trials.data.data();
  std::vector<double> buf;
  buf.reserve(N * rows.size() * T);
  for (std::size_t i = 0; i < N; ++i)
    for (auto r : rows) buf.insert(buf.end(), d.begin() + (i * C + r) * T, d.begin() + (i * C + r + 1) * T);
  TrialSet out = trials;
  out.channel_names = names;
  out.data = Tensor({N, rows.size(), T}, std::move(buf));
  return out;
}

const std::vector<std::string>& default_common_channels() {
  static const std::vector<std::string> names{
      "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "C5",  "C3",  "C1",  "Cz", "C2", "C4", "C6", "CP5",
      "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "F3",  "Fz",  "F4",  "P3",  "Pz", "P4", "T7", "T8", "Oz"};
  return names;
}

PreprocessOptions PreprocessOptions::defaults() {
  PreprocessOptions o;
  o.channels = default_common_channels();
  o.resample_hz = 160.0;
  o.highpass_hz = 2.0;
  o.notch_hz = {50.0, 60.0};
  o.car = true;
  return o;
}

std::vector<std::string> PreprocessOptions::describe() const {
  std::vector<std::string> out;
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  if (channels) out.push_back("select_channels(" + std::to_string(channels->size()) + ")");
  if (resample_hz) out.push_back("resample(" + num(*resample_hz) + " Hz)");
  if (highpass_hz) out.push_back("butter_highpass(order " + std::to_string(highpass_order) + ", " + num(*highpass_hz) + " Hz)");
  for (double f : notch_hz) out.push_back("notch(" + num(f) + " Hz, Q " + num(notch_q) + ")");
  if (car) out.push_back("common_average_reference");
  return out;
}

TrialSet preprocess(const TrialSet& trials, const PreprocessOptions& options) {
  trials.validate();
  TrialSet cur = options.channels ? select_channels(trials, *options.channels) : trials;
  const std::size_t N = cur.n_trials(), C = cur.n_channels();

  if (options.resample_hz && *options.resample_hz != cur.fs_hz) {
    const double fs_out = *options.resample_hz;
    std::vector<double> buf;
    std::size_t T_out = 0;
    for (std::size_t i = 0; i < N; ++i) {
      auto t = cur.trial(i);
      const std::size_t T = cur.n_samples();
      for (std::size_t c = 0; c < C; ++c) {
        auto y = resample(t.subspan(c * T, T), cur.fs_hz, fs_out);
        T_out = y.size();
        buf.insert(buf.end(), y.begin(), y.end());
      }
    }
    if (N == 0) {
      T_out = static_cast<std::size_t>(std::llround(static_cast<double>(cur.n_samples()) * fs_out / cur.fs_hz));
    }
    cur.data = Tensor({N, C, T_out}, std::move(buf));
    cur.fs_hz = fs_out;
  }

  std::vector<BiquadCascade> filters;
  if (options.highpass_hz) filters.push_back(design_butter_highpass(options.highpass_order, *options.highpass_hz, cur.fs_hz));
  for (double f : options.notch_hz) filters.push_back(design_notch(f, options.notch_q, cur.fs_hz));

  if (!filters.empty() || options.car) {
    const std::size_t T = cur.n_samples();
    std::vector<double> buf(cur.data.data().begin(), cur.data.data().end());
    for (std::size_t i = 0; i < N; ++i) {
      std::span<double> trial(buf.data() + i * C * T, C * T);
      for (std::size_t c = 0; c < C; ++c) {
        std::span<double> ch = trial.subspan(c * T, T);
        for (const auto& f : filters) {
          auto y = filt(f, ch);
          std::copy(y.begin(), y.end(), ch.begin());
        }
      }
      if (options.car) {
        Tensor r = common_average_reference(Tensor({C, T}, std::vector<double>(trial.begin(), trial.end())));
        std::copy(r.data().begin(), r.data().end(), trial.begin());
      }
    }
    cur.data = Tensor({N, C, T}, std::move(buf));
  }
  return cur;
}

}  // namespace naln::dsp
