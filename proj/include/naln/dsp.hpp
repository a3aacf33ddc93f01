#pragma once

#include <complex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "naln/tensor.hpp"
#include "naln/trialset.hpp"

namespace naln::dsp {

struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

/// Cascade of second-order sections (a0 normalized to 1).
struct BiquadCascade {
  std::vector<Biquad> sections;
  std::string kind;
  double cutoff_hz = 0;
  int order = 0;
  double fs_hz = 0;

  /// H(e^{j 2 pi f / fs}).
  std::complex<double> response(double f_hz) const;
  bool stable() const;
};

BiquadCascade design_butter_highpass(int order, double cutoff_hz, double fs_hz);
BiquadCascade design_notch(double f0_hz, double q, double fs_hz);

/// Causal direct-form II transposed filtering from zero state.
std::vector<double> filt(const BiquadCascade& cascade, std::span<const double> signal);

/// Rational polyphase resampling with a Kaiser-windowed sinc prototype.
std::vector<double> resample(std::span<const double> signal, double fs_in, double fs_out);

/// Subtracts the per-sample mean over channels from [C,T].
Tensor common_average_reference(const Tensor& trial);

TrialSet select_channels(const TrialSet& trials, const std::vector<std::string>& names);

/// The 30 electrodes kept by default when homogenizing montages.
const std::vector<std::string>& default_common_channels();

struct PreprocessOptions {
  std::optional<std::vector<std::string>> channels;
  std::optional<double> resample_hz;
  std::optional<double> highpass_hz;
  std::vector<double> notch_hz;
  bool car = false;
  int highpass_order = 4;
  double notch_q = 30.0;

  /// Channel subset, 160 Hz, 2 Hz highpass, 50/60 Hz notches, CAR.
  static PreprocessOptions defaults();
  /// Human-readable list of the stages that will run, in order.
  std::vector<std::string> describe() const;
};

/// Runs the enabled stages in the fixed order: channel selection, resampling,
/// highpass, notches, common average reference. Each trial is filtered
/// independently from zero state.
TrialSet preprocess(const TrialSet& trials, const PreprocessOptions& options);

}  // namespace naln::dsp
