#pragma once

#include <span>
#include <vector>

#include "dmq/tensor.hpp"

namespace dmq::pts {

/// Per-channel power-of-two exponents chosen by agreement voting.
struct PtsFactors {
  std::vector<int> delta;         // applied exponent per channel, in [0, max_exponent]
  std::vector<int> mode;          // most frequent per-sample exponent per channel
  std::vector<double> agreement;  // fraction of samples that voted for the mode
  double kappa = 0.6;
  int max_exponent = 3;
};

/// Squared error of quantizing `values` with scale s * 2^d.
double candidate_error(std::span<const double> values, double s, int d, int bits, bool is_signed);

/// argmin over d in [0, D] of candidate_error; ties go to the smaller d.
int per_sample_best(std::span<const double> values, double s, int max_exponent, int bits, bool is_signed);

/// Best exponent for every (sample, channel) of a [rows x C] activation.
/// Without sample ids every row is a sample. Otherwise rows sharing an id form
/// one sample (e.g. all points captured at one timestep) and the result has one
/// row per distinct id, in order of first appearance.
IntTensor candidate_exponents(const Tensor& x, double s, int max_exponent, int bits, bool is_signed,
                              std::span<const int> sample_ids = {});

/// Column-wise mode (smaller exponent on frequency ties), agreement ratio and
/// thresholding: delta = mode when agreement > kappa, otherwise 0.
PtsFactors vote(const IntTensor& per_sample, double kappa, int max_exponent);

/// Codes clamp(round(x / (2^delta (.) tau (.) s)), l, u).
IntTensor quantize_with_pts(const Tensor& x, std::span<const double> fused_tau, double s, std::span<const int> delta,
                            int bits, bool is_signed);

/// Reconstruction (2^delta (.) s) * codes.
Tensor dequantize_with_pts(const IntTensor& codes, double s, std::span<const int> delta);

/// Per-tensor scale chosen jointly with the voted exponents.
struct PtsCalibration {
  double scale = 1.0;
  PtsFactors factors;
  double error = 0.0;  // total squared activation quantization error
};

/// The scale ladder minmax_scale * 2^(-m/2), m = 0..2D, each with its voted
/// exponents and total activation error; m = 0 first.
std::vector<PtsCalibration> scale_candidates(const Tensor& x, double minmax_scale, int max_exponent, double kappa,
                                             int bits, bool is_signed, std::span<const int> sample_ids = {});

/// Searches s over minmax_scale * 2^(-m/2), m = 0..2D, running the vote at each
/// candidate, and keeps the pair with the lowest total activation error. The
/// MinMax scale itself (m = 0, where every channel fits and all exponents are
/// zero) is always a candidate and wins ties.
PtsCalibration calibrate(const Tensor& x, double minmax_scale, int max_exponent, double kappa, int bits,
                         bool is_signed, std::span<const int> sample_ids = {});

}  // namespace dmq::pts
