#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dmq/tensor.hpp"

namespace dmq::quant {

/// Smallest scale MinMax calibration will emit; dead channels get this.
inline constexpr double kScaleFloor = 1e-12;
inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 16;

enum class Granularity { PerTensor, PerChannel };

/// Uniform symmetric quantizer parameters: scale(s), width and clamp range.
class QuantParams {
 public:
  static QuantParams per_tensor(double scale, int bits, bool is_signed = true);
  /// One scale per index of `axis`.
  static QuantParams per_channel(std::vector<double> scales, std::size_t axis, int bits, bool is_signed = true);

  int bits() const noexcept { return bits_; }
  bool is_signed() const noexcept { return signed_; }
  std::int64_t lower() const noexcept { return lower_; }
  std::int64_t upper() const noexcept { return upper_; }
  Granularity granularity() const noexcept { return granularity_; }
  std::size_t axis() const noexcept { return axis_; }
  std::span<const double> scales() const noexcept { return scales_; }
  /// Scale for a channel; per-tensor params ignore the index.
  double scale(std::size_t channel = 0) const noexcept {
    return granularity_ == Granularity::PerTensor ? scales_[0] : scales_[channel];
  }

  bool operator==(const QuantParams&) const = default;

 private:
  QuantParams(std::vector<double> scales, Granularity g, std::size_t axis, int bits, bool is_signed);

  std::vector<double> scales_;
  Granularity granularity_ = Granularity::PerTensor;
  std::size_t axis_ = 0;
  int bits_ = 8;
  bool signed_ = true;
  std::int64_t lower_ = -128;
  std::int64_t upper_ = 127;
};

/// Round to nearest, ties to even.
double round_half_even(double v);

/// clamp(round_half_even(x / divisor), lower, upper).
std::int64_t quantize_value(double x, double divisor, std::int64_t lower, std::int64_t upper);

IntTensor quantize(const Tensor& x, const QuantParams& p);
Tensor dequantize(const IntTensor& codes, const QuantParams& p);
/// dequantize(quantize(x)).
Tensor fake_quantize(const Tensor& x, const QuantParams& p);

/// Quantizes column c of a [B x C] tensor with divisors[c].
IntTensor quantize_columns(const Tensor& x, std::span<const double> divisors, int bits, bool is_signed);

/// Symmetric MinMax calibration: s = max|x| / upper (per tensor or per index of
/// `axis`), floored at kScaleFloor. Unsigned params use the positive extent.
QuantParams minmax_scale(const Tensor& x, int bits, bool is_signed, Granularity g, std::size_t axis = 0);

/// A linear layer ready for static-scale integer execution.
///
/// Activations are quantized per channel with ldexp(act_divisors[k],
/// pts_exponents[k]) and dequantized with act_params' per-tensor scale times
/// 2^pts_exponents[k]; weights carry per-output-channel scales.
struct QuantizedLayer {
  IntTensor weight_codes;  // [C_in x C_out]
  QuantParams weight_params;
  QuantParams act_params;
  std::vector<double> act_divisors;  // tau_k * s_x
  std::vector<int> pts_exponents;

  std::size_t in_channels() const { return weight_codes.rows(); }
  std::size_t out_channels() const { return weight_codes.cols(); }
};

/// Validates the layer. Activation scales must be per-tensor and weight scales
/// may not vary along C_in: integer matmul needs scales independent of the
/// reduction index.
QuantizedLayer make_quantized_layer(IntTensor weight_codes, QuantParams weight_params, QuantParams act_params,
                                    std::vector<double> act_divisors, std::vector<int> pts_exponents);

/// Per-channel activation divisor including the power-of-two factor.
std::vector<double> effective_divisors(const QuantizedLayer& layer);
IntTensor quantize_activations(const Tensor& x, const QuantizedLayer& layer);

/// Real-arithmetic evaluation of the factored quantized product:
/// y[i,j] = (s_x * s_w[j]) * sum_k (2^delta_k * xq[i,k]) * wq[k,j].
/// All partial sums are integers held exactly in doubles, which makes this a
/// bit-exact oracle for the integer kernel.
Tensor quantized_matmul_reference(const Tensor& x, const QuantizedLayer& layer);

}  // namespace dmq::quant
