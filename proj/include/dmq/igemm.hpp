#pragma once

#include <span>
#include <vector>

#include "dmq/tensor.hpp"

namespace dmq::igemm {

/// Weight codes with row k pre-shifted left by delta_k, done once at load.
struct ShiftedWeights {
  IntTensor codes;  // [C_in x C_out], nominal width source_bits + max_shift
  int source_bits = 0;
  int max_shift = 0;
};

/// Bit budget of a signed accumulator.
inline constexpr int kAccumulatorBits = 63;
/// Widest shifted weight the loader accepts.
inline constexpr int kShiftedWeightBits = 32;

/// Throws OverflowError when source_bits + max(delta) exceeds 32.
ShiftedWeights shift_weights(const IntTensor& codes, std::span<const int> delta);

/// ceil(log2(n)) for n >= 1.
int ceil_log2(std::size_t n);

/// Throws OverflowError unless act_bits + shifted_weight_bits + ceil(log2(C_in)) <= 63.
void check_headroom(int act_bits, int shifted_weight_bits, std::size_t in_channels);

/// Exact integer product, accumulated in ascending k with 64-bit signed sums.
IntTensor execute(const IntTensor& act_codes, const ShiftedWeights& weights);

/// y[i,j] = (s_x * s_w[j]) * acc[i,j].
Tensor dequantize_output(const IntTensor& acc, double s_x, std::span<const double> s_w);

}  // namespace dmq::igemm
