#include "dmq/igemm.hpp"

#include <algorithm>
#include <string>

#include "dmq/errors.hpp"

namespace dmq::igemm {

ShiftedWeights shift_weights(const IntTensor& codes, std::span<const int> delta) {
  if (codes.shape().size() != 2) throw DimensionError("shift_weights: codes must be a matrix");
  if (delta.size() != codes.rows()) throw DimensionError("shift_weights: one exponent per input channel required");
  int max_shift = 0;
  for (int d : delta) {
    if (d < 0) throw DomainError("shift_weights: negative shift");
    max_shift = std::max(max_shift, d);
  }
  const int src = codes.nominal_bits();
  if (src + max_shift > kShiftedWeightBits)
    throw OverflowError("shift_weights: " + std::to_string(src) + "-bit codes shifted by " + std::to_string(max_shift) +
                        " exceed " + std::to_string(kShiftedWeightBits) + " bits");
  std::vector<std::int64_t> out(codes.data().begin(), codes.data().end());
  const std::size_t n = codes.cols();
  for (std::size_t k = 0; k < codes.rows(); ++k)
    for (std::size_t j = 0; j < n; ++j) out[k * n + j] <<= delta[k];
  return ShiftedWeights{IntTensor(codes.shape(), std::move(out), src + max_shift), src, max_shift};
}

int ceil_log2(std::size_t n) {
  int b = 0;
  while ((std::size_t{1} << b) < n) ++b;
  return b;
}

void check_headroom(int act_bits, int shifted_weight_bits, std::size_t in_channels) {
  const int need = act_bits + shifted_weight_bits + ceil_log2(in_channels);
  if (need > kAccumulatorBits)
    throw OverflowError("accumulator headroom: " + std::to_string(need) + " bits needed, " +
                        std::to_string(kAccumulatorBits) + " available");
}

IntTensor execute(const IntTensor& act_codes, const ShiftedWeights& w) {
  if (act_codes.shape().size() != 2) throw DimensionError("execute: activation codes must be a matrix");
  const std::size_t b = act_codes.rows(), k = act_codes.cols(), n = w.codes.cols();
  if (w.codes.rows() != k)
    throw DimensionError("execute: activation width " + std::to_string(k) + " does not match weight rows " +
                         std::to_string(w.codes.rows()));
  check_headroom(act_codes.nominal_bits(), w.codes.nominal_bits(), k);

  IntTensor acc({b, n}, 64);
  const auto wd = w.codes.data();
  for (std::size_t i = 0; i < b; ++i) {
    auto dst = acc.data().subspan(i * n, n);
    for (std::size_t p = 0; p < k; ++p) {
      const std::int64_t xv = act_codes(i, p);
      if (xv == 0) continue;
      const auto wrow = wd.subspan(p * n, n);
      for (std::size_t j = 0; j < n; ++j) dst[j] += xv * wrow[j];
    }
  }
  return acc;
}

Tensor dequantize_output(const IntTensor& acc, double s_x, std::span<const double> s_w) {
  if (s_w.size() != acc.cols()) throw DimensionError("dequantize_output: one weight scale per output channel required");
  Tensor y({acc.rows(), acc.cols()});
  for (std::size_t i = 0; i < acc.rows(); ++i)
    for (std::size_t j = 0; j < acc.cols(); ++j) y(i, j) = (s_x * s_w[j]) * static_cast<double>(acc(i, j));
  return y;
}

}  // namespace dmq::igemm
