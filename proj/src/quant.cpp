#include "dmq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "dmq/errors.hpp"

namespace dmq::quant {

namespace {

std::int64_t upper_bound_for(int bits, bool is_signed) {
  return is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
}

std::int64_t lower_bound_for(int bits, bool is_signed) {
  return is_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
}

// Signed container width that holds every code of the params.
int code_width(const QuantParams& p) {
  return p.is_signed() ? p.bits() : p.bits() + 1;
}

// Channel index of each flat element for a per-channel axis.
struct AxisWalker {
  std::size_t inner = 1;
  std::size_t dim = 1;

  AxisWalker(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw DimensionError("quantization axis out of range");
    dim = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  }
  std::size_t channel(std::size_t flat) const { return (flat / inner) % dim; }
};

void check_channel_count(const Shape& shape, const QuantParams& p) {
  if (p.granularity() == Granularity::PerTensor) return;
  if (p.axis() >= shape.size() || shape[p.axis()] != p.scales().size())
    throw DimensionError("per-channel scale count " + std::to_string(p.scales().size()) +
                         " does not match the tensor's channel axis");
}

}  // namespace

QuantParams::QuantParams(std::vector<double> scales, Granularity g, std::size_t axis, int bits, bool is_signed)
    : scales_(std::move(scales)), granularity_(g), axis_(axis), bits_(bits), signed_(is_signed) {
  if (bits < kMinBits || bits > kMaxBits)
    throw DomainError("bit-width " + std::to_string(bits) + " outside [2, 16]");
  if (scales_.empty()) throw InputError("quantizer needs at least one scale");
  for (double s : scales_)
    if (!(s > 0.0) || !std::isfinite(s)) throw DomainError("quantization scales must be positive and finite");
  lower_ = lower_bound_for(bits, is_signed);
  upper_ = upper_bound_for(bits, is_signed);
}

QuantParams QuantParams::per_tensor(double scale, int bits, bool is_signed) {
  return QuantParams({scale}, Granularity::PerTensor, 0, bits, is_signed);
}

QuantParams QuantParams::per_channel(std::vector<double> scales, std::size_t axis, int bits, bool is_signed) {
  return QuantParams(std::move(scales), Granularity::PerChannel, axis, bits, is_signed);
}

double round_half_even(double v) {
  const double fl = std::floor(v);
  const double frac = v - fl;
  if (frac < 0.5) return fl;
  if (frac > 0.5) return fl + 1.0;
  return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

std::int64_t quantize_value(double x, double divisor, std::int64_t lower, std::int64_t upper) {
  const double r = round_half_even(x / divisor);
  // Clamp in the real domain first so the integer conversion is always defined.
  if (!(r >= static_cast<double>(lower))) return lower;  // also catches NaN
  if (r > static_cast<double>(upper)) return upper;
  return static_cast<std::int64_t>(r);
}

IntTensor quantize(const Tensor& x, const QuantParams& p) {
  check_channel_count(x.shape(), p);
  std::vector<std::int64_t> codes(x.size());
  if (p.granularity() == Granularity::PerTensor) {
    const double s = p.scale();
    for (std::size_t i = 0; i < x.size(); ++i) codes[i] = quantize_value(x[i], s, p.lower(), p.upper());
  } else {
    const AxisWalker walk(x.shape(), p.axis());
    for (std::size_t i = 0; i < x.size(); ++i)
      codes[i] = quantize_value(x[i], p.scale(walk.channel(i)), p.lower(), p.upper());
  }
  return IntTensor(x.shape(), std::move(codes), code_width(p));
}

Tensor dequantize(const IntTensor& codes, const QuantParams& p) {
  check_channel_count(codes.shape(), p);
  std::vector<double> out(codes.size());
  std::optional<AxisWalker> walk;
  if (p.granularity() == Granularity::PerChannel) walk.emplace(codes.shape(), p.axis());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto c = codes[i];
    if (c < p.lower() || c > p.upper())
      throw IntegrityError("code " + std::to_string(c) + " at index " + std::to_string(i) + " outside [" +
                           std::to_string(p.lower()) + ", " + std::to_string(p.upper()) + "]");
    out[i] = p.scale(walk ? walk->channel(i) : 0) * static_cast<double>(c);
  }
  return Tensor(codes.shape(), std::move(out));
}

Tensor fake_quantize(const Tensor& x, const QuantParams& p) {
  return dequantize(quantize(x, p), p);
}

IntTensor quantize_columns(const Tensor& x, std::span<const double> divisors, int bits, bool is_signed) {
  if (divisors.size() != x.cols())
    throw DimensionError("quantize_columns: " + std::to_string(divisors.size()) + " divisors for " +
                         std::to_string(x.cols()) + " channels");
  const auto lo = lower_bound_for(bits, is_signed);
  const auto hi = upper_bound_for(bits, is_signed);
  IntTensor out(x.shape(), is_signed ? bits : bits + 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) out(i, c) = quantize_value(r[c], divisors[c], lo, hi);
  }
  return out;
}

QuantParams minmax_scale(const Tensor& x, int bits, bool is_signed, Granularity g, std::size_t axis) {
  if (x.empty()) throw InputError("minmax_scale: empty tensor");
  if (bits < kMinBits || bits > kMaxBits) throw DomainError("bit-width outside [2, 16]");
  const double u = static_cast<double>(upper_bound_for(bits, is_signed));
  auto extent = [is_signed](double v) { return is_signed ? std::abs(v) : std::max(v, 0.0); };
  auto to_scale = [u](double m) { return std::max(m / u, kScaleFloor); };

  if (g == Granularity::PerTensor) {
    double m = 0.0;
    for (double v : x.data()) m = std::max(m, extent(v));
    return QuantParams::per_tensor(to_scale(m), bits, is_signed);
  }
  const AxisWalker walk(x.shape(), axis);
  std::vector<double> m(walk.dim, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto& slot = m[walk.channel(i)];
    slot = std::max(slot, extent(x[i]));
  }
  for (double& v : m) v = to_scale(v);
  return QuantParams::per_channel(std::move(m), axis, bits, is_signed);
}

QuantizedLayer make_quantized_layer(IntTensor weight_codes, QuantParams weight_params, QuantParams act_params,
                                    std::vector<double> act_divisors, std::vector<int> pts_exponents) {
  if (weight_codes.shape().size() != 2) throw DimensionError("weight codes must be a [C_in x C_out] matrix");
  const std::size_t c_in = weight_codes.rows();
  const std::size_t c_out = weight_codes.cols();
  if (act_params.granularity() != Granularity::PerTensor)
    throw DomainError("activation scales must be per-tensor: a per-channel activation scale varies along the "
                      "reduction axis and cannot be factored out of the integer sum");
  if (weight_params.granularity() == Granularity::PerChannel) {
    if (weight_params.axis() != 1)
      throw DomainError("weight scales must be per output channel (axis 1); axis 0 is the reduction axis");
    if (weight_params.scales().size() != c_out) throw DimensionError("weight scale count does not match C_out");
  }
  if (act_divisors.size() != c_in || pts_exponents.size() != c_in)
    throw DimensionError("activation divisors and exponents must have one entry per input channel");
  for (double d : act_divisors)
    if (!(d > 0.0) || !std::isfinite(d)) throw DomainError("activation divisors must be positive and finite");
  for (int e : pts_exponents)
    if (e < 0 || e > 30) throw DomainError("power-of-two exponents must lie in [0, 30]");
  for (std::size_t i = 0; i < weight_codes.size(); ++i) {
    const auto c = weight_codes[i];
    if (c < weight_params.lower() || c > weight_params.upper())
      throw IntegrityError("weight code " + std::to_string(c) + " outside the quantizer range");
  }
  return QuantizedLayer{std::move(weight_codes), std::move(weight_params), std::move(act_params),
                        std::move(act_divisors), std::move(pts_exponents)};
}

std::vector<double> effective_divisors(const QuantizedLayer& layer) {
  std::vector<double> d(layer.act_divisors.size());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = std::ldexp(layer.act_divisors[k], layer.pts_exponents[k]);
  return d;
}

IntTensor quantize_activations(const Tensor& x, const QuantizedLayer& layer) {
  if (x.rank() != 2 || x.cols() != layer.in_channels())
    throw DimensionError("activation width does not match the layer's C_in");
  const auto div = effective_divisors(layer);
  return quantize_columns(x, div, layer.act_params.bits(), layer.act_params.is_signed());
}

Tensor quantized_matmul_reference(const Tensor& x, const QuantizedLayer& layer) {
  const IntTensor xq = quantize_activations(x, layer);
  const std::size_t b = x.rows(), k = layer.in_channels(), n = layer.out_channels();
  Tensor xs({b, k});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t p = 0; p < k; ++p) xs(i, p) = std::ldexp(static_cast<double>(xq(i, p)), layer.pts_exponents[p]);
  Tensor ws({k, n});
  for (std::size_t i = 0; i < ws.size(); ++i) ws[i] = static_cast<double>(layer.weight_codes[i]);
  const Tensor acc = matmul(xs, ws);
  Tensor y({b, n});
  const double sx = layer.act_params.scale();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) y(i, j) = (sx * layer.weight_params.scale(j)) * acc(i, j);
  return y;
}

}  // namespace dmq::quant
