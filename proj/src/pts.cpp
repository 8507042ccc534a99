#include "dmq/pts.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "dmq/errors.hpp"
#include "dmq/quant.hpp"

namespace dmq::pts {

namespace {

std::int64_t lower_of(int bits, bool is_signed) {
  return is_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
}

std::int64_t upper_of(int bits, bool is_signed) {
  return is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
}

void check_exponent_range(int max_exponent) {
  if (max_exponent < 0 || max_exponent > 30) throw DomainError("max exponent D must lie in [0, 30]");
}

}  // namespace

double candidate_error(std::span<const double> values, double s, int d, int bits, bool is_signed) {
  const double step = std::ldexp(s, d);
  const auto lo = lower_of(bits, is_signed), hi = upper_of(bits, is_signed);
  double err = 0.0;
  for (double v : values) {
    const double r = step * static_cast<double>(quant::quantize_value(v, step, lo, hi));
    err += (v - r) * (v - r);
  }
  return err;
}

int per_sample_best(std::span<const double> values, double s, int max_exponent, int bits, bool is_signed) {
  if (!(s > 0.0)) throw DomainError("per_sample_best: scale must be positive");
  check_exponent_range(max_exponent);
  int best = 0;
  double best_err = candidate_error(values, s, 0, bits, is_signed);
  for (int d = 1; d <= max_exponent; ++d) {
    const double e = candidate_error(values, s, d, bits, is_signed);
    if (e < best_err) {
      best_err = e;
      best = d;
    }
  }
  return best;
}

IntTensor candidate_exponents(const Tensor& x, double s, int max_exponent, int bits, bool is_signed,
                              std::span<const int> sample_ids) {
  if (sample_ids.empty()) {
    IntTensor out(x.shape(), 64);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto r = x.row(i);
      for (std::size_t c = 0; c < r.size(); ++c)
        out(i, c) = per_sample_best(r.subspan(c, 1), s, max_exponent, bits, is_signed);
    }
    return out;
  }
  if (sample_ids.size() != x.rows()) throw DimensionError("candidate_exponents: one sample id per row required");
  // Group rows by id, samples ordered by first appearance.
  std::vector<int> order;
  std::map<int, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    auto& r = rows[sample_ids[i]];
    if (r.empty()) order.push_back(sample_ids[i]);
    r.push_back(i);
  }
  IntTensor out({order.size(), x.cols()}, 64);
  std::vector<double> values;
  for (std::size_t g = 0; g < order.size(); ++g) {
    const auto& members = rows[order[g]];
    for (std::size_t c = 0; c < x.cols(); ++c) {
      values.clear();
      for (auto i : members) values.push_back(x(i, c));
      out(g, c) = per_sample_best(values, s, max_exponent, bits, is_signed);
    }
  }
  return out;
}

PtsFactors vote(const IntTensor& per_sample, double kappa, int max_exponent) {
  check_exponent_range(max_exponent);
  if (!(kappa > 0.0 && kappa <= 1.0)) throw DomainError("agreement threshold kappa must lie in (0, 1]");
  if (per_sample.shape().size() != 2 || per_sample.rows() == 0) throw InputError("vote: no samples");
  const std::size_t n = per_sample.rows(), c = per_sample.cols();
  PtsFactors f;
  f.kappa = kappa;
  f.max_exponent = max_exponent;
  f.delta.assign(c, 0);
  f.mode.assign(c, 0);
  f.agreement.assign(c, 0.0);
  std::vector<std::size_t> counts(static_cast<std::size_t>(max_exponent) + 1);
  for (std::size_t k = 0; k < c; ++k) {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = per_sample(i, k);
      if (v < 0 || v > max_exponent)
        throw DomainError("vote: exponent " + std::to_string(v) + " outside [0, " + std::to_string(max_exponent) + "]");
      ++counts[static_cast<std::size_t>(v)];
    }
    // max_element returns the first maximum, i.e. the smaller exponent on ties.
    const auto it = std::max_element(counts.begin(), counts.end());
    const int mode = static_cast<int>(it - counts.begin());
    const double r = static_cast<double>(*it) / static_cast<double>(n);
    f.mode[k] = mode;
    f.agreement[k] = r;
    f.delta[k] = r > kappa ? mode : 0;
  }
  return f;
}

IntTensor quantize_with_pts(const Tensor& x, std::span<const double> fused_tau, double s, std::span<const int> delta,
                            int bits, bool is_signed) {
  if (fused_tau.size() != x.cols() || delta.size() != x.cols())
    throw DimensionError("quantize_with_pts: tau and delta need one entry per channel");
  std::vector<double> div(x.cols());
  for (std::size_t k = 0; k < div.size(); ++k) div[k] = std::ldexp(fused_tau[k] * s, delta[k]);
  return quant::quantize_columns(x, div, bits, is_signed);
}

Tensor dequantize_with_pts(const IntTensor& codes, double s, std::span<const int> delta) {
  if (delta.size() != codes.cols()) throw DimensionError("dequantize_with_pts: one exponent per channel required");
  Tensor out({codes.rows(), codes.cols()});
  for (std::size_t i = 0; i < codes.rows(); ++i)
    for (std::size_t k = 0; k < codes.cols(); ++k)
      out(i, k) = std::ldexp(s, delta[k]) * static_cast<double>(codes(i, k));
  return out;
}

std::vector<PtsCalibration> scale_candidates(const Tensor& x, double minmax_scale, int max_exponent, double kappa,
                                             int bits, bool is_signed, std::span<const int> sample_ids) {
  if (!(minmax_scale > 0.0)) throw DomainError("scale_candidates: scale must be positive");
  check_exponent_range(max_exponent);
  const auto lo = lower_of(bits, is_signed), hi = upper_of(bits, is_signed);
  auto total_error = [&](double s, const std::vector<int>& delta) {
    double err = 0.0;
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double step = std::ldexp(s, delta[k]);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double v = x(i, k);
        const double r = step * static_cast<double>(quant::quantize_value(v, step, lo, hi));
        err += (v - r) * (v - r);
      }
    }
    return err;
  };
  std::vector<PtsCalibration> out;
  for (int m = 0; m <= 2 * max_exponent; ++m) {
    const double s = minmax_scale * std::exp2(-0.5 * m);
    PtsFactors f = vote(candidate_exponents(x, s, max_exponent, bits, is_signed, sample_ids), kappa, max_exponent);
    const double err = total_error(s, f.delta);
    out.push_back(PtsCalibration{s, std::move(f), err});
  }
  return out;
}

PtsCalibration calibrate(const Tensor& x, double minmax_scale, int max_exponent, double kappa, int bits,
                         bool is_signed, std::span<const int> sample_ids) {
  auto all = scale_candidates(x, minmax_scale, max_exponent, kappa, bits, is_signed, sample_ids);
  std::size_t best = 0;
  for (std::size_t m = 1; m < all.size(); ++m)
    if (all[m].error < all[best].error) best = m;
  return std::move(all[best]);
}

}  // namespace dmq::pts
