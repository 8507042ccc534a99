#include "dmq/les.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dmq/errors.hpp"
#include "dmq/rng.hpp"

namespace dmq::les {

namespace {

void check_layer(const Tensor& x, const Tensor& w, std::span<const double> tau) {
  if (x.rank() != 2 || w.rank() != 2) throw DimensionError("les: activations and weight must be matrices");
  if (x.cols() != w.rows())
    throw DimensionError("les: activation width " + std::to_string(x.cols()) + " does not match weight rows " +
                         std::to_string(w.rows()));
  if (tau.size() != x.cols()) throw DimensionError("les: tau length does not match C_in");
  for (double t : tau)
    if (!(t > 0.0) || !std::isfinite(t)) throw DomainError("les: tau must be positive and finite");
}

quant::QuantParams act_params(const LayerScales& s, const QuantConfig& q) {
  return quant::QuantParams::per_tensor(s.act, q.bits_a, q.act_signed);
}

quant::QuantParams weight_params(const LayerScales& s, const QuantConfig& q) {
  return quant::QuantParams::per_channel(s.weight, 1, q.bits_w, true);
}

std::vector<double> row_losses(const Tensor& err) {
  std::vector<double> out(err.rows(), 0.0);
  for (std::size_t i = 0; i < err.rows(); ++i)
    for (double e : err.row(i)) out[i] += e * e;
  return out;
}

}  // namespace

LayerScales minmax_scales(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q) {
  check_layer(x, w, tau);
  const Tensor xh = channel_div(x, tau);
  const Tensor wh = channel_mul(w, tau);
  const auto pa = quant::minmax_scale(xh, q.bits_a, q.act_signed, quant::Granularity::PerTensor);
  const auto pw = quant::minmax_scale(wh, q.bits_w, true, quant::Granularity::PerChannel, 1);
  return LayerScales{pa.scale(), std::vector<double>(pw.scales().begin(), pw.scales().end())};
}

std::vector<double> les_loss(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q) {
  return les_loss(x, w, tau, q, minmax_scales(x, w, tau, q));
}

std::vector<double> les_loss(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q,
                             const LayerScales& scales) {
  check_layer(x, w, tau);
  const Tensor qx = quant::fake_quantize(channel_div(x, tau), act_params(scales, q));
  const Tensor qw = quant::fake_quantize(channel_mul(w, tau), weight_params(scales, q));
  return row_losses(sub(matmul(x, w), matmul(qx, qw)));
}

std::vector<double> les_grad(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q,
                             const LayerScales& scales, std::span<const double> weights) {
  check_layer(x, w, tau);
  if (weights.size() != x.rows()) throw DimensionError("les_grad: one weight per sample required");
  const std::size_t b = x.rows(), k = x.cols(), n = w.cols();
  const auto pa = act_params(scales, q);
  const auto pw = weight_params(scales, q);
  const Tensor xh = channel_div(x, tau);
  const Tensor wh = channel_mul(w, tau);
  const Tensor qx = quant::fake_quantize(xh, pa);
  const Tensor qw = quant::fake_quantize(wh, pw);

  // Weighted residual E_ij = lambda_i * (XW - Q(X^)Q(W^))_ij.
  Tensor err = sub(matmul(x, w), matmul(qx, qw));
  for (std::size_t i = 0; i < b; ++i)
    for (double& e : err.row(i)) e *= weights[i];

  // Clamp masks on the unrounded codes.
  const double lo = static_cast<double>(pa.lower()), hi = static_cast<double>(pa.upper());
  Tensor wh_masked = wh;
  for (std::size_t p = 0; p < k; ++p) {
    auto r = wh_masked.row(p);
    for (std::size_t j = 0; j < n; ++j) {
      const double v = r[j] / pw.scale(j);
      if (v < static_cast<double>(pw.lower()) || v > static_cast<double>(pw.upper())) r[j] = 0.0;
    }
  }

  const Tensor a = matmul(err, transpose(qw));         // sum_j E_ij qw_kj
  const Tensor c = matmul(err, transpose(wh_masked));  // sum_j E_ij w^_kj m_kj
  std::vector<double> grad(k, 0.0);
  const double sa = pa.scale();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double v = xh(i, p) / sa;
      const double mx = (v >= lo && v <= hi) ? 1.0 : 0.0;
      grad[p] += 2.0 * (xh(i, p) * mx * a(i, p) - qx(i, p) * c(i, p));
    }
  }
  for (double& g : grad) g /= static_cast<double>(b);
  return grad;
}

std::vector<double> les_grad(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q) {
  const std::vector<double> ones(x.rows(), 1.0);
  return les_grad(x, w, tau, q, minmax_scales(x, w, tau, q), ones);
}

std::vector<double> LesState::tau() const {
  std::vector<double> t(log_tau.size());
  std::transform(log_tau.begin(), log_tau.end(), t.begin(), [](double v) { return std::exp(v); });
  return t;
}

double weighted_record_loss(const LayerCalibRecord& record, std::span<const double> tau, const QuantConfig& q,
                            const tsw::TimestepWeighter& weighter) {
  const auto losses = les_loss(record.activations, record.weight, tau, q);
  const auto w = weighter.weights(record.timesteps);
  double acc = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) acc += w[i] * losses[i];
  return acc / static_cast<double>(losses.size());
}

LesState optimize_layer(const LayerCalibRecord& record, tsw::TimestepWeighter& weighter, const LesOptions& opt) {
  const Tensor& x = record.activations;
  const Tensor& w = record.weight;
  if (x.rank() != 2 || x.rows() == 0) throw InputError("optimize_layer: empty calibration record");
  if (record.timesteps.size() != x.rows()) throw DimensionError("optimize_layer: one timestep tag per row required");
  if (opt.iterations < 1) throw InputError("optimize_layer: at least one iteration required");
  if (!(opt.lr >= 0.0)) throw DomainError("optimize_layer: learning rate must be non-negative");
  if (opt.batch_size == 0) throw InputError("optimize_layer: batch size must be positive");
  if (opt.scale_refresh < 1) throw InputError("optimize_layer: scale refresh interval must be positive");
  for (int t : record.timesteps) (void)weighter.weight(t);  // rejects tags outside the step set

  const std::size_t n = x.rows(), k = x.cols();
  const std::size_t batch = std::min(opt.batch_size, n);

  LesState state;
  state.log_tau.assign(k, 0.0);
  state.learning_rate = opt.lr;
  state.grad_accumulator.assign(k, 0.0);
  if (opt.optimizer == Optimizer::Adam) state.second_moment.assign(k, 0.0);

  struct Snapshot {
    std::vector<double> log_tau;
    std::vector<double> losses;
  };
  std::vector<Snapshot> snapshots;
  auto take_snapshot = [&](const std::vector<double>& tau, const LayerScales& scales) {
    snapshots.push_back({state.log_tau, les_loss(x, w, tau, opt.quant, scales)});
  };

  Rng rng(opt.seed);
  std::vector<std::size_t> order = rng.permutation(n);
  std::size_t cursor = 0;
  std::vector<std::size_t> idx(batch);
  std::vector<int> tags(batch);

  LayerScales scales;
  for (int step = 0; step < opt.iterations; ++step) {
    const auto tau = state.tau();
    if (step % opt.scale_refresh == 0) {
      scales = minmax_scales(x, w, tau, opt.quant);
      take_snapshot(tau, scales);
    }
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == n) {
        order = rng.permutation(n);
        cursor = 0;
      }
      idx[i] = order[cursor++];
      tags[i] = record.timesteps[idx[i]];
    }
    const Tensor xb = gather_rows(x, idx);
    const auto lambda = weighter.weights(tags);
    const auto grad = les_grad(xb, w, tau, opt.quant, scales, lambda);
    const auto losses = les_loss(xb, w, tau, opt.quant, scales);
    weighter.weighted_mean(losses, tags);

    if (opt.optimizer == Optimizer::Sgd) {
      for (std::size_t c = 0; c < k; ++c) {
        state.grad_accumulator[c] = grad[c];
        state.log_tau[c] -= opt.lr * grad[c];
      }
    } else {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double t = static_cast<double>(step + 1);
      for (std::size_t c = 0; c < k; ++c) {
        auto& m = state.grad_accumulator[c];
        auto& v = state.second_moment[c];
        m = b1 * m + (1.0 - b1) * grad[c];
        v = b2 * v + (1.0 - b2) * grad[c] * grad[c];
        const double mh = m / (1.0 - std::pow(b1, t));
        const double vh = v / (1.0 - std::pow(b2, t));
        state.log_tau[c] -= opt.lr * mh / (std::sqrt(vh) + eps);
      }
    }
    for (double v : state.log_tau) {
      const double t = std::exp(v);
      if (!std::isfinite(t) || t == 0.0) throw NumericalError("optimize_layer: tau diverged");
    }
    state.iteration = step + 1;
  }
  {
    const auto tau = state.tau();
    take_snapshot(tau, minmax_scales(x, w, tau, opt.quant));
  }

  // Score every snapshot under one set of weights; the tau = 1 snapshot is first
  // and wins ties.
  const auto lambda = weighter.weights(record.timesteps);
  auto score = [&](const Snapshot& s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += lambda[i] * s.losses[i];
    return acc / static_cast<double>(n);
  };
  std::size_t best = 0;
  double best_score = score(snapshots[0]);
  state.initial_loss = best_score;
  for (std::size_t s = 1; s < snapshots.size(); ++s) {
    const double v = score(snapshots[s]);
    if (v < best_score) {
      best_score = v;
      best = s;
    }
  }
  state.log_tau = snapshots[best].log_tau;
  state.final_loss = best_score;
  return state;
}

std::vector<double> smoothquant_tau(const Tensor& x, const Tensor& w, double alpha) {
  if (x.cols() != w.rows()) throw DimensionError("smoothquant_tau: C_in mismatch");
  const auto ax = column_max_abs(x);
  const auto aw = row_max_abs(w);
  std::vector<double> tau(ax.size(), 1.0);
  for (std::size_t c = 0; c < tau.size(); ++c) {
    if (ax[c] > 0.0 && aw[c] > 0.0) tau[c] = std::pow(ax[c], alpha) / std::pow(aw[c], 1.0 - alpha);
  }
  return tau;
}

Fusion fuse(std::span<const double> tau, const quant::QuantParams& act_params, const Tensor& w) {
  if (act_params.granularity() != quant::Granularity::PerTensor)
    throw DomainError("fuse: activation params must be per-tensor");
  if (tau.size() != w.rows()) throw DimensionError("fuse: tau length does not match C_in");
  for (double t : tau)
    if (!(t > 0.0) || !std::isfinite(t)) throw DomainError("fuse: tau must be positive and finite");
  Fusion f;
  f.act_divisors.resize(tau.size());
  const double s = act_params.scale();
  for (std::size_t c = 0; c < tau.size(); ++c) f.act_divisors[c] = tau[c] * s;
  f.scaled_weight = channel_mul(w, tau);
  return f;
}

quant::QuantizedLayer fused_layer(const Fusion& fusion, const quant::QuantParams& act_params, int bits_w,
                                  std::vector<int> pts_exponents) {
  const Tensor& wh = fusion.scaled_weight;
  if (pts_exponents.empty()) pts_exponents.assign(wh.rows(), 0);
  auto pw = quant::minmax_scale(wh, bits_w, true, quant::Granularity::PerChannel, 1);
  auto codes = quant::quantize(wh, pw);
  return quant::make_quantized_layer(std::move(codes), std::move(pw), act_params, fusion.act_divisors,
                                     std::move(pts_exponents));
}

}  // namespace dmq::les
