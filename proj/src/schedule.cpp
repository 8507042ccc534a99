#include <algorithm>
#include <cmath>
#include <string>

#include "dmq/errors.hpp"
#include "dmq/toydiff.hpp"

namespace dmq::toydiff {

NoiseSchedule NoiseSchedule::linear(int t_max, double beta_start, double beta_end) {
  if (t_max < 1) throw DomainError("schedule needs at least one timestep");
  if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0))
    throw DomainError("betas must lie in (0, 1)");
  NoiseSchedule s;
  s.t_max_ = t_max;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.betas_.resize(static_cast<std::size_t>(t_max));
  s.alpha_bars_.resize(static_cast<std::size_t>(t_max) + 1);
  s.alpha_bars_[0] = 1.0;
  for (int t = 1; t <= t_max; ++t) {
    const double frac = t_max == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(t_max - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.betas_[static_cast<std::size_t>(t - 1)] = b;
    s.alpha_bars_[static_cast<std::size_t>(t)] = s.alpha_bars_[static_cast<std::size_t>(t - 1)] * (1.0 - b);
  }
  return s;
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > t_max_) throw DomainError("beta: timestep " + std::to_string(t) + " out of range");
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > t_max_) throw DomainError("alpha_bar: timestep " + std::to_string(t) + " out of range");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

Tensor forward_noise(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps) {
  if (t < 0 || t > schedule.t_max())
    throw DomainError("forward_noise: timestep " + std::to_string(t) + " outside [0, " +
                      std::to_string(schedule.t_max()) + "]");
  if (eps.shape() != x0.shape()) throw DimensionError("forward_noise: noise shape differs from data shape");
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out = x0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor forward_noise(const NoiseSchedule& schedule, const Tensor& x0, int t, Rng& rng) {
  if (t < 0 || t > schedule.t_max())
    throw DomainError("forward_noise: timestep " + std::to_string(t) + " outside [0, " +
                      std::to_string(schedule.t_max()) + "]");
  return forward_noise(schedule, x0, t, rng.normal_tensor(x0.shape()));
}

std::vector<int> ddim_timesteps(int t_max, int steps) {
  if (steps < 1 || steps > t_max) throw DomainError("ddim_timesteps: steps must lie in [1, t_max]");
  const int stride = t_max / steps;
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) ts[static_cast<std::size_t>(i)] = (steps - 1 - i) * stride + 1;
  return ts;
}

Tensor ddim_step(const NoiseSchedule& schedule, const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev,
                 double eta, Rng* rng) {
  if (!(t > t_prev && t_prev >= 0)) throw DomainError("ddim_step: need t > t_prev >= 0");
  if (!(eta >= 0.0 && eta <= 1.0)) throw DomainError("ddim_step: eta must lie in [0, 1]");
  if (x_t.shape() != eps_pred.shape()) throw DimensionError("ddim_step: prediction shape differs from state");
  const double ab_t = schedule.alpha_bar(t);
  const double ab_p = schedule.alpha_bar(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
  const double inv = 1.0 / std::sqrt(ab_t);
  const double noise_coef = std::sqrt(1.0 - ab_t);
  const double keep = std::sqrt(ab_p);
  if (sigma > 0.0 && rng == nullptr) throw InputError("ddim_step: eta > 0 needs a random generator");

  Tensor out = x_t;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (x_t[i] - noise_coef * eps_pred[i]) * inv;
    double v = keep * x0 + dir * eps_pred[i];
    if (sigma > 0.0) v += sigma * rng->normal();
    out[i] = v;
  }
  return out;
}

}  // namespace dmq::toydiff
