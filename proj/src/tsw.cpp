#include "dmq/tsw.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dmq/errors.hpp"

namespace dmq::tsw {

TimestepWeighter::TimestepWeighter(std::vector<int> timesteps, double alpha, double xi)
    : timesteps_(std::move(timesteps)), alpha_(alpha), xi_(xi) {
  if (timesteps_.empty()) throw InputError("timestep set is empty");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw DomainError("alpha must be a finite value >= 0");
  if (!(xi >= 0.0 && xi < 1.0)) throw DomainError("momentum xi must lie in [0, 1)");
  std::sort(timesteps_.begin(), timesteps_.end());
  if (std::adjacent_find(timesteps_.begin(), timesteps_.end()) != timesteps_.end())
    throw InputError("duplicate timestep in calibration set");
  for (int t : timesteps_) state_.emplace(t, Slot{});
}

const TimestepWeighter::Slot& TimestepWeighter::slot(int t) const {
  const auto it = state_.find(t);
  if (it == state_.end()) throw DomainError("timestep " + std::to_string(t) + " is not in the calibration set");
  return it->second;
}

double TimestepWeighter::total() const {
  double sum = 0.0;
  for (int t : timesteps_) sum += state_.at(t).lambda;
  return sum;
}

double TimestepWeighter::weight(int t) const {
  const Slot& s = slot(t);
  const double sum = total();
  if (!(sum > 0.0)) return 1.0;
  const double base = std::clamp(1.0 - s.lambda / sum, 0.0, 1.0);
  return std::pow(base, alpha_);
}

std::vector<double> TimestepWeighter::weights(std::span<const int> timesteps) const {
  std::vector<double> w(timesteps.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = weight(timesteps[i]);
  return w;
}

void TimestepWeighter::update(int t, double batch_mean_loss) {
  if (!(batch_mean_loss >= 0.0) || !std::isfinite(batch_mean_loss))
    throw DomainError("timestep loss must be finite and non-negative");
  slot(t);
  Slot& s = state_[t];
  if (!s.initialized) {
    s.lambda = batch_mean_loss;
    s.initialized = true;
  } else {
    s.lambda = xi_ * s.lambda + (1.0 - xi_) * batch_mean_loss;
  }
}

double TimestepWeighter::weighted_mean(std::span<const double> losses, std::span<const int> timesteps) {
  if (losses.size() != timesteps.size())
    throw DimensionError("weighted_mean: " + std::to_string(losses.size()) + " losses for " +
                         std::to_string(timesteps.size()) + " timesteps");
  if (losses.empty()) throw InputError("weighted_mean: empty batch");
  const auto w = weights(timesteps);
  double acc = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) acc += w[i] * losses[i];
  const double result = acc / static_cast<double>(losses.size());

  std::map<int, std::pair<double, std::size_t>> per_t;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    auto& [sum, count] = per_t[timesteps[i]];
    sum += losses[i];
    ++count;
  }
  for (const auto& [t, agg] : per_t) update(t, agg.first / static_cast<double>(agg.second));
  return result;
}

double TimestepWeighter::accumulated(int t) const {
  return slot(t).lambda;
}

bool TimestepWeighter::initialized(int t) const {
  return slot(t).initialized;
}

}  // namespace dmq::tsw
