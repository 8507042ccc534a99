#pragma once

#include <map>
#include <span>
#include <vector>

namespace dmq::tsw {

/// Focal-style per-timestep loss weights driven by momentum-accumulated losses.
///
/// weight(t) = (1 - Lambda_t / sum_t' Lambda_t')^alpha, so timesteps whose
/// accumulated error is small get the larger weight. Lambda_t is an EMA of the
/// per-timestep mean loss; the first observation of t seeds it directly. While
/// every Lambda is still zero all weights are 1.
class TimestepWeighter {
 public:
  TimestepWeighter(std::vector<int> timesteps, double alpha, double xi);

  double weight(int t) const;
  /// Weights for a batch, looked up in one pass so they share one state.
  std::vector<double> weights(std::span<const int> timesteps) const;

  void update(int t, double batch_mean_loss);

  /// (1/B) sum_i weight(t_i) L_i with weights frozen at entry, followed by one
  /// update per distinct timestep using the unweighted mean loss at that step.
  double weighted_mean(std::span<const double> losses, std::span<const int> timesteps);

  double accumulated(int t) const;
  bool initialized(int t) const;
  const std::vector<int>& timesteps() const noexcept { return timesteps_; }
  double alpha() const noexcept { return alpha_; }
  double xi() const noexcept { return xi_; }

 private:
  struct Slot {
    double lambda = 0.0;
    bool initialized = false;
  };

  const Slot& slot(int t) const;
  double total() const;

  std::vector<int> timesteps_;
  std::map<int, Slot> state_;
  double alpha_;
  double xi_;
};

}  // namespace dmq::tsw
