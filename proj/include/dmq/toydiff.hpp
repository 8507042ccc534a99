#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmq/les.hpp"
#include "dmq/rng.hpp"
#include "dmq/tensor.hpp"

namespace dmq::toydiff {

/// Linear beta schedule with the alpha_bar(0) = 1 convention.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  static NoiseSchedule linear(int t_max, double beta_start = 1e-4, double beta_end = 2e-2);

  int t_max() const noexcept { return t_max_; }
  double beta_start() const noexcept { return beta_start_; }
  double beta_end() const noexcept { return beta_end_; }
  /// beta_t for t in [1, t_max].
  double beta(int t) const;
  /// prod_{s<=t} (1 - beta_s) for t in [0, t_max].
  double alpha_bar(int t) const;

 private:
  int t_max_ = 0;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> betas_;       // index t - 1
  std::vector<double> alpha_bars_;  // index t
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with eps drawn from rng.
Tensor forward_noise(const NoiseSchedule& schedule, const Tensor& x0, int t, Rng& rng);
Tensor forward_noise(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps);

/// Evenly spaced DDIM timesteps in descending order, e.g. 951, 901, ..., 1.
std::vector<int> ddim_timesteps(int t_max, int steps);

/// One DDIM update from t to t_prev. Deterministic when eta == 0; otherwise a
/// noise term scaled by eta is drawn from rng.
Tensor ddim_step(const NoiseSchedule& schedule, const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev,
                 double eta, Rng* rng = nullptr);

struct LinearParams {
  Tensor weight;  // [C_in x C_out]
  std::vector<double> bias;
};

/// Everything a quantizable linear layer sees during one forward pass.
struct LayerCall {
  std::string_view name;
  const Tensor& input;
  const LinearParams& params;
  std::span<const int> timesteps;  // per input row
};

/// Executes the quantizable linear layers of a forward pass. The default
/// implementation is full precision: input * weight + bias.
class LayerRunner {
 public:
  virtual ~LayerRunner() = default;
  virtual Tensor linear(const LayerCall& call);
};

struct LayerInfo {
  std::string name;
  bool skip_connection = false;
};

/// Small noise-prediction MLP on 2-D points.
///
///   h0  = relu(in_proj(x) + temb(sinusoid(t)))            full precision
///   a   = silu(res.fc1(h0 * norm.scale + norm.shift))
///   h1  = res.fc2(a) + res.skip(h0)                       skip sees raw h0
///   out = out_proj(silu(mid(h1)))                         out_proj full precision
///
/// Only res.fc1, res.fc2, res.skip and mid are quantizable.
class ToyDenoiser {
 public:
  ToyDenoiser() = default;
  ToyDenoiser(std::map<std::string, Tensor> tensors);

  static const std::vector<LayerInfo>& quantizable_layers();
  static std::vector<std::string> tensor_names();

  std::size_t hidden() const;
  std::size_t data_dim() const;
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  const LinearParams& linear(std::string_view name) const;
  const Tensor& tensor(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }
  /// Per-channel factors the fitting routine applied to the skip input.
  std::vector<double> outlier_gain() const;
  std::size_t parameter_count() const;

  Tensor predict_noise(const Tensor& x_t, std::span<const int> timesteps, LayerRunner* runner = nullptr) const;

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, LinearParams, std::less<>> linears_;
  NoiseSchedule schedule_;
};

/// Sinusoidal timestep features, [B x dim].
Tensor timestep_embedding(std::span<const int> timesteps, std::size_t dim);

/// Points from the toy data distribution: 8 Gaussians on a ring of radius 2.
Tensor sample_dataset(std::size_t n, Rng& rng);

struct SamplerConfig {
  int steps = 20;
  double eta = 0.0;
};

struct Trajectory {
  std::vector<Tensor> states;  // x_T, ..., x_0
  std::vector<int> timesteps;  // states.size() == timesteps.size() + 1
};

/// Hook to edit the noise prediction at a given step index before the update.
using EpsHook = std::function<void(std::size_t step_index, int t, Tensor& eps)>;

Trajectory sample(const ToyDenoiser& model, Tensor x_start, const SamplerConfig& config, Rng& rng,
                  LayerRunner* runner = nullptr, const EpsHook& hook = {});

struct CalibrationConfig {
  int steps = 20;      // T
  std::size_t n = 64;  // samples per step
  double eta = 0.0;
};

/// Captured inputs of every quantizable layer, in topological order.
struct CalibrationSet {
  std::vector<std::string> layer_names;
  std::map<std::string, les::LayerCalibRecord> records;
  std::vector<int> timesteps;
};

/// Runs n seeded trajectories of `steps` DDIM steps and records each
/// quantizable layer's input at every step, tagged with its timestep.
/// `runner`, when given, decides how layers execute (the capture still sees
/// each layer's input).
CalibrationSet collect_calibration(const ToyDenoiser& model, const CalibrationConfig& config, Rng& rng,
                                   LayerRunner* runner = nullptr);

// Checkpoint file: "DMQC", u16 version, u32 tensor count, then a table of
// (u16 name length, name, u8 rank, u32 dims..., u64 data offset) and
// little-endian float32 payloads.
inline constexpr std::uint16_t kCheckpointVersion = 1;
void save_checkpoint(const ToyDenoiser& model, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const ToyDenoiser& model);
ToyDenoiser load_checkpoint(const std::filesystem::path& path);
ToyDenoiser decode_checkpoint(std::span<const std::uint8_t> bytes);

struct FitOptions {
  std::size_t hidden = 64;
  int t_max = 1000;
  int steps = 6000;
  std::size_t batch = 256;
  double lr = 2e-3;
  std::uint64_t seed = 7;
  /// Gains applied to the most active skip-input channels after training.
  std::vector<double> outlier_gains = {32.0, 64.0, 128.0};
  std::function<void(int step, double loss)> progress;
};

/// Trains the denoiser by noise-prediction regression, then rescales a few
/// channels of h0 by `outlier_gains` with compensating changes to norm.scale
/// and res.skip so the network function is unchanged.
ToyDenoiser fit_denoiser(const FitOptions& options);

}  // namespace dmq::toydiff
