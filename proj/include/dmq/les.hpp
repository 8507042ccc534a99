#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dmq/quant.hpp"
#include "dmq/tensor.hpp"
#include "dmq/tsw.hpp"

namespace dmq::les {

struct QuantConfig {
  int bits_w = 4;
  int bits_a = 8;
  bool act_signed = true;
};

/// Static quantizer scales for one layer: per-tensor activation scale and
/// per-output-channel weight scales.
struct LayerScales {
  double act = 1.0;
  std::vector<double> weight;
};

/// Activations captured for one quantizable layer plus the layer's weight.
struct LayerCalibRecord {
  Tensor activations;          // [N x C_in]
  std::vector<int> timesteps;  // one tag per activation row
  Tensor weight;               // [C_in x C_out]
};

/// MinMax scales of X / tau and tau (.) W.
LayerScales minmax_scales(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q);

/// Per-sample loss ||X_i W - Q(X_i / tau) Q(tau (.) W)||^2 with MinMax scales
/// recomputed from the scaled tensors.
std::vector<double> les_loss(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q);
/// Same loss under fixed scales.
std::vector<double> les_loss(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q,
                             const LayerScales& scales);

/// Gradient of (1/B) sum_i weights[i] * L_i with respect to log(tau).
///
/// Rounding is straight-through (identity in the backward pass), the clamp
/// passes gradient only where the unrounded code lies inside [l, u], and the
/// scales are held constant.
std::vector<double> les_grad(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q,
                             const LayerScales& scales, std::span<const double> weights);
/// Uniform sample weights, fresh MinMax scales.
std::vector<double> les_grad(const Tensor& x, const Tensor& w, std::span<const double> tau, const QuantConfig& q);

enum class Optimizer { Sgd, Adam };

struct LesOptions {
  int iterations = 500;
  double lr = 1e-2;
  std::size_t batch_size = 64;
  int scale_refresh = 1;  // MinMax scales recomputed every this many steps
  Optimizer optimizer = Optimizer::Sgd;
  std::uint64_t seed = 0;
  QuantConfig quant;
};

struct LesState {
  std::vector<double> log_tau;
  double learning_rate = 0.0;
  int iteration = 0;
  std::vector<double> grad_accumulator;  // last gradient (sgd) or first moment (adam)
  std::vector<double> second_moment;     // adam only
  double initial_loss = 0.0;             // weighted full-record loss at tau = 1
  double final_loss = 0.0;               // same objective at the returned tau

  std::vector<double> tau() const;
};

/// Learns tau for one layer. Mini-batches come from a seeded shuffle; per-sample
/// losses are weighted by `weighter`, which is updated as training proceeds.
/// Snapshots taken at every scale refresh are scored at the end on the full
/// record under the final timestep weights and the best one is returned, so
/// final_loss <= initial_loss always holds.
LesState optimize_layer(const LayerCalibRecord& record, tsw::TimestepWeighter& weighter, const LesOptions& options);

/// Weighted full-record objective used for snapshot selection.
double weighted_record_loss(const LayerCalibRecord& record, std::span<const double> tau, const QuantConfig& q,
                            const tsw::TimestepWeighter& weighter);

/// Closed-form baseline: tau_c = max|X_c|^alpha / max|W_c|^(1 - alpha).
std::vector<double> smoothquant_tau(const Tensor& x, const Tensor& w, double alpha = 0.5);

/// tau folded into static parameters: activation divisors tau_c * s_x and the
/// row-scaled weight tau (.) W.
struct Fusion {
  std::vector<double> act_divisors;
  Tensor scaled_weight;
};

Fusion fuse(std::span<const double> tau, const quant::QuantParams& act_params, const Tensor& w);

/// Quantizes the fused weight with fresh per-output-channel MinMax and builds
/// an executable layer. Dequantization uses act_params' original scale.
quant::QuantizedLayer fused_layer(const Fusion& fusion, const quant::QuantParams& act_params, int bits_w,
                                  std::vector<int> pts_exponents = {});

}  // namespace dmq::les
