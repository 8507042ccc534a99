#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dmq/igemm.hpp"
#include "dmq/les.hpp"
#include "dmq/quant.hpp"
#include "dmq/toydiff.hpp"

namespace dmq::pipeline {

enum class PtsLayers { SkipOnly, All, None };
enum class Baseline { None, SmoothQuant };

/// Width that turns quantization of an operand off (sanity mode).
inline constexpr int kPassthroughBits = 32;

struct Config {
  int bits_w = 4;
  int bits_a = 8;
  bool act_signed = true;
  int T = 20;                 // calibration DDIM steps
  std::size_t n = 64;         // calibration samples per step
  std::size_t B = 64;         // LES mini-batch
  int iterations = 500;       // LES steps per layer
  double alpha = 1.0;         // timestep weighting exponent
  double kappa = 0.6;         // PTS agreement threshold
  double xi = 0.95;           // timestep loss momentum
  double lr = 0.01;
  int D = 3;                  // largest PTS exponent
  PtsLayers pts_layers = PtsLayers::SkipOnly;
  bool les = true;
  Baseline baseline = Baseline::None;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint = "data/toy_checkpoint.bin";
  double eta = 0.0;
  les::Optimizer optimizer = les::Optimizer::Sgd;
  int scale_refresh = 1;
  bool propagate_quantized_inputs = false;
  std::size_t eval_samples = 256;
};

/// Sets one key from its text form. Throws ConfigError on unknown keys or bad values.
void set_config_value(Config& config, const std::string& key, const std::string& value);
/// Parses `key = value` lines; '#' starts a comment. A relative checkpoint path
/// is resolved against `base_dir`.
Config parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
Config load_config(const std::filesystem::path& path);
/// Throws ConfigError for inconsistent settings (e.g. unsupported bit widths).
void validate(const Config& config);
/// Canonical `key = value` listing of every field.
std::string format_config(const Config& config);

std::string to_string(PtsLayers v);
std::string to_string(Baseline v);

// ---------------------------------------------------------------------------
// Quantized model file.

inline constexpr std::uint16_t kModelVersion = 1;

struct ModelLayer {
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  double act_scale = 1.0;             // s_x
  std::vector<double> weight_scales;  // per output channel; empty when weights pass through
  std::vector<double> act_divisors;   // tau_c * s_x
  std::vector<int> delta;
  IntTensor weight_codes;  // quantized weights, [C_in x C_out]
  Tensor weight;           // pass-through weights (bits_w == 32)
};

struct QuantizedModel {
  int bits_w = 4;
  int bits_a = 8;
  bool act_signed = true;
  std::vector<ModelLayer> layers;

  const ModelLayer& layer(std::string_view name) const;
};

std::vector<std::uint8_t> export_model(const QuantizedModel& model);
/// Throws FormatError (with byte offset and record name) on malformed input and
/// UnsupportedVersionError on a version mismatch.
QuantizedModel import_model(std::span<const std::uint8_t> bytes);
void save_model(const QuantizedModel& model, const std::filesystem::path& path);
QuantizedModel load_model(const std::filesystem::path& path);

/// Two 4-bit codes per byte, low nibble first; an odd tail leaves the high nibble zero.
std::vector<std::uint8_t> pack_int4(std::span<const std::int64_t> codes);
std::vector<std::int64_t> unpack_int4(std::span<const std::uint8_t> bytes, std::size_t count);

/// Executes the quantizable layers of the toy model from a QuantizedModel.
/// Both operands quantized: integer GEMM with weight rows pre-shifted by delta.
/// Otherwise the quantized operand is dequantized and multiplied in doubles.
class QuantizedRunner : public toydiff::LayerRunner {
 public:
  explicit QuantizedRunner(const QuantizedModel& model);
  Tensor linear(const toydiff::LayerCall& call) override;
  /// Layer output without bias.
  Tensor matmul(std::string_view name, const Tensor& x) const;

 private:
  struct Prepared {
    const ModelLayer* layer;
    igemm::ShiftedWeights shifted;
    std::vector<double> effective_divisors;
    Tensor dequantized_weight;
  };
  const QuantizedModel& model_;
  std::map<std::string, Prepared, std::less<>> layers_;
};

/// Quantizes only the named layers; the rest run in full precision.
class PartialRunner : public toydiff::LayerRunner {
 public:
  PartialRunner(const QuantizedModel& model, std::vector<std::string> quantized);
  Tensor linear(const toydiff::LayerCall& call) override;

 private:
  QuantizedRunner inner_;
  std::vector<std::string> quantized_;
};

// ---------------------------------------------------------------------------
// Reports.

struct LayerTimestepError {
  std::string layer;
  int timestep = 0;
  double mse = 0.0;
};

struct LayerSummary {
  std::string name;
  bool skip_connection = false;
  std::string tau_source;  // les, smoothquant, none
  double tau_min = 1.0;
  double tau_max = 1.0;
  double tau_geomean = 1.0;
  double act_scale = 1.0;
  bool pts = false;
  std::vector<int> delta_histogram;  // count of channels per exponent
  double les_initial_loss = 0.0;
  double les_final_loss = 0.0;
};

struct Sensitivity {
  std::size_t early_step = 0;
  std::size_t late_step = 0;
  double perturbation = 0.0;
  double early_deviation = 0.0;
  double late_deviation = 0.0;
};

struct EvalReport {
  std::string config_echo;
  std::vector<LayerSummary> layers;
  std::vector<LayerTimestepError> layer_errors;  // layers x timesteps, topological then descending t
  double endpoint_mse = 0.0;
  std::size_t eval_samples = 0;
  Sensitivity sensitivity;
};

std::string format_report(const EvalReport& report);
std::string layer_errors_tsv(const EvalReport& report);
std::string layer_summary_tsv(const EvalReport& report);
/// Writes `path` plus <stem>.layer_errors.tsv and <stem>.layers.tsv beside it.
void write_report(const EvalReport& report, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Stages.

struct QuantizeResult {
  QuantizedModel model;
  EvalReport report;
};

/// Builds one layer's record from its tau, PTS exponents and activation scale.
ModelLayer build_layer(const std::string& name, const Tensor& weight, std::span<const double> tau, double act_scale,
                       std::vector<int> delta, const Config& config);

QuantizeResult run_quantize(const Config& config);
QuantizeResult run_quantize(const Config& config, const toydiff::ToyDenoiser& model);

EvalReport run_eval(const QuantizedModel& qmodel, const Config& config);
EvalReport run_eval(const QuantizedModel& qmodel, const Config& config, const toydiff::ToyDenoiser& model);

/// Per-layer channel statistics of the calibration activations.
struct CalibrationStats {
  std::string layer;
  std::size_t rows = 0;
  double channel_max = 0.0;
  double channel_median = 0.0;
  double max_median_ratio = 0.0;
};
std::vector<CalibrationStats> calibration_stats(const toydiff::CalibrationSet& set);

toydiff::ToyDenoiser load_checkpoint_for(const Config& config);

}  // namespace dmq::pipeline
