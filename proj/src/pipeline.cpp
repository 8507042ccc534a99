#include "dmq/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "dmq/errors.hpp"
#include "dmq/pts.hpp"
#include "dmq/tsw.hpp"

namespace dmq::pipeline {

namespace {

using toydiff::LayerCall;
using toydiff::ToyDenoiser;

// Stream labels for Rng::derive; every stage gets its own generator.
constexpr std::uint64_t kCalibrationStream = 1;
constexpr std::uint64_t kEvalNoiseStream = 2;
constexpr std::uint64_t kSamplerStream = 3;
constexpr std::uint64_t kPerturbationStream = 4;
constexpr std::uint64_t kLesStreamBase = 100;

bool passthrough(const Config& c) {
  return c.bits_w == kPassthroughBits || c.bits_a == kPassthroughBits;
}

Tensor with_bias(Tensor y, const std::vector<double>& bias) {
  return add_row_vector(y, bias);
}

toydiff::CalibrationSet calibrate(const ToyDenoiser& model, const Config& c, toydiff::LayerRunner* runner) {
  Rng rng = Rng::derive(c.seed, kCalibrationStream);
  return toydiff::collect_calibration(model, toydiff::CalibrationConfig{c.T, c.n, c.eta}, rng, runner);
}

LayerSummary summarize(const ModelLayer& l, const Config& c) {
  LayerSummary s;
  s.name = l.name;
  for (const auto& info : ToyDenoiser::quantizable_layers())
    if (info.name == l.name) s.skip_connection = info.skip_connection;
  s.tau_source = "file";
  double lmin = INFINITY, lmax = -INFINITY, lsum = 0.0;
  for (double d : l.act_divisors) {
    const double t = std::log(d / l.act_scale);
    lmin = std::min(lmin, t);
    lmax = std::max(lmax, t);
    lsum += t;
  }
  s.tau_min = std::exp(lmin);
  s.tau_max = std::exp(lmax);
  s.tau_geomean = std::exp(lsum / static_cast<double>(l.act_divisors.size()));
  s.act_scale = l.act_scale;
  const int top = std::max(c.D, *std::max_element(l.delta.begin(), l.delta.end()));
  s.delta_histogram.assign(static_cast<std::size_t>(top) + 1, 0);
  for (int d : l.delta) ++s.delta_histogram[static_cast<std::size_t>(d)];
  s.pts = std::any_of(l.delta.begin(), l.delta.end(), [](int d) { return d != 0; });
  return s;
}

// Runs every layer in full precision and, on the side, measures how far the
// quantized layer output is from it on the same input.
class ErrorProbe : public toydiff::LayerRunner {
 public:
  explicit ErrorProbe(const QuantizedRunner& q) : q_(q) {}

  Tensor linear(const LayerCall& call) override {
    const Tensor fp = matmul(call.input, call.params.weight);
    const Tensor qy = q_.matmul(call.name, call.input);
    for (std::size_t i = 0; i < fp.rows(); ++i) {
      auto& acc = sums_[{std::string(call.name), call.timesteps[i]}];
      for (std::size_t j = 0; j < fp.cols(); ++j) {
        const double d = fp(i, j) - qy(i, j);
        acc.first += d * d;
      }
      acc.second += fp.cols();
    }
    return with_bias(fp, call.params.bias);
  }

  double mse(const std::string& layer, int t) const {
    const auto it = sums_.find({layer, t});
    if (it == sums_.end() || it->second.second == 0) return 0.0;
    return it->second.first / static_cast<double>(it->second.second);
  }

 private:
  const QuantizedRunner& q_;
  std::map<std::pair<std::string, int>, std::pair<double, std::size_t>> sums_;
};

}  // namespace

// ---------------------------------------------------------------------------

QuantizedRunner::QuantizedRunner(const QuantizedModel& model) : model_(model) {
  const bool int_path = model.bits_w != kPassthroughBits && model.bits_a != kPassthroughBits;
  for (const auto& l : model.layers) {
    Prepared p{&l, {}, {}, {}};
    p.effective_divisors.resize(l.in_channels);
    for (std::size_t k = 0; k < l.in_channels; ++k) p.effective_divisors[k] = std::ldexp(l.act_divisors[k], l.delta[k]);
    if (int_path) {
      p.shifted = igemm::shift_weights(l.weight_codes, l.delta);
      igemm::check_headroom(model.act_signed ? model.bits_a : model.bits_a + 1, p.shifted.codes.nominal_bits(),
                            l.in_channels);
    } else if (model.bits_w == kPassthroughBits) {
      p.dequantized_weight = l.weight;
    } else {
      p.dequantized_weight = Tensor({l.in_channels, l.out_channels});
      for (std::size_t k = 0; k < l.in_channels; ++k)
        for (std::size_t j = 0; j < l.out_channels; ++j)
          p.dequantized_weight(k, j) = l.weight_scales[j] * static_cast<double>(l.weight_codes(k, j));
    }
    if (!layers_.emplace(l.name, std::move(p)).second) throw InputError("duplicate layer '" + l.name + "'");
  }
}

Tensor QuantizedRunner::matmul(std::string_view name, const Tensor& x) const {
  const auto it = layers_.find(name);
  if (it == layers_.end()) throw InputError("quantized model has no layer '" + std::string(name) + "'");
  const Prepared& p = it->second;
  const ModelLayer& l = *p.layer;
  if (x.rank() != 2 || x.cols() != l.in_channels)
    throw DimensionError("layer '" + l.name + "': input width does not match C_in");

  if (model_.bits_a == kPassthroughBits) return dmq::matmul(x, p.dequantized_weight);
  const IntTensor codes = quant::quantize_columns(x, p.effective_divisors, model_.bits_a, model_.act_signed);
  if (model_.bits_w != kPassthroughBits)
    return igemm::dequantize_output(igemm::execute(codes, p.shifted), l.act_scale, l.weight_scales);
  Tensor xd(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t k = 0; k < l.in_channels; ++k)
      xd(i, k) = std::ldexp(l.act_scale, l.delta[k]) * static_cast<double>(codes(i, k));
  return dmq::matmul(xd, p.dequantized_weight);
}

Tensor QuantizedRunner::linear(const LayerCall& call) {
  return with_bias(matmul(call.name, call.input), call.params.bias);
}

PartialRunner::PartialRunner(const QuantizedModel& model, std::vector<std::string> quantized)
    : inner_(model), quantized_(std::move(quantized)) {}

Tensor PartialRunner::linear(const LayerCall& call) {
  if (std::find(quantized_.begin(), quantized_.end(), call.name) != quantized_.end()) return inner_.linear(call);
  return LayerRunner::linear(call);
}

// ---------------------------------------------------------------------------

ModelLayer build_layer(const std::string& name, const Tensor& weight, std::span<const double> tau, double act_scale,
                       std::vector<int> delta, const Config& c) {
  ModelLayer l;
  l.name = name;
  l.in_channels = weight.rows();
  l.out_channels = weight.cols();
  l.act_scale = act_scale;
  if (delta.empty()) delta.assign(weight.rows(), 0);
  if (c.bits_w == kPassthroughBits || c.bits_a == kPassthroughBits) {
    const Tensor scaled = channel_mul(weight, tau);
    for (std::size_t k = 0; k < tau.size(); ++k) l.act_divisors.push_back(tau[k] * act_scale);
    if (c.bits_w == kPassthroughBits) {
      l.weight = scaled;
    } else {
      auto pw = quant::minmax_scale(scaled, c.bits_w, true, quant::Granularity::PerChannel, 1);
      l.weight_codes = quant::quantize(scaled, pw);
      l.weight_scales.assign(pw.scales().begin(), pw.scales().end());
    }
    l.delta = std::move(delta);
    return l;
  }
  const auto act = quant::QuantParams::per_tensor(act_scale, c.bits_a, c.act_signed);
  const auto layer = les::fused_layer(les::fuse(tau, act, weight), act, c.bits_w, std::move(delta));
  l.act_divisors = layer.act_divisors;
  l.delta = layer.pts_exponents;
  l.weight_codes = layer.weight_codes;
  l.weight_scales.assign(layer.weight_params.scales().begin(), layer.weight_params.scales().end());
  return l;
}

toydiff::ToyDenoiser load_checkpoint_for(const Config& config) {
  if (!std::filesystem::exists(config.checkpoint))
    throw IoError("checkpoint '" + config.checkpoint.string() + "' not found");
  return toydiff::load_checkpoint(config.checkpoint);
}

QuantizeResult run_quantize(const Config& config) {
  validate(config);
  return run_quantize(config, load_checkpoint_for(config));
}

QuantizeResult run_quantize(const Config& c, const ToyDenoiser& model) {
  validate(c);
  const bool fp_mode = passthrough(c);
  QuantizedModel qm{c.bits_w, c.bits_a, c.act_signed, {}};
  std::vector<LayerSummary> summaries;

  const auto full_set = calibrate(model, c, nullptr);
  std::vector<std::string> done;
  std::size_t index = 0;
  for (const auto& info : ToyDenoiser::quantizable_layers()) {
    les::LayerCalibRecord record;
    std::vector<int> step_tags = full_set.timesteps;
    if (c.propagate_quantized_inputs && !done.empty()) {
      PartialRunner partial(qm, done);
      auto set = calibrate(model, c, &partial);
      record = std::move(set.records.at(info.name));
    } else {
      record = full_set.records.at(info.name);
    }
    const Tensor& x = record.activations;
    const Tensor& w = record.weight;

    LayerSummary sum;
    std::vector<double> tau(w.rows(), 1.0);
    tsw::TimestepWeighter weighter(step_tags, c.alpha, c.xi);
    sum.tau_source = "none";
    if (!fp_mode && c.baseline == Baseline::SmoothQuant) {
      tau = les::smoothquant_tau(x, w, 0.5);
      sum.tau_source = "smoothquant";
    } else if (!fp_mode && c.les) {
      les::LesOptions opt;
      opt.iterations = c.iterations;
      opt.lr = c.lr;
      opt.batch_size = c.B;
      opt.scale_refresh = c.scale_refresh;
      opt.optimizer = c.optimizer;
      opt.seed = Rng::derive(c.seed, kLesStreamBase + index).next_u64();
      opt.quant = les::QuantConfig{c.bits_w, c.bits_a, c.act_signed};
      const auto state = les::optimize_layer(record, weighter, opt);
      tau = state.tau();
      sum.tau_source = "les";
      sum.les_initial_loss = state.initial_loss;
      sum.les_final_loss = state.final_loss;
    }

    double s_x = 1.0;
    std::vector<int> delta(w.rows(), 0);
    const bool use_pts = !fp_mode && (c.pts_layers == PtsLayers::All ||
                                      (c.pts_layers == PtsLayers::SkipOnly && info.skip_connection));
    double chosen_scale = 1.0;
    if (!fp_mode) {
      const Tensor xs = channel_div(x, tau);
      s_x = quant::minmax_scale(xs, c.bits_a, c.act_signed, quant::Granularity::PerTensor).scale();
      if (use_pts) {
        // Every rung of the scale ladder carries its own vote. Rungs that would
        // clip a calibration value are rejected; of the rest, keep the one whose
        // layer output is closest to full precision under the timestep weights
        // LES ended with. Rung 0 is plain MinMax and never clips.
        const Tensor reference = matmul(x, w);
        const auto row_weight = weighter.weights(record.timesteps);
        std::vector<double> extent(xs.cols(), 0.0);
        for (std::size_t i = 0; i < xs.rows(); ++i)
          for (std::size_t k = 0; k < xs.cols(); ++k)
            extent[k] = std::max(extent[k], c.act_signed ? std::abs(xs(i, k)) : xs(i, k));
        const auto hi = static_cast<double>(quant::QuantParams::per_tensor(1.0, c.bits_a, c.act_signed).upper());
        double best = INFINITY;
        for (auto& cand : pts::scale_candidates(xs, s_x, c.D, c.kappa, c.bits_a, c.act_signed, record.timesteps)) {
          bool clips = false;
          for (std::size_t k = 0; k < extent.size() && !clips; ++k) {
            const double code = quant::round_half_even(extent[k] / std::ldexp(cand.scale, cand.factors.delta[k]));
            clips = code > hi;
          }
          if (clips) continue;
          const auto act = quant::QuantParams::per_tensor(cand.scale, c.bits_a, c.act_signed);
          const auto layer = les::fused_layer(les::fuse(tau, act, w), act, c.bits_w, cand.factors.delta);
          const Tensor diff = sub(reference, quant::quantized_matmul_reference(x, layer));
          double err = 0.0;
          for (std::size_t i = 0; i < diff.rows(); ++i) {
            double row = 0.0;
            for (double v : diff.row(i)) row += v * v;
            err += row_weight[i] * row;
          }
          if (err < best) {
            best = err;
            chosen_scale = cand.scale;
            delta = cand.factors.delta;
          }
        }
        s_x = chosen_scale;
      }
    }
    qm.layers.push_back(build_layer(info.name, w, tau, s_x, std::move(delta), c));

    LayerSummary file_view = summarize(qm.layers.back(), c);
    file_view.tau_source = sum.tau_source;
    file_view.les_initial_loss = sum.les_initial_loss;
    file_view.les_final_loss = sum.les_final_loss;
    file_view.pts = use_pts;
    summaries.push_back(std::move(file_view));
    done.push_back(info.name);
    ++index;
  }

  // What gets evaluated is exactly what a reader of the exported file sees.
  QuantizeResult out;
  out.model = import_model(export_model(qm));
  out.report = run_eval(out.model, c, model);
  out.report.layers = std::move(summaries);
  return out;
}

EvalReport run_eval(const QuantizedModel& qmodel, const Config& config) {
  validate(config);
  return run_eval(qmodel, config, load_checkpoint_for(config));
}

EvalReport run_eval(const QuantizedModel& qm, const Config& c, const ToyDenoiser& model) {
  validate(c);
  const auto& layers = ToyDenoiser::quantizable_layers();
  if (qm.layers.size() != layers.size()) throw InputError("model file does not match the checkpoint's layer count");
  for (const auto& info : layers) {
    const auto& l = qm.layer(info.name);
    const auto& w = model.linear(info.name).weight;
    if (l.in_channels != w.rows() || l.out_channels != w.cols())
      throw DimensionError("layer '" + info.name + "' does not match the checkpoint shape");
  }
  QuantizedRunner runner(qm);
  const toydiff::SamplerConfig sc{c.T, c.eta};

  Rng noise = Rng::derive(c.seed, kEvalNoiseStream);
  const Tensor x_start = noise.normal_tensor({c.eval_samples, model.data_dim()});

  ErrorProbe probe(runner);
  Rng fp_rng = Rng::derive(c.seed, kSamplerStream);
  const auto fp = toydiff::sample(model, x_start, sc, fp_rng, &probe);
  Rng q_rng = Rng::derive(c.seed, kSamplerStream);
  const auto q = toydiff::sample(model, x_start, sc, q_rng, &runner);

  EvalReport r;
  r.config_echo = format_config(c);
  r.eval_samples = c.eval_samples;
  r.endpoint_mse = mean_squared_difference(fp.states.back(), q.states.back());
  if (!std::isfinite(r.endpoint_mse)) throw NumericalError("quantized trajectory diverged");
  for (const auto& info : layers) {
    r.layers.push_back(summarize(qm.layer(info.name), c));
    for (int t : fp.timesteps) r.layer_errors.push_back({info.name, t, probe.mse(info.name, t)});
  }

  // Same fixed perturbation of the noise estimate, injected once early and once late.
  Rng pr = Rng::derive(c.seed, kPerturbationStream);
  const Tensor bump = scale(pr.normal_tensor({c.eval_samples, model.data_dim()}), 0.1);
  auto perturbed = [&](std::size_t step) {
    Rng rng = Rng::derive(c.seed, kSamplerStream);
    const auto traj = toydiff::sample(model, x_start, sc, rng, nullptr, [&](std::size_t s, int, Tensor& eps) {
      if (s == step) eps = add(eps, bump);
    });
    return mean_squared_difference(traj.states.back(), fp.states.back());
  };
  r.sensitivity.perturbation = 0.1;
  r.sensitivity.early_step = 0;
  r.sensitivity.late_step = fp.timesteps.size() - 1;
  r.sensitivity.early_deviation = perturbed(r.sensitivity.early_step);
  r.sensitivity.late_deviation = perturbed(r.sensitivity.late_step);
  return r;
}

std::vector<CalibrationStats> calibration_stats(const toydiff::CalibrationSet& set) {
  std::vector<CalibrationStats> out;
  for (const auto& name : set.layer_names) {
    const auto& x = set.records.at(name).activations;
    auto m = column_max_abs(x);
    CalibrationStats s;
    s.layer = name;
    s.rows = x.rows();
    s.channel_max = *std::max_element(m.begin(), m.end());
    std::sort(m.begin(), m.end());
    const std::size_t h = m.size() / 2;
    s.channel_median = m.size() % 2 ? m[h] : 0.5 * (m[h - 1] + m[h]);
    s.max_median_ratio = s.channel_median > 0.0 ? s.channel_max / s.channel_median : INFINITY;
    out.push_back(s);
  }
  return out;
}

}  // namespace dmq::pipeline
