#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dmq/errors.hpp"
#include "dmq/toydiff.hpp"

namespace dmq::toydiff {

namespace {

constexpr const char* kLinearNames[] = {"in_proj", "temb", "res.fc1", "res.fc2", "res.skip", "mid", "out_proj"};

double silu(double v) {
  return v / (1.0 + std::exp(-v));
}

Tensor apply_silu(Tensor x) {
  for (double& v : x.data()) v = silu(v);
  return x;
}

Tensor apply_relu(Tensor x) {
  for (double& v : x.data()) v = std::max(v, 0.0);
  return x;
}

Tensor full_precision(const Tensor& x, const LinearParams& p) {
  return add_row_vector(matmul(x, p.weight), p.bias);
}

}  // namespace

Tensor LayerRunner::linear(const LayerCall& call) {
  return full_precision(call.input, call.params);
}

const std::vector<LayerInfo>& ToyDenoiser::quantizable_layers() {
  static const std::vector<LayerInfo> layers = {
      {"res.fc1", false}, {"res.fc2", false}, {"res.skip", true}, {"mid", false}};
  return layers;
}

std::vector<std::string> ToyDenoiser::tensor_names() {
  std::vector<std::string> names;
  for (const char* l : kLinearNames) {
    names.push_back(std::string(l) + ".weight");
    names.push_back(std::string(l) + ".bias");
  }
  names.insert(names.end(), {"norm.scale", "norm.shift", "meta.outlier_gain", "meta.schedule"});
  return names;
}

ToyDenoiser::ToyDenoiser(std::map<std::string, Tensor> tensors) : tensors_(std::move(tensors)) {
  for (const auto& name : tensor_names())
    if (!tensors_.count(name)) throw InputError("checkpoint is missing tensor '" + name + "'");
  const std::size_t h = tensors_.at("in_proj.weight").cols();
  const std::size_t d = tensors_.at("in_proj.weight").rows();
  auto expect = [&](const std::string& name, Shape shape) {
    if (tensors_.at(name).shape() != shape) throw DimensionError("tensor '" + name + "' has an unexpected shape");
  };
  expect("temb.weight", {h, h});
  for (const char* l : {"res.fc1", "res.fc2", "res.skip", "mid"}) expect(std::string(l) + ".weight", {h, h});
  expect("out_proj.weight", {h, d});
  for (const char* l : kLinearNames) {
    const auto& w = tensors_.at(std::string(l) + ".weight");
    expect(std::string(l) + ".bias", {w.cols()});
    const auto& b = tensors_.at(std::string(l) + ".bias");
    linears_.emplace(l, LinearParams{w, std::vector<double>(b.data().begin(), b.data().end())});
  }
  expect("norm.scale", {h});
  expect("norm.shift", {h});
  expect("meta.outlier_gain", {h});
  expect("meta.schedule", {3});
  for (const auto& [name, t] : tensors_)
    if (!all_finite(t)) throw NumericalError("tensor '" + name + "' contains non-finite values");
  const auto& sch = tensors_.at("meta.schedule");
  schedule_ = NoiseSchedule::linear(static_cast<int>(sch[0]), sch[1], sch[2]);
}

std::size_t ToyDenoiser::hidden() const {
  return tensors_.at("in_proj.weight").cols();
}

std::size_t ToyDenoiser::data_dim() const {
  return tensors_.at("in_proj.weight").rows();
}

const LinearParams& ToyDenoiser::linear(std::string_view name) const {
  const auto it = linears_.find(name);
  if (it == linears_.end()) throw InputError("unknown layer '" + std::string(name) + "'");
  return it->second;
}

const Tensor& ToyDenoiser::tensor(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InputError("unknown tensor '" + name + "'");
  return it->second;
}

std::vector<double> ToyDenoiser::outlier_gain() const {
  const auto& g = tensors_.at("meta.outlier_gain");
  return {g.data().begin(), g.data().end()};
}

std::size_t ToyDenoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_)
    if (name.rfind("meta.", 0) != 0) n += t.size();
  return n;
}

Tensor timestep_embedding(std::span<const int> timesteps, std::size_t dim) {
  Tensor e({timesteps.size(), dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(timesteps[i]) * freq;
      e(i, k) = std::sin(arg);
      e(i, half + k) = std::cos(arg);
    }
  }
  return e;
}

Tensor ToyDenoiser::predict_noise(const Tensor& x_t, std::span<const int> timesteps, LayerRunner* runner) const {
  if (x_t.rank() != 2 || x_t.cols() != data_dim()) throw DimensionError("predict_noise: wrong input width");
  if (timesteps.size() != x_t.rows()) throw DimensionError("predict_noise: one timestep per row required");
  LayerRunner fp;
  LayerRunner& run = runner ? *runner : fp;
  auto call = [&](const char* name, const Tensor& in) { return run.linear({name, in, linear(name), timesteps}); };

  const Tensor emb = timestep_embedding(timesteps, hidden());
  const Tensor h0 =
      apply_relu(add(full_precision(x_t, linear("in_proj")), full_precision(emb, linear("temb"))));
  const Tensor normed = add_row_vector(mul_row_vector(h0, tensor("norm.scale").data()), tensor("norm.shift").data());
  const Tensor a = apply_silu(call("res.fc1", normed));
  const Tensor b = call("res.fc2", a);
  const Tensor skip = call("res.skip", h0);
  const Tensor h1 = add(b, skip);
  const Tensor m = apply_silu(call("mid", h1));
  return full_precision(m, linear("out_proj"));
}

Tensor sample_dataset(std::size_t n, Rng& rng) {
  Tensor x({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const auto mode = rng.below(8);
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(mode) / 8.0;
    x(i, 0) = 2.0 * std::cos(angle) + 0.15 * rng.normal();
    x(i, 1) = 2.0 * std::sin(angle) + 0.15 * rng.normal();
  }
  return x;
}

Trajectory sample(const ToyDenoiser& model, Tensor x_start, const SamplerConfig& config, Rng& rng,
                  LayerRunner* runner, const EpsHook& hook) {
  Trajectory traj;
  traj.timesteps = ddim_timesteps(model.schedule().t_max(), config.steps);
  traj.states.reserve(traj.timesteps.size() + 1);
  traj.states.push_back(std::move(x_start));
  std::vector<int> tags;
  for (std::size_t s = 0; s < traj.timesteps.size(); ++s) {
    const int t = traj.timesteps[s];
    const int t_prev = s + 1 < traj.timesteps.size() ? traj.timesteps[s + 1] : 0;
    const Tensor& x = traj.states.back();
    tags.assign(x.rows(), t);
    Tensor eps = model.predict_noise(x, tags, runner);
    if (hook) hook(s, t, eps);
    traj.states.push_back(ddim_step(model.schedule(), x, eps, t, t_prev, config.eta, &rng));
  }
  return traj;
}

namespace {

class CaptureRunner : public LayerRunner {
 public:
  CaptureRunner(LayerRunner* inner, CalibrationSet& out) : inner_(inner), out_(out) {}

  Tensor linear(const LayerCall& call) override {
    auto& parts = inputs_[std::string(call.name)];
    parts.push_back(call.input);
    auto& tags = out_.records[std::string(call.name)].timesteps;
    tags.insert(tags.end(), call.timesteps.begin(), call.timesteps.end());
    return inner_ ? inner_->linear(call) : LayerRunner::linear(call);
  }

  void finish() {
    for (auto& [name, parts] : inputs_) out_.records[name].activations = concat_rows(parts);
  }

 private:
  LayerRunner* inner_;
  CalibrationSet& out_;
  std::map<std::string, std::vector<Tensor>> inputs_;
};

}  // namespace

CalibrationSet collect_calibration(const ToyDenoiser& model, const CalibrationConfig& config, Rng& rng,
                                   LayerRunner* runner) {
  if (config.n == 0) throw InputError("collect_calibration: need at least one sample per step");
  CalibrationSet set;
  for (const auto& info : ToyDenoiser::quantizable_layers()) {
    set.layer_names.push_back(info.name);
    set.records[info.name].weight = model.linear(info.name).weight;
  }
  CaptureRunner capture(runner, set);
  Tensor x_start = rng.normal_tensor({config.n, model.data_dim()});
  const auto traj = sample(model, std::move(x_start), SamplerConfig{config.steps, config.eta}, rng, &capture);
  capture.finish();
  set.timesteps = traj.timesteps;
  return set;
}

}  // namespace dmq::toydiff
