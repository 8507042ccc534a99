#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "dmq/errors.hpp"
#include "dmq/pipeline.hpp"

using namespace dmq;
using namespace dmq::pipeline;

namespace {

const std::filesystem::path kSource(DMQ_SOURCE_DIR);

const toydiff::ToyDenoiser& bundled() {
  static const toydiff::ToyDenoiser m = toydiff::load_checkpoint(kSource / "data/toy_checkpoint.bin");
  return m;
}

Config small() {
  Config c;
  c.T = 5;
  c.n = 8;
  c.B = 16;
  c.iterations = 20;
  c.eval_samples = 32;
  c.seed = 3;
  c.checkpoint = kSource / "data/toy_checkpoint.bin";
  return c;
}

std::filesystem::path scratch() {
  auto d = std::filesystem::temp_directory_path() / "dmq_test_pipeline";
  std::filesystem::create_directories(d);
  return d;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

quant::QuantizedLayer as_quant_layer(const QuantizedModel& m, const ModelLayer& l) {
  return quant::make_quantized_layer(
      l.weight_codes, quant::QuantParams::per_channel(l.weight_scales, 1, m.bits_w),
      quant::QuantParams::per_tensor(l.act_scale, m.bits_a, m.act_signed), l.act_divisors, l.delta);
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = parse_config("# comment\nbits_w = 4\n  bits_a=6  # trailing\n\nkappa = 0.5\npts_layers = all\n"
                              "les = off\nbaseline = smoothquant\noptimizer = adam\ncheckpoint = ck.bin\n",
                              "/base");
  CHECK(c.bits_a == 6);
  CHECK(c.kappa == 0.5);
  CHECK(c.pts_layers == PtsLayers::All);
  CHECK_FALSE(c.les);
  CHECK(c.baseline == Baseline::SmoothQuant);
  CHECK(c.optimizer == les::Optimizer::Adam);
  CHECK(c.checkpoint == std::filesystem::path("/base/ck.bin"));

  CHECK_THROWS_AS(parse_config("colour = red\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("bits_w = four\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("bits_w 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("les = maybe\n"), ConfigError);
  CHECK_THROWS_AS(load_config(scratch() / "nope.cfg"), IoError);

  const Config d;
  CHECK(parse_config(format_config(d)).bits_w == d.bits_w);
  CHECK(format_config(parse_config(format_config(d))) == format_config(d));
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(validate(Config{}));
  auto bad = [](auto edit) {
    Config c;
    edit(c);
    return c;
  };
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.bits_w = 1; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.bits_a = 20; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.kappa = 0.0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.xi = 1.0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.alpha = -1.0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.T = 0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.lr = 0.0; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) { c.D = -1; })), ConfigError);
  CHECK_THROWS_AS(validate(bad([](Config& c) {
                    c.bits_w = 16;
                    c.D = 17;
                  })),
                  ConfigError);
  CHECK_NOTHROW(validate(bad([](Config& c) { c.bits_a = 32; })));
}

TEST_CASE("int4 packing is exhaustive and low nibble first") {
  std::vector<std::int64_t> codes;
  for (int a = -8; a <= 7; ++a)
    for (int b = -8; b <= 7; ++b) {
      codes.push_back(a);
      codes.push_back(b);
    }
  const auto packed = pack_int4(codes);
  REQUIRE(packed.size() == 256);
  CHECK(unpack_int4(packed, codes.size()) == codes);
  const std::vector<std::int64_t> pair{1, -1};
  CHECK(pack_int4(pair)[0] == 0xF1);
  const std::vector<std::int64_t> odd{-3, 5, 7};
  const auto p = pack_int4(odd);
  REQUIRE(p.size() == 2);
  CHECK((p[1] & 0xF0) == 0);
  CHECK(unpack_int4(p, 3) == odd);
}

TEST_CASE("model file round trip and corruption") {
  auto c = small();
  c.pts_layers = PtsLayers::All;
  const auto r = run_quantize(c, bundled());
  const auto bytes = export_model(r.model);
  CHECK(export_model(import_model(bytes)) == bytes);

  const auto dir = scratch();
  save_model(r.model, dir / "m.dmq");
  CHECK(export_model(load_model(dir / "m.dmq")) == bytes);
  CHECK_THROWS_AS(load_model(dir / "absent.dmq"), IoError);

  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(import_model(bad), FormatError);
  bad = bytes;
  bad[4] = 7;
  CHECK_THROWS_AS(import_model(bad), UnsupportedVersionError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(import_model(bad), FormatError);
  try {
    import_model(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3));
    FAIL("truncated model accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("layer 'mid'") != std::string::npos);
  }
  for (std::size_t cut = 0; cut < bytes.size(); cut += 97)
    CHECK_THROWS_AS(import_model(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + cut)), FormatError);
}

TEST_CASE("integer execution equals the quantized reference for every pipeline mode") {
  for (int mode = 0; mode < 3; ++mode) {
    auto c = small();
    c.les = mode != 1;
    c.pts_layers = mode == 0 ? PtsLayers::None : PtsLayers::All;
    const auto r = run_quantize(c, bundled());
    QuantizedRunner runner(r.model);
    Rng rng(40 + mode);
    for (const auto& l : r.model.layers) {
      const Tensor x = scale(rng.normal_tensor({9, l.in_channels}), 3.0);
      CHECK(runner.matmul(l.name, x) == quant::quantized_matmul_reference(x, as_quant_layer(r.model, l)));
    }
  }
}

TEST_CASE("baseline per-layer error matches a direct computation") {
  auto c = small();
  c.les = false;
  c.pts_layers = PtsLayers::None;
  const auto& m = bundled();
  const auto r = run_quantize(c, m);

  // Scales straight from the calibration data and the weights.
  Rng calib = Rng::derive(c.seed, 1);
  const auto set = toydiff::collect_calibration(m, {c.T, c.n, c.eta}, calib);
  std::map<std::string, quant::QuantizedLayer> layers;
  for (const auto& name : set.layer_names) {
    const auto& w = m.linear(name).weight;
    const double sx = max_abs(set.records.at(name).activations) / 127.0;
    const auto pw = quant::minmax_scale(w, 4, true, quant::Granularity::PerChannel, 1);
    layers.emplace(name, quant::make_quantized_layer(quant::quantize(w, pw), pw, quant::QuantParams::per_tensor(sx, 8),
                                                     std::vector<double>(w.rows(), sx), std::vector<int>(w.rows(), 0)));
    CHECK(r.model.layer(name).act_scale == sx);
  }

  // Full-precision trajectory, measuring every layer on its own input.
  struct Measure : toydiff::LayerRunner {
    std::map<std::string, quant::QuantizedLayer>* layers;
    std::map<std::pair<std::string, int>, std::pair<double, double>> sums;
    Tensor linear(const toydiff::LayerCall& call) override {
      const Tensor fp = dmq::matmul(call.input, call.params.weight);
      const Tensor q = quant::quantized_matmul_reference(call.input, layers->at(std::string(call.name)));
      auto& s = sums[{std::string(call.name), call.timesteps[0]}];
      for (std::size_t i = 0; i < fp.size(); ++i) s.first += (fp.data()[i] - q.data()[i]) * (fp.data()[i] - q.data()[i]);
      s.second += static_cast<double>(fp.size());
      return LayerRunner::linear(call);
    }
  } measure;
  measure.layers = &layers;
  Rng noise = Rng::derive(c.seed, 2);
  Rng sampler = Rng::derive(c.seed, 3);
  toydiff::sample(m, noise.normal_tensor({c.eval_samples, 2}), {c.T, c.eta}, sampler, &measure);

  REQUIRE(r.report.layer_errors.size() == 4 * static_cast<std::size_t>(c.T));
  for (const auto& e : r.report.layer_errors) {
    const auto& s = measure.sums.at({e.layer, e.timestep});
    CHECK(e.mse == doctest::Approx(s.first / s.second).epsilon(1e-12));
  }
}

TEST_CASE("passthrough widths reproduce full precision") {
  auto c = small();
  c.bits_w = 32;
  c.bits_a = 32;
  const auto r = run_quantize(c, bundled());
  CHECK(r.report.endpoint_mse <= 1e-9);
  for (const auto& e : r.report.layer_errors) CHECK(e.mse <= 1e-9);
  CHECK(export_model(import_model(export_model(r.model))) == export_model(r.model));

  // Only activations pass through: weights still quantized, so the run differs.
  c.bits_w = 4;
  const auto half = run_quantize(c, bundled());
  CHECK(half.report.endpoint_mse > 0.0);
  CHECK(std::isfinite(half.report.endpoint_mse));
}

TEST_CASE("quantize is deterministic") {
  const auto c = small();
  const auto a = run_quantize(c, bundled());
  const auto b = run_quantize(c, bundled());
  CHECK(export_model(a.model) == export_model(b.model));
  CHECK(format_report(a.report) == format_report(b.report));
  CHECK(layer_errors_tsv(a.report) == layer_errors_tsv(b.report));
  auto other = c;
  other.seed = 4;
  CHECK(export_model(run_quantize(other, bundled()).model) != export_model(a.model));
}

TEST_CASE("report layout") {
  const auto r = run_quantize(small(), bundled());
  CHECK(r.report.layers.size() == 4);
  CHECK(r.report.layers[2].skip_connection);
  CHECK(r.report.layers[2].pts);
  CHECK_FALSE(r.report.layers[0].pts);
  CHECK(r.report.layers[0].tau_source == "les");
  const auto tsv = layer_errors_tsv(r.report);
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 1 + 4 * 5);
  const auto dir = scratch();
  write_report(r.report, dir / "rep.txt");
  CHECK(slurp(dir / "rep.txt") == format_report(r.report));
  CHECK(slurp(dir / "rep.layer_errors.tsv") == tsv);
  CHECK(slurp(dir / "rep.layers.tsv") == layer_summary_tsv(r.report));
  CHECK(format_report(r.report).find("endpoint_mse") != std::string::npos);
}

TEST_CASE("eval of a saved model matches the quantize report") {
  const auto c = small();
  const auto r = run_quantize(c, bundled());
  const auto dir = scratch();
  save_model(r.model, dir / "e.dmq");
  const auto e = run_eval(load_model(dir / "e.dmq"), c);
  CHECK(e.endpoint_mse == r.report.endpoint_mse);
  CHECK(layer_errors_tsv(e) == layer_errors_tsv(r.report));

  auto wrong = r.model;
  wrong.layers.pop_back();
  CHECK_THROWS_AS(run_eval(wrong, c, bundled()), InputError);
}

TEST_CASE("alternative modes produce valid models") {
  auto c = small();
  c.baseline = Baseline::SmoothQuant;
  const auto sq = run_quantize(c, bundled());
  CHECK(sq.report.layers[0].tau_source == "smoothquant");
  CHECK(std::isfinite(sq.report.endpoint_mse));

  c = small();
  c.propagate_quantized_inputs = true;
  const auto pr = run_quantize(c, bundled());
  CHECK(std::isfinite(pr.report.endpoint_mse));
  CHECK(export_model(import_model(export_model(pr.model))) == export_model(pr.model));
  // The first layer sees identical inputs either way.
  CHECK(pr.model.layers[0].act_scale == run_quantize(small(), bundled()).model.layers[0].act_scale);

  c = small();
  c.act_signed = false;
  const auto un = run_quantize(c, bundled());
  CHECK(std::isfinite(un.report.endpoint_mse));
}

TEST_CASE("calibration statistics") {
  Rng rng(Rng::derive(0, 1));
  const auto stats = calibration_stats(toydiff::collect_calibration(bundled(), {5, 8, 0.0}, rng));
  REQUIRE(stats.size() == 4);
  CHECK(stats[2].layer == "res.skip");
  CHECK(stats[2].rows == 40);
  CHECK(stats[2].max_median_ratio > 10.0);
}
