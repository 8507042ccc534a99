#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dmq/errors.hpp"
#include "dmq/toydiff.hpp"

using namespace dmq;
using namespace dmq::toydiff;

namespace {

const std::filesystem::path kCheckpoint = std::filesystem::path(DMQ_SOURCE_DIR) / "data/toy_checkpoint.bin";

const ToyDenoiser& bundled() {
  static const ToyDenoiser m = load_checkpoint(kCheckpoint);
  return m;
}

double variance(const Tensor& x) {
  double s = 0, ss = 0;
  for (double v : x.data()) {
    s += v;
    ss += v * v;
  }
  const double n = static_cast<double>(x.size());
  return ss / n - (s / n) * (s / n);
}

FitOptions tiny_fit() {
  FitOptions o;
  o.hidden = 16;
  o.steps = 40;
  o.batch = 64;
  o.seed = 11;
  return o;
}

}  // namespace

TEST_CASE("schedule") {
  const auto s = NoiseSchedule::linear(1000);
  CHECK(s.alpha_bar(0) == 1.0);
  for (int t = 1; t <= 1000; ++t) {
    CHECK((s.beta(t) > 0.0 && s.beta(t) < 1.0));
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    const double a = std::sqrt(s.alpha_bar(t));
    CHECK(a * a + (1 - s.alpha_bar(t)) == doctest::Approx(1.0).epsilon(1e-15));
  }
  CHECK_THROWS_AS(s.alpha_bar(1001), DomainError);
  CHECK_THROWS_AS(s.beta(0), DomainError);
}

TEST_CASE("forward noise") {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(1);
  const Tensor x0 = sample_dataset(64, rng);
  Rng a(5), b(5), c(5);
  CHECK(forward_noise(s, x0, 0, c) == x0);
  CHECK(forward_noise(s, x0, 300, a) == forward_noise(s, x0, 300, b));
  CHECK_THROWS_AS(forward_noise(s, x0, -1, a), DomainError);
  CHECK_THROWS_AS(forward_noise(s, x0, 1001, a), DomainError);
}

TEST_CASE("forward noise marginal variance") {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(2);
  const Tensor x0 = sample_dataset(10000, rng);
  const double v0 = variance(x0);
  for (int t : {50, 400, 900}) {
    Rng r(t);
    const double expect = s.alpha_bar(t) * v0 + (1 - s.alpha_bar(t));
    CHECK(std::abs(variance(forward_noise(s, x0, t, r)) - expect) <= 0.05 * expect);
  }
}

TEST_CASE("ddim step") {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(3);
  const Tensor x0 = sample_dataset(16, rng);
  const Tensor eps = rng.normal_tensor({16, 2});
  const Tensor xt = forward_noise(s, x0, 500, eps);
  const Tensor back = ddim_step(s, xt, eps, 500, 0, 0.0);
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(back.data()[i] == doctest::Approx(x0.data()[i]).epsilon(1e-12));
  CHECK(ddim_step(s, xt, eps, 500, 250, 0.0) == ddim_step(s, xt, eps, 500, 250, 0.0));
  CHECK_THROWS_AS(ddim_step(s, xt, eps, 250, 250, 0.0), DomainError);
  CHECK_THROWS_AS(ddim_step(s, xt, eps, 500, 250, 1.5), DomainError);
  Rng n1(4), n2(4);
  CHECK(ddim_step(s, xt, eps, 500, 250, 1.0, &n1) == ddim_step(s, xt, eps, 500, 250, 1.0, &n2));
}

TEST_CASE("ddim timesteps") {
  const auto ts = ddim_timesteps(1000, 20);
  REQUIRE(ts.size() == 20);
  CHECK(ts.front() == 951);
  CHECK(ts.back() == 1);
  CHECK_THROWS_AS(ddim_timesteps(10, 11), DomainError);
}

TEST_CASE("short schedule tracks the dense one") {
  const auto& m = bundled();
  Rng noise(9);
  const Tensor x_start = noise.normal_tensor({256, 2});
  Rng r(0);
  const auto coarse = sample(m, x_start, {20, 0.0}, r);
  const auto dense = sample(m, x_start, {1000, 0.0}, r);
  CHECK(coarse.states.size() == 21);
  CHECK(dense.states.size() == 1001);
  const double mse = mean_squared_difference(coarse.states.back(), dense.states.back());
  MESSAGE("20-step vs 1000-step endpoint MSE: " << mse);
  CHECK(mse <= 0.02);
}

TEST_CASE("sampling is deterministic at eta = 0") {
  const auto& m = bundled();
  Rng noise(10);
  const Tensor x_start = noise.normal_tensor({32, 2});
  Rng a(1), b(2);
  CHECK(sample(m, x_start, {20, 0.0}, a).states.back() == sample(m, x_start, {20, 0.0}, b).states.back());
}

TEST_CASE("calibration capture") {
  const auto& m = bundled();
  Rng rng(4);
  const auto set = collect_calibration(m, {20, 16, 0.0}, rng);
  CHECK(set.layer_names == std::vector<std::string>{"res.fc1", "res.fc2", "res.skip", "mid"});
  CHECK(set.timesteps == ddim_timesteps(1000, 20));
  for (const auto& name : set.layer_names) {
    const auto& r = set.records.at(name);
    CHECK(r.activations.rows() == 320);
    CHECK(r.timesteps.size() == 320);
    CHECK(r.weight == m.linear(name).weight);
    // Rows are captured step by step: block s holds the 16 rows of timestep s.
    for (std::size_t i = 0; i < 320; ++i) CHECK(r.timesteps[i] == set.timesteps[i / 16]);
  }
  // Captured input of res.skip at the first step equals h0 recomputed here.
  Rng again(4);
  const Tensor x_start = again.normal_tensor({16, 2});
  struct Grab : LayerRunner {
    Tensor h0;
    Tensor linear(const LayerCall& c) override {
      if (c.name == "res.skip" && h0.empty()) h0 = c.input;
      return LayerRunner::linear(c);
    }
  } grab;
  const std::vector<int> t(16, set.timesteps[0]);
  m.predict_noise(x_start, t, &grab);
  const auto& skip = set.records.at("res.skip").activations;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t c = 0; c < skip.cols(); ++c) CHECK(skip(i, c) == grab.h0(i, c));
}

TEST_CASE("bundled checkpoint has skip outliers") {
  const auto& m = bundled();
  CHECK(m.parameter_count() <= 100000);
  const auto gains = m.outlier_gain();
  int boosted = 0;
  for (double g : gains) boosted += g > 1.0;
  CHECK(boosted == 3);

  Rng rng(Rng::derive(0, 1));
  const auto set = collect_calibration(m, {20, 64, 0.0}, rng);
  auto mx = column_max_abs(set.records.at("res.skip").activations);
  std::sort(mx.begin(), mx.end());
  const double median = mx.size() % 2 ? mx[mx.size() / 2] : 0.5 * (mx[mx.size() / 2 - 1] + mx[mx.size() / 2]);
  MESSAGE("skip max/median channel ratio: " << mx.back() / median);
  CHECK(mx.back() / median > 10.0);
}

TEST_CASE("outlier gains preserve the network function") {
  auto plain = tiny_fit();
  plain.outlier_gains.clear();
  const auto a = fit_denoiser(plain);
  const auto b = fit_denoiser(tiny_fit());
  CHECK(a.tensor("in_proj.weight") != b.tensor("in_proj.weight"));
  Rng rng(6);
  const Tensor x = rng.normal_tensor({64, 2});
  for (int t : {1, 300, 999}) {
    const std::vector<int> ts(64, t);
    CHECK(a.predict_noise(x, ts) == b.predict_noise(x, ts));
  }
  auto odd = tiny_fit();
  odd.outlier_gains = {3.0};
  CHECK_THROWS_AS(fit_denoiser(odd), DomainError);
}

TEST_CASE("checkpoint round trip") {
  const auto& m = bundled();
  const auto bytes = encode_checkpoint(m);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.tensors() == m.tensors());
  CHECK(encode_checkpoint(back) == bytes);

  const auto dir = std::filesystem::temp_directory_path() / "dmq_test_toydiff";
  std::filesystem::create_directories(dir);
  save_checkpoint(m, dir / "c.bin");
  CHECK(load_checkpoint(dir / "c.bin").tensors() == m.tensors());
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), IoError);
}

TEST_CASE("checkpoint corruption") {
  const auto bytes = encode_checkpoint(bundled());
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad), UnsupportedVersionError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_checkpoint(t), FormatError);
  }
  try {
    decode_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 4));
    FAIL("truncated checkpoint accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 0);
  }
}
