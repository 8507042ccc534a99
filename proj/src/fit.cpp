#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dmq/errors.hpp"
#include "dmq/toydiff.hpp"

namespace dmq::toydiff {

namespace {

double sigmoid(double v) {
  return 1.0 / (1.0 + std::exp(-v));
}

struct Param {
  std::string name;
  Tensor value;
  Tensor m;
  Tensor v;
};

std::vector<double> column_sums(const Tensor& x) {
  std::vector<double> s(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) s[j] += x(i, j);
  return s;
}

Tensor he_normal(Rng& rng, std::size_t fan_in, std::size_t fan_out, double gain = 1.0) {
  Tensor w = rng.normal_tensor({fan_in, fan_out});
  const double k = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : w.data()) v *= k;
  return w;
}

// Values as they will be stored in a checkpoint.
Tensor to_f32(Tensor t) {
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

}  // namespace

ToyDenoiser fit_denoiser(const FitOptions& opt) {
  if (opt.hidden < 2 || opt.steps < 0 || opt.batch == 0 || opt.t_max < 1)
    throw InputError("fit_denoiser: invalid options");
  const std::size_t H = opt.hidden;
  const std::size_t D = 2;
  Rng init = Rng::derive(opt.seed, 1);
  Rng data = Rng::derive(opt.seed, 2);
  const auto schedule = NoiseSchedule::linear(opt.t_max);

  std::map<std::string, Tensor> p;
  p["in_proj.weight"] = he_normal(init, D, H);
  p["temb.weight"] = he_normal(init, H, H, 0.5);
  p["res.fc1.weight"] = he_normal(init, H, H);
  p["res.fc2.weight"] = he_normal(init, H, H, 0.5);
  p["res.skip.weight"] = he_normal(init, H, H, 0.5);
  p["mid.weight"] = he_normal(init, H, H);
  p["out_proj.weight"] = he_normal(init, H, D, 0.1);
  for (const char* l : {"in_proj", "temb", "res.fc1", "res.fc2", "res.skip", "mid", "out_proj"})
    p[std::string(l) + ".bias"] = Tensor({p[std::string(l) + ".weight"].cols()});
  p["norm.scale"] = Tensor::vector(std::vector<double>(H, 1.0));
  p["norm.shift"] = Tensor({H});

  std::map<std::string, Tensor> m1, m2;
  for (const auto& [k, v] : p) {
    m1[k] = Tensor(v.shape());
    m2[k] = Tensor(v.shape());
  }
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  const std::size_t B = opt.batch;
  std::vector<int> ts(B);
  for (int step = 1; step <= opt.steps; ++step) {
    const Tensor x0 = sample_dataset(B, data);
    const Tensor eps = data.normal_tensor({B, D});
    Tensor xt({B, D});
    for (std::size_t i = 0; i < B; ++i) {
      ts[i] = static_cast<int>(data.below(static_cast<std::uint64_t>(opt.t_max))) + 1;
      const double ab = schedule.alpha_bar(ts[i]);
      for (std::size_t d = 0; d < D; ++d) xt(i, d) = std::sqrt(ab) * x0(i, d) + std::sqrt(1.0 - ab) * eps(i, d);
    }

    // Forward.
    const Tensor emb = timestep_embedding(ts, H);
    const Tensor z0 = add(add_row_vector(matmul(xt, p["in_proj.weight"]), p["in_proj.bias"].data()),
                          add_row_vector(matmul(emb, p["temb.weight"]), p["temb.bias"].data()));
    Tensor h0 = z0;
    for (double& v : h0.data()) v = std::max(v, 0.0);
    const Tensor n = add_row_vector(mul_row_vector(h0, p["norm.scale"].data()), p["norm.shift"].data());
    const Tensor z1 = add_row_vector(matmul(n, p["res.fc1.weight"]), p["res.fc1.bias"].data());
    Tensor a = z1;
    for (double& v : a.data()) v *= sigmoid(v);
    const Tensor h1 = add(add_row_vector(matmul(a, p["res.fc2.weight"]), p["res.fc2.bias"].data()),
                          add_row_vector(matmul(h0, p["res.skip.weight"]), p["res.skip.bias"].data()));
    const Tensor z3 = add_row_vector(matmul(h1, p["mid.weight"]), p["mid.bias"].data());
    Tensor mm = z3;
    for (double& v : mm.data()) v *= sigmoid(v);
    const Tensor out = add_row_vector(matmul(mm, p["out_proj.weight"]), p["out_proj.bias"].data());

    Tensor dout = sub(out, eps);
    const double loss = sum_squares(dout) / static_cast<double>(B * D);
    if (!std::isfinite(loss)) throw NumericalError("fit_denoiser: loss diverged at step " + std::to_string(step));
    dout = scale(dout, 2.0 / static_cast<double>(B * D));

    // Backward.
    std::map<std::string, Tensor> g;
    auto silu_back = [](const Tensor& upstream, const Tensor& z) {
      Tensor d = upstream;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double s = sigmoid(z[i]);
        d[i] *= s * (1.0 + z[i] * (1.0 - s));
      }
      return d;
    };
    g["out_proj.weight"] = matmul(transpose(mm), dout);
    g["out_proj.bias"] = Tensor::vector(column_sums(dout));
    const Tensor dz3 = silu_back(matmul(dout, transpose(p["out_proj.weight"])), z3);
    g["mid.weight"] = matmul(transpose(h1), dz3);
    g["mid.bias"] = Tensor::vector(column_sums(dz3));
    const Tensor dh1 = matmul(dz3, transpose(p["mid.weight"]));
    g["res.fc2.weight"] = matmul(transpose(a), dh1);
    g["res.fc2.bias"] = Tensor::vector(column_sums(dh1));
    g["res.skip.weight"] = matmul(transpose(h0), dh1);
    g["res.skip.bias"] = Tensor::vector(column_sums(dh1));
    const Tensor dz1 = silu_back(matmul(dh1, transpose(p["res.fc2.weight"])), z1);
    g["res.fc1.weight"] = matmul(transpose(n), dz1);
    g["res.fc1.bias"] = Tensor::vector(column_sums(dz1));
    const Tensor dn = matmul(dz1, transpose(p["res.fc1.weight"]));
    g["norm.scale"] = Tensor::vector(column_sums(hadamard(dn, h0)));
    g["norm.shift"] = Tensor::vector(column_sums(dn));
    Tensor dz0 = add(mul_row_vector(dn, p["norm.scale"].data()), matmul(dh1, transpose(p["res.skip.weight"])));
    for (std::size_t i = 0; i < dz0.size(); ++i)
      if (z0[i] <= 0.0) dz0[i] = 0.0;
    g["in_proj.weight"] = matmul(transpose(xt), dz0);
    g["in_proj.bias"] = Tensor::vector(column_sums(dz0));
    g["temb.weight"] = matmul(transpose(emb), dz0);
    g["temb.bias"] = Tensor::vector(column_sums(dz0));

    // Adam with a cosine decay to a tenth of the base rate.
    const double progress = static_cast<double>(step - 1) / std::max(1, opt.steps - 1);
    const double lr = opt.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress)));
    const double c1 = 1.0 - std::pow(beta1, step);
    const double c2 = 1.0 - std::pow(beta2, step);
    for (auto& [k, w] : p) {
      auto gd = g.at(k).data();
      auto md = m1[k].data();
      auto vd = m2[k].data();
      auto wd = w.data();
      for (std::size_t i = 0; i < wd.size(); ++i) {
        md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
        wd[i] -= lr * (md[i] / c1) / (std::sqrt(vd[i] / c2) + adam_eps);
      }
    }
    if (opt.progress) opt.progress(step, loss);
  }

  for (auto& [k, w] : p) w = to_f32(std::move(w));

  // Pick the channels of h0 with the largest mean magnitude on fresh inputs.
  std::vector<double> gain(H, 1.0);
  if (!opt.outlier_gains.empty()) {
    for (double gval : opt.outlier_gains) {
      int e = 0;
      if (!(gval > 0.0) || std::frexp(gval, &e) != 0.5)
        throw DomainError("fit_denoiser: outlier gains must be positive powers of two");
    }
    if (opt.outlier_gains.size() > H) throw InputError("fit_denoiser: more outlier gains than channels");
    Rng probe = Rng::derive(opt.seed, 3);
    const std::size_t n = 1024;
    const Tensor x0 = sample_dataset(n, probe);
    Tensor xt({n, D});
    ts.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      ts[i] = static_cast<int>(probe.below(static_cast<std::uint64_t>(opt.t_max))) + 1;
      const double ab = schedule.alpha_bar(ts[i]);
      for (std::size_t d = 0; d < D; ++d) xt(i, d) = std::sqrt(ab) * x0(i, d) + std::sqrt(1.0 - ab) * probe.normal();
    }
    const Tensor emb = timestep_embedding(ts, H);
    Tensor h0 = add(add_row_vector(matmul(xt, p["in_proj.weight"]), p["in_proj.bias"].data()),
                    add_row_vector(matmul(emb, p["temb.weight"]), p["temb.bias"].data()));
    std::vector<double> activity(H, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < H; ++c) activity[c] += std::max(h0(i, c), 0.0);
    std::vector<std::size_t> order(H);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return activity[l] > activity[r]; });
    for (std::size_t k = 0; k < opt.outlier_gains.size(); ++k) gain[order[k]] = opt.outlier_gains[k];

    // relu is positively homogeneous, so scaling the pre-activation scales h0;
    // the consumers of h0 undo it. Powers of two keep this exact.
    for (std::size_t c = 0; c < H; ++c) {
      const double gc = gain[c];
      if (gc == 1.0) continue;
      for (std::size_t r = 0; r < D; ++r) p["in_proj.weight"](r, c) *= gc;
      for (std::size_t r = 0; r < H; ++r) p["temb.weight"](r, c) *= gc;
      p["in_proj.bias"][c] *= gc;
      p["temb.bias"][c] *= gc;
      p["norm.scale"][c] /= gc;
      for (std::size_t j = 0; j < H; ++j) p["res.skip.weight"](c, j) /= gc;
    }
  }
  p["meta.outlier_gain"] = Tensor::vector(gain);
  p["meta.schedule"] = Tensor::vector({static_cast<double>(opt.t_max), schedule.beta_start(), schedule.beta_end()});
  p["meta.schedule"] = to_f32(p["meta.schedule"]);
  return ToyDenoiser(std::move(p));
}

}  // namespace dmq::toydiff
