// Command-line front end: fit the toy model, calibrate, quantize, evaluate and
// inspect quantized model files.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dmq/errors.hpp"
#include "dmq/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dmq;
using namespace dmq::pipeline;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNumerical = 4 };

struct Overrides {
  std::string les;
  std::string pts;
  std::string baseline;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

Config resolve_config(const std::string& path, const Overrides& o) {
  Config c = path.empty() ? Config{} : load_config(path);
  if (o.seed_given) c.seed = o.seed;
  if (!o.les.empty()) set_config_value(c, "les", o.les);
  if (!o.pts.empty()) set_config_value(c, "pts_layers", o.pts);
  if (!o.baseline.empty()) {
    set_config_value(c, "baseline", o.baseline);
    // The closed-form baseline replaces the learned scaling.
    if (c.baseline == Baseline::SmoothQuant && o.les.empty()) c.les = false;
  }
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  validate(c);
  return c;
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--les", o.les, "Learned equivalent scaling")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--pts", o.pts, "Layers that get power-of-two scaling")
      ->check(CLI::IsMember({"skip_only", "all", "none"}));
  cmd->add_option("--baseline", o.baseline, "Baseline scaling")->check(CLI::IsMember({"none", "smoothquant"}));
  cmd->add_option("--set", o.sets, "Override a config key (key=value), repeatable");
  cmd->add_option("--seed", o.seed, "Seed for every stochastic stage")->each([&o](const std::string&) {
    o.seed_given = true;
  });
}

void print_summary(const EvalReport& r) {
  std::printf("endpoint_mse = %.9e\n", r.endpoint_mse);
  for (const auto& l : r.layers)
    std::printf("  %-9s tau[%s] geomean %.4g, pts %s\n", l.name.c_str(), l.tau_source.c_str(), l.tau_geomean,
                l.pts ? "on" : "off");
}

std::string golden_text(const Config& base) {
  struct Variant {
    const char* label;
    bool les;
    PtsLayers pts;
  };
  const Variant variants[] = {{"minmax", false, PtsLayers::None},
                              {"les", true, PtsLayers::None},
                              {"les+pts", true, PtsLayers::SkipOnly}};
  const auto model = load_checkpoint_for(base);
  std::ostringstream os;
  os << "# Endpoint trajectory MSE against full precision, shared initial noise.\n";
  os << "# Regenerate with: dmq golden --config configs/w4a8.cfg --out golden/w4a8.txt\n\n";
  os << "[base config]\n" << format_config(base) << '\n';
  double mse[3];
  for (int i = 0; i < 3; ++i) {
    Config c = base;
    c.les = variants[i].les;
    c.pts_layers = variants[i].pts;
    c.baseline = Baseline::None;
    std::fprintf(stderr, "golden: running %s\n", variants[i].label);
    const auto result = run_quantize(c, model);
    mse[i] = result.report.endpoint_mse;
    char line[96];
    std::snprintf(line, sizeof line, "%-8s endpoint_mse = %.9e\n", variants[i].label, mse[i]);
    os << line;
  }
  os << "\nles+pts < minmax: " << (mse[2] < mse[0] ? "yes" : "no") << '\n';
  os << "les+pts <= les: " << (mse[2] <= mse[1] ? "yes" : "no") << '\n';
  os << "les <= minmax: " << (mse[1] <= mse[0] ? "yes" : "no") << '\n';
  return os.str();
}

void write_string(const fs::path& path, const std::string& s) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-training quantization for a toy diffusion model"};
  app.require_subcommand(1);

  // fit
  toydiff::FitOptions fit_opt;
  std::string fit_out = "data/toy_checkpoint.bin";
  auto* fit = app.add_subcommand("fit", "Train the toy denoiser and write a checkpoint");
  fit->add_option("--out", fit_out, "Checkpoint path");
  fit->add_option("--steps", fit_opt.steps, "Training steps");
  fit->add_option("--hidden", fit_opt.hidden, "Hidden width");
  fit->add_option("--seed", fit_opt.seed, "Training seed");

  // calibrate
  std::string cal_config;
  Overrides cal_o;
  auto* cal = app.add_subcommand("calibrate", "Collect calibration activations and print channel statistics");
  cal->add_option("--config", cal_config, "Config file");
  add_overrides(cal, cal_o);

  // quantize
  std::string q_config, q_out, q_report;
  Overrides q_o;
  auto* quant = app.add_subcommand("quantize", "Quantize the checkpoint and export a model file");
  quant->add_option("--config", q_config, "Config file");
  quant->add_option("--out", q_out, "Model file to write")->required();
  quant->add_option("--report", q_report, "Report path (text; TSV tables are written beside it)");
  add_overrides(quant, q_o);

  // eval
  std::string e_model, e_config, e_report;
  Overrides e_o;
  auto* eval = app.add_subcommand("eval", "Evaluate a model file against full precision");
  eval->add_option("--model", e_model, "Model file")->required();
  eval->add_option("--config", e_config, "Config file");
  eval->add_option("--report", e_report, "Report path");
  add_overrides(eval, e_o);

  // export-inspect
  std::string i_model;
  auto* inspect = app.add_subcommand("export-inspect", "Print the header and layer records of a model file");
  inspect->add_option("--model", i_model, "Model file")->required();

  // golden
  std::string g_config, g_out = "golden/w4a8.txt";
  Overrides g_o;
  auto* golden = app.add_subcommand("golden", "Run the MinMax, LES and LES+PTS comparison and write the golden report");
  golden->add_option("--config", g_config, "Config file");
  golden->add_option("--out", g_out, "Golden report path");
  add_overrides(golden, g_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*fit) {
      fit_opt.progress = [](int step, double loss) {
        if (step % 500 == 0) std::fprintf(stderr, "step %d loss %.5f\n", step, loss);
      };
      const auto model = toydiff::fit_denoiser(fit_opt);
      if (fs::path(fit_out).has_parent_path()) fs::create_directories(fs::path(fit_out).parent_path());
      toydiff::save_checkpoint(model, fit_out);
      std::printf("wrote %s (%zu parameters)\n", fit_out.c_str(), model.parameter_count());
    } else if (*cal) {
      const Config c = resolve_config(cal_config, cal_o);
      const auto model = load_checkpoint_for(c);
      Rng rng = Rng::derive(c.seed, 1);
      const auto set = toydiff::collect_calibration(model, {c.T, c.n, c.eta}, rng);
      std::printf("layer\trows\tchannel_max\tchannel_median\tmax_median_ratio\n");
      for (const auto& s : calibration_stats(set))
        std::printf("%s\t%zu\t%.6g\t%.6g\t%.6g\n", s.layer.c_str(), s.rows, s.channel_max, s.channel_median,
                    s.max_median_ratio);
    } else if (*quant) {
      const Config c = resolve_config(q_config, q_o);
      const auto result = run_quantize(c);
      save_model(result.model, q_out);
      if (!q_report.empty()) write_report(result.report, q_report);
      std::printf("wrote %s\n", q_out.c_str());
      print_summary(result.report);
    } else if (*eval) {
      const Config c = resolve_config(e_config, e_o);
      const auto model = load_model(e_model);
      const auto report = run_eval(model, c);
      if (!e_report.empty()) write_report(report, e_report);
      print_summary(report);
    } else if (*inspect) {
      const auto m = load_model(i_model);
      std::printf("bits_w %d  bits_a %d  act_signed %s  layers %zu\n", m.bits_w, m.bits_a,
                  m.act_signed ? "true" : "false", m.layers.size());
      for (const auto& l : m.layers) {
        int nz = 0;
        for (int d : l.delta) nz += d != 0;
        std::printf("  %-9s %zux%zu  s_x %.6g  divisors [%.4g, %.4g]  delta nonzero %d\n", l.name.c_str(),
                    l.in_channels, l.out_channels, l.act_scale,
                    *std::min_element(l.act_divisors.begin(), l.act_divisors.end()),
                    *std::max_element(l.act_divisors.begin(), l.act_divisors.end()), nz);
      }
    } else if (*golden) {
      const Config c = resolve_config(g_config, g_o);
      const auto text = golden_text(c);
      write_string(g_out, text);
      std::fputs(text.c_str(), stdout);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kNumerical;
  } catch (const OverflowError& e) {
    std::fprintf(stderr, "overflow: %s\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kOk;
}
