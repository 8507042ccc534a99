#include <cstdio>
#include <fstream>
#include <sstream>

#include "dmq/errors.hpp"
#include "dmq/pipeline.hpp"

namespace dmq::pipeline {

namespace {

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9e", v);
  return buf;
}

std::string histogram(const std::vector<int>& h) {
  std::string s;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(h[i]);
  }
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

}  // namespace

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "# dmq evaluation report\n\n[config]\n" << r.config_echo << "\n[trajectory]\n";
  os << "eval_samples = " << r.eval_samples << '\n';
  os << "endpoint_mse = " << sci(r.endpoint_mse) << "\n\n[layers]\n";
  for (const auto& l : r.layers) {
    os << l.name << (l.skip_connection ? " (skip_connection)" : "") << '\n';
    os << "  tau_source = " << l.tau_source << '\n';
    os << "  tau min/geomean/max = " << sci(l.tau_min) << " " << sci(l.tau_geomean) << " " << sci(l.tau_max) << '\n';
    os << "  act_scale = " << sci(l.act_scale) << '\n';
    os << "  pts = " << (l.pts ? "on" : "off") << ", delta histogram = " << histogram(l.delta_histogram) << '\n';
    if (l.tau_source == "les")
      os << "  les loss initial/final = " << sci(l.les_initial_loss) << " " << sci(l.les_final_loss) << '\n';
  }
  os << "\n[layer error, mean over timesteps]\n";
  for (const auto& l : r.layers) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& e : r.layer_errors)
      if (e.layer == l.name) {
        sum += e.mse;
        ++n;
      }
    os << l.name << " = " << sci(n ? sum / static_cast<double>(n) : 0.0) << '\n';
  }
  const auto& s = r.sensitivity;
  os << "\n[perturbation sensitivity]\n";
  os << "perturbation_std = " << sci(s.perturbation) << '\n';
  os << "early step " << s.early_step << " endpoint deviation = " << sci(s.early_deviation) << '\n';
  os << "late step " << s.late_step << " endpoint deviation = " << sci(s.late_deviation) << '\n';
  return os.str();
}

std::string layer_errors_tsv(const EvalReport& r) {
  std::ostringstream os;
  os << "layer\ttimestep\tmse\n";
  for (const auto& e : r.layer_errors) os << e.layer << '\t' << e.timestep << '\t' << sci(e.mse) << '\n';
  return os.str();
}

std::string layer_summary_tsv(const EvalReport& r) {
  std::ostringstream os;
  os << "layer\tskip_connection\ttau_source\ttau_min\ttau_geomean\ttau_max\tact_scale\tpts\tdelta_histogram\t"
        "les_initial_loss\tles_final_loss\n";
  for (const auto& l : r.layers)
    os << l.name << '\t' << (l.skip_connection ? 1 : 0) << '\t' << l.tau_source << '\t' << sci(l.tau_min) << '\t'
       << sci(l.tau_geomean) << '\t' << sci(l.tau_max) << '\t' << sci(l.act_scale) << '\t' << (l.pts ? 1 : 0) << '\t'
       << histogram(l.delta_histogram) << '\t' << sci(l.les_initial_loss) << '\t' << sci(l.les_final_loss) << '\n';
  return os.str();
}

void write_report(const EvalReport& r, const std::filesystem::path& path) {
  auto sibling = [&](const std::string& suffix) {
    auto p = path;
    p.replace_extension();
    return p.string() + suffix;
  };
  write_text(path, format_report(r));
  write_text(sibling(".layer_errors.tsv"), layer_errors_tsv(r));
  write_text(sibling(".layers.tsv"), layer_summary_tsv(r));
}

}  // namespace dmq::pipeline
