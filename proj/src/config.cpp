#include <charconv>
#include <fstream>
#include <sstream>

#include "dmq/errors.hpp"
#include "dmq/pipeline.hpp"

namespace dmq::pipeline {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string to_string(PtsLayers v) {
  switch (v) {
    case PtsLayers::SkipOnly: return "skip_only";
    case PtsLayers::All: return "all";
    case PtsLayers::None: return "none";
  }
  return "?";
}

std::string to_string(Baseline v) {
  return v == Baseline::SmoothQuant ? "smoothquant" : "none";
}

void set_config_value(Config& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "bits_w") c.bits_w = parse_number<int>(key, v);
  else if (key == "bits_a") c.bits_a = parse_number<int>(key, v);
  else if (key == "act_signed") c.act_signed = parse_bool(key, v);
  else if (key == "T") c.T = parse_number<int>(key, v);
  else if (key == "n") c.n = parse_number<std::size_t>(key, v);
  else if (key == "B") c.B = parse_number<std::size_t>(key, v);
  else if (key == "iterations") c.iterations = parse_number<int>(key, v);
  else if (key == "alpha") c.alpha = parse_number<double>(key, v);
  else if (key == "kappa") c.kappa = parse_number<double>(key, v);
  else if (key == "xi") c.xi = parse_number<double>(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "D") c.D = parse_number<int>(key, v);
  else if (key == "pts_layers") {
    if (v == "skip_only") c.pts_layers = PtsLayers::SkipOnly;
    else if (v == "all") c.pts_layers = PtsLayers::All;
    else if (v == "none") c.pts_layers = PtsLayers::None;
    else throw ConfigError("config key 'pts_layers': expected skip_only, all or none, got '" + v + "'");
  } else if (key == "les") c.les = parse_bool(key, v);
  else if (key == "baseline") {
    if (v == "none") c.baseline = Baseline::None;
    else if (v == "smoothquant") c.baseline = Baseline::SmoothQuant;
    else throw ConfigError("config key 'baseline': expected none or smoothquant, got '" + v + "'");
  } else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "eta") c.eta = parse_number<double>(key, v);
  else if (key == "optimizer") {
    if (v == "sgd") c.optimizer = les::Optimizer::Sgd;
    else if (v == "adam") c.optimizer = les::Optimizer::Adam;
    else throw ConfigError("config key 'optimizer': expected sgd or adam, got '" + v + "'");
  } else if (key == "scale_refresh") c.scale_refresh = parse_number<int>(key, v);
  else if (key == "propagate_quantized_inputs") c.propagate_quantized_inputs = parse_bool(key, v);
  else if (key == "eval_samples") c.eval_samples = parse_number<std::size_t>(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

Config parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  Config c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(c, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  if (!base_dir.empty() && c.checkpoint.is_relative()) c.checkpoint = base_dir / c.checkpoint;
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

void validate(const Config& c) {
  auto bits_ok = [](int b) { return b == kPassthroughBits || (b >= quant::kMinBits && b <= quant::kMaxBits); };
  if (!bits_ok(c.bits_w) || !bits_ok(c.bits_a))
    throw ConfigError("bit widths must lie in [2, 16] or equal 32 (pass-through), got W" + std::to_string(c.bits_w) +
                      "A" + std::to_string(c.bits_a));
  if (c.T < 1) throw ConfigError("T must be at least 1");
  if (c.n < 1 || c.B < 1 || c.eval_samples < 1) throw ConfigError("n, B and eval_samples must be positive");
  if (c.iterations < 1) throw ConfigError("iterations must be at least 1");
  if (c.scale_refresh < 1) throw ConfigError("scale_refresh must be at least 1");
  if (!(c.alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(c.kappa > 0.0 && c.kappa <= 1.0)) throw ConfigError("kappa must lie in (0, 1]");
  if (!(c.xi >= 0.0 && c.xi < 1.0)) throw ConfigError("xi must lie in [0, 1)");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(c.eta >= 0.0 && c.eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  if (c.D < 0 || c.D > 16) throw ConfigError("D must lie in [0, 16]");
  if (c.bits_w != kPassthroughBits && c.bits_w + c.D > igemm::kShiftedWeightBits)
    throw ConfigError("bits_w + D exceeds the shifted weight width");
}

std::string format_config(const Config& c) {
  std::ostringstream os;
  os << "bits_w = " << c.bits_w << '\n'
     << "bits_a = " << c.bits_a << '\n'
     << "act_signed = " << (c.act_signed ? "true" : "false") << '\n'
     << "T = " << c.T << '\n'
     << "n = " << c.n << '\n'
     << "B = " << c.B << '\n'
     << "iterations = " << c.iterations << '\n'
     << "alpha = " << format_double(c.alpha) << '\n'
     << "kappa = " << format_double(c.kappa) << '\n'
     << "xi = " << format_double(c.xi) << '\n'
     << "lr = " << format_double(c.lr) << '\n'
     << "D = " << c.D << '\n'
     << "pts_layers = " << to_string(c.pts_layers) << '\n'
     << "les = " << (c.les ? "true" : "false") << '\n'
     << "baseline = " << to_string(c.baseline) << '\n'
     << "seed = " << c.seed << '\n'
     << "checkpoint = " << c.checkpoint.filename().string() << '\n'
     << "eta = " << format_double(c.eta) << '\n'
     << "optimizer = " << (c.optimizer == les::Optimizer::Adam ? "adam" : "sgd") << '\n'
     << "scale_refresh = " << c.scale_refresh << '\n'
     << "propagate_quantized_inputs = " << (c.propagate_quantized_inputs ? "true" : "false") << '\n'
     << "eval_samples = " << c.eval_samples << '\n';
  return os.str();
}

}  // namespace dmq::pipeline
