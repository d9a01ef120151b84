#include "vlae/app/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace vlae::app {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// ---- value codecs --------------------------------------------------------

std::string format(const std::string& v) { return v; }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(std::size_t v) { return std::to_string(v); }
std::string format(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}
std::string format(model::DecoderKind v) { return model::to_string(v); }
std::string format(model::StackKind v) { return model::to_string(v); }
std::string format(model::PriorKind v) { return model::to_string(v); }
std::string format(model::FreeBitsMode v) { return model::to_string(v); }
std::string format(model::LambdaScope v) { return model::to_string(v); }
std::string format(model::OptimizerKind v) { return model::to_string(v); }
std::string format(masked::MaskKind v) { return masked::to_string(v); }
std::string format(flows::FlowMode v) { return flows::to_string(v); }
std::string format(data::Binarization v) { return data::to_string(v); }

void parse(const std::string& s, std::string& v) { v = s; }
void parse(const std::string& s, bool& v) {
  if (s == "true" || s == "1") v = true;
  else if (s == "false" || s == "0") v = false;
  else throw std::invalid_argument("expected true or false, got '" + s + "'");
}
template <class T>
void parse_number(const std::string& s, T& v) {
  T out{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  }
  auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("not a valid number: '" + s + "'");
  v = out;
}
void parse(const std::string& s, std::size_t& v) { parse_number(s, v); }
void parse(const std::string& s, double& v) { parse_number(s, v); }
void parse(const std::string& s, model::DecoderKind& v) { v = model::parse_decoder_kind(s); }
void parse(const std::string& s, model::StackKind& v) { v = model::parse_stack_kind(s); }
void parse(const std::string& s, model::PriorKind& v) { v = model::parse_prior_kind(s); }
void parse(const std::string& s, model::FreeBitsMode& v) { v = model::parse_free_bits_mode(s); }
void parse(const std::string& s, model::LambdaScope& v) { v = model::parse_lambda_scope(s); }
void parse(const std::string& s, model::OptimizerKind& v) { v = model::parse_optimizer_kind(s); }
void parse(const std::string& s, masked::MaskKind& v) { v = model::parse_mask_kind(s); }
void parse(const std::string& s, flows::FlowMode& v) { v = flows::parse_flow_mode(s); }
void parse(const std::string& s, data::Binarization& v) { v = data::parse_binarization(s); }

// Calls f(key, member) for every configurable field, in echo order.
template <class Cfg, class F>
void visit(Cfg& c, F&& f) {
  auto& d = c.data;
  f("data.source", d.source);
  f("data.path", d.path);
  f("data.binarization", d.binarization);
  f("data.static_file", d.static_file);
  f("data.count", d.count);
  f("data.channels", c.model.image.channels);
  f("data.height", c.model.image.height);
  f("data.width", c.model.image.width);
  f("data.copy_prob", d.copy_prob);
  f("data.templates", d.templates);
  f("data.noise", d.noise);
  f("data.template_seed", d.template_seed);
  f("data.seed", d.seed);
  f("data.split.train", d.train);
  f("data.split.valid", d.valid);
  f("data.split.test", d.test);

  auto& m = c.model;
  f("model.latent_dim", m.latent_dim);
  f("model.encoder.channels", m.encoder.channels);
  f("model.encoder.hidden", m.encoder.hidden);
  f("model.decoder.kind", m.decoder.kind);
  f("model.decoder.stack", m.decoder.stack);
  f("model.decoder.layers", m.decoder.layers);
  f("model.decoder.kernel", m.decoder.kernel);
  f("model.decoder.filters", m.decoder.filters);
  f("model.decoder.first_mask", m.decoder.first_mask);
  f("model.decoder.residual_1x1", m.decoder.residual_1x1);
  f("model.decoder.tied", m.decoder.tied);
  f("model.decoder.v_layers", m.decoder.v_layers);
  f("model.decoder.h_layers", m.decoder.h_layers);
  f("model.decoder.context_channels", m.decoder.context_channels);
  f("model.decoder.hidden", m.decoder.hidden);
  f("model.prior.kind", m.prior.kind);
  f("model.prior.steps", m.prior.steps);
  f("model.prior.hidden", m.prior.hidden);
  f("model.prior.mode", m.prior.mode);

  auto& o = c.objective;
  f("objective.mode", o.mode);
  f("objective.lambda", o.lambda);
  f("objective.scope", o.scope);
  f("objective.groups", o.groups);
  f("objective.threshold", o.threshold);
  f("objective.step_factor", o.step_factor);
  f("objective.kl_ema_decay", o.kl_ema_decay);
  f("objective.check_equivalence", o.check_equivalence);

  auto& p = c.optim;
  f("optim.kind", p.kind);
  f("optim.lr", p.lr);
  f("optim.beta1", p.beta1);
  f("optim.beta2", p.beta2);
  f("optim.eps", p.eps);
  f("optim.polyak", p.polyak);

  auto& r = c.run;
  f("run.seed", r.seed);
  f("run.steps", r.steps);
  f("run.batch_size", r.batch_size);
  f("run.checkpoint_every", r.checkpoint_every);
  f("run.eval_every", r.eval_every);
  f("run.eval_count", r.eval_count);
  f("run.k", r.k);
  f("run.time_budget_s", r.time_budget_s);
}

std::map<std::string, std::string> as_map(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  visit(cfg, [&](const char* key, const auto& v) { out[key] = format(v); });
  return out;
}

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.model.image = {1, 12, 12};
  c.model.latent_dim = 16;
  c.model.encoder = {16, 128};
  c.model.decoder.hidden = 128;
  return c;
}

void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  bool found = false;
  visit(cfg, [&](const char* k, auto& member) {
    if (found || key != k) return;
    found = true;
    try {
      parse(value, member);
    } catch (const std::exception& e) {
      throw ConfigError(key + ": " + e.what());
    }
  });
  if (!found) throw ConfigError(key + ": unknown key");
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    set_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream text;
  text << is.rdbuf();
  return parse_config(text.str());
}

std::string resolved_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  visit(cfg, [&](const char* key, const auto& v) { os << key << " = " << format(v) << "\n"; });
  return os.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  ExperimentConfig c;
  visit(c, [&](const char* key, const auto&) { keys.emplace_back(key); });
  return keys;
}

void validate(const ExperimentConfig& cfg) {
  try {
    model::validate(cfg.model);
    model::validate(cfg.objective);
    model::validate(cfg.optim);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  static const char* sources[] = {"synth-local", "synth-shapes", "mnist", "idx", "dataset", "raw", "rgb-fixture"};
  if (std::find(std::begin(sources), std::end(sources), cfg.data.source) == std::end(sources)) {
    throw ConfigError("data.source: unknown source '" + cfg.data.source + "'");
  }
  const bool needs_path = cfg.data.source == "idx" || cfg.data.source == "dataset" || cfg.data.source == "raw";
  if (needs_path && cfg.data.path.empty()) throw ConfigError("data.path: required for source " + cfg.data.source);
  if (!(cfg.data.copy_prob >= 0 && cfg.data.copy_prob <= 1)) throw ConfigError("data.copy_prob: must lie in [0, 1]");
  if (!(cfg.data.noise >= 0 && cfg.data.noise <= 0.5)) throw ConfigError("data.noise: must lie in [0, 0.5]");
  if (cfg.data.templates == 0) throw ConfigError("data.templates: must be positive");
  for (auto [key, v] : {std::pair{"data.split.train", cfg.data.train}, {"data.split.valid", cfg.data.valid},
                        {"data.split.test", cfg.data.test}}) {
    if (!(v >= 0 && v <= 1)) throw ConfigError(std::string(key) + ": must lie in [0, 1]");
  }
  if (std::abs(cfg.data.train + cfg.data.valid + cfg.data.test - 1.0) > 1e-9) {
    throw ConfigError("data.split.train: split fractions must sum to 1");
  }
  if (cfg.run.batch_size == 0) throw ConfigError("run.batch_size: must be positive");
  if (cfg.run.k == 0) throw ConfigError("run.k: must be positive");
  if (!(cfg.run.time_budget_s >= 0)) throw ConfigError("run.time_budget_s: must be >= 0");
}

bool is_schedule_key(const std::string& key) {
  return key == "run.steps" || key == "run.checkpoint_every" || key == "run.eval_every" || key == "run.eval_count" ||
         key == "run.k" || key == "run.time_budget_s";
}

std::string first_incompatible_key(const ExperimentConfig& a, const ExperimentConfig& b) {
  const auto ma = as_map(a), mb = as_map(b);
  for (const auto& key : config_keys()) {
    if (!is_schedule_key(key) && ma.at(key) != mb.at(key)) return key;
  }
  return "";
}

}  // namespace vlae::app
