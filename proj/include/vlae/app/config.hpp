#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlae/data/dataset.hpp"
#include "vlae/model/config.hpp"

namespace vlae::app {

/// Bad key, bad value or failed validation; the message starts with the dotted key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  /// synth-local, synth-shapes, mnist, idx, dataset, raw, rgb-fixture.
  std::string source = "synth-local";
  /// File or directory for idx / dataset / raw; empty mnist means the bundled 10k subset.
  std::string path;
  data::Binarization binarization = data::Binarization::dynamic;
  /// Pre-binarized IDX file used by static binarization instead of thresholding.
  std::string static_file;
  /// Images to generate (synth) or keep from the front of the source (0 keeps all).
  std::size_t count = 0;
  double copy_prob = 0.85;
  std::size_t templates = 8;
  double noise = 0.02;
  std::uint64_t template_seed = 1234;
  /// Seeds synthesis, the split shuffle and dynamic binarization.
  std::uint64_t seed = 1;
  double train = 0.9;
  double valid = 0.05;
  double test = 0.05;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  /// Write a checkpoint every this many steps (0: only at the end).
  std::size_t checkpoint_every = 100;
  /// Validation ELBO every this many steps (0: never).
  std::size_t eval_every = 0;
  std::size_t eval_count = 100;
  /// Importance samples for eval.
  std::size_t k = 128;
  /// Stop training once the process has used this many CPU seconds, summed
  /// over resumes (0: no limit).
  double time_budget_s = 0;
};

struct ExperimentConfig {
  DataConfig data;
  /// model.image is set through the data.channels / data.height / data.width keys.
  model::ModelConfig model;
  model::ObjectiveConfig objective;
  model::OptimizerConfig optim;
  RunConfig run;
};

/// Defaults for a 12x12 synthetic run with a small local decoder.
ExperimentConfig default_config();

/// `key = value` lines, '#' comments, blank lines ignored. Unknown keys are rejected.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = default_config());
ExperimentConfig load_config(const std::filesystem::path& path);
void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// Every key in a fixed order with round-trip exact values.
std::string resolved_text(const ExperimentConfig& cfg);
std::vector<std::string> config_keys();
void validate(const ExperimentConfig& cfg);

/// Keys that may change between a run and its resumption.
bool is_schedule_key(const std::string& key);
/// First key whose value differs, ignoring schedule keys; empty when compatible.
std::string first_incompatible_key(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace vlae::app
