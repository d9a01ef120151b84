#pragma once

#include <filesystem>
#include <string>

#include "vlae/model/trainer.hpp"

namespace vlae::model {

/// On-disk state of a training run: a text manifest plus a stream of named
/// NDT1 tensor blobs (value, shadow and, when present, optimizer moments).
struct CheckpointInfo {
  std::size_t step = 0;
  FreeBitsState controller;
  bool has_moments = false;
  /// Resolved configuration text stored verbatim.
  std::string config_text;
};

/// Writes dir/manifest and dir/tensors.bin (each via a temp file and rename).
void save_checkpoint(const std::filesystem::path& dir, const std::string& config_text, const Trainer& trainer);
/// Evaluation-only snapshot whose stored values are the Polyak shadow weights.
void save_polyak_snapshot(const std::filesystem::path& dir, const std::string& config_text,
                          const VlaeModel& model, std::size_t step);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
/// Restores parameter values and shadows; `use_shadow` loads the shadow copy as the value.
void load_parameters(const std::filesystem::path& dir, nd::ParameterStore& store, bool use_shadow = false);
/// Restores everything save_checkpoint wrote into a freshly built trainer.
void restore_trainer(const std::filesystem::path& dir, Trainer& trainer);

}  // namespace vlae::model
