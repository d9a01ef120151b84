#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>

#include "vlae/app/config.hpp"
#include "vlae/data/dataset.hpp"
#include "vlae/eval/eval.hpp"
#include "vlae/model/trainer.hpp"

namespace vlae::app {

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfigError = 2, kExitNumericFailure = 3 };

// ---- data ----------------------------------------------------------------

/// Splits before per-epoch binarization, plus the binarization schedule.
struct DataBundle {
  data::Dataset train, valid, test;
  data::Binarization mode = data::Binarization::none;
  std::uint64_t seed = 0;

  /// Training images for one epoch: dynamic mode re-samples, the others are fixed.
  nd::Tensor train_epoch(std::size_t epoch) const;
  /// First `count` images (0: all) of a split, binarized once with a fixed stream.
  nd::Tensor eval_images(const std::string& split, std::size_t count) const;
};

/// Throws ConfigError when the data does not match data.channels / height / width.
DataBundle load_data(const ExperimentConfig& cfg);

// ---- run directory -------------------------------------------------------

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.resolved"; }
  std::filesystem::path metrics() const { return root / "metrics.csv"; }
  std::filesystem::path eval_log() const { return root / "eval.csv"; }
  std::filesystem::path latest() const { return root / "ckpt" / "latest"; }
  std::filesystem::path polyak() const { return root / "ckpt" / "polyak"; }
  std::filesystem::path grids() const { return root / "grids"; }
};

inline constexpr const char* kMetricsHeader = "step,recon_nats,kl_nats,elbo_nats,gamma,grad_norm,wallclock_s";

// ---- training ------------------------------------------------------------

struct TrainOptions {
  /// Continue from ckpt/latest when present.
  bool resume = false;
  /// Write grids/samples.pgm at the end.
  bool write_grids = true;
  std::function<void(const model::StepMetrics&, double wallclock_s)> on_step;
};

struct TrainSummary {
  std::size_t first_step = 1;
  std::size_t steps = 0;
  model::StepMetrics last;
  double wallclock_s = 0;
  bool budget_exhausted = false;
};

/// Runs (or resumes) training into out_dir. Batches and posterior draws for
/// step t depend only on (run.seed, t), so resumption is bit-exact.
/// Throws nd::NumericError naming the step on non-finite values.
TrainSummary train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, const TrainOptions& opts = {},
                   std::ostream* log = nullptr);

// ---- loading -------------------------------------------------------------

struct LoadedModel {
  ExperimentConfig cfg;
  std::unique_ptr<model::VlaeModel> model;
  std::size_t step = 0;
  std::filesystem::path checkpoint;
};

/// `dir` is a run directory or a checkpoint directory. polyak picks
/// ckpt/polyak (the averaged weights) over ckpt/latest for run directories.
LoadedModel load_model(const std::filesystem::path& dir, bool polyak = true);
/// An untrained model initialised from run.seed.
LoadedModel fresh_model(const ExperimentConfig& cfg);

// ---- evaluation ----------------------------------------------------------

struct EvalReport {
  std::string checkpoint;
  std::string weights;
  std::string split;
  std::size_t images = 0;
  std::size_t dims = 0;
  eval::NllEstimate nll;
  eval::BitsBackReport bitsback;

  std::string to_text() const;
  std::string csv_header() const;
  std::string csv_row() const;
};

EvalReport evaluate(const LoadedModel& m, const nd::Tensor& images, std::size_t k, std::uint64_t seed,
                    std::size_t workers = eval::worker_count());

// ---- image grids ---------------------------------------------------------

/// Tiles [N x C x H x W] images (C = 1 or 3) row-major into rows x cols cells.
/// Each cell is (W + pad) x (H + pad) with the padding on its right and bottom,
/// pad = 1 (value 128) unless the grid holds a single cell, where pad = 0.
/// The file is binary PGM (P5) for C = 1 and PPM (P6) for C = 3; empty cells stay at 128.
void write_grid(const std::filesystem::path& path, const nd::Tensor& images, std::size_t rows, std::size_t cols);

struct GridImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;
};
GridImage read_grid(const std::filesystem::path& path);

/// n samples laid out ceil(sqrt(n)) columns wide.
nd::Tensor sample_images(const LoadedModel& m, std::size_t n, std::uint64_t seed);
void write_sample_grid(const std::filesystem::path& path, const nd::Tensor& samples);

/// Row r holds original r followed by `variants` decompressions. One z ~ q(z|x)
/// is drawn per original and shared by its variants; each variant is a fresh
/// decoder sample.
struct ReconstructionGrid {
  nd::Tensor tiles;  // [n (1 + variants) x C x H x W], row-major
  std::size_t rows = 0, cols = 0;
};
ReconstructionGrid reconstruct_grid(const LoadedModel& m, const nd::Tensor& originals, std::size_t variants,
                                    std::uint64_t seed);

// ---- receptive field check -----------------------------------------------

/// Window the decoder is designed to have, from the configuration alone.
masked::ReceptiveField predicted_window(const model::ModelConfig& cfg);

/// Builds the decoder with random weights from `seed`, prints the predicted
/// window and the Jacobian check. Returns kExitOk or kExitCheckFailed.
int rf_check(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream& out);

}  // namespace vlae::app
