#pragma once

#include <cstddef>
#include <string>

#include "vlae/flows/flow.hpp"
#include "vlae/masked/conv_mask.hpp"

namespace vlae::model {

enum class DecoderKind { factorized, local, grayscale_local };
enum class StackKind { plain, two_stream };
enum class PriorKind { gaussian, af };
enum class FreeBitsMode { none, hard, soft };
enum class LambdaScope { per_data_dim, per_group, total };
enum class OptimizerKind { adamax, adam };

const char* to_string(DecoderKind v);
const char* to_string(StackKind v);
const char* to_string(PriorKind v);
const char* to_string(FreeBitsMode v);
const char* to_string(LambdaScope v);
const char* to_string(OptimizerKind v);
DecoderKind parse_decoder_kind(const std::string& s);
StackKind parse_stack_kind(const std::string& s);
PriorKind parse_prior_kind(const std::string& s);
FreeBitsMode parse_free_bits_mode(const std::string& s);
LambdaScope parse_lambda_scope(const std::string& s);
OptimizerKind parse_optimizer_kind(const std::string& s);
masked::MaskKind parse_mask_kind(const std::string& s);

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;

  std::size_t pixels() const { return height * width; }
  std::size_t dims() const { return channels * height * width; }
};

struct EncoderConfig {
  std::size_t channels = 16;
  std::size_t hidden = 256;
};

struct DecoderConfig {
  DecoderKind kind = DecoderKind::local;
  StackKind stack = StackKind::plain;
  /// Plain stack: number of masked layers and filter size.
  std::size_t layers = 6;
  std::size_t kernel = 3;
  std::size_t filters = 12;
  /// Kind of the first masked layer on image channels; B leaks the center pixel.
  masked::MaskKind first_mask = masked::MaskKind::A;
  /// Residual 1x1 blocks after the last masked layer (plain stack).
  std::size_t residual_1x1 = 0;
  /// Share one kernel across masked layers 2..L (plain stack).
  bool tied = false;
  /// Two-stream stack depths.
  std::size_t v_layers = 1;
  std::size_t h_layers = 2;
  /// Channels of the z-dependent conditioning map.
  std::size_t context_channels = 4;
  /// Hidden width of the z -> map projection.
  std::size_t hidden = 256;
};

struct PriorConfig {
  PriorKind kind = PriorKind::af;
  std::size_t steps = 4;
  std::size_t hidden = 64;
  flows::FlowMode mode = flows::FlowMode::mean_only;
};

struct ModelConfig {
  ImageShape image;
  /// 0 gives an unconditional decoder (no encoder, no prior).
  std::size_t latent_dim = 32;
  EncoderConfig encoder;
  DecoderConfig decoder;
  PriorConfig prior;
};

struct ObjectiveConfig {
  FreeBitsMode mode = FreeBitsMode::hard;
  double lambda = 0.01;
  LambdaScope scope = LambdaScope::per_data_dim;
  /// Free-bits groups over latent dims; 0 means one group per latent dim.
  std::size_t groups = 0;
  double threshold = 0.05;
  double step_factor = 1.1;
  double kl_ema_decay = 0.99;
  /// Assert the AF-prior / IAF-posterior identity on every step.
  bool check_equivalence = false;
};

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamax;
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double polyak = 0.998;
};

/// Throws std::invalid_argument naming the offending field.
void validate(const ModelConfig& cfg);
void validate(const ObjectiveConfig& cfg);
void validate(const OptimizerConfig& cfg);

std::size_t group_count(const ObjectiveConfig& obj, std::size_t latent_dim);
/// Total free-bits budget in nats implied by lambda and its scope.
double lambda_total(const ObjectiveConfig& obj, const ModelConfig& model);

}  // namespace vlae::model
