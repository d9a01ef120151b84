#include "vlae/model/config.hpp"

#include <cmath>
#include <stdexcept>

namespace vlae::model {
namespace {

[[noreturn]] void bad(const std::string& field, const std::string& why) {
  throw std::invalid_argument(field + ": " + why);
}

[[noreturn]] void unknown(const char* what, const std::string& s, const char* expected) {
  throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "' (expected " + expected + ")");
}

}  // namespace

const char* to_string(DecoderKind v) {
  switch (v) {
    case DecoderKind::factorized: return "factorized";
    case DecoderKind::local: return "local";
    case DecoderKind::grayscale_local: return "grayscale-local";
  }
  return "?";
}
const char* to_string(StackKind v) { return v == StackKind::plain ? "plain" : "two-stream"; }
const char* to_string(PriorKind v) { return v == PriorKind::gaussian ? "gaussian" : "af"; }
const char* to_string(FreeBitsMode v) {
  switch (v) {
    case FreeBitsMode::none: return "none";
    case FreeBitsMode::hard: return "hard";
    case FreeBitsMode::soft: return "soft";
  }
  return "?";
}
const char* to_string(LambdaScope v) {
  switch (v) {
    case LambdaScope::per_data_dim: return "per-data-dim";
    case LambdaScope::per_group: return "per-group";
    case LambdaScope::total: return "total";
  }
  return "?";
}
const char* to_string(OptimizerKind v) { return v == OptimizerKind::adamax ? "adamax" : "adam"; }

DecoderKind parse_decoder_kind(const std::string& s) {
  if (s == "factorized") return DecoderKind::factorized;
  if (s == "local") return DecoderKind::local;
  if (s == "grayscale-local") return DecoderKind::grayscale_local;
  unknown("decoder kind", s, "factorized, local, grayscale-local");
}
StackKind parse_stack_kind(const std::string& s) {
  if (s == "plain") return StackKind::plain;
  if (s == "two-stream") return StackKind::two_stream;
  unknown("stack kind", s, "plain, two-stream");
}
PriorKind parse_prior_kind(const std::string& s) {
  if (s == "gaussian") return PriorKind::gaussian;
  if (s == "af") return PriorKind::af;
  unknown("prior kind", s, "gaussian, af");
}
FreeBitsMode parse_free_bits_mode(const std::string& s) {
  if (s == "none") return FreeBitsMode::none;
  if (s == "hard") return FreeBitsMode::hard;
  if (s == "soft") return FreeBitsMode::soft;
  unknown("free-bits mode", s, "none, hard, soft");
}
LambdaScope parse_lambda_scope(const std::string& s) {
  if (s == "per-data-dim") return LambdaScope::per_data_dim;
  if (s == "per-group") return LambdaScope::per_group;
  if (s == "total") return LambdaScope::total;
  unknown("lambda scope", s, "per-data-dim, per-group, total");
}
OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adamax") return OptimizerKind::adamax;
  if (s == "adam") return OptimizerKind::adam;
  unknown("optimizer", s, "adamax, adam");
}
masked::MaskKind parse_mask_kind(const std::string& s) {
  if (s == "A") return masked::MaskKind::A;
  if (s == "B") return masked::MaskKind::B;
  unknown("mask kind", s, "A, B");
}

void validate(const ModelConfig& c) {
  if (c.image.channels != 1 && c.image.channels != 3) bad("data.channels", "must be 1 or 3");
  if (c.image.height == 0) bad("data.height", "must be positive");
  if (c.image.width == 0) bad("data.width", "must be positive");
  if (c.decoder.kind == DecoderKind::grayscale_local && c.image.channels != 3) {
    bad("model.decoder.kind", "grayscale-local needs 3-channel images");
  }
  if (c.latent_dim == 0 && c.decoder.kind == DecoderKind::factorized) {
    bad("model.latent_dim", "a factorized decoder needs a latent code");
  }
  if (c.encoder.channels == 0) bad("model.encoder.channels", "must be positive");
  if (c.encoder.hidden == 0) bad("model.encoder.hidden", "must be positive");
  if (c.decoder.layers == 0) bad("model.decoder.layers", "must be positive");
  if (c.decoder.kernel % 2 == 0) bad("model.decoder.kernel", "must be odd");
  if (c.decoder.filters == 0) bad("model.decoder.filters", "must be positive");
  if (c.decoder.context_channels == 0) bad("model.decoder.context_channels", "must be positive");
  if (c.decoder.hidden == 0) bad("model.decoder.hidden", "must be positive");
  if (c.decoder.v_layers == 0) bad("model.decoder.v_layers", "must be positive");
  if (c.decoder.h_layers == 0) bad("model.decoder.h_layers", "must be positive");
  if (c.prior.kind == PriorKind::af && c.prior.steps == 0) bad("model.prior.steps", "must be positive");
  if (c.prior.hidden == 0) bad("model.prior.hidden", "must be positive");
}

void validate(const ObjectiveConfig& c) {
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) bad("objective.lambda", "must be a finite value >= 0");
  if (!(c.threshold >= 0.0)) bad("objective.threshold", "must be >= 0");
  if (!(c.step_factor > 1.0)) bad("objective.step_factor", "must be > 1");
  if (!(c.kl_ema_decay >= 0.0 && c.kl_ema_decay < 1.0)) bad("objective.kl_ema_decay", "must be in [0, 1)");
}

void validate(const OptimizerConfig& c) {
  if (!(c.lr >= 0.0)) bad("optim.lr", "must be >= 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) bad("optim.beta1", "must be in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad("optim.beta2", "must be in [0, 1)");
  if (!(c.eps > 0.0)) bad("optim.eps", "must be > 0");
  if (!(c.polyak >= 0.0 && c.polyak < 1.0)) bad("optim.polyak", "must be in [0, 1)");
}

std::size_t group_count(const ObjectiveConfig& obj, std::size_t latent_dim) {
  if (latent_dim == 0) return 0;
  if (obj.groups == 0) return latent_dim;
  if (obj.groups > latent_dim) bad("objective.groups", "cannot exceed the latent dimension");
  return obj.groups;
}

double lambda_total(const ObjectiveConfig& obj, const ModelConfig& model) {
  switch (obj.scope) {
    case LambdaScope::per_data_dim: return obj.lambda * static_cast<double>(model.image.dims());
    case LambdaScope::per_group:
      return obj.lambda * static_cast<double>(group_count(obj, model.latent_dim));
    case LambdaScope::total: return obj.lambda;
  }
  return obj.lambda;
}

}  // namespace vlae::model
