#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vlae/masked/conv_mask.hpp"
#include "vlae/model/config.hpp"
#include "vlae/nd/ops.hpp"
#include "vlae/nd/rng.hpp"

namespace vlae::model {

struct Dense {
  nd::Parameter* w = nullptr;  // [in x out]
  nd::Parameter* b = nullptr;  // [out]

  static Dense create(nd::ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                      nd::Rng& rng, bool zero_init = false);
  nd::Var operator()(nd::Tape& tape, nd::Var x) const;
};

struct Conv {
  nd::Parameter* kernel = nullptr;  // [c_out x c_in x kh x kw]
  nd::Parameter* bias = nullptr;    // optional, [c_out]
  std::optional<nd::Tensor> mask;
  nd::Padding pad;
  std::size_t stride = 1;

  /// Fan-in counts only the taps the mask allows.
  static Conv create(nd::ParameterStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                     std::size_t kh, std::size_t kw, nd::Rng& rng, std::optional<nd::Tensor> mask = std::nullopt,
                     bool with_bias = true, bool zero_init = false, std::size_t stride = 1);
  nd::Var operator()(nd::Tape& tape, nd::Var x) const;
};

/// Convolutional inference network producing the diagonal-Gaussian posterior.
class Encoder {
 public:
  Encoder(nd::ParameterStore& store, const ModelConfig& cfg, nd::Rng& rng);

  struct Output {
    nd::Var mean;     // [N x D]
    nd::Var log_std;  // [N x D], clamped to [kLogStdMin, kLogStdMax]
  };
  Output operator()(nd::Tape& tape, nd::Var x) const;

 private:
  std::vector<Conv> convs_;
  Dense hidden_, head_;
  std::size_t latent_ = 0;
  std::size_t flat_ = 0;
};

inline constexpr double kLogStdMin = -7.0;
inline constexpr double kLogStdMax = 2.0;

/// Bernoulli decoder p(x|z). Factorized heads read only z; the local variants
/// read z through a spatial context map and the image through masked convolutions.
class Decoder {
 public:
  Decoder(nd::ParameterStore& store, const ModelConfig& cfg, nd::Rng& rng);

  /// z-dependent conditioning for a batch of n images. For the factorized head
  /// this is the logit map itself; z is ignored when the model has no latent.
  nd::Var context(nd::Tape& tape, nd::Var z, std::size_t n) const;
  /// Logits [N x C x H x W] for image x (or a horizontal band of it, with the
  /// matching band of the context).
  nd::Var logits(nd::Tape& tape, nd::Var x, nd::Var ctx) const;

  bool autoregressive() const { return cfg_.decoder.kind != DecoderKind::factorized; }
  /// Dependency graph of the masked stack, read off the masks actually used.
  const masked::LayerGraph& graph() const { return graph_; }
  masked::ReceptiveField window() const;
  /// Number of channels feeding the masked stack (1 for the grayscale variant).
  std::size_t window_channels() const;
  const ModelConfig& config() const { return cfg_; }

 private:
  nd::Var plain_stack(nd::Tape& tape, nd::Var in, nd::Var ctx) const;
  nd::Var two_stream(nd::Tape& tape, nd::Var in, nd::Var ctx) const;

  ModelConfig cfg_;
  // Context map (or factorized logits) from z.
  std::optional<Dense> ctx_hidden_, ctx_out_;
  nd::Parameter* ctx_const_ = nullptr;
  // Plain stack.
  std::vector<Conv> layers_;
  std::vector<Conv> residual_;
  // Two-stream stack.
  std::vector<Conv> v_layers_, h_layers_, h_from_v_;
  Conv v_ctx_, h_ctx_;
  // Output head and intra-pixel channel term.
  Conv head_;
  std::optional<Conv> intra_;
  masked::LayerGraph graph_;
};

}  // namespace vlae::model
