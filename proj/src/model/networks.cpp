#include "vlae/model/networks.hpp"

#include <cmath>
#include <stdexcept>

#include "vlae/masked/causality.hpp"

namespace vlae::model {
namespace {

nd::Tensor gaussian(nd::Shape shape, double fan_in, nd::Rng& rng) {
  nd::Tensor t(std::move(shape));
  const double scale = 1.0 / std::sqrt(std::max(1.0, fan_in));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

masked::OffsetSet conv_taps(const Conv& c, std::size_t c_begin, std::size_t c_end) {
  if (c.mask) return masked::taps_of(*c.mask, c_begin, c_end);
  const auto& k = c.kernel->value;
  const int kh = static_cast<int>(k.dim(2)), kw = static_cast<int>(k.dim(3));
  masked::OffsetSet all;
  for (int y = 0; y < kh; ++y) {
    for (int x = 0; x < kw; ++x) all.insert({y - kh / 2, x - kw / 2});
  }
  return all;
}

nd::Tensor strictly_lower_channel_mask(std::size_t c) {
  nd::Tensor m({c, c, 1, 1}, 0.0);
  for (std::size_t o = 0; o < c; ++o) {
    for (std::size_t i = 0; i < o; ++i) m[o * c + i] = 1.0;
  }
  return m;
}

}  // namespace

Dense Dense::create(nd::ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                    nd::Rng& rng, bool zero_init) {
  Dense d;
  d.w = &store.create(name + ".w", zero_init ? nd::Tensor({in, out}, 0.0) : gaussian({in, out}, in, rng));
  d.b = &store.create(name + ".b", nd::Tensor({out}, 0.0));
  return d;
}

nd::Var Dense::operator()(nd::Tape& tape, nd::Var x) const {
  return nd::add_bias(nd::matmul(x, tape.param(*w)), tape.param(*b));
}

Conv Conv::create(nd::ParameterStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                  std::size_t kh, std::size_t kw, nd::Rng& rng, std::optional<nd::Tensor> mask, bool with_bias,
                  bool zero_init, std::size_t stride) {
  Conv c;
  double fan_in = static_cast<double>(c_in * kh * kw);
  if (mask) {
    // Allowed taps into output channel 0.
    double allowed = 0;
    for (std::size_t i = 0; i < c_in * kh * kw; ++i) allowed += (*mask)[i];
    fan_in = allowed;
  }
  nd::Shape shape{c_out, c_in, kh, kw};
  c.kernel = &store.create(name + ".k", zero_init ? nd::Tensor(shape, 0.0) : gaussian(shape, fan_in, rng));
  if (with_bias) c.bias = &store.create(name + ".b", nd::Tensor({c_out}, 0.0));
  c.mask = std::move(mask);
  c.pad = nd::Padding::same(kh, kw);
  c.stride = stride;
  return c;
}

nd::Var Conv::operator()(nd::Tape& tape, nd::Var x) const {
  nd::Var y = nd::conv2d(x, tape.param(*kernel), mask ? &*mask : nullptr, pad, stride);
  return bias ? nd::add_bias(y, tape.param(*bias)) : y;
}

Encoder::Encoder(nd::ParameterStore& store, const ModelConfig& cfg, nd::Rng& rng) : latent_(cfg.latent_dim) {
  const std::size_t ch = cfg.encoder.channels;
  convs_.push_back(Conv::create(store, "enc.conv0", cfg.image.channels, ch, 3, 3, rng));
  convs_.push_back(Conv::create(store, "enc.conv1", ch, 2 * ch, 3, 3, rng, std::nullopt, true, false, 2));
  convs_.push_back(Conv::create(store, "enc.conv2", 2 * ch, 2 * ch, 3, 3, rng, std::nullopt, true, false, 2));
  std::size_t h = cfg.image.height, w = cfg.image.width;
  for (int s = 0; s < 2; ++s) {
    h = (h - 1) / 2 + 1;
    w = (w - 1) / 2 + 1;
  }
  flat_ = 2 * ch * h * w;
  hidden_ = Dense::create(store, "enc.fc", flat_, cfg.encoder.hidden, rng);
  head_ = Dense::create(store, "enc.head", cfg.encoder.hidden, 2 * latent_, rng, true);
}

Encoder::Output Encoder::operator()(nd::Tape& tape, nd::Var x) const {
  nd::Var h = x;
  for (const auto& c : convs_) h = nd::elu(c(tape, h));
  h = nd::reshape(h, {x.dim(0), flat_});
  nd::Var out = head_(tape, nd::elu(hidden_(tape, h)));
  return {nd::slice(out, 1, 0, latent_), nd::clamp(nd::slice(out, 1, latent_, latent_), kLogStdMin, kLogStdMax)};
}

Decoder::Decoder(nd::ParameterStore& store, const ModelConfig& cfg, nd::Rng& rng) : cfg_(cfg) {
  const auto& dc = cfg.decoder;
  const std::size_t c = cfg.image.channels, hw = cfg.image.pixels();
  const std::size_t map_channels = autoregressive() ? dc.context_channels : c;

  if (cfg.latent_dim > 0) {
    ctx_hidden_ = Dense::create(store, "dec.ctx.fc", cfg.latent_dim, dc.hidden, rng);
    // The factorized head starts at p = 0.5 everywhere.
    ctx_out_ = Dense::create(store, "dec.ctx.out", dc.hidden, map_channels * hw, rng, !autoregressive());
  } else {
    ctx_const_ = &store.create("dec.ctx.const", nd::Tensor({1, map_channels * hw}, 0.0));
  }
  if (!autoregressive()) return;

  const std::size_t cw = window_channels(), cc = dc.context_channels, f = dc.filters;
  std::vector<masked::LayerGraph::Edge> none;
  int prev = -1;
  if (dc.stack == StackKind::plain) {
    auto first = masked::build_conv_mask_with_context(dc.first_mask, dc.kernel, dc.kernel, cw, cc, f);
    layers_.push_back(Conv::create(store, "dec.l0", cw + cc, f, dc.kernel, dc.kernel, rng, std::move(first)));
    prev = graph_.add({{-1, conv_taps(layers_[0], 0, cw)}});
    for (std::size_t l = 1; l < dc.layers; ++l) {
      if (dc.tied && l > 1) {
        layers_.push_back(layers_[1]);
      } else {
        auto m = masked::build_conv_mask(masked::MaskKind::B, dc.kernel, dc.kernel, f, f);
        layers_.push_back(
            Conv::create(store, "dec.l" + std::to_string(l), f, f, dc.kernel, dc.kernel, rng, std::move(m)));
      }
      prev = graph_.add({{prev, conv_taps(layers_.back(), 0, f)}});
    }
    for (std::size_t r = 0; r < dc.residual_1x1; ++r) {
      residual_.push_back(Conv::create(store, "dec.res" + std::to_string(r), f, f, 1, 1, rng));
      prev = graph_.add({{prev, {{0, 0}}}});
    }
  } else {
    const auto vf = masked::vertical_first_taps(), vt = masked::vertical_taps();
    const auto hf = masked::horizontal_first_taps(), ht = masked::horizontal_taps();
    v_layers_.push_back(
        Conv::create(store, "dec.v0", cw, f, 5, 5, rng, masked::build_offset_mask(vf, 5, 5, cw, f)));
    v_ctx_ = Conv::create(store, "dec.v0.ctx", cc, f, 1, 1, rng, std::nullopt, false);
    std::vector<int> v_nodes{graph_.add({{-1, conv_taps(v_layers_[0], 0, cw)}})};
    for (std::size_t k = 1; k < dc.v_layers; ++k) {
      v_layers_.push_back(Conv::create(store, "dec.v" + std::to_string(k), f, f, 3, 3, rng,
                                       masked::build_offset_mask(vt, 3, 3, f, f)));
      v_nodes.push_back(graph_.add({{v_nodes.back(), conv_taps(v_layers_.back(), 0, f)}}));
    }
    h_layers_.push_back(
        Conv::create(store, "dec.h0", cw, f, 3, 3, rng, masked::build_offset_mask(hf, 3, 3, cw, f)));
    h_ctx_ = Conv::create(store, "dec.h0.ctx", cc, f, 1, 1, rng, std::nullopt, false);
    prev = graph_.add({{-1, conv_taps(h_layers_[0], 0, cw)}});
    for (std::size_t k = 1; k < dc.h_layers; ++k) {
      h_layers_.push_back(Conv::create(store, "dec.h" + std::to_string(k), f, f, 3, 3, rng,
                                       masked::build_offset_mask(ht, 3, 3, f, f)));
      h_from_v_.push_back(Conv::create(store, "dec.h" + std::to_string(k) + ".v", f, f, 1, 1, rng, std::nullopt,
                                       false));
      const int vk = v_nodes[std::min(k, dc.v_layers - 1)];
      prev = graph_.add({{prev, conv_taps(h_layers_.back(), 0, f)}, {vk, conv_taps(h_from_v_.back(), 0, f)}});
    }
  }
  head_ = Conv::create(store, "dec.head", f, c, 1, 1, rng, std::nullopt, true, true);
  graph_.add({{prev, conv_taps(head_, 0, f)}});
  graph_.output = static_cast<int>(graph_.nodes.size()) - 1;
  if (c > 1) {
    intra_ = Conv::create(store, "dec.intra", c, c, 1, 1, rng, strictly_lower_channel_mask(c), false);
  }
}

std::size_t Decoder::window_channels() const {
  return cfg_.decoder.kind == DecoderKind::grayscale_local ? 1 : cfg_.image.channels;
}

masked::ReceptiveField Decoder::window() const {
  if (!autoregressive()) return {};
  return masked::receptive_field_of(graph_);
}

nd::Var Decoder::context(nd::Tape& tape, nd::Var z, std::size_t n) const {
  const std::size_t ch = autoregressive() ? cfg_.decoder.context_channels : cfg_.image.channels;
  nd::Var flat;
  if (ctx_const_ != nullptr) {
    flat = nd::matmul(tape.constant(nd::Tensor({n, 1}, 1.0)), tape.param(*ctx_const_));
  } else {
    if (!z.valid() || z.dim(0) != n) throw nd::ShapeError("decoder context: latent batch does not match images");
    flat = (*ctx_out_)(tape, nd::elu((*ctx_hidden_)(tape, z)));
  }
  return nd::reshape(flat, {n, ch, cfg_.image.height, cfg_.image.width});
}

nd::Var Decoder::plain_stack(nd::Tape& tape, nd::Var in, nd::Var ctx) const {
  nd::Var h = nd::concat({in, ctx}, 1);
  for (const auto& layer : layers_) h = nd::elu(layer(tape, h));
  for (const auto& res : residual_) h = h + res(tape, nd::elu(h));
  return h;
}

nd::Var Decoder::two_stream(nd::Tape& tape, nd::Var in, nd::Var ctx) const {
  std::vector<nd::Var> v{nd::elu(v_layers_[0](tape, in) + v_ctx_(tape, ctx))};
  for (std::size_t k = 1; k < v_layers_.size(); ++k) v.push_back(nd::elu(v_layers_[k](tape, v.back())));
  nd::Var h = nd::elu(h_layers_[0](tape, in) + h_ctx_(tape, ctx));
  for (std::size_t k = 1; k < h_layers_.size(); ++k) {
    const nd::Var& vk = v[std::min(k, v.size() - 1)];
    h = nd::elu(h_layers_[k](tape, h) + h_from_v_[k - 1](tape, vk));
  }
  return h;
}

nd::Var Decoder::logits(nd::Tape& tape, nd::Var x, nd::Var ctx) const {
  if (!autoregressive()) return ctx;
  nd::Var in = cfg_.decoder.kind == DecoderKind::grayscale_local ? masked::grayscale(x) : x;
  nd::Var h = cfg_.decoder.stack == StackKind::plain ? plain_stack(tape, in, ctx) : two_stream(tape, in, ctx);
  nd::Var out = head_(tape, h);
  if (intra_) out = out + (*intra_)(tape, x);
  return out;
}

}  // namespace vlae::model
