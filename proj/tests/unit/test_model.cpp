#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "vlae/masked/causality.hpp"
#include "vlae/model/checkpoint.hpp"
#include "vlae/model/sampling.hpp"
#include "vlae/model/trainer.hpp"
#include "vlae/nd/grad_check.hpp"

using namespace vlae;
using model::DecoderKind;
using model::ModelConfig;
using model::VlaeModel;

namespace {

ModelConfig small(DecoderKind kind, std::size_t c, std::size_t h, std::size_t w, std::size_t latent = 4) {
  ModelConfig cfg;
  cfg.image = {c, h, w};
  cfg.latent_dim = latent;
  cfg.encoder = {4, 16};
  cfg.decoder.kind = kind;
  cfg.decoder.filters = 4;
  cfg.decoder.hidden = 8;
  cfg.decoder.context_channels = 2;
  cfg.prior.steps = 2;
  cfg.prior.hidden = 8;
  return cfg;
}

void randomize(nd::ParameterStore& store, nd::Rng& rng, double scale) {
  for (auto* p : store.all()) {
    for (auto& v : p->value.data()) v = scale * rng.normal();
  }
}

// Every binary image of the given shape, one per batch row.
nd::Tensor all_binary(std::size_t c, std::size_t h, std::size_t w) {
  const std::size_t d = c * h * w, n = std::size_t{1} << d;
  nd::Tensor x({n, c, h, w});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < d; ++j) x[s * d + j] = static_cast<double>((s >> j) & 1u);
  }
  return x;
}

double enumerated_mass(const VlaeModel& m, nd::Rng& rng) {
  const auto& im = m.config().image;
  nd::Tensor x = all_binary(im.channels, im.height, im.width);
  const std::size_t n = x.dim(0);
  nd::Tape t;
  nd::Var z;
  if (m.has_latent()) {
    nd::Tensor one({1, m.config().latent_dim});
    for (auto& v : one.data()) v = rng.normal();
    nd::Tensor zs({n, m.config().latent_dim});
    for (std::size_t i = 0; i < zs.size(); ++i) zs[i] = one[i % one.size()];
    z = t.constant(zs);
  }
  auto lp = m.decode_logprob(t, x, z).log_px.value();
  double mass = 0;
  for (double v : lp.data()) mass += std::exp(v);
  return mass;
}

masked::ImageFn decoder_fn(const VlaeModel& m, const nd::Tensor& z) {
  return [&m, z](nd::Tape& t, nd::Var img) {
    nd::Var zv = m.has_latent() ? t.constant(z) : nd::Var{};
    return m.decoder().logits(t, img, m.decoder().context(t, zv, 1));
  };
}

nd::Tensor stripes(std::size_t n, std::size_t h, std::size_t w, nd::Rng& rng) {
  nd::Tensor x({n, 1, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const bool vertical = rng.bernoulli(0.5);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t c = 0; c < w; ++c) {
        double v = ((vertical ? c : y) % 2 == 0) ? 1.0 : 0.0;
        if (rng.bernoulli(0.05)) v = 1.0 - v;
        x[(i * h + y) * w + c] = v;
      }
    }
  }
  return x;
}

}  // namespace

TEST_CASE("config validation names the field") {
  model::ObjectiveConfig obj;
  obj.lambda = -1;
  CHECK_THROWS_WITH_AS(model::validate(obj), doctest::Contains("objective.lambda"), std::invalid_argument);
  ModelConfig cfg = small(DecoderKind::grayscale_local, 1, 3, 3);
  CHECK_THROWS_WITH_AS(model::validate(cfg), doctest::Contains("model.decoder.kind"), std::invalid_argument);
  CHECK_THROWS_AS(model::parse_decoder_kind("pixelcnn"), std::invalid_argument);
  CHECK(model::parse_lambda_scope(model::to_string(model::LambdaScope::per_group)) == model::LambdaScope::per_group);
}

TEST_CASE("encoder at initialization and batch independence") {
  VlaeModel m(small(DecoderKind::local, 1, 8, 8), 1);
  nd::Rng rng(2);
  nd::Tensor x = stripes(3, 8, 8, rng);
  nd::Tape t;
  auto q = m.encode(t, x);
  for (double v : q.mean.value().data()) CHECK(v == 0.0);
  for (double v : q.log_std.value().data()) CHECK(v == 0.0);

  randomize(m.params(), rng, 0.3);
  nd::Tape t1, t2;
  auto a = m.encode(t1, x).mean.value();
  nd::Tensor x2 = x;
  for (std::size_t j = 0; j < 64; ++j) x2[64 + j] = 1.0 - x2[64 + j];
  auto b = m.encode(t2, x2).mean.value();
  const std::size_t d = 4;
  bool row1_changed = false;
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(a[j] == b[j]);
    CHECK(a[2 * d + j] == b[2 * d + j]);
    row1_changed |= a[d + j] != b[d + j];
  }
  CHECK(row1_changed);
  CHECK_THROWS_AS(m.encode(t, nd::Tensor({1, 1, 7, 8})), nd::ShapeError);
}

TEST_CASE("posterior sampling") {
  VlaeModel m(small(DecoderKind::factorized, 1, 4, 4, 3), 1);
  nd::Rng rng(3);
  nd::Tape t;
  model::PosteriorParams q{t.constant(nd::Tensor::matrix({{0.5, -1.0, 2.0}})),
                           t.constant(nd::Tensor::matrix({{0.0, 0.0, 0.0}}))};
  model::PosteriorParams tight{q.mean, t.constant(nd::Tensor::matrix({{-7.0, -7.0, -7.0}}))};
  auto s = m.sample_posterior(t, tight, rng);
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(s.z.value()[j] - q.mean.value()[j]) < 1e-2);

  // Pathwise gradient of E||z||^2: d/dmu = 2 mu, d/dsigma = 2 sigma.
  const std::size_t n = 100000;
  nd::Tensor mu({n, 2}), ls({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    mu[2 * i] = 0.7, mu[2 * i + 1] = -0.4;
    ls[2 * i] = std::log(0.5), ls[2 * i + 1] = std::log(1.3);
  }
  nd::Tape g;
  nd::Var mv = g.input(mu), lv = g.input(ls);
  auto draw = m.sample_posterior(g, {mv, lv}, rng);
  g.backward(nd::sum(nd::square(draw.z)) * (1.0 / n));
  double gm0 = 0, gm1 = 0, gl0 = 0, gl1 = 0;
  auto gmu = g.grad(mv), gls = g.grad(lv);
  for (std::size_t i = 0; i < n; ++i) {
    gm0 += gmu[2 * i], gm1 += gmu[2 * i + 1], gl0 += gls[2 * i], gl1 += gls[2 * i + 1];
  }
  CHECK(gm0 == doctest::Approx(1.4).epsilon(0.02));
  CHECK(gm1 == doctest::Approx(-0.8).epsilon(0.02));
  // d/dlog sigma = sigma d/dsigma = 2 sigma^2.
  CHECK(gl0 / 0.5 == doctest::Approx(2 * 0.5).epsilon(0.02));
  CHECK(gl1 / 1.3 == doctest::Approx(2 * 1.3).epsilon(0.02));
}

TEST_CASE("log q matches the Gaussian density at the drawn z") {
  VlaeModel m(small(DecoderKind::factorized, 1, 4, 4, 5), 1);
  nd::Rng rng(14);
  nd::Tape t;
  nd::Tensor mean({2, 5}), ls({2, 5});
  for (auto& v : mean.data()) v = rng.normal();
  for (auto& v : ls.data()) v = 0.5 * rng.normal();
  auto s = m.sample_posterior(t, {t.constant(mean), t.constant(ls)}, rng);
  for (std::size_t r = 0; r < 2; ++r) {
    double lq = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double sd = std::exp(ls[r * 5 + j]), u = (s.z.value()[r * 5 + j] - mean[r * 5 + j]) / sd;
      lq += -0.5 * std::log(2 * std::numbers::pi) - std::log(sd) - 0.5 * u * u;
    }
    CHECK(s.log_q.value()[r] == doctest::Approx(lq).epsilon(1e-12));
  }
}

TEST_CASE("factorized decoder at initialization gives p = 0.5") {
  VlaeModel m(small(DecoderKind::factorized, 1, 28, 28), 1);
  nd::Rng rng(4);
  nd::Tensor x = stripes(2, 28, 28, rng);
  nd::Tape t;
  auto b = m.elbo(t, x, rng);
  for (double v : b.recon.value().data()) CHECK(v == doctest::Approx(-784 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("decoders normalize over every 3x3 binary image") {
  struct Case {
    const char* name;
    ModelConfig cfg;
  };
  std::vector<Case> cases{{"factorized", small(DecoderKind::factorized, 1, 3, 3)},
                          {"local", small(DecoderKind::local, 1, 3, 3)},
                          {"grayscale-local", small(DecoderKind::grayscale_local, 3, 1, 3)},
                          {"rgb-local", small(DecoderKind::local, 3, 1, 3)}};
  ModelConfig ts = small(DecoderKind::local, 1, 3, 3);
  ts.decoder.stack = model::StackKind::two_stream;
  ts.decoder.v_layers = 2;
  ts.decoder.h_layers = 3;
  cases.push_back({"two-stream", ts});
  ModelConfig unc = small(DecoderKind::local, 1, 3, 3, 0);
  cases.push_back({"unconditional", unc});
  ModelConfig tied = small(DecoderKind::local, 1, 3, 3);
  tied.decoder.tied = true;
  tied.decoder.residual_1x1 = 2;
  cases.push_back({"tied+residual", tied});
  for (auto& c : cases) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      CAPTURE(c.name);
      CAPTURE(seed);
      VlaeModel m(c.cfg, seed);
      nd::Rng rng(seed + 100);
      randomize(m.params(), rng, 0.8);
      CHECK(std::abs(enumerated_mass(m, rng) - 1.0) < 1e-6);
    }
  }
  SUBCASE("2x2 RGB grayscale decoder") {
    VlaeModel m(small(DecoderKind::grayscale_local, 3, 2, 2), 9);
    nd::Rng rng(9);
    randomize(m.params(), rng, 0.8);
    CHECK(std::abs(enumerated_mass(m, rng) - 1.0) < 1e-6);
  }
  SUBCASE("a center leak breaks normalization") {
    ModelConfig bad = small(DecoderKind::local, 1, 3, 3);
    bad.decoder.first_mask = masked::MaskKind::B;
    VlaeModel m(bad, 3);
    nd::Rng rng(3);
    randomize(m.params(), rng, 0.8);
    CHECK(std::abs(enumerated_mass(m, rng) - 1.0) > 1e-3);
  }
}

TEST_CASE("decoder windows read off the real masks") {
  VlaeModel plain(small(DecoderKind::local, 1, 8, 8), 1);
  auto rf = plain.decoder().window();
  CHECK(rf.height == 6);
  CHECK(rf.left == 6);
  CHECK(rf.offsets == masked::receptive_field_of(std::vector<masked::ConvLayerSpec>{
                          {masked::MaskKind::A}, {}, {}, {}, {}, {}}).offsets);

  ModelConfig ts = small(DecoderKind::local, 1, 8, 8);
  ts.decoder.stack = model::StackKind::two_stream;
  for (auto [v, h, label] : {std::tuple{1, 2, "4x2"}, {2, 2, "5x3"}, {3, 3, "7x4"}}) {
    ts.decoder.v_layers = v;
    ts.decoder.h_layers = h;
    VlaeModel m(ts, 1);
    auto w = m.decoder().window();
    CHECK(w.label() == label);
    CHECK(w.rectangular);
    CHECK(w.offsets == masked::two_stream_graph(v, h).offsets());
  }
}

TEST_CASE("real decoders pass the causality check") {
  nd::Rng rng(5);
  SUBCASE("six-layer stack") {
    VlaeModel m(small(DecoderKind::local, 1, 14, 14), 1);
    randomize(m.params(), rng, 0.5);
    nd::Tensor z({1, 4}, 0.3);
    auto r = masked::assert_causality(decoder_fn(m, z), {1, 14, 14}, m.decoder().window().offsets);
    CHECK(r.pass);
    CHECK(r.support_exact);
  }
  SUBCASE("two-stream 1V2H") {
    ModelConfig cfg = small(DecoderKind::local, 1, 8, 8);
    cfg.decoder.stack = model::StackKind::two_stream;
    VlaeModel m(cfg, 2);
    randomize(m.params(), rng, 0.5);
    auto r = masked::assert_causality(decoder_fn(m, nd::Tensor({1, 4}, 0.1)), {1, 8, 8},
                                      masked::canonical_window(4, 2));
    CHECK(r.pass);
    CHECK(r.support_exact);
  }
  SUBCASE("rgb with intra-pixel order") {
    VlaeModel m(small(DecoderKind::local, 3, 5, 5), 3);
    randomize(m.params(), rng, 0.5);
    auto r = masked::assert_causality(decoder_fn(m, nd::Tensor({1, 4}, 0.1)), {3, 5, 5},
                                      m.decoder().window().offsets, {.intra_pixel = true});
    CHECK(r.pass);
  }
  SUBCASE("grayscale window") {
    VlaeModel m(small(DecoderKind::grayscale_local, 3, 6, 6), 4);
    randomize(m.params(), rng, 0.5);
    auto r = masked::assert_causality(decoder_fn(m, nd::Tensor({1, 4}, 0.1)), {3, 6, 6},
                                      m.decoder().window().offsets,
                                      {.intra_pixel = true, .grayscale_window = true});
    CHECK(r.pass);
    CHECK(r.grayscale_ok);
  }
  SUBCASE("first-layer mask B leaks the center") {
    ModelConfig cfg = small(DecoderKind::local, 1, 6, 6);
    cfg.decoder.first_mask = masked::MaskKind::B;
    VlaeModel m(cfg, 5);
    randomize(m.params(), rng, 0.5);
    auto r = masked::assert_causality(decoder_fn(m, nd::Tensor({1, 4}, 0.1)), {1, 6, 6},
                                      masked::receptive_field_of(std::vector<masked::ConvLayerSpec>{
                                          {masked::MaskKind::A}, {}, {}, {}, {}, {}}).offsets);
    CHECK_FALSE(r.pass);
    bool self = false;
    for (const auto& v : r.violations) self |= v.in_pixel == v.out_pixel;
    CHECK(self);
  }
}

TEST_CASE("KL through the identity prior") {
  ModelConfig cfg = small(DecoderKind::factorized, 1, 4, 4, 3);
  VlaeModel m(cfg, 1);
  nd::Rng rng(6);
  nd::Tensor x = stripes(4, 4, 4, rng);
  {
    // Posterior equals prior at initialization: every KL sample is exactly zero.
    nd::Tape t;
    auto b = m.elbo(t, x, rng);
    for (double v : b.kl.value().data()) CHECK(v == 0.0);
  }
  // Monte Carlo KL against the closed form for a fixed diagonal Gaussian.
  // Means large relative to the scales keep the estimator's relative spread well under 1%.
  const double mu[3] = {3.0, -3.0, 3.0}, sd[3] = {0.9, 1.1, 1.0};
  double analytic = 0;
  for (int j = 0; j < 3; ++j) analytic += 0.5 * (mu[j] * mu[j] + sd[j] * sd[j] - 1 - 2 * std::log(sd[j]));
  const std::size_t n = 10000;
  nd::Tensor mean({n, 3}), ls({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) mean[3 * i + j] = mu[j], ls[3 * i + j] = std::log(sd[j]);
  }
  nd::Tape t;
  auto s = m.sample_posterior(t, {t.constant(mean), t.constant(ls)}, rng);
  auto kl = (s.log_q - nd::sum_per_row(m.log_prior_per_dim(t, s.z))).value();
  double mc = 0;
  for (double v : kl.data()) mc += v;
  mc /= static_cast<double>(n);
  CHECK(mc == doctest::Approx(analytic).epsilon(0.01));
}

TEST_CASE("surrogate objectives") {
  ModelConfig cfg = small(DecoderKind::local, 1, 4, 4, 4);
  cfg.prior.kind = model::PriorKind::gaussian;
  VlaeModel m(cfg, 1);
  nd::Rng rng(7);
  nd::Tensor x = stripes(6, 4, 4, rng);
  model::ObjectiveConfig obj;

  SUBCASE("hard mode with every group above lambda equals the ELBO") {
    randomize(m.params(), rng, 0.6);
    nd::Tape t;
    auto b = m.elbo(t, x, rng);
    obj.mode = model::FreeBitsMode::hard;
    obj.scope = model::LambdaScope::per_group;
    obj.lambda = 0.0;
    CHECK(model::surrogate_objective(b, obj, cfg, 1.0).value().item() ==
          doctest::Approx(-b.mean_elbo()).epsilon(1e-12));
  }
  SUBCASE("hard mode with zero KL pins every group at lambda") {
    nd::Tape t;
    auto b = m.elbo(t, x, rng);  // posterior == prior at init: KL == 0
    obj.mode = model::FreeBitsMode::hard;
    obj.scope = model::LambdaScope::per_group;
    obj.lambda = 0.01;
    CHECK(model::surrogate_objective(b, obj, cfg, 1.0).value().item() ==
          doctest::Approx(-(b.mean_recon() - 0.01 * 4)).epsilon(1e-14));
    obj.scope = model::LambdaScope::per_data_dim;
    CHECK(model::surrogate_objective(b, obj, cfg, 1.0).value().item() ==
          doctest::Approx(-(b.mean_recon() - 0.01 * 16)).epsilon(1e-14));
    obj.groups = 2;
    obj.scope = model::LambdaScope::total;
    obj.lambda = 3.0;
    CHECK(model::surrogate_objective(b, obj, cfg, 1.0).value().item() ==
          doctest::Approx(-(b.mean_recon() - 3.0)).epsilon(1e-14));
  }
  SUBCASE("soft mode at gamma = 1 is the ELBO; scaling keeps the gradient direction") {
    randomize(m.params(), rng, 0.6);
    obj.mode = model::FreeBitsMode::soft;
    nd::Tape t;
    auto b = m.elbo(t, x, rng);
    CHECK(model::surrogate_objective(b, obj, cfg, 1.0).value().item() ==
          doctest::Approx(-b.mean_elbo()).epsilon(1e-14));
    auto grads = [&](double scale) {
      m.params().zero_grad();
      nd::Tape tt;
      nd::Rng r(11);
      auto bb = m.elbo(tt, x, r);
      tt.backward(model::surrogate_objective(bb, obj, cfg, 0.3) * scale);
      std::vector<double> g;
      for (auto* p : m.params().all()) g.insert(g.end(), p->grad.data().begin(), p->grad.data().end());
      return g;
    };
    auto g1 = grads(1.0), g2 = grads(7.5);
    double dot = 0, n1 = 0, n2 = 0;
    for (std::size_t i = 0; i < g1.size(); ++i) dot += g1[i] * g2[i], n1 += g1[i] * g1[i], n2 += g2[i] * g2[i];
    CHECK(dot / std::sqrt(n1 * n2) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("negative lambda is rejected") {
    nd::Tape t;
    auto b = m.elbo(t, x, rng);
    obj.lambda = -1;
    CHECK_THROWS_AS(model::surrogate_objective(b, obj, cfg, 1.0), std::invalid_argument);
  }
}

TEST_CASE("gamma controller") {
  model::ObjectiveConfig obj;
  const double lt = 2.0;
  CHECK(model::update_gamma(0.5, 2 * lt, lt, obj) == doctest::Approx(0.55).epsilon(1e-15));
  CHECK(model::update_gamma(0.55, 0.5 * lt, lt, obj) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(model::update_gamma(0.37, 1.02 * lt, lt, obj) == 0.37);
  CHECK(model::update_gamma(0.95, 10 * lt, lt, obj) == 1.0);
  CHECK(model::update_gamma(1e-4, 0.0, lt, obj) == model::kGammaFloor);
}

TEST_CASE("ELBO graph gradients") {
  for (auto kind : {DecoderKind::local, DecoderKind::factorized}) {
    ModelConfig cfg = small(kind, 1, 4, 4, 3);
    cfg.prior.mode = flows::FlowMode::affine;
    VlaeModel m(cfg, 2);
    nd::Rng rng(8);
    randomize(m.params(), rng, 0.3);
    nd::Tensor x = stripes(2, 4, 4, rng);
    auto f = [&](nd::Tape& t) {
      nd::Rng r(5);
      return nd::sum(m.elbo(t, x, r).elbo);
    };
    CHECK(nd::grad_check_params(f, m.params(), {.max_coords_per_param = 6}) < 1e-4);
  }
}

TEST_CASE("optimizer and Polyak shadow") {
  ModelConfig cfg = small(DecoderKind::local, 1, 4, 4, 3);
  nd::Rng rng(9);
  nd::Tensor x = stripes(8, 4, 4, rng);
  SUBCASE("zero learning rate") {
    VlaeModel m(cfg, 1);
    for (auto* p : m.params().all()) {
      for (auto& v : p->shadow.data()) v += 1.0;
    }
    auto before = m.params().all()[0]->value;
    model::Trainer tr(m, {}, {.lr = 0.0});
    tr.step(x, rng);
    CHECK(m.params().all()[0]->value == before);
    const auto& p = *m.params().all()[0];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      CHECK(p.shadow[i] == doctest::Approx(p.value[i] + 0.998).epsilon(1e-12));
    }
  }
  SUBCASE("alpha = 0 copies values") {
    VlaeModel m(cfg, 1);
    model::Trainer tr(m, {}, {.polyak = 0.0});
    tr.step(x, rng);
    for (const auto* p : m.params().all()) CHECK(p->shadow == p->value);
  }
  SUBCASE("adam fallback moves parameters") {
    VlaeModel m(cfg, 1);
    auto before = m.params().find("dec.head.b")->value;
    model::Trainer tr(m, {}, {.kind = model::OptimizerKind::adam});
    tr.step(x, rng);
    CHECK_FALSE(m.params().find("dec.head.b")->value == before);
  }
}

TEST_CASE("training is deterministic, decreases the loss, and keeps the AF/IAF identity") {
  ModelConfig cfg = small(DecoderKind::local, 1, 6, 6, 4);
  nd::Rng data_rng(10);
  nd::Tensor data = stripes(512, 6, 6, data_rng);
  model::ObjectiveConfig obj;
  obj.check_equivalence = true;
  auto run = [&](std::size_t steps, std::vector<double>* losses) {
    auto m = std::make_unique<VlaeModel>(cfg, 3);
    model::Trainer tr(*m, obj, {});
    const nd::Rng base(4);
    for (std::size_t s = 0; s < steps; ++s) {
      nd::Tensor batch({32, 1, 6, 6});
      const std::size_t off = (s * 32) % 512;
      std::copy_n(&data[off * 36], 32 * 36, &batch[0]);
      nd::Rng r = base.split(s);
      auto met = tr.step(batch, r);
      CHECK(met.equivalence_gap < 1e-8);
      if (losses) losses->push_back(met.loss);
    }
    return m;
  };
  auto a = run(3, nullptr), b = run(3, nullptr);
  for (std::size_t k = 0; k < a->params().size(); ++k) CHECK(a->params().all()[k]->value == b->params().all()[k]->value);

  obj.check_equivalence = false;
  std::vector<double> losses;
  run(200, &losses);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) first += losses[i], last += losses[losses.size() - 1 - i];
  CHECK(last < first - 20 * 5.0);
}

TEST_CASE("sampling") {
  nd::Rng rng(12);
  SUBCASE("factorized at initialization") {
    VlaeModel m(small(DecoderKind::factorized, 1, 8, 8), 1);
    auto x = model::generate(m, 100, rng);
    double mean = 0;
    for (double v : x.data()) mean += v;
    CHECK(mean / static_cast<double>(x.size()) == doctest::Approx(0.5).epsilon(0.04));
  }
  for (auto channels : {std::size_t{1}, std::size_t{3}}) {
    CAPTURE(channels);
    VlaeModel m(small(DecoderKind::local, channels, 7, 6), 2);
    randomize(m.params(), rng, 0.7);
    nd::Tensor z({3, 4});
    for (auto& v : z.data()) v = rng.normal();
    nd::Rng r1(5), r2(5), r3(5), r4(5);
    auto a = model::sample_decoder(m, z, 3, r1);
    auto b = model::sample_decoder(m, z, 3, r2, {.fill = 1.0});
    auto c = model::sample_decoder(m, z, 3, r3, {.fill = 0.37, .full_recompute = true});
    CHECK(a == b);  // never reads a pixel before it is drawn
    CHECK(a == c);  // the row band equals a full recompute
    auto d = model::sample_decoder(m, z, 3, r4);
    CHECK(a == d);
  }
  SUBCASE("two decompressions of one image share z and differ") {
    VlaeModel m(small(DecoderKind::local, 1, 8, 8), 4);
    randomize(m.params(), rng, 0.7);
    nd::Tensor x = stripes(1, 8, 8, rng);
    nd::Tape t;
    auto q = m.encode(t, x);
    nd::Rng zr(1);
    nd::Tensor z = m.sample_posterior(t, q, zr).z.value();
    nd::Rng r1(1), r2(2);
    CHECK_FALSE(model::sample_decoder(m, z, 1, r1) == model::sample_decoder(m, z, 1, r2));
  }
}

TEST_CASE("checkpoint resume is bit-exact") {
  namespace fs = std::filesystem;
  ModelConfig cfg = small(DecoderKind::local, 1, 5, 5, 3);
  model::ObjectiveConfig obj;
  obj.mode = model::FreeBitsMode::soft;
  obj.scope = model::LambdaScope::total;
  obj.lambda = 0.5;
  nd::Rng dr(13);
  nd::Tensor data = stripes(16, 5, 5, dr);
  const nd::Rng base(77);
  const fs::path dir = fs::temp_directory_path() / "vlae_test_ckpt";
  fs::remove_all(dir);

  VlaeModel straight(cfg, 1);
  model::Trainer ts(straight, obj, {});
  for (std::size_t s = 0; s < 6; ++s) {
    nd::Rng r = base.split(s);
    ts.step(data, r);
    if (s == 2) model::save_checkpoint(dir, "cfg text\n", ts);
  }

  VlaeModel resumed(cfg, 999);
  model::Trainer tr(resumed, obj, {});
  model::restore_trainer(dir, tr);
  CHECK(model::read_checkpoint_info(dir).config_text == "cfg text\n");
  CHECK(tr.steps_taken() == 3);
  for (std::size_t s = 3; s < 6; ++s) {
    nd::Rng r = base.split(s);
    tr.step(data, r);
  }
  for (std::size_t k = 0; k < straight.params().size(); ++k) {
    CHECK(straight.params().all()[k]->value == resumed.params().all()[k]->value);
    CHECK(straight.params().all()[k]->shadow == resumed.params().all()[k]->shadow);
  }
  CHECK(ts.state().gamma == tr.state().gamma);
  CHECK(ts.state().kl_ema == tr.state().kl_ema);

  model::save_polyak_snapshot(dir / "polyak", "cfg\n", straight, 6);
  VlaeModel evalm(cfg, 5);
  model::load_parameters(dir / "polyak", evalm.params());
  for (std::size_t k = 0; k < straight.params().size(); ++k) {
    CHECK(evalm.params().all()[k]->value == straight.params().all()[k]->shadow);
  }
  ModelConfig other = cfg;
  other.latent_dim = 4;
  VlaeModel wrong(other, 1);
  CHECK_THROWS_WITH(model::load_parameters(dir, wrong.params()), doctest::Contains("shape"));
  fs::remove_all(dir);
}
