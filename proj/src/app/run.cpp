#include "vlae/app/run.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "vlae/masked/causality.hpp"
#include "vlae/model/checkpoint.hpp"
#include "vlae/model/sampling.hpp"

#ifndef VLAE_DATA_DIR
#define VLAE_DATA_DIR "data"
#endif

namespace vlae::app {
namespace fs = std::filesystem;

namespace {

// Stream keys under Rng(seed).
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kStepStream = 2;
constexpr std::uint64_t kEvalBinarizeStream = 3;
constexpr std::uint64_t kValidStream = 4;
constexpr std::uint64_t kRfWeights = 5;
constexpr std::uint64_t kRfLatent = 6;

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

fs::path data_dir() {
  if (const char* env = std::getenv("VLAE_DATA_DIR")) return env;
  return VLAE_DATA_DIR;
}

data::Dataset truncate(const data::Dataset& d, std::size_t count) {
  if (count == 0 || count >= d.size()) return d;
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  return d.subset(idx);
}

data::Dataset load_source(const ExperimentConfig& cfg) {
  const auto& dc = cfg.data;
  const auto& im = cfg.model.image;
  if (dc.source == "synth-local" || dc.source == "synth-shapes") {
    data::SynthSpec spec;
    spec.kind = dc.source == "synth-local" ? data::SynthKind::local_texture : data::SynthKind::long_range_shapes;
    spec.height = im.height;
    spec.width = im.width;
    spec.copy_prob = dc.copy_prob;
    spec.templates = dc.templates;
    spec.noise = dc.noise;
    spec.template_seed = dc.template_seed;
    spec.seed = dc.seed;
    if (cfg.model.decoder.kind != model::DecoderKind::factorized && cfg.model.image.channels == 1) {
      spec.decoder_window = predicted_window(cfg.model).offsets;
    }
    if (im.channels != 1) throw ConfigError("data.channels: synthetic data is single-channel");
    try {
      return data::synth(spec, dc.count == 0 ? 10000 : dc.count);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("data.source: ") + e.what());
    }
  }
  data::Dataset d;
  if (dc.source == "mnist" || dc.source == "idx") {
    const fs::path path = dc.path.empty() ? data_dir() / "mnist10k" / "images-idx3-ubyte.gz" : fs::path(dc.path);
    d.images = data::load_idx(path);
    d.provenance = "idx " + path.filename().string();
  } else if (dc.source == "dataset") {
    d = data::load_dataset(dc.path);
  } else if (dc.source == "raw") {
    d = data::load_raw_grid(dc.path);
  } else if (dc.source == "rgb-fixture") {
    d = data::tiny_rgb_fixture();
  } else {
    throw ConfigError("data.source: unknown source '" + dc.source + "'");
  }
  return truncate(d, dc.count);
}

void check_shape(const data::Dataset& d, const model::ImageShape& im) {
  auto expect = [&](const char* key, std::size_t got, std::size_t want) {
    if (got != want) {
      throw ConfigError(std::string(key) + ": dataset has " + std::to_string(got) + ", config says " +
                        std::to_string(want));
    }
  };
  expect("data.channels", d.channels(), im.channels);
  expect("data.height", d.height(), im.height);
  expect("data.width", d.width(), im.width);
}

nd::Tensor binarize_fixed(const data::Dataset& d, data::Binarization mode, std::uint64_t seed) {
  if (d.size() == 0) return {};
  if (mode == data::Binarization::dynamic) {
    nd::Rng rng = nd::Rng(seed).split(kEvalBinarizeStream);
    return data::binarize(d, mode, &rng).images;
  }
  return data::binarize(d, mode).images;
}

}  // namespace

// ---- data ----------------------------------------------------------------

nd::Tensor DataBundle::train_epoch(std::size_t epoch) const {
  if (mode == data::Binarization::dynamic) return data::dynamic_epoch(train, seed, epoch).images;
  return data::binarize(train, mode).images;
}

nd::Tensor DataBundle::eval_images(const std::string& split, std::size_t count) const {
  const data::Dataset* d = split == "train" ? &train : split == "valid" ? &valid : split == "test" ? &test : nullptr;
  if (d == nullptr) throw ConfigError("--split: expected train, valid or test, got '" + split + "'");
  if (d->size() == 0) throw ConfigError("--split: the " + split + " split is empty");
  return binarize_fixed(truncate(*d, count), mode, seed);
}

DataBundle load_data(const ExperimentConfig& cfg) {
  data::Dataset all = load_source(cfg);
  check_shape(all, cfg.model.image);
  DataBundle b;
  b.mode = cfg.data.binarization;
  b.seed = cfg.data.seed;
  if (b.mode == data::Binarization::static_threshold && !cfg.data.static_file.empty()) {
    // A pre-binarized file replaces the images; bytes may be 0/1 or 0/255.
    nd::Tensor pre = data::load_idx(cfg.data.static_file);
    const double top = *std::max_element(pre.data().begin(), pre.data().end());
    if (top > 0 && top <= 1.0 / 255.0 + 1e-12) {
      for (auto& v : pre.data()) v *= 255.0;
    }
    data::Dataset s;
    s.images = pre;
    s = truncate(s, cfg.data.count);
    check_shape(s, cfg.model.image);
    s.labels = all.labels;
    all = s;
    all.provenance = "pre-binarized " + fs::path(cfg.data.static_file).filename().string();
  }
  auto parts = data::split(all, {cfg.data.train, cfg.data.valid, cfg.data.test}, cfg.data.seed);
  b.train = std::move(parts.train);
  b.valid = std::move(parts.valid);
  b.test = std::move(parts.test);
  return b;
}

// ---- training ------------------------------------------------------------

namespace {

std::string metrics_row(const model::StepMetrics& m, double wall) {
  return std::to_string(m.step) + "," + num(m.recon) + "," + num(m.kl) + "," + num(m.elbo) + "," + num(m.gamma) + "," +
         num(m.grad_norm) + "," + num(wall);
}

// Keeps rows up to `step` and returns the last kept wallclock value.
double trim_metrics(const fs::path& path, std::size_t step) {
  std::ifstream is(path);
  std::vector<std::string> keep;
  std::string line;
  double wall = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line == kMetricsHeader) continue;
    const std::size_t s = std::stoull(line.substr(0, line.find(',')));
    if (s > step) break;
    keep.push_back(line);
    wall = std::stod(line.substr(line.rfind(',') + 1));
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  os << kMetricsHeader << '\n';
  for (const auto& l : keep) os << l << '\n';
  return wall;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// CPU seconds spent up to the checkpoint in `ckpt`, or 0 when not recorded.
double read_cpu_used(const fs::path& ckpt, std::size_t step) {
  std::ifstream is(ckpt / "cpu_seconds");
  std::size_t s = 0;
  double used = 0;
  if (is >> s >> used && s == step) return used;
  return 0;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

TrainSummary train(const ExperimentConfig& cfg, const fs::path& out_dir, const TrainOptions& opts, std::ostream* log) {
  validate(cfg);
  const DataBundle data = load_data(cfg);
  const std::size_t n_train = data.train.size();
  const std::size_t batch = cfg.run.batch_size;
  if (n_train < batch) {
    throw ConfigError("run.batch_size: " + std::to_string(batch) + " exceeds the " + std::to_string(n_train) +
                      " training images");
  }
  const RunPaths paths{out_dir};
  std::error_code ec;
  fs::create_directories(paths.root / "ckpt", ec);
  fs::create_directories(paths.grids(), ec);
  if (ec || !fs::is_directory(paths.root)) throw std::runtime_error("cannot create run directory " + out_dir.string());
  const std::string config_text = resolved_text(cfg);
  write_text(paths.config(), config_text);

  model::VlaeModel m(cfg.model, cfg.run.seed);
  model::Trainer trainer(m, cfg.objective, cfg.optim);

  TrainSummary summary;
  double wall_offset = 0;
  double cpu_offset = 0;
  if (opts.resume && fs::exists(paths.latest() / "manifest")) {
    const auto info = model::read_checkpoint_info(paths.latest());
    const auto previous = parse_config(info.config_text);
    if (auto key = first_incompatible_key(previous, cfg); !key.empty()) {
      throw ConfigError(key + ": differs from the checkpoint being resumed");
    }
    model::restore_trainer(paths.latest(), trainer);
    wall_offset = trim_metrics(paths.metrics(), info.step);
    cpu_offset = read_cpu_used(paths.latest(), info.step);
    summary.first_step = info.step + 1;
    if (log) *log << "resumed from step " << info.step << "\n";
  } else {
    write_text(paths.metrics(), std::string(kMetricsHeader) + "\n");
    fs::remove(paths.eval_log(), ec);
  }

  std::ofstream metrics(paths.metrics(), std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write " + paths.metrics().string());
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  const double cpu0 = cpu_seconds();
  auto cpu_used = [&] { return cpu_offset + cpu_seconds() - cpu0; };

  const std::size_t per_epoch = n_train / batch;
  const nd::Rng root(cfg.run.seed);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  nd::Tensor epoch_images;
  std::vector<std::size_t> order;
  nd::Tensor valid_images;
  if (cfg.run.eval_every > 0 && data.valid.size() > 0) valid_images = data.eval_images("valid", cfg.run.eval_count);

  auto checkpoint = [&] {
    model::save_checkpoint(paths.latest(), config_text, trainer);
    model::save_polyak_snapshot(paths.polyak(), config_text, m, trainer.steps_taken());
    const auto tmp = paths.latest() / "cpu_seconds.tmp";
    write_text(tmp, std::to_string(trainer.steps_taken()) + " " + num(cpu_used()) + "\n");
    fs::rename(tmp, paths.latest() / "cpu_seconds");
  };

  for (std::size_t t = summary.first_step; t <= cfg.run.steps; ++t) {
    const std::size_t epoch = (t - 1) / per_epoch, slot = (t - 1) % per_epoch;
    if (epoch != cached_epoch) {
      epoch_images = data.train_epoch(epoch);
      order.resize(n_train);
      std::iota(order.begin(), order.end(), 0);
      nd::Rng shuffle = root.split(kShuffleStream).split(epoch);
      for (std::size_t i = n_train; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      cached_epoch = epoch;
    }
    nd::Shape bs = epoch_images.shape();
    bs[0] = batch;
    nd::Tensor x(bs);
    const std::size_t d = cfg.model.image.dims();
    for (std::size_t r = 0; r < batch; ++r) {
      const auto src = epoch_images.data().begin() + static_cast<long>(order[slot * batch + r] * d);
      std::copy(src, src + static_cast<long>(d), x.data().begin() + static_cast<long>(r * d));
    }
    nd::Rng step_rng = root.split(kStepStream).split(t);
    model::StepMetrics sm;
    try {
      sm = trainer.step(x, step_rng);
    } catch (const nd::NumericError& e) {
      const std::string what = e.what();
      throw nd::NumericError(what.find("step") == std::string::npos ? "step " + std::to_string(t) + ": " + what : what);
    }
    const double wall = wall_offset + elapsed();
    metrics << metrics_row(sm, wall) << '\n';
    summary.last = sm;
    summary.steps = t;
    if (opts.on_step) opts.on_step(sm, wall);
    if (cfg.run.eval_every > 0 && t % cfg.run.eval_every == 0 && !valid_images.empty()) {
      nd::Tape tape;
      nd::Rng er = root.split(kValidStream).split(t);
      const auto b = m.elbo(tape, valid_images, er);
      std::ofstream ev(paths.eval_log(), std::ios::app);
      if (t == cfg.run.eval_every) ev << "step,split,elbo_nats,kl_nats\n";
      ev << t << ",valid," << num(b.mean_elbo()) << ',' << num(b.mean_kl()) << '\n';
    }
    if (cfg.run.checkpoint_every > 0 && t % cfg.run.checkpoint_every == 0) {
      metrics.flush();
      checkpoint();
    }
    if (log && (t % 100 == 0 || t == cfg.run.steps)) {
      *log << "step " << t << " elbo " << sm.elbo << " kl " << sm.kl << " gamma " << sm.gamma << "\n";
    }
    if (cfg.run.time_budget_s > 0 && cpu_used() >= cfg.run.time_budget_s) {
      summary.budget_exhausted = true;
      break;
    }
  }
  metrics.flush();
  summary.wallclock_s = wall_offset + elapsed();
  checkpoint();
  if (opts.write_grids) {
    LoadedModel view{cfg, nullptr, trainer.steps_taken(), paths.latest()};
    view.model = std::make_unique<model::VlaeModel>(cfg.model, cfg.run.seed);
    model::load_parameters(paths.polyak(), view.model->params());
    write_sample_grid(paths.grids() / "samples.pgm", sample_images(view, 16, cfg.run.seed));
  }
  return summary;
}

// ---- loading -------------------------------------------------------------

LoadedModel load_model(const fs::path& dir, bool polyak) {
  fs::path ckpt = dir;
  if (fs::exists(dir / "ckpt")) ckpt = polyak ? RunPaths{dir}.polyak() : RunPaths{dir}.latest();
  const auto info = model::read_checkpoint_info(ckpt);
  LoadedModel out;
  out.cfg = parse_config(info.config_text);
  validate(out.cfg);
  out.model = std::make_unique<model::VlaeModel>(out.cfg.model, out.cfg.run.seed);
  model::load_parameters(ckpt, out.model->params());
  out.step = info.step;
  out.checkpoint = ckpt;
  return out;
}

LoadedModel fresh_model(const ExperimentConfig& cfg) {
  validate(cfg);
  LoadedModel out;
  out.cfg = cfg;
  out.model = std::make_unique<model::VlaeModel>(cfg.model, cfg.run.seed);
  return out;
}

// ---- evaluation ----------------------------------------------------------

EvalReport evaluate(const LoadedModel& m, const nd::Tensor& images, std::size_t k, std::uint64_t seed,
                    std::size_t workers) {
  const auto& im = m.cfg.model.image;
  if (images.rank() != 4 || images.dim(1) != im.channels || images.dim(2) != im.height || images.dim(3) != im.width) {
    throw ConfigError("data: image shape " + nd::shape_str(images.shape()) + " does not match the checkpoint");
  }
  EvalReport r;
  r.checkpoint = m.checkpoint.string();
  r.images = images.dim(0);
  r.dims = im.dims();
  r.nll = eval::is_nll(*m.model, images, k, seed, workers);
  r.bitsback = eval::bitsback_accounting(*m.model, images, seed);
  return r;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os.precision(10);
  os << "checkpoint = " << checkpoint << "\n"
     << "weights = " << weights << "\n"
     << "split = " << split << "\n"
     << "images = " << images << "\n"
     << "k = " << nll.k << "\n"
     << "nll_nats = " << nll.value << "\n"
     << "nll_std_error_nats = " << nll.std_error << "\n"
     << "nll_bits = " << eval::nats_to_bits(nll.value) << "\n"
     << "bits_per_dim = " << eval::bits_per_dim(nll.value, dims) << "\n"
     << "elbo_nats = " << bitsback.mean_elbo << "\n"
     << "kl_nats = " << bitsback.mean_kl_usage << "\n"
     << "kl_bits = " << eval::nats_to_bits(bitsback.mean_kl_usage) << "\n"
     << "naive_code_nats = " << bitsback.mean_naive << "\n"
     << "bitsback_code_nats = " << bitsback.mean_bitsback << "\n"
     << "bitsback_savings_nats = " << bitsback.mean_savings << "\n";
  return os.str();
}

std::string EvalReport::csv_header() const {
  return "weights,split,images,k,nll_nats,nll_std_error_nats,bits_per_dim,elbo_nats,kl_nats,naive_code_nats,"
         "bitsback_code_nats";
}

std::string EvalReport::csv_row() const {
  return weights + "," + split + "," + std::to_string(images) + "," + std::to_string(nll.k) + "," + num(nll.value) +
         "," + num(nll.std_error) + "," + num(eval::bits_per_dim(nll.value, dims)) + "," + num(bitsback.mean_elbo) +
         "," + num(bitsback.mean_kl_usage) + "," + num(bitsback.mean_naive) + "," + num(bitsback.mean_bitsback);
}

// ---- grids ---------------------------------------------------------------

void write_grid(const fs::path& path, const nd::Tensor& images, std::size_t rows, std::size_t cols) {
  if (images.rank() != 4 || (images.dim(1) != 1 && images.dim(1) != 3)) {
    throw nd::ShapeError("write_grid: expected [N x 1 x H x W] or [N x 3 x H x W]");
  }
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (rows * cols < n) throw std::invalid_argument("write_grid: more images than cells");
  const std::size_t pad = rows * cols == 1 ? 0 : 1;
  const std::size_t gw = cols * (w + pad), gh = rows * (h + pad);
  std::vector<unsigned char> px(gw * gh * c, 128);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t oy = (i / cols) * (h + pad), ox = (i % cols) * (w + pad);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double v = std::clamp(images[((i * c + ch) * h + y) * w + x], 0.0, 1.0);
          px[((oy + y) * gw + ox + x) * c + ch] = static_cast<unsigned char>(std::lround(255.0 * v));
        }
      }
    }
  }
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << (c == 1 ? "P5" : "P6") << "\n" << gw << " " << gh << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

GridImage read_grid(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  GridImage g;
  std::size_t maxval = 0;
  is >> magic >> g.width >> g.height >> maxval;
  if (!is || (magic != "P5" && magic != "P6") || maxval != 255) throw std::runtime_error("not a PGM/PPM file: " + path.string());
  is.get();
  g.channels = magic == "P5" ? 1 : 3;
  g.pixels.resize(g.width * g.height * g.channels);
  if (!is.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()))) {
    throw std::runtime_error("truncated image " + path.string());
  }
  return g;
}

nd::Tensor sample_images(const LoadedModel& m, std::size_t n, std::uint64_t seed) {
  nd::Rng rng(seed);
  return model::generate(*m.model, n, rng);
}

void write_sample_grid(const fs::path& path, const nd::Tensor& samples) {
  const std::size_t n = samples.dim(0);
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  write_grid(path, samples, (n + cols - 1) / cols, cols);
}

ReconstructionGrid reconstruct_grid(const LoadedModel& m, const nd::Tensor& originals, std::size_t variants,
                                    std::uint64_t seed) {
  const std::size_t n = originals.dim(0), d = originals.size() / n, cols = 1 + variants;
  nd::Shape s = originals.shape();
  s[0] = n * cols;
  ReconstructionGrid g{nd::Tensor(s), n, cols};
  auto place = [&](const nd::Tensor& src, std::size_t col) {
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(src.data().begin() + static_cast<long>(r * d), d,
                  g.tiles.data().begin() + static_cast<long>((r * cols + col) * d));
    }
  };
  place(originals, 0);
  if (variants == 0) return g;
  nd::Rng rng(seed);
  const auto first = model::reconstruct_lossy(*m.model, originals, rng);
  place(first.images, 1);
  for (std::size_t v = 2; v <= variants; ++v) place(model::sample_decoder(*m.model, first.z, n, rng), v);
  return g;
}

// ---- receptive field check -----------------------------------------------

masked::ReceptiveField predicted_window(const model::ModelConfig& cfg) {
  const auto& dc = cfg.decoder;
  if (dc.kind == model::DecoderKind::factorized) return {};
  if (dc.stack == model::StackKind::two_stream) return masked::receptive_field_of(masked::two_stream_graph(dc.v_layers, dc.h_layers));
  std::vector<masked::ConvLayerSpec> specs(dc.layers, {masked::MaskKind::B, dc.kernel, dc.kernel});
  specs.front().kind = masked::MaskKind::A;
  return masked::receptive_field_of(specs);
}

int rf_check(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream& out) {
  validate(cfg);
  model::VlaeModel m(cfg.model, seed);
  nd::Rng wr = nd::Rng(seed).split(kRfWeights);
  for (auto* p : m.params().all()) {
    for (auto& v : p->value.data()) v = 0.5 * wr.normal();
  }
  nd::Tensor z;
  if (m.has_latent()) {
    z = nd::Tensor({1, cfg.model.latent_dim});
    nd::Rng zr = nd::Rng(seed).split(kRfLatent);
    for (auto& v : z.data()) v = zr.normal();
  }
  const auto& im = cfg.model.image;
  const auto& dc = cfg.model.decoder;
  const auto predicted = predicted_window(cfg.model);
  out << "decoder: " << model::to_string(dc.kind);
  if (dc.kind != model::DecoderKind::factorized) {
    out << " " << model::to_string(dc.stack);
    if (dc.stack == model::StackKind::plain) {
      out << " layers=" << dc.layers << " kernel=" << dc.kernel << "x" << dc.kernel
          << " first_mask=" << masked::to_string(dc.first_mask);
    } else {
      out << " v_layers=" << dc.v_layers << " h_layers=" << dc.h_layers;
    }
  }
  out << "\nprobe: " << im.channels << "x" << im.height << "x" << im.width << "\n";
  out << "predicted window: " << (predicted.offsets.empty() ? "none" : predicted.label()) << "\n";

  masked::CausalityOptions opts;
  opts.intra_pixel = im.channels > 1;
  opts.grayscale_window = dc.kind == model::DecoderKind::grayscale_local;
  const masked::ImageFn fn = [&](nd::Tape& t, nd::Var img) {
    nd::Var zv = m.has_latent() ? t.constant(z) : nd::Var{};
    return m.decoder().logits(t, img, m.decoder().context(t, zv, 1));
  };
  const auto report = masked::assert_causality(fn, {im.channels, im.height, im.width}, predicted.offsets, opts, seed);
  out << report.to_text(im.width);
  for (const auto& v : report.violations) {
    if (v.in_pixel == v.out_pixel) {
      out << "self-dependence: pixel " << v.out_pixel << " reads itself at (" << v.out_pixel << ", " << v.in_pixel
          << ")\n";
      break;
    }
  }
  if (opts.grayscale_window) {
    out << "color channels reach pixel i from its window only through the grayscale projection: "
        << (report.grayscale_ok ? "yes" : "no") << "\n";
  }
  return report.pass && report.grayscale_ok ? kExitOk : kExitCheckFailed;
}

}  // namespace vlae::app
