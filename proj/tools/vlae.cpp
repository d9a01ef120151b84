// Command-line front end: train, eval, sample, reconstruct, rf-check.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "vlae/app/run.hpp"
#include "vlae/model/trainer.hpp"

namespace fs = std::filesystem;
using namespace vlae;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> k;
  std::string out;
  std::string device = "none";
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Config file with dotted keys");
  cmd->add_option("--seed", c.seed, "Overrides run.seed");
  cmd->add_option("--steps", c.steps, "Overrides run.steps");
  cmd->add_option("--k", c.k, "Overrides run.k (importance samples)");
  cmd->add_option("--out", c.out, "Output directory or file");
  cmd->add_option("--device", c.device, "Compute device; only 'none' (CPU) is supported");
  cmd->add_option("--set", c.sets, "key=value override, repeatable");
}

app::ExperimentConfig resolve(const Common& c, app::ExperimentConfig cfg) {
  if (c.device != "none") throw app::ConfigError("--device: only 'none' (CPU) is supported");
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw app::ConfigError("--set: expected key=value, got '" + kv + "'");
    app::set_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.run.seed = *c.seed;
  if (c.steps) cfg.run.steps = *c.steps;
  if (c.k) cfg.run.k = *c.k;
  app::validate(cfg);
  return cfg;
}

app::ExperimentConfig config_from(const Common& c) {
  return resolve(c, c.config.empty() ? app::default_config() : app::load_config(c.config));
}

// A run/checkpoint directory, or a config for an untrained model.
app::LoadedModel model_from(const Common& c, const std::string& run, bool polyak) {
  if (run.empty()) {
    if (c.config.empty()) throw app::ConfigError("--run: give a run directory or --config");
    return app::fresh_model(config_from(c));
  }
  auto m = app::load_model(run, polyak);
  if (c.seed) m.cfg.run.seed = *c.seed;
  if (c.k) m.cfg.run.k = *c.k;
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Variational lossy autoencoder toolkit"};
  cli.require_subcommand(1);

  Common tc;
  bool resume = false;
  bool no_grids = false;
  auto* train = cli.add_subcommand("train", "Train a model into a run directory");
  add_common(train, tc);
  train->add_flag("--resume", resume, "Continue from <out>/ckpt/latest");
  train->add_flag("--no-grids", no_grids, "Skip grids/samples.pgm");

  Common ec;
  std::string eval_run, split = "test", eval_csv, weights = "polyak";
  std::size_t eval_count = 0;
  bool full = false;
  auto* evalc = cli.add_subcommand("eval", "Importance-sampled NLL, KL usage and code lengths");
  add_common(evalc, ec);
  evalc->add_option("--run", eval_run, "Run or checkpoint directory");
  evalc->add_option("--split", split, "train, valid or test");
  evalc->add_option("--count", eval_count, "Evaluate the first N images (0: all)");
  evalc->add_option("--weights", weights, "polyak or raw")->check(CLI::IsMember({"polyak", "raw"}));
  evalc->add_flag("--full", full, "Use 4096 importance samples");
  evalc->add_option("--csv", eval_csv, "Append a CSV row to this file");

  Common sc;
  std::string sample_run, sample_weights = "polyak";
  std::size_t n_samples = 16;
  auto* sample = cli.add_subcommand("sample", "Write a grid of ancestral samples");
  add_common(sample, sc);
  sample->add_option("--run", sample_run, "Run or checkpoint directory (or use --config for an untrained model)");
  sample->add_option("--n", n_samples, "Number of samples")->check(CLI::PositiveNumber);
  sample->add_option("--weights", sample_weights, "polyak or raw")->check(CLI::IsMember({"polyak", "raw"}));

  Common rc;
  std::string rec_run, rec_split = "test", rec_weights = "polyak";
  std::size_t n_originals = 8, variants = 3;
  auto* recon = cli.add_subcommand("reconstruct", "Originals next to decompressions from their lossy codes");
  add_common(recon, rc);
  recon->add_option("--run", rec_run, "Run or checkpoint directory");
  recon->add_option("--n", n_originals, "Number of originals")->check(CLI::PositiveNumber);
  recon->add_option("--variants", variants, "Decompressions per original");
  recon->add_option("--split", rec_split, "train, valid or test");
  recon->add_option("--weights", rec_weights, "polyak or raw")->check(CLI::IsMember({"polyak", "raw"}));

  Common fc;
  auto* rf = cli.add_subcommand("rf-check", "Predict the decoder window and verify it with the Jacobian");
  add_common(rf, fc);

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? 0 : app::kExitConfigError;
  }

  try {
    if (*train) {
      const auto cfg = config_from(tc);
      if (tc.out.empty()) throw app::ConfigError("--out: train needs a run directory");
      app::TrainOptions opts;
      opts.resume = resume;
      opts.write_grids = !no_grids;
      const auto s = app::train(cfg, tc.out, opts, &std::cerr);
      std::cout << "trained steps " << s.first_step << ".." << s.steps << " elbo " << s.last.elbo << " kl "
                << s.last.kl << (s.budget_exhausted ? " (CPU budget reached)" : "") << "\n";
    } else if (*evalc) {
      auto m = model_from(ec, eval_run, weights == "polyak");
      const auto data = app::load_data(m.cfg);
      const auto images = data.eval_images(split, eval_count);
      const std::size_t k = full ? eval::kFullK : m.cfg.run.k;
      auto report = app::evaluate(m, images, k, m.cfg.run.seed);
      report.weights = eval_run.empty() ? "init" : weights;
      report.split = split;
      std::cout << report.to_text();
      if (!ec.out.empty()) {
        std::ofstream os(ec.out);
        os << report.to_text();
      }
      if (!eval_csv.empty()) {
        const bool fresh = !fs::exists(eval_csv);
        std::ofstream os(eval_csv, std::ios::app);
        if (fresh) os << report.csv_header() << "\n";
        os << report.csv_row() << "\n";
      }
    } else if (*sample) {
      auto m = model_from(sc, sample_run, sample_weights == "polyak");
      const fs::path out = sc.out.empty() ? fs::path("samples.pgm") : fs::path(sc.out);
      app::write_sample_grid(out, app::sample_images(m, n_samples, m.cfg.run.seed));
      std::cout << "wrote " << out.string() << "\n";
    } else if (*recon) {
      auto m = model_from(rc, rec_run, rec_weights == "polyak");
      const auto data = app::load_data(m.cfg);
      const auto originals = data.eval_images(rec_split, n_originals);
      const auto g = app::reconstruct_grid(m, originals, variants, m.cfg.run.seed);
      const fs::path out = rc.out.empty() ? fs::path("reconstructions.pgm") : fs::path(rc.out);
      app::write_grid(out, g.tiles, g.rows, g.cols);
      std::cout << "wrote " << out.string() << "\n";
    } else if (*rf) {
      const auto cfg = config_from(fc);
      return app::rf_check(cfg, cfg.run.seed, std::cout);
    }
  } catch (const app::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return app::kExitConfigError;
  } catch (const nd::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return app::kExitNumericFailure;
  } catch (const model::CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return app::kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return app::kExitCheckFailed;
  }
  return app::kExitOk;
}
