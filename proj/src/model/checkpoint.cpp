#include "vlae/model/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "vlae/nd/serialize.hpp"

namespace vlae::model {
namespace fs = std::filesystem;
namespace {

constexpr const char* kFormat = "vlae-checkpoint-1";
constexpr const char* kConfigMarker = "[config]";

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

void write_name(std::ostream& os, const std::string& name) {
  const auto n = static_cast<std::uint32_t>(name.size());
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

bool read_name(std::istream& is, std::string& name) {
  std::uint32_t n = 0;
  if (!is.read(reinterpret_cast<char*>(&n), sizeof n)) return false;
  if (n > (1u << 16)) throw std::runtime_error("checkpoint: corrupt tensor name");
  name.resize(n);
  if (!is.read(name.data(), n)) throw std::runtime_error("checkpoint: truncated tensor name");
  return true;
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string manifest_text(std::size_t step, const FreeBitsState& s, bool moments, std::size_t n_params,
                          const std::string& config_text) {
  std::ostringstream os;
  os << "format = " << kFormat << "\n"
     << "step = " << step << "\n"
     << "gamma = " << hex(s.gamma) << "\n"
     << "kl_ema = " << hex(s.kl_ema) << "\n"
     << "kl_ema_ready = " << (s.kl_ema_ready ? "true" : "false") << "\n"
     << "optimizer_moments = " << (moments ? "true" : "false") << "\n"
     << "parameters = " << n_params << "\n"
     << kConfigMarker << "\n"
     << config_text;
  return os.str();
}

std::map<std::string, nd::Tensor> read_blobs(const fs::path& dir) {
  std::ifstream is(dir / "tensors.bin", std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + (dir / "tensors.bin").string());
  std::map<std::string, nd::Tensor> blobs;
  std::string name;
  while (read_name(is, name)) blobs.emplace(name, nd::read_tensor(is));
  return blobs;
}

const nd::Tensor& blob(const std::map<std::string, nd::Tensor>& blobs, const std::string& name,
                       const nd::Shape& expect) {
  auto it = blobs.find(name);
  if (it == blobs.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
  if (it->second.shape() != expect) {
    throw std::runtime_error("checkpoint: tensor " + name + " has shape " + nd::shape_str(it->second.shape()) +
                             ", model expects " + nd::shape_str(expect));
  }
  return it->second;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const std::string& config_text, const Trainer& trainer) {
  fs::create_directories(dir);
  auto params = trainer.model().params().all();
  const auto& m = trainer.optimizer().first_moments();
  const auto& u = trainer.optimizer().second_moments();
  std::ostringstream blobs;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = *params[k];
    write_name(blobs, p.name + ".value");
    nd::write_tensor(blobs, p.value);
    write_name(blobs, p.name + ".shadow");
    nd::write_tensor(blobs, p.shadow);
    write_name(blobs, p.name + ".m");
    nd::write_tensor(blobs, m[k]);
    write_name(blobs, p.name + ".u");
    nd::write_tensor(blobs, u[k]);
  }
  write_atomic(dir / "tensors.bin", blobs.str());
  write_atomic(dir / "manifest",
               manifest_text(trainer.steps_taken(), trainer.state(), true, params.size(), config_text));
}

void save_polyak_snapshot(const fs::path& dir, const std::string& config_text, const VlaeModel& model,
                          std::size_t step) {
  fs::create_directories(dir);
  std::ostringstream blobs;
  for (const auto* p : model.params().all()) {
    write_name(blobs, p->name + ".value");
    nd::write_tensor(blobs, p->shadow);
    write_name(blobs, p->name + ".shadow");
    nd::write_tensor(blobs, p->shadow);
  }
  write_atomic(dir / "tensors.bin", blobs.str());
  write_atomic(dir / "manifest", manifest_text(step, FreeBitsState{}, false, model.params().size(), config_text));
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  std::ifstream is(dir / "manifest");
  if (!is) throw std::runtime_error("checkpoint: cannot open " + (dir / "manifest").string());
  CheckpointInfo info;
  std::string line;
  bool format_ok = false;
  while (std::getline(is, line)) {
    if (line == kConfigMarker) {
      std::ostringstream rest;
      rest << is.rdbuf();
      info.config_text = rest.str();
      break;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 3);
    if (key == "format") format_ok = val == kFormat;
    else if (key == "step") info.step = std::stoull(val);
    else if (key == "gamma") info.controller.gamma = std::strtod(val.c_str(), nullptr);
    else if (key == "kl_ema") info.controller.kl_ema = std::strtod(val.c_str(), nullptr);
    else if (key == "kl_ema_ready") info.controller.kl_ema_ready = val == "true";
    else if (key == "optimizer_moments") info.has_moments = val == "true";
  }
  if (!format_ok) throw std::runtime_error("checkpoint: unrecognized manifest in " + dir.string());
  return info;
}

void load_parameters(const fs::path& dir, nd::ParameterStore& store, bool use_shadow) {
  const auto blobs = read_blobs(dir);
  for (auto* p : store.all()) {
    p->shadow = blob(blobs, p->name + ".shadow", p->value.shape());
    p->value = use_shadow ? p->shadow : blob(blobs, p->name + ".value", p->value.shape());
    p->zero_grad();
  }
}

void restore_trainer(const fs::path& dir, Trainer& trainer) {
  const auto info = read_checkpoint_info(dir);
  if (!info.has_moments) throw std::runtime_error("checkpoint: " + dir.string() + " has no optimizer state");
  const auto blobs = read_blobs(dir);
  auto params = trainer.model().params().all();
  auto& m = trainer.optimizer().first_moments();
  auto& u = trainer.optimizer().second_moments();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    p.value = blob(blobs, p.name + ".value", p.value.shape());
    p.shadow = blob(blobs, p.name + ".shadow", p.value.shape());
    m[k] = blob(blobs, p.name + ".m", p.value.shape());
    u[k] = blob(blobs, p.name + ".u", p.value.shape());
    p.zero_grad();
  }
  trainer.optimizer().set_steps_taken(info.step);
  trainer.state() = info.controller;
}

}  // namespace vlae::model
