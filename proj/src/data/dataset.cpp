#include "vlae/data/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "vlae/nd/serialize.hpp"

namespace vlae::data {
namespace fs = std::filesystem;

const char* to_string(Binarization b) {
  switch (b) {
    case Binarization::none: return "none";
    case Binarization::static_threshold: return "static";
    case Binarization::dynamic: return "dynamic";
  }
  return "?";
}

Binarization parse_binarization(const std::string& s) {
  if (s == "none") return Binarization::none;
  if (s == "static") return Binarization::static_threshold;
  if (s == "dynamic") return Binarization::dynamic;
  throw std::invalid_argument("unknown binarization '" + s + "' (expected none, static, dynamic)");
}

nd::Tensor Dataset::gather(const std::vector<std::size_t>& idx) const {
  if (idx.empty()) return {};
  const std::size_t d = image_size();
  nd::Shape s = images.shape();
  s[0] = idx.size();
  nd::Tensor out(s);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= size()) throw std::out_of_range("dataset: index out of range");
    std::copy_n(images.data().begin() + static_cast<long>(idx[r] * d), d, out.data().begin() + static_cast<long>(r * d));
  }
  return out;
}

nd::Tensor Dataset::rows(std::size_t begin, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(idx);
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset out;
  out.images = gather(idx);
  if (!labels.empty()) {
    for (auto i : idx) out.labels.push_back(labels[i]);
  }
  out.split = split;
  out.binarization = binarization;
  out.provenance = provenance;
  return out;
}

// ---- IDX -----------------------------------------------------------------

namespace {

std::vector<unsigned char> read_all(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw std::runtime_error("idx " + path.string() + ": cannot open");
  std::vector<unsigned char> buf;
  unsigned char chunk[1 << 16];
  int got = 0;
  while ((got = gzread(f, chunk, sizeof chunk)) > 0) buf.insert(buf.end(), chunk, chunk + got);
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw std::runtime_error("idx " + path.string() + ": read error");
  return buf;
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

struct IdxRaw {
  std::vector<std::size_t> dims;
  std::vector<unsigned char> payload;
};

IdxRaw parse_idx(const fs::path& path, std::uint32_t expected) {
  const auto buf = read_all(path);
  auto fail = [&](const std::string& what) { return std::runtime_error("idx " + path.string() + ": " + what); };
  if (buf.size() < 4) throw fail("truncated header");
  const std::uint32_t magic = be32(buf.data());
  if (magic != expected) throw fail("magic mismatch");
  const std::size_t rank = magic & 0xffu;
  if (buf.size() < 4 + 4 * rank) throw fail("truncated header");
  IdxRaw raw;
  std::size_t total = 1;
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t d = be32(buf.data() + 4 + 4 * k);
    if (d == 0) throw fail("zero extent");
    if (total > (std::size_t{1} << 40) / d) throw fail("dimension overflow");
    total *= d;
    raw.dims.push_back(d);
  }
  const std::size_t start = 4 + 4 * rank;
  if (buf.size() - start < total) throw fail("truncated payload");
  raw.payload.assign(buf.begin() + static_cast<long>(start), buf.begin() + static_cast<long>(start + total));
  return raw;
}

}  // namespace

nd::Tensor load_idx(const fs::path& path, std::uint32_t expected_magic) {
  if (expected_magic != kIdxImages && expected_magic != kIdxLabels) {
    throw std::invalid_argument("load_idx: unsupported magic");
  }
  IdxRaw raw = parse_idx(path, expected_magic);
  nd::Shape shape = expected_magic == kIdxImages ? nd::Shape{raw.dims[0], 1, raw.dims[1], raw.dims[2]}
                                                 : nd::Shape{raw.dims[0]};
  nd::Tensor t(shape);
  const double scale = expected_magic == kIdxImages ? 255.0 : 1.0;
  for (std::size_t i = 0; i < raw.payload.size(); ++i) t[i] = raw.payload[i] / scale;
  return t;
}

std::vector<int> load_idx_labels(const fs::path& path) {
  IdxRaw raw = parse_idx(path, kIdxLabels);
  return {raw.payload.begin(), raw.payload.end()};
}

void save_idx_images(const fs::path& path, const nd::Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1) throw nd::ShapeError("save_idx_images: expected N x 1 x H x W");
  std::ofstream os(path, std::ios::binary);
  auto put = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  put(kIdxImages);
  put(static_cast<std::uint32_t>(images.dim(0)));
  put(static_cast<std::uint32_t>(images.dim(2)));
  put(static_cast<std::uint32_t>(images.dim(3)));
  for (double v : images.data()) os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

// ---- binarization --------------------------------------------------------

Dataset binarize(const Dataset& gray, Binarization mode, nd::Rng* rng) {
  for (double v : gray.images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("binarize: values must lie in [0, 1]");
  }
  Dataset out = gray;
  out.binarization = mode;
  switch (mode) {
    case Binarization::none: break;
    case Binarization::static_threshold:
      for (auto& v : out.images.data()) v = v >= 0.5 ? 1.0 : 0.0;
      break;
    case Binarization::dynamic:
      if (rng == nullptr) throw std::invalid_argument("binarize: dynamic mode needs an rng");
      for (auto& v : out.images.data()) v = rng->uniform() < v ? 1.0 : 0.0;
      break;
  }
  return out;
}

Dataset dynamic_epoch(const Dataset& gray, std::uint64_t seed, std::size_t epoch) {
  nd::Rng rng = nd::Rng(seed).split(epoch);
  return binarize(gray, Binarization::dynamic, &rng);
}

// ---- synthetic data ------------------------------------------------------

const char* to_string(SynthKind k) { return k == SynthKind::local_texture ? "local-texture" : "long-range-shapes"; }

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "local-texture") return SynthKind::local_texture;
  if (s == "long-range-shapes") return SynthKind::long_range_shapes;
  throw std::invalid_argument("unknown synthetic kind '" + s + "' (expected local-texture, long-range-shapes)");
}

masked::OffsetSet texture_window() { return {{0, -1}}; }

namespace {

using Grid = std::vector<unsigned char>;

void draw_primitive(Grid& g, std::size_t h, std::size_t w, nd::Rng& rng) {
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  auto set = [&](long y, long x) {
    if (y >= 0 && y < H && x >= 0 && x < W) g[static_cast<std::size_t>(y * W + x)] ^= 1u;
  };
  const auto pick = [&](long lo, long hi) { return lo + static_cast<long>(rng.below(static_cast<std::size_t>(hi - lo + 1))); };
  switch (rng.below(5)) {
    case 0: {  // filled rectangle
      const long y0 = pick(0, H / 2), x0 = pick(0, W / 2), y1 = pick(y0 + 2, H - 1), x1 = pick(x0 + 2, W - 1);
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) set(y, x);
      }
      break;
    }
    case 1: {  // rectangle outline
      const long y0 = pick(0, H / 3), x0 = pick(0, W / 3), y1 = pick(H - 1 - H / 3, H - 1),
                 x1 = pick(W - 1 - W / 3, W - 1);
      for (long x = x0; x <= x1; ++x) set(y0, x), set(y1, x);
      for (long y = y0 + 1; y < y1; ++y) set(y, x0), set(y, x1);
      break;
    }
    case 2: {  // disc
      const long cy = pick(0, H - 1), cx = pick(0, W - 1), r = pick(2, std::max(2L, std::min(H, W) / 2));
      for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) set(y, x);
        }
      }
      break;
    }
    case 3: {  // full-length bar, two pixels thick
      const bool horizontal = rng.bernoulli(0.5);
      const long at = pick(0, (horizontal ? H : W) - 2);
      for (long k = 0; k < (horizontal ? W : H); ++k) {
        for (long t = 0; t < 2; ++t) horizontal ? set(at + t, k) : set(k, at + t);
      }
      break;
    }
    default: {  // diagonal band
      const bool anti = rng.bernoulli(0.5);
      const long off = pick(-H / 2, H / 2);
      for (long y = 0; y < H; ++y) {
        for (long t = 0; t < 2; ++t) set(y, anti ? W - 1 - (y + off + t) : y + off + t);
      }
      break;
    }
  }
}

std::size_t hamming(const Grid& a, const Grid& b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

}  // namespace

nd::Tensor shape_templates(const SynthSpec& spec) {
  if (spec.templates == 0) throw std::invalid_argument("synth: templates must be positive");
  const std::size_t h = spec.height, w = spec.width, d = h * w;
  // Distinct templates stay well apart so sparse noise never confuses them.
  const std::size_t min_distance = std::max<std::size_t>(4, d / 24);
  nd::Rng rng(spec.template_seed);
  std::vector<Grid> chosen;
  std::size_t attempts = 0;
  while (chosen.size() < spec.templates) {
    if (++attempts > 200000) throw std::runtime_error("synth: cannot find enough distinct templates");
    Grid g(d, 0);
    const std::size_t parts = 2 + rng.below(2);
    for (std::size_t p = 0; p < parts; ++p) draw_primitive(g, h, w, rng);
    const std::size_t ones = static_cast<std::size_t>(std::count(g.begin(), g.end(), 1));
    if (ones < d / 6 || ones > d - d / 6) continue;
    bool far = true;
    for (const auto& c : chosen) far = far && hamming(c, g) >= min_distance;
    if (far) chosen.push_back(std::move(g));
  }
  nd::Tensor t({spec.templates, 1, h, w});
  for (std::size_t s = 0; s < chosen.size(); ++s) {
    for (std::size_t i = 0; i < d; ++i) t[s * d + i] = chosen[s][i];
  }
  return t;
}

Dataset synth(const SynthSpec& spec, std::size_t n) {
  if (spec.height == 0 || spec.width == 0) throw std::invalid_argument("synth: image size must be positive");
  if (!(spec.copy_prob >= 0.0 && spec.copy_prob <= 1.0)) throw std::invalid_argument("synth: copy_prob outside [0, 1]");
  if (!(spec.noise >= 0.0 && spec.noise <= 0.5)) throw std::invalid_argument("synth: noise outside [0, 0.5]");
  if (spec.kind == SynthKind::local_texture && spec.decoder_window) {
    for (const auto& o : texture_window()) {
      if (!spec.decoder_window->count(o)) {
        throw std::invalid_argument("synth: generator window is larger than the decoder window");
      }
    }
  }
  const std::size_t h = spec.height, w = spec.width, d = h * w;
  Dataset out;
  out.images = nd::Tensor({n, 1, h, w});
  out.provenance = std::string("synth ") + to_string(spec.kind) + " seed " + std::to_string(spec.seed);
  out.binarization = Binarization::static_threshold;
  nd::Rng rng(spec.seed);
  if (spec.kind == SynthKind::local_texture) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t y = 0; y < h; ++y) {
        double prev = rng.bernoulli(0.5);
        out.images[i * d + y * w] = prev;
        for (std::size_t x = 1; x < w; ++x) {
          prev = rng.bernoulli(spec.copy_prob) ? prev : static_cast<double>(rng.bernoulli(0.5));
          out.images[i * d + y * w + x] = prev;
        }
      }
    }
    return out;
  }
  const nd::Tensor templates = shape_templates(spec);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = rng.below(spec.templates);
    out.labels.push_back(static_cast<int>(s));
    for (std::size_t j = 0; j < d; ++j) {
      double v = templates[s * d + j];
      if (spec.noise > 0 && rng.bernoulli(spec.noise)) v = 1.0 - v;
      out.images[i * d + j] = v;
    }
  }
  return out;
}

// ---- splits and storage --------------------------------------------------

Splits split(const Dataset& d, std::array<double, 3> f, std::uint64_t seed) {
  for (double v : f) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("split: fraction out of range");
  }
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  nd::Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(f[0] * static_cast<double>(n))));
  const auto n_valid = std::min(n - n_train, static_cast<std::size_t>(std::llround(f[1] * static_cast<double>(n))));
  auto part = [&](std::size_t b, std::size_t e, const char* tag) {
    Dataset s = d.subset({idx.begin() + static_cast<long>(b), idx.begin() + static_cast<long>(e)});
    s.split = tag;
    return s;
  };
  return {part(0, n_train, "train"), part(n_train, n_train + n_valid, "valid"), part(n_train + n_valid, n, "test")};
}

namespace {

std::map<std::string, std::string> read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

std::size_t field(const std::map<std::string, std::string>& kv, const std::string& key, const fs::path& path) {
  auto it = kv.find(key);
  if (it == kv.end()) throw std::runtime_error("manifest " + path.string() + ": missing " + key);
  return std::stoull(it->second);
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& d) {
  fs::create_directories(dir);
  nd::save_tensor(dir / "images.ndt", d.images);
  if (!d.labels.empty()) {
    nd::Tensor l({d.labels.size()});
    for (std::size_t i = 0; i < d.labels.size(); ++i) l[i] = d.labels[i];
    nd::save_tensor(dir / "labels.ndt", l);
  }
  std::ofstream os(dir / "manifest");
  os << "format = vlae-dataset-1\n"
     << "count = " << d.size() << "\n"
     << "channels = " << d.channels() << "\n"
     << "height = " << d.height() << "\n"
     << "width = " << d.width() << "\n"
     << "split = " << d.split << "\n"
     << "binarization = " << to_string(d.binarization) << "\n"
     << "labels = " << (d.labels.empty() ? "false" : "true") << "\n"
     << "provenance = " << d.provenance << "\n";
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest").string());
}

Dataset load_dataset(const fs::path& dir) {
  const auto kv = read_manifest(dir / "manifest");
  if (kv.count("format") == 0 || kv.at("format") != "vlae-dataset-1") {
    throw std::runtime_error("dataset " + dir.string() + ": unrecognized manifest");
  }
  Dataset d;
  d.images = nd::load_tensor(dir / "images.ndt");
  const nd::Shape expect{field(kv, "count", dir), field(kv, "channels", dir), field(kv, "height", dir),
                         field(kv, "width", dir)};
  if (d.images.shape() != expect) throw std::runtime_error("dataset " + dir.string() + ": shape disagrees with manifest");
  d.split = kv.count("split") ? kv.at("split") : "train";
  d.binarization = parse_binarization(kv.count("binarization") ? kv.at("binarization") : "none");
  d.provenance = kv.count("provenance") ? kv.at("provenance") : "";
  if (kv.count("labels") && kv.at("labels") == "true") {
    const nd::Tensor l = nd::load_tensor(dir / "labels.ndt");
    for (double v : l.data()) d.labels.push_back(static_cast<int>(v));
  }
  return d;
}

Dataset load_raw_grid(const fs::path& path) {
  const fs::path mpath = path.string() + ".manifest";
  const auto kv = read_manifest(mpath);
  const nd::Shape shape{field(kv, "count", mpath), field(kv, "channels", mpath), field(kv, "height", mpath),
                        field(kv, "width", mpath)};
  Dataset d;
  d.images = nd::Tensor(shape);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> bytes(d.images.size());
  if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw std::runtime_error("raw grid " + path.string() + ": truncated payload");
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] != 0 && bytes[i] != 1) throw std::runtime_error("raw grid " + path.string() + ": byte not in {0,1}");
    d.images[i] = bytes[i];
  }
  d.binarization = Binarization::static_threshold;
  d.provenance = "raw grid " + path.filename().string();
  return d;
}

void save_raw_grid(const fs::path& path, const Dataset& d) {
  std::ofstream os(path, std::ios::binary);
  for (double v : d.images.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("save_raw_grid: images must be binary");
    os.put(static_cast<char>(v));
  }
  std::ofstream m(path.string() + ".manifest");
  m << "count = " << d.size() << "\nchannels = " << d.channels() << "\nheight = " << d.height()
    << "\nwidth = " << d.width() << "\n";
  if (!os || !m) throw std::runtime_error("cannot write " + path.string());
}

Dataset tiny_rgb_fixture() {
  Dataset d;
  const std::size_t n = 4, h = 6, w = 6;
  d.images = nd::Tensor({n, 3, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double r = static_cast<double>((x + i) % 5) / 4.0;
        const double g = static_cast<double>((y + 2 * i) % 5) / 4.0;
        const double b = (x + y + i) % 2 == 0 ? 1.0 : 0.0;
        d.images[((i * 3 + 0) * h + y) * w + x] = r;
        d.images[((i * 3 + 1) * h + y) * w + x] = g;
        d.images[((i * 3 + 2) * h + y) * w + x] = b;
      }
    }
  }
  d.provenance = "tiny rgb fixture";
  return d;
}

double corner_patch_mutual_information(const Dataset& d, std::size_t k) {
  if (d.channels() != 1 || d.height() < k || d.width() < k || k * k > 30) {
    throw std::invalid_argument("corner MI: needs single-channel images at least k x k, k*k <= 30");
  }
  const std::size_t n = d.size(), h = d.height(), w = d.width(), dim = h * w;
  std::unordered_map<std::uint64_t, double> joint;
  std::unordered_map<std::uint32_t, double> a_count, b_count;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t a = 0, b = 0;
    for (std::size_t y = 0; y < k; ++y) {
      for (std::size_t x = 0; x < k; ++x) {
        a = (a << 1) | (d.images[i * dim + y * w + x] > 0.5);
        b = (b << 1) | (d.images[i * dim + (h - k + y) * w + (w - k + x)] > 0.5);
      }
    }
    joint[(std::uint64_t{a} << 32) | b] += 1;
    a_count[a] += 1;
    b_count[b] += 1;
  }
  double mi = 0;
  const double nn = static_cast<double>(n);
  for (const auto& [key, c] : joint) {
    const double pa = a_count[static_cast<std::uint32_t>(key >> 32)] / nn;
    const double pb = b_count[static_cast<std::uint32_t>(key & 0xffffffffu)] / nn;
    const double pj = c / nn;
    mi += pj * std::log2(pj / (pa * pb));
  }
  return mi;
}

}  // namespace vlae::data
