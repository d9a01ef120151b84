#include "vlae/nd/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace vlae::nd {
namespace {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error(std::string("tensor blob: truncated ") + what);
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("NDT1", 4);
  put<std::uint32_t>(os, kDtypeF64);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint64_t>(os, e);
  os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) throw std::runtime_error("tensor blob: write failed");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw std::runtime_error("tensor blob: truncated header");
  if (std::memcmp(magic, "NDT1", 4) != 0) throw std::runtime_error("tensor blob: magic mismatch");
  const auto dtype = get<std::uint32_t>(is, "header");
  if (dtype != kDtypeF64) throw std::runtime_error("tensor blob: unsupported dtype " + std::to_string(dtype));
  const auto rank = get<std::uint32_t>(is, "header");
  if (rank > 16) throw std::runtime_error("tensor blob: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    const auto ext = get<std::uint64_t>(is, "extents");
    if (ext == 0 || count > (std::uint64_t{1} << 40) / ext) throw std::runtime_error("tensor blob: bad extent");
    e = static_cast<std::size_t>(ext);
    count *= ext;
  }
  std::vector<double> data(count);
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(double)))) {
    throw std::runtime_error("tensor blob: truncated payload");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_tensor(is);
}

}  // namespace vlae::nd
