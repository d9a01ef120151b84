#pragma once

#include <filesystem>
#include <iosfwd>

#include "vlae/nd/tensor.hpp"

namespace vlae::nd {

/// Little-endian blob: "NDT1", u32 dtype (1 = f64), u32 rank, u64 extents, payload.
inline constexpr std::uint32_t kDtypeF64 = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace vlae::nd
