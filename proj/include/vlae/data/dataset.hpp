#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vlae/masked/conv_mask.hpp"
#include "vlae/nd/rng.hpp"
#include "vlae/nd/tensor.hpp"

namespace vlae::data {

enum class Binarization { none, static_threshold, dynamic };

const char* to_string(Binarization b);
Binarization parse_binarization(const std::string& s);

/// Images [N x C x H x W] with values in [0, 1].
struct Dataset {
  nd::Tensor images;
  /// Class label per image, or empty.
  std::vector<int> labels;
  std::string split = "train";
  Binarization binarization = Binarization::none;
  std::string provenance;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t image_size() const { return images.size() / size(); }

  /// Rows idx[0], idx[1], ... as a batch; an empty index gives an empty tensor.
  nd::Tensor gather(const std::vector<std::size_t>& idx) const;
  nd::Tensor rows(std::size_t begin, std::size_t count) const;
  Dataset subset(const std::vector<std::size_t>& idx) const;
};

// ---- IDX -----------------------------------------------------------------

inline constexpr std::uint32_t kIdxLabels = 0x00000801;
inline constexpr std::uint32_t kIdxImages = 0x00000803;

/// Reads an IDX file (optionally gzip-compressed). Images come back as
/// [N x 1 x H x W] scaled by 1/255; labels as [N]. Throws std::runtime_error
/// with "truncated header", "magic mismatch", "truncated payload" or
/// "dimension overflow".
nd::Tensor load_idx(const std::filesystem::path& path, std::uint32_t expected_magic = kIdxImages);
std::vector<int> load_idx_labels(const std::filesystem::path& path);
/// Writes uncompressed IDX bytes (images scaled by 255 and rounded).
void save_idx_images(const std::filesystem::path& path, const nd::Tensor& images);

// ---- binarization --------------------------------------------------------

/// static: threshold at 0.5 (already-binary data is unchanged). dynamic:
/// independent Bernoulli(intensity) per pixel, needs rng.
Dataset binarize(const Dataset& gray, Binarization mode, nd::Rng* rng = nullptr);
/// Dynamic binarization for one epoch: stream seed.split(epoch).
Dataset dynamic_epoch(const Dataset& gray, std::uint64_t seed, std::size_t epoch);

// ---- synthetic data ------------------------------------------------------

enum class SynthKind { local_texture, long_range_shapes };

const char* to_string(SynthKind k);
SynthKind parse_synth_kind(const std::string& s);

struct SynthSpec {
  SynthKind kind = SynthKind::local_texture;
  std::size_t height = 12;
  std::size_t width = 12;
  /// local-texture: probability that a pixel copies its left neighbor; otherwise it is a fair coin.
  double copy_prob = 0.85;
  /// long-range-shapes: number of global templates and per-pixel XOR noise.
  std::size_t templates = 8;
  double noise = 0.02;
  /// Templates depend only on this seed, so every split shares them.
  std::uint64_t template_seed = 1234;
  std::uint64_t seed = 1;
  /// When set, the generator's window must lie inside it.
  std::optional<masked::OffsetSet> decoder_window;
};

/// Offsets the local-texture generator conditions on.
masked::OffsetSet texture_window();
/// The template set of a long-range-shapes spec, [S x 1 x H x W].
nd::Tensor shape_templates(const SynthSpec& spec);
/// n samples; labels hold the template index for the shapes kind.
Dataset synth(const SynthSpec& spec, std::size_t n);

// ---- splits and storage --------------------------------------------------

struct Splits {
  Dataset train, valid, test;
};

/// Seeded shuffle, then round(n f_train) train and round(n f_valid) valid items; the rest is test.
Splits split(const Dataset& d, std::array<double, 3> fractions, std::uint64_t seed);

/// Container: dir/manifest (text) + dir/images.ndt (+ dir/labels.ndt).
void save_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& dir);

/// Raw {0,1} byte grid with sidecar `<path>.manifest` giving count, channels, height, width.
Dataset load_raw_grid(const std::filesystem::path& path);
void save_raw_grid(const std::filesystem::path& path, const Dataset& d);

/// Four 6x6 RGB images in [0, 1] for exercising the grayscale decoder.
Dataset tiny_rgb_fixture();

/// Plug-in mutual information (bits) between the top-left and bottom-right
/// k x k patches of binary single-channel images.
double corner_patch_mutual_information(const Dataset& d, std::size_t k = 3);

}  // namespace vlae::data
