#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmblock/autodiff/tensor.hpp"

namespace tmb::train {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Byte images [M, C, H, W] with integer labels.
struct Dataset {
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return channels * height * width; }
  std::size_t num_classes() const { return class_names.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {images.data() + i * image_bytes(), image_bytes()};
  }
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Throws DataError when sizes or labels are inconsistent.
  void validate() const;
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 1 label byte followed by 3072 pixel
// bytes (1024 R, 1024 G, 1024 B, each row-major 32x32).

inline constexpr std::size_t kCifarRecordBytes = 3073;

std::vector<std::string> cifar10_class_names();
Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const std::string& source = "buffer");
std::vector<std::uint8_t> encode_cifar10(const Dataset& ds);
Dataset load_cifar10_file(const std::filesystem::path& path);

enum class CifarPart { train, test };
/// data_batch_1..5.bin (train) or test_batch.bin (test) under `dir`.
Dataset load_cifar10(const std::filesystem::path& dir, CifarPart part = CifarPart::train);

/// First `per_class` examples of every class, in file order.
Dataset balanced_subset(const Dataset& ds, std::size_t per_class);

// ---------------------------------------------------------------------------
// Synthetic motif dataset.
//
// Every image is background noise in [0, 64) with two of M motif tiles
// stamped at non-overlapping random positions. A motif is a 4x4 binary
// pattern with exactly 8 lit cells (value 200), so all motifs carry the same
// pixel mass. Class j is the j-th motif pair in lexicographic order, where M
// is the smallest count with M(M-1)/2 >= classes. The same motif shows up in
// several classes. All three channels carry the same plane.

inline constexpr std::size_t kMotifSize = 4;
inline constexpr std::uint8_t kMotifOn = 200;
inline constexpr std::uint8_t kBackgroundMax = 64;

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t samples = 2000;
  std::size_t height = 16;
  std::size_t width = 16;
  std::uint64_t seed = 0;
};

std::size_t synth_motif_count(std::size_t classes);
std::vector<std::array<std::uint8_t, kMotifSize * kMotifSize>> synth_motifs(std::size_t count);
std::vector<std::array<std::size_t, 2>> synth_class_pairs(std::size_t classes);

/// Deterministic and exactly balanced (samples must be a multiple of classes).
Dataset synth_dataset(const SynthSpec& spec);

/// Bitmask of motifs found by scanning every 4x4 window of channel 0 with a
/// mid-level threshold.
std::uint32_t motif_presence(const Dataset& ds, std::size_t index, std::size_t motif_count);
/// Class whose motif pair matches the presence mask exactly, or -1.
int motif_oracle_classify(const Dataset& ds, std::size_t index, std::size_t classes);

// ---------------------------------------------------------------------------
// Augmentation, splitting and batching.

struct AugmentParams {
  std::size_t pad = 4;
  bool flip = true;
};

/// Per-image crop offset and flip decision for one batch.
struct AugmentDraw {
  std::size_t dy = 0;
  std::size_t dx = 0;
  bool flip = false;
};

/// Draws are a pure function of (seed, epoch, batch index, position).
AugmentDraw augment_draw(std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch,
                         std::size_t position, const AugmentParams& params);

/// Zero-pad by `pad`, crop back to H x W at (dy, dx), optional horizontal flip.
void augment_image(std::span<const std::uint8_t> src, std::span<std::uint8_t> dst,
                   std::size_t channels, std::size_t height, std::size_t width,
                   const AugmentDraw& draw, std::size_t pad);

/// Augments a batch of images in place.
void augment(std::vector<std::uint8_t>& batch, std::size_t count, std::size_t channels,
             std::size_t height, std::size_t width, std::uint64_t seed, std::uint64_t epoch,
             std::uint64_t batch_index, const AugmentParams& params = {});

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Stratified split; each class contributes round(n*f_train), round(n*f_val)
/// and the remainder.
Splits split(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed);
/// Index form of split().
std::array<std::vector<std::size_t>, 3> split_indices(const Dataset& ds,
                                                      std::array<double, 3> fractions,
                                                      std::uint64_t seed);

/// (x / 255 - 0.5) / 0.25 for the given images.
ad::Tensor to_input(const Dataset& ds, std::span<const std::size_t> indices);
ad::Tensor to_input(std::span<const std::uint8_t> images, std::size_t count, std::size_t channels,
                    std::size_t height, std::size_t width);

}  // namespace tmb::train
