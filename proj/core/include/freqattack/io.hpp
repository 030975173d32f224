#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "freqattack/ndarray.hpp"

namespace freqattack {

/// N×C×H×W pixels in [0,1] plus optional labels (one per image when present).
template <typename Real>
struct ImageBatch {
  NdArray<Real> data;
  std::vector<std::size_t> labels;

  std::size_t count() const { return data.rank() == 0 ? 0 : data.extent(0); }
  bool labelled() const { return !labels.empty(); }

  /// Checks rank, pixel range and label count. Throws MalformedRecord.
  void validate(std::size_t class_count) const;

  ImageBatch slice(std::size_t first, std::size_t n) const;
  ImageBatch gather(std::span<const std::size_t> indices) const;

  template <typename Other>
  ImageBatch<Other> cast() const {
    return {data.template cast<Other>(), labels};
  }
};

enum class Split { train, test };

enum class DatasetSource { cifar10_binary, image_directory };

struct DatasetHandle {
  DatasetSource source = DatasetSource::cifar10_binary;
  std::filesystem::path root;
  Split split = Split::test;
  std::size_t class_count = 10;
};

namespace io {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarPixels = kCifarChannels * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr std::size_t kCifarClasses = 10;

/// Reads one CIFAR-10 binary batch file (records of 1 label byte followed by
/// 3072 channel-planar bytes). Pixels are divided by 255. `limit` caps the
/// number of records read from the front of the file.
template <typename Real>
ImageBatch<Real> read_cifar10_file(const std::filesystem::path& file,
                                   std::optional<std::size_t> limit = std::nullopt);

/// train: data_batch_1.bin … data_batch_5.bin in order; test: test_batch.bin.
/// Throws IoFailure naming the first missing file.
template <typename Real>
ImageBatch<Real> load_cifar10(const std::filesystem::path& dir, Split split,
                              std::optional<std::size_t> limit = std::nullopt);

template <typename Real>
ImageBatch<Real> load_dataset(const DatasetHandle& handle,
                              std::optional<std::size_t> limit = std::nullopt);

/// Writes one C×H×W image (C = 1 or 3) as an 8-bit PNG, quantising each value
/// v to floor(v·255 + 0.5) after clamping to [0,1].
template <typename Real>
void save_png(const NdArray<Real>& image, const std::filesystem::path& path);

/// Reads an 8-bit grey or RGB PNG (alpha dropped) as C×H×W in [0,1].
template <typename Real>
NdArray<Real> load_png(const std::filesystem::path& path);

/// Every PNG in `dir` (sorted by file name) stacked into a batch; all images
/// must share one shape.
template <typename Real>
ImageBatch<Real> load_image_directory(const std::filesystem::path& dir);

/// clip(|x_adv − x| · 25, 0, 1).
template <typename Real>
NdArray<Real> visualize_perturbation(const NdArray<Real>& x, const NdArray<Real>& x_adv);

inline constexpr double kPerturbationGain = 25.0;

}  // namespace io
}  // namespace freqattack
