#include "freqattack/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace freqattack {

template <typename Real>
void ImageBatch<Real>::validate(std::size_t class_count) const {
  if (data.rank() != 4) fail(ErrorKind::MalformedRecord, "image batch must be N×C×H×W");
  for (Real v : data.data()) {
    if (!(v >= Real{0} && v <= Real{1})) fail(ErrorKind::MalformedRecord, "pixel outside [0,1]");
  }
  if (!labels.empty()) {
    if (labels.size() != count()) fail(ErrorKind::MalformedRecord, "label count differs from image count");
    for (std::size_t y : labels) {
      if (y >= class_count) fail(ErrorKind::MalformedRecord, "label " + std::to_string(y) + " out of range");
    }
  }
}

template <typename Real>
ImageBatch<Real> ImageBatch<Real>::slice(std::size_t first, std::size_t n) const {
  ImageBatch out{slice_batch(data, first, n), {}};
  if (!labels.empty()) out.labels.assign(labels.begin() + first, labels.begin() + first + n);
  return out;
}

template <typename Real>
ImageBatch<Real> ImageBatch<Real>::gather(std::span<const std::size_t> indices) const {
  ImageBatch out{gather_batch(data, indices), {}};
  if (!labels.empty()) {
    for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  }
  return out;
}

namespace io {

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::IoFailure, "cannot open " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::IoFailure, "read error on " + file.string());
  return bytes;
}

template <typename Real>
ImageBatch<Real> concat(std::vector<ImageBatch<Real>> parts) {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.count();
  ImageBatch<Real> out{NdArray<Real>({total, kCifarChannels, kCifarSide, kCifarSide}), {}};
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data.raw(), p.data.raw() + p.data.size(), out.data.raw() + offset);
    offset += p.data.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

template <typename Real>
ImageBatch<Real> read_cifar10_file(const std::filesystem::path& file, std::optional<std::size_t> limit) {
  const std::vector<unsigned char> bytes = read_bytes(file);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    fail(ErrorKind::MalformedRecord, file.string() + " has " + std::to_string(bytes.size()) +
                                         " bytes, not a positive multiple of 3073");
  }
  std::size_t records = bytes.size() / kCifarRecord;
  if (limit) records = std::min(records, *limit);
  ImageBatch<Real> batch{NdArray<Real>({records, kCifarChannels, kCifarSide, kCifarSide}), {}};
  batch.labels.reserve(records);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= kCifarClasses) {
      fail(ErrorKind::MalformedRecord, "record " + std::to_string(r) + " of " + file.string() +
                                           " has label " + std::to_string(rec[0]));
    }
    batch.labels.push_back(rec[0]);
    Real* dst = batch.data.raw() + r * kCifarPixels;
    for (std::size_t k = 0; k < kCifarPixels; ++k) dst[k] = static_cast<Real>(rec[1 + k]) / Real{255};
  }
  return batch;
}

template <typename Real>
ImageBatch<Real> load_cifar10(const std::filesystem::path& dir, Split split, std::optional<std::size_t> limit) {
  std::vector<std::filesystem::path> files;
  if (split == Split::test) {
    files.push_back(dir / "test_batch.bin");
  } else {
    for (int k = 1; k <= 5; ++k) files.push_back(dir / ("data_batch_" + std::to_string(k) + ".bin"));
  }
  for (const auto& f : files) {
    if (!std::filesystem::is_regular_file(f)) fail(ErrorKind::IoFailure, "missing CIFAR-10 file " + f.string());
  }
  std::vector<ImageBatch<Real>> parts;
  std::size_t loaded = 0;
  for (const auto& f : files) {
    if (limit && loaded >= *limit) break;
    std::optional<std::size_t> remaining;
    if (limit) remaining = *limit - loaded;
    parts.push_back(read_cifar10_file<Real>(f, remaining));
    loaded += parts.back().count();
  }
  return concat(std::move(parts));
}

template <typename Real>
ImageBatch<Real> load_dataset(const DatasetHandle& handle, std::optional<std::size_t> limit) {
  ImageBatch<Real> batch;
  if (handle.source == DatasetSource::cifar10_binary) {
    batch = load_cifar10<Real>(handle.root, handle.split, limit);
  } else {
    batch = load_image_directory<Real>(handle.root);
    if (limit && *limit < batch.count()) batch = batch.slice(0, *limit);
  }
  batch.validate(handle.class_count);
  return batch;
}

template <typename Real>
void save_png(const NdArray<Real>& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || (image.extent(0) != 1 && image.extent(0) != 3)) {
    fail(ErrorKind::UnsupportedFormat, "save_png expects a 1×H×W or 3×H×W image, got " +
                                           shape_string(image.shape()));
  }
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  std::vector<png_byte> pixels(c * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) {
        const double v = std::clamp(static_cast<double>(image[(k * h + y) * w + x]), 0.0, 1.0);
        pixels[(y * w + x) * c + k] = static_cast<png_byte>(std::floor(v * 255.0 + 0.5));
      }
    }
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    const std::string message = png.message;
    png_image_free(&png);
    fail(ErrorKind::IoFailure, "cannot write " + path.string() + ": " + message);
  }
}

template <typename Real>
NdArray<Real> load_png(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) fail(ErrorKind::IoFailure, "missing image " + path.string());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    const std::string message = png.message;
    png_image_free(&png);
    fail(ErrorKind::UnsupportedFormat, path.string() + ": " + message);
  }
  const bool colour = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = colour ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t c = colour ? 3 : 1, h = png.height, w = png.width;
  std::vector<png_byte> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    const std::string message = png.message;
    png_image_free(&png);
    fail(ErrorKind::UnsupportedFormat, path.string() + ": " + message);
  }
  NdArray<Real> image({c, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) {
        image[(k * h + y) * w + x] = static_cast<Real>(pixels[(y * w + x) * c + k]) / Real{255};
      }
    }
  }
  return image;
}

template <typename Real>
ImageBatch<Real> load_image_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorKind::IoFailure, "missing directory " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) fail(ErrorKind::EmptyDataset, "no PNG files in " + dir.string());

  std::vector<NdArray<Real>> images;
  for (const auto& f : files) {
    images.push_back(load_png<Real>(f));
    if (images.back().shape() != images.front().shape()) {
      fail(ErrorKind::ShapeMismatch, f.string() + " differs in shape from " + files.front().string());
    }
  }
  Shape shape = images.front().shape();
  shape.insert(shape.begin(), images.size());
  ImageBatch<Real> batch{NdArray<Real>(shape), {}};
  const std::size_t stride = images.front().size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::copy(images[i].raw(), images[i].raw() + stride, batch.data.raw() + i * stride);
  }

  // Optional labels.txt: one integer label per image, in file-name order.
  if (std::ifstream labels(dir / "labels.txt"); labels) {
    std::size_t y = 0;
    while (labels >> y) batch.labels.push_back(y);
    if (batch.labels.size() != batch.count()) {
      fail(ErrorKind::MalformedRecord, "labels.txt has " + std::to_string(batch.labels.size()) +
                                           " entries for " + std::to_string(batch.count()) + " images");
    }
  }
  return batch;
}

template <typename Real>
NdArray<Real> visualize_perturbation(const NdArray<Real>& x, const NdArray<Real>& x_adv) {
  require_same_shape(x, x_adv, "visualize_perturbation");
  NdArray<Real> out(x.shape());
  const auto gain = static_cast<Real>(kPerturbationGain);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::clamp(std::abs(x_adv[i] - x[i]) * gain, Real{0}, Real{1});
  }
  return out;
}

#define FREQATTACK_INSTANTIATE_IO(Real)                                                                    \
  template ImageBatch<Real> read_cifar10_file<Real>(const std::filesystem::path&, std::optional<std::size_t>); \
  template ImageBatch<Real> load_cifar10<Real>(const std::filesystem::path&, Split, std::optional<std::size_t>); \
  template ImageBatch<Real> load_dataset<Real>(const DatasetHandle&, std::optional<std::size_t>);           \
  template void save_png<Real>(const NdArray<Real>&, const std::filesystem::path&);                        \
  template NdArray<Real> load_png<Real>(const std::filesystem::path&);                                     \
  template ImageBatch<Real> load_image_directory<Real>(const std::filesystem::path&);                      \
  template NdArray<Real> visualize_perturbation<Real>(const NdArray<Real>&, const NdArray<Real>&);

FREQATTACK_INSTANTIATE_IO(float)
FREQATTACK_INSTANTIATE_IO(double)

}  // namespace io

template struct ImageBatch<float>;
template struct ImageBatch<double>;

}  // namespace freqattack
