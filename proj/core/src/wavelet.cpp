#include "freqattack/wavelet.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <shared_mutex>

#include "eigen_maps.hpp"

namespace freqattack::wavelet {

namespace {

using detail::as_matrix;
using detail::RowMatrix;

void require_even(std::size_t extent, const char* what) {
  if (extent < 2 || extent % 2 != 0) {
    fail(ErrorKind::OddExtent, std::string(what) + " extent " + std::to_string(extent) +
                                   " is not an even number >= 2");
  }
}

template <typename Real>
struct PlaneFilters {
  std::shared_ptr<const WaveletFilters<Real>> rows;
  std::shared_ptr<const WaveletFilters<Real>> cols;
};

template <typename Real>
PlaneFilters<Real> plane_filters(std::size_t height, std::size_t width) {
  require_even(height, "height");
  require_even(width, "width");
  return {haar_filters<Real>(height), haar_filters<Real>(width)};
}

template <typename Real>
auto lowpass(const WaveletFilters<Real>& f) {
  return as_matrix(f.lowpass.raw(), f.extent / 2, f.extent);
}

template <typename Real>
auto highpass(const WaveletFilters<Real>& f) {
  return as_matrix(f.highpass.raw(), f.extent / 2, f.extent);
}

}  // namespace

template <typename Real>
WaveletFilters<Real> build_haar(std::size_t extent) {
  require_even(extent, "filter");
  const Real c = Real{1} / std::sqrt(Real{2});
  WaveletFilters<Real> f{extent, NdArray<Real>({extent / 2, extent}),
                         NdArray<Real>({extent / 2, extent})};
  for (std::size_t k = 0; k < extent / 2; ++k) {
    f.lowpass[k * extent + 2 * k] = c;
    f.lowpass[k * extent + 2 * k + 1] = c;
    f.highpass[k * extent + 2 * k] = c;
    f.highpass[k * extent + 2 * k + 1] = -c;
  }
  return f;
}

template <typename Real>
std::shared_ptr<const WaveletFilters<Real>> haar_filters(std::size_t extent) {
  static std::shared_mutex mutex;
  static std::map<std::size_t, std::shared_ptr<const WaveletFilters<Real>>> cache;
  {
    std::shared_lock lock(mutex);
    if (auto it = cache.find(extent); it != cache.end()) return it->second;
  }
  auto built = std::make_shared<const WaveletFilters<Real>>(build_haar<Real>(extent));
  std::unique_lock lock(mutex);
  return cache.try_emplace(extent, std::move(built)).first->second;
}

template <typename Real>
DwtBands<Real> dwt2(const NdArray<Real>& plane) {
  if (plane.rank() != 2) fail(ErrorKind::ShapeMismatch, "dwt2 expects an H×W plane");
  const std::size_t h = plane.extent(0), w = plane.extent(1);
  const auto f = plane_filters<Real>(h, w);
  const auto x = as_matrix(plane.raw(), h, w);
  const Shape band_shape{h / 2, w / 2};
  DwtBands<Real> bands{NdArray<Real>(band_shape), NdArray<Real>(band_shape),
                       NdArray<Real>(band_shape), NdArray<Real>(band_shape)};
  const RowMatrix<Real> low_rows = lowpass(*f.rows) * x;
  const RowMatrix<Real> high_rows = highpass(*f.rows) * x;
  as_matrix(bands.ll.raw(), h / 2, w / 2).noalias() = low_rows * lowpass(*f.cols).transpose();
  as_matrix(bands.lh.raw(), h / 2, w / 2).noalias() = high_rows * lowpass(*f.cols).transpose();
  as_matrix(bands.hl.raw(), h / 2, w / 2).noalias() = low_rows * highpass(*f.cols).transpose();
  as_matrix(bands.hh.raw(), h / 2, w / 2).noalias() = high_rows * highpass(*f.cols).transpose();
  return bands;
}

template <typename Real>
NdArray<Real> idwt2(const DwtBands<Real>& bands) {
  const Shape& s = bands.ll.shape();
  if (s.size() != 2 || bands.lh.shape() != s || bands.hl.shape() != s || bands.hh.shape() != s) {
    fail(ErrorKind::ShapeMismatch, "idwt2 bands must share one 2-D shape");
  }
  const std::size_t h = 2 * s[0], w = 2 * s[1];
  const auto f = plane_filters<Real>(h, w);
  const auto band = [&](const NdArray<Real>& b) { return as_matrix(b.raw(), s[0], s[1]); };
  NdArray<Real> out({h, w});
  const auto lr = lowpass(*f.rows), hr = highpass(*f.rows);
  const auto lc = lowpass(*f.cols), hc = highpass(*f.cols);
  const RowMatrix<Real> from_low_rows = band(bands.ll) * lc + band(bands.hl) * hc;
  const RowMatrix<Real> from_high_rows = band(bands.lh) * lc + band(bands.hh) * hc;
  as_matrix(out.raw(), h, w).noalias() =
      lr.transpose() * from_low_rows + hr.transpose() * from_high_rows;
  return out;
}

template <typename Real>
NdArray<Real> reconstruct_low(const NdArray<Real>& image) {
  if (image.rank() < 2) fail(ErrorKind::ShapeMismatch, "reconstruct_low needs rank >= 2");
  const std::size_t h = image.extent(image.rank() - 2), w = image.extent(image.rank() - 1);
  const auto f = plane_filters<Real>(h, w);
  const auto lr = lowpass(*f.rows);
  const auto lc = lowpass(*f.cols);
  NdArray<Real> out(image.shape());
  const std::size_t planes = image.size() / (h * w);
  RowMatrix<Real> ll(h / 2, w / 2);
  for (std::size_t p = 0; p < planes; ++p) {
    const auto x = as_matrix(image.raw() + p * h * w, h, w);
    ll.noalias() = (lr * x) * lc.transpose();
    as_matrix(out.raw() + p * h * w, h, w).noalias() = (lr.transpose() * ll) * lc;
  }
  return out;
}

template <typename Real>
NdArray<Real> phi_backward(const NdArray<Real>& upstream) {
  return reconstruct_low(upstream);
}

template <typename Real>
Real lf_constraint(const NdArray<Real>& x, const NdArray<Real>& y) {
  require_same_shape(x, y, "lf_constraint");
  const NdArray<Real> lx = reconstruct_low(x);
  const NdArray<Real> ly = reconstruct_low(y);
  Real total{0};
  for (std::size_t i = 0; i < lx.size(); ++i) total += std::abs(lx[i] - ly[i]);
  return total;
}

#define FREQATTACK_INSTANTIATE_WAVELET(Real)                                              \
  template WaveletFilters<Real> build_haar<Real>(std::size_t);                            \
  template std::shared_ptr<const WaveletFilters<Real>> haar_filters<Real>(std::size_t);   \
  template DwtBands<Real> dwt2<Real>(const NdArray<Real>&);                               \
  template NdArray<Real> idwt2<Real>(const DwtBands<Real>&);                              \
  template NdArray<Real> reconstruct_low<Real>(const NdArray<Real>&);                     \
  template NdArray<Real> phi_backward<Real>(const NdArray<Real>&);                        \
  template Real lf_constraint<Real>(const NdArray<Real>&, const NdArray<Real>&);

FREQATTACK_INSTANTIATE_WAVELET(float)
FREQATTACK_INSTANTIATE_WAVELET(double)

}  // namespace freqattack::wavelet
