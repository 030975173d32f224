#pragma once

#include <cstddef>
#include <memory>

#include "freqattack/ndarray.hpp"

namespace freqattack::wavelet {

/// Single-level orthogonal Haar analysis matrices for one spatial extent n.
/// Both are (n/2)×n; row k of `lowpass` holds 1/√2 at columns 2k and 2k+1,
/// row k of `highpass` holds 1/√2, −1/√2 there.
template <typename Real>
struct WaveletFilters {
  std::size_t extent = 0;
  NdArray<Real> lowpass;
  NdArray<Real> highpass;
};

template <typename Real>
struct DwtBands {
  NdArray<Real> ll;
  NdArray<Real> lh;
  NdArray<Real> hl;
  NdArray<Real> hh;
};

/// Throws OddExtent unless extent is even and ≥ 2.
template <typename Real>
WaveletFilters<Real> build_haar(std::size_t extent);

/// Shared, lazily built filters for `extent`. Safe for concurrent callers.
template <typename Real>
std::shared_ptr<const WaveletFilters<Real>> haar_filters(std::size_t extent);

// dwt2/idwt2 operate on one H×W plane:
//   ll = L_H x L_Wᵀ, lh = H_H x L_Wᵀ, hl = L_H x H_Wᵀ, hh = H_H x H_Wᵀ
// and the inverse sums the transposed products back.
template <typename Real>
DwtBands<Real> dwt2(const NdArray<Real>& plane);

template <typename Real>
NdArray<Real> idwt2(const DwtBands<Real>& bands);

/// Low-frequency reconstruction Lᵀ(L x Lᵀ)L applied to every plane spanned by
/// the last two axes. Output has the input's shape. Rank must be ≥ 2.
template <typename Real>
NdArray<Real> reconstruct_low(const NdArray<Real>& image);

/// Pullback of reconstruct_low. The map is a symmetric projection, so this is
/// reconstruct_low applied to the upstream gradient.
template <typename Real>
NdArray<Real> phi_backward(const NdArray<Real>& upstream);

/// ℓ1 distance between the low-frequency reconstructions of x and y, summed
/// over every channel and pixel.
template <typename Real>
Real lf_constraint(const NdArray<Real>& x, const NdArray<Real>& y);

}  // namespace freqattack::wavelet
