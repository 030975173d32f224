#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "freqattack/ndarray.hpp"

namespace freqattack::metrics {

// Per-image distances between x and x_adv (both C×H×W, or any equal shapes for
// l2/linf). Accumulation is carried out in double.
template <typename Real>
double metric_l2(const NdArray<Real>& x, const NdArray<Real>& x_adv);

template <typename Real>
double metric_linf(const NdArray<Real>& x, const NdArray<Real>& x_adv);

/// ‖φ(x) − φ(x_adv)‖₂ with φ the low-frequency reconstruction. Throws OddExtent.
template <typename Real>
double metric_lf(const NdArray<Real>& x, const NdArray<Real>& x_adv);

struct ExampleMetrics {
  bool success = false;
  double l2 = 0.0;
  double linf = 0.0;
  double lf = 0.0;
};

/// Per-image metrics for every pair in two N×C×H×W batches. `success` is left false.
template <typename Real>
std::vector<ExampleMetrics> measure_batch(const NdArray<Real>& x, const NdArray<Real>& x_adv);

/// Dataset ℓ∞ is the mean of per-image maxima; ℓ2 and LF are means of
/// per-image norms.
struct MetricsSummary {
  std::size_t n = 0;
  double asr = 0.0;
  double mean_l2 = 0.0;
  double mean_linf = 0.0;
  double mean_lf = 0.0;
};

/// Throws EmptyInput on an empty list.
MetricsSummary summarize(std::span<const ExampleMetrics> examples);

/// "key=value" lines: n, asr, mean_l2, mean_linf, mean_lf.
std::string to_key_value(const MetricsSummary& summary);
/// Header row "n,asr,mean_l2,mean_linf,mean_lf" plus one data row.
std::string to_csv(const MetricsSummary& summary);
/// Parses the output of to_key_value. Throws MalformedRecord.
MetricsSummary parse_key_value(const std::string& text);

/// Shortest decimal text that reads back to the same double.
std::string format_real(double value);

}  // namespace freqattack::metrics
