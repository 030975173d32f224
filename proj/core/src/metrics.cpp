#include "freqattack/metrics.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "freqattack/wavelet.hpp"

namespace freqattack::metrics {

template <typename Real>
double metric_l2(const NdArray<Real>& x, const NdArray<Real>& x_adv) {
  require_same_shape(x, x_adv, "metric_l2");
  double sum = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = static_cast<double>(x_adv[k]) - static_cast<double>(x[k]);
    sum += d * d;
  }
  return std::sqrt(sum);
}

template <typename Real>
double metric_linf(const NdArray<Real>& x, const NdArray<Real>& x_adv) {
  require_same_shape(x, x_adv, "metric_linf");
  double best = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    best = std::max(best, std::abs(static_cast<double>(x_adv[k]) - static_cast<double>(x[k])));
  }
  return best;
}

template <typename Real>
double metric_lf(const NdArray<Real>& x, const NdArray<Real>& x_adv) {
  require_same_shape(x, x_adv, "metric_lf");
  // φ is linear, so φ(x) − φ(x_adv) = φ(x − x_adv); projecting the difference
  // in double keeps the result symmetric and below the ℓ2 distance.
  NdArray<double> delta(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    delta[k] = static_cast<double>(x[k]) - static_cast<double>(x_adv[k]);
  }
  const NdArray<double> low = wavelet::reconstruct_low(delta);
  double sum = 0.0;
  for (double v : low.data()) sum += v * v;
  return std::sqrt(sum);
}

template <typename Real>
std::vector<ExampleMetrics> measure_batch(const NdArray<Real>& x, const NdArray<Real>& x_adv) {
  require_same_shape(x, x_adv, "measure_batch");
  if (x.rank() != 4) fail(ErrorKind::ShapeMismatch, "measure_batch expects N×C×H×W");
  const Shape item(x.shape().begin() + 1, x.shape().end());
  std::vector<ExampleMetrics> out;
  for (std::size_t i = 0; i < x.extent(0); ++i) {
    const NdArray<Real> a(item, std::vector<Real>(x.slab(i).begin(), x.slab(i).end()));
    const NdArray<Real> b(item, std::vector<Real>(x_adv.slab(i).begin(), x_adv.slab(i).end()));
    out.push_back({false, metric_l2(a, b), metric_linf(a, b), metric_lf(a, b)});
  }
  return out;
}

MetricsSummary summarize(std::span<const ExampleMetrics> examples) {
  if (examples.empty()) fail(ErrorKind::EmptyInput, "cannot summarize zero examples");
  MetricsSummary s;
  s.n = examples.size();
  std::size_t successes = 0;
  for (const ExampleMetrics& e : examples) {
    successes += e.success ? 1 : 0;
    s.mean_l2 += e.l2;
    s.mean_linf += e.linf;
    s.mean_lf += e.lf;
  }
  const auto n = static_cast<double>(s.n);
  s.asr = static_cast<double>(successes) / n;
  s.mean_l2 /= n;
  s.mean_linf /= n;
  s.mean_lf /= n;
  return s;
}

std::string format_real(double value) {
  char buffer[64];
  const auto result = std::to_chars(buffer, buffer + sizeof buffer, value);
  return std::string(buffer, result.ptr);
}

std::string to_key_value(const MetricsSummary& s) {
  std::ostringstream out;
  out << "n=" << s.n << "\n"
      << "asr=" << format_real(s.asr) << "\n"
      << "mean_l2=" << format_real(s.mean_l2) << "\n"
      << "mean_linf=" << format_real(s.mean_linf) << "\n"
      << "mean_lf=" << format_real(s.mean_lf) << "\n";
  return out.str();
}

std::string to_csv(const MetricsSummary& s) {
  std::ostringstream out;
  out << "n,asr,mean_l2,mean_linf,mean_lf\n"
      << s.n << "," << format_real(s.asr) << "," << format_real(s.mean_l2) << ","
      << format_real(s.mean_linf) << "," << format_real(s.mean_lf) << "\n";
  return out.str();
}

MetricsSummary parse_key_value(const std::string& text) {
  std::map<std::string, std::string> fields;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::MalformedRecord, "summary line without '=': " + line);
    fields[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto number = [&](const std::string& key) {
    const auto it = fields.find(key);
    if (it == fields.end()) fail(ErrorKind::MalformedRecord, "summary lacks " + key);
    double v = 0.0;
    const auto r = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (r.ec != std::errc{}) fail(ErrorKind::MalformedRecord, "bad value for " + key);
    return v;
  };
  MetricsSummary s;
  s.n = static_cast<std::size_t>(number("n"));
  s.asr = number("asr");
  s.mean_l2 = number("mean_l2");
  s.mean_linf = number("mean_linf");
  s.mean_lf = number("mean_lf");
  return s;
}

#define FREQATTACK_INSTANTIATE_METRICS(Real)                                                   \
  template double metric_l2<Real>(const NdArray<Real>&, const NdArray<Real>&);                 \
  template double metric_linf<Real>(const NdArray<Real>&, const NdArray<Real>&);               \
  template double metric_lf<Real>(const NdArray<Real>&, const NdArray<Real>&);                 \
  template std::vector<ExampleMetrics> measure_batch<Real>(const NdArray<Real>&, const NdArray<Real>&);

FREQATTACK_INSTANTIATE_METRICS(float)
FREQATTACK_INSTANTIATE_METRICS(double)

}  // namespace freqattack::metrics
