#include "freqattack/attack.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

#include "freqattack/optim.hpp"
#include "freqattack/wavelet.hpp"

namespace freqattack {

void AttackConfig::validate(std::size_t batch_size) const {
  if (iterations < 1) fail(ErrorKind::InvalidConfig, "iterations must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    fail(ErrorKind::InvalidConfig, "learning rate must be finite and >= 0");
  }
  if (!(margin >= 0.0)) fail(ErrorKind::InvalidConfig, "margin must be >= 0");
  if (!(lambda >= 0.0)) fail(ErrorKind::InvalidConfig, "lambda must be >= 0");
  if (!(reparam_clamp > 0.0 && reparam_clamp < 0.5)) {
    fail(ErrorKind::InvalidConfig, "reparameterisation clamp must lie in (0, 0.5)");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail(ErrorKind::InvalidConfig, "Adam betas must lie in [0, 1)");
  }
  if (threads < 1) fail(ErrorKind::InvalidConfig, "threads must be >= 1");
  if (batch_size < 2) {
    fail(ErrorKind::BatchTooSmall, "the attack needs at least 2 examples per batch, got " +
                                       std::to_string(batch_size));
  }
  if (mode == AttackMode::targeted) {
    if (targets.size() != batch_size) {
      fail(ErrorKind::InvalidConfig, "targeted mode needs one target per example");
    }
    for (std::size_t i = 0; i < batch_size; ++i) {
      if (targets[i] >= batch_size) fail(ErrorKind::InvalidConfig, "target index out of range");
      if (targets[i] == i) fail(ErrorKind::TargetIsSelf, "example " + std::to_string(i) + " targets itself");
    }
  }
}

template <typename Real>
metrics::MetricsSummary AttackReport<Real>::summary() const {
  std::vector<metrics::ExampleMetrics> m;
  for (const ExampleResult& e : examples) m.push_back(e.metrics);
  return metrics::summarize(m);
}

namespace {

template <typename Real>
void finish_rates(AttackReport<Real>& report) {
  std::size_t successes = 0, clean = 0;
  for (const ExampleResult& e : report.examples) {
    successes += e.success ? 1 : 0;
    clean += e.clean_prediction == e.label ? 1 : 0;
  }
  const auto n = static_cast<double>(std::max<std::size_t>(report.examples.size(), 1));
  report.asr = static_cast<double>(successes) / n;
  report.clean_accuracy = static_cast<double>(clean) / n;
}

}  // namespace

template <typename Real>
AttackReport<Real> merge_reports(std::vector<AttackReport<Real>> parts) {
  if (parts.empty()) fail(ErrorKind::EmptyInput, "no reports to merge");
  AttackReport<Real> out;
  out.metadata = parts.front().metadata;
  Shape shape = parts.front().adversarial.shape();
  shape.at(0) = 0;
  for (const auto& p : parts) shape[0] += p.adversarial.extent(0);
  out.adversarial = NdArray<Real>(shape);
  std::size_t offset = 0;
  for (auto& p : parts) {
    std::copy(p.adversarial.raw(), p.adversarial.raw() + p.adversarial.size(), out.adversarial.raw() + offset);
    offset += p.adversarial.size();
    out.examples.insert(out.examples.end(), p.examples.begin(), p.examples.end());
  }
  finish_rates(out);
  return out;
}

template <typename Real>
Real cosine_sim(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) fail(ErrorKind::ShapeMismatch, "cosine_sim of vectors of different length");
  Real dot{0}, na{0}, nb{0};
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (!(na > Real{0}) || !(nb > Real{0})) fail(ErrorKind::ZeroVector, "cosine_sim of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), Real{-1}, Real{1});
}

template <typename Real>
std::size_t select_dissimilar(std::span<const Real> row, std::size_t i) {
  if (row.size() < 2) fail(ErrorKind::BatchTooSmall, "dissimilar selection needs at least 2 examples");
  if (i >= row.size()) fail(ErrorKind::ShapeMismatch, "row index out of range");
  std::size_t best = i == 0 ? 1 : 0;
  for (std::size_t j = best + 1; j < row.size(); ++j) {
    if (j != i && row[j] < row[best]) best = j;
  }
  return best;
}

SpwWeights spw_weights_untargeted(double s_ii, double s_min, double margin) {
  return {std::max(s_ii - margin, 0.0), std::max(1.0 + margin - s_min, 0.0)};
}

SpwWeights spw_weights_targeted(double s_ii, double s_it, double margin) {
  return {std::max(s_ii - margin, 0.0), std::max(1.0 + margin - s_it, 0.0)};
}

template <typename Real>
NodeId ssa_loss(Graph<Real>& graph, NodeId adv_embedding, NodeId benign_unit_t, std::size_t i,
                std::optional<std::size_t> target, double margin, SsaTerms* terms) {
  const std::size_t n = graph.value(benign_unit_t).extent(1);
  if (n < 2) fail(ErrorKind::BatchTooSmall, "similarity row needs at least 2 benign examples");
  if (i >= n) fail(ErrorKind::ShapeMismatch, "example index out of range");
  if (target && *target == i) fail(ErrorKind::TargetIsSelf, "example " + std::to_string(i) + " targets itself");
  if (target && *target >= n) fail(ErrorKind::ShapeMismatch, "target index out of range");

  const NodeId sim = graph.matmul(graph.l2_normalize(adv_embedding), benign_unit_t);
  graph.forward_pending();
  std::vector<Real> row(graph.value(sim).raw(), graph.value(sim).raw() + n);
  for (Real& s : row) s = std::clamp(s, Real{-1}, Real{1});

  SsaTerms local;
  local.s_ii = static_cast<double>(row[i]);
  if (target) {
    local.partner = *target;
    local.s_target = static_cast<double>(row[*target]);
    local.weights = spw_weights_targeted(local.s_ii, local.s_target, margin);
  } else {
    local.partner = select_dissimilar<Real>(row, i);
    local.s_target = static_cast<double>(row[local.partner]);
    local.weights = spw_weights_untargeted(local.s_ii, local.s_target, margin);
  }

  // α and β enter as constant coefficients, so no gradient flows through them.
  NdArray<Real> coeff({n, 1});
  coeff[i] = static_cast<Real>(local.weights.alpha);
  coeff[local.partner] = static_cast<Real>(-local.weights.beta);
  const NodeId combined = graph.matmul(sim, graph.constant(std::move(coeff)));
  const NodeId loss = graph.reduce_sum(graph.relu(combined));
  graph.forward_pending();
  local.pre_hinge = static_cast<double>(graph.value(combined).item());
  if (terms != nullptr) *terms = local;
  return loss;
}

template <typename Real>
NodeId ssah_loss(Graph<Real>& graph, const NdArray<Real>& low_benign, NodeId adv_image, NodeId ssa,
                 double lambda) {
  if (!(lambda >= 0.0)) fail(ErrorKind::InvalidConfig, "lambda must be >= 0");
  if (lambda == 0.0) return ssa;
  const NodeId diff = graph.sub(graph.dwt_low_reconstruct(adv_image), graph.constant(low_benign));
  const NodeId constraint = graph.reduce_sum(graph.abs(diff));
  return graph.add(graph.scale(constraint, static_cast<Real>(lambda)), ssa);
}

template <typename Real>
NdArray<Real> to_tanh_space(const NdArray<Real>& x, double clamp) {
  const auto lo = static_cast<Real>(clamp);
  const Real hi = Real{1} - lo;
  NdArray<Real> r(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    r[k] = std::atanh(Real{2} * std::clamp(x[k], lo, hi) - Real{1});
  }
  return r;
}

template <typename Real>
NdArray<Real> from_tanh_space(const NdArray<Real>& r) {
  // Same arithmetic as the graph's scale(tanh(r), 0.5, 0.5) so that the
  // returned images equal the ones the optimiser evaluated.
  NdArray<Real> x(r.shape());
  for (std::size_t k = 0; k < r.size(); ++k) x[k] = Real(0.5) * std::tanh(r[k]) + Real(0.5);
  return x;
}

std::vector<std::size_t> random_targets(std::span<const std::size_t> labels, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (n < 2) fail(ErrorKind::BatchTooSmall, "targets need at least 2 examples");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> targets(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> candidates;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && labels[j] != labels[i]) candidates.push_back(j);
    }
    if (candidates.empty()) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) candidates.push_back(j);
      }
    }
    targets[i] = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
  }
  return targets;
}

template <typename Real>
NdArray<Real> normalize_rows(const NdArray<Real>& embeddings) {
  if (embeddings.rank() != 2) fail(ErrorKind::ShapeMismatch, "normalize_rows expects a matrix");
  Graph<Real> g;
  const NodeId out = g.l2_normalize(g.constant(embeddings));
  g.forward({});
  return g.value(out);
}

namespace {

template <typename Real>
NdArray<Real> transpose(const NdArray<Real>& m) {
  const std::size_t rows = m.extent(0), cols = m.extent(1);
  NdArray<Real> t({cols, rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = m[r * cols + c];
  }
  return t;
}

// Runs body(i) for every i in [0, n) on up to `threads` workers. The first
// exception thrown by any worker is rethrown after all workers stop.
template <typename Body>
void parallel_for(std::size_t n, std::size_t threads, Body body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n && !stop; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          stop = true;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

template <typename Real>
NdArray<Real> item(const NdArray<Real>& batch, std::size_t i) {
  return slice_batch(batch, i, 1);
}

// Fills predictions, final similarities, success flags and metrics once the
// adversarial batch is known.
template <typename Real>
void complete_report(const ClassifierModel<Real>& model, const ImageBatch<Real>& batch,
                     const NdArray<Real>& benign_unit, std::optional<std::span<const std::size_t>> targets,
                     AttackReport<Real>& report) {
  const std::size_t n = batch.count();
  const auto clean = model.predict(batch.data);
  const NdArray<Real> adv_unit = normalize_rows(model.embed(report.adversarial));
  const auto adv_pred = argmax_rows(model.logits(report.adversarial));
  auto measured = metrics::measure_batch(batch.data, report.adversarial);
  const std::size_t d = benign_unit.extent(1);
  report.examples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ExampleResult& e = report.examples[i];
    e.label = batch.labels[i];
    e.clean_prediction = clean[i];
    e.adversarial_prediction = adv_pred[i];
    std::vector<Real> row(n);
    for (std::size_t j = 0; j < n; ++j) {
      Real dot{0};
      for (std::size_t k = 0; k < d; ++k) dot += adv_unit[i * d + k] * benign_unit[j * d + k];
      row[j] = std::clamp(dot, Real{-1}, Real{1});
    }
    e.final_s_ii = static_cast<double>(row[i]);
    if (targets) {
      e.target = (*targets)[i];
      e.final_s_target = static_cast<double>(row[*e.target]);
      e.success = adv_pred[i] == batch.labels[*e.target];
    } else {
      if (n >= 2) e.final_s_target = static_cast<double>(row[select_dissimilar<Real>(row, i)]);
      e.success = adv_pred[i] != batch.labels[i];
    }
    e.metrics = measured[i];
    e.metrics.success = e.success;
  }
  finish_rates(report);
}

template <typename Real>
void check_batch(const ImageBatch<Real>& batch) {
  if (batch.count() == 0) fail(ErrorKind::EmptyInput, "attack batch is empty");
  if (batch.labels.size() != batch.count()) fail(ErrorKind::InvalidConfig, "attack batch needs labels");
  for (Real v : batch.data.data()) {
    if (!(v >= Real{0} && v <= Real{1})) fail(ErrorKind::MalformedRecord, "attack input outside [0,1]");
  }
}

}  // namespace

template <typename Real>
AttackReport<Real> run_ssah(const ClassifierModel<Real>& model, const ImageBatch<Real>& batch,
                            const AttackConfig& config) {
  check_batch(batch);
  const std::size_t n = batch.count();
  config.validate(n);
  const double lambda = config.effective_lambda();
  const bool targeted = config.mode == AttackMode::targeted;

  const NdArray<Real> benign_unit = normalize_rows(model.embed(batch.data));
  const NdArray<Real> benign_unit_t = transpose(benign_unit);

  AttackReport<Real> report;
  report.adversarial = NdArray<Real>(batch.data.shape());
  report.examples.resize(n);

  parallel_for(n, config.threads, [&](std::size_t i) {
    const NdArray<Real> x = item(batch.data, i);
    const NdArray<Real> low_benign = lambda > 0.0 ? wavelet::reconstruct_low(x) : NdArray<Real>();
    const std::optional<std::size_t> target =
        targeted ? std::optional<std::size_t>(config.targets[i]) : std::nullopt;
    NdArray<Real> r = to_tanh_space(x, config.reparam_clamp);
    AdamState<Real> adam;
    adam.beta1 = static_cast<Real>(config.adam_beta1);
    adam.beta2 = static_cast<Real>(config.adam_beta2);
    adam.epsilon = static_cast<Real>(config.adam_epsilon);
    ExampleResult& result = report.examples[i];

    for (std::size_t k = 0; k < config.iterations; ++k) {
      Graph<Real> g;
      const NodeId r_node = g.input("r");
      const NodeId image = g.scale(g.tanh(r_node), Real(0.5), Real(0.5));
      const NodeId embedding = model.build_encoder(g, image, ParameterMode::frozen);
      const NodeId benign = g.constant(benign_unit_t);
      g.forward({{"r", r}});
      SsaTerms terms;
      const NodeId ssa = ssa_loss(g, embedding, benign, i, target, config.margin, &terms);
      const NodeId loss = ssah_loss(g, low_benign, image, ssa, lambda);
      g.forward_pending();
      if (k == 0) {
        result.initial_s_ii = terms.s_ii;
        result.initial_s_target = terms.s_target;
      }
      result.iterations_used = k + 1;

      auto grads = g.backward(loss, NdArray<Real>::scalar(Real{1}));
      const NdArray<Real>& grad = grads.at("r");
      const bool zero = std::all_of(grad.data().begin(), grad.data().end(), [](Real v) { return v == Real{0}; });
      // An identically zero gradient leaves the iterate untouched (Adam's
      // momentum would otherwise keep moving it).
      if (zero || config.learning_rate == 0.0) continue;
      adam_step(adam, r, grad, static_cast<Real>(config.learning_rate));
      ++result.updates_applied;
    }
    const NdArray<Real> x_adv = from_tanh_space(r);
    std::copy(x_adv.raw(), x_adv.raw() + x_adv.size(), report.adversarial.raw() + i * x_adv.size());
  });

  std::optional<std::span<const std::size_t>> targets;
  if (targeted) targets = std::span<const std::size_t>(config.targets);
  complete_report(model, batch, benign_unit, targets, report);

  report.metadata = {
      {"attack", config.constraint == Constraint::ssah ? "ssah" : "ssa"},
      {"mode", targeted ? "targeted" : "untargeted"},
      {"adam_beta1", metrics::format_real(config.adam_beta1)},
      {"adam_beta2", metrics::format_real(config.adam_beta2)},
      {"adam_epsilon", metrics::format_real(config.adam_epsilon)},
      {"success_convention", targeted ? "prediction equals the target's label"
                                      : "prediction differs from the label; clean errors count as successes"},
      {"l2_convention", "mean of per-image norms"},
      {"linf_convention", "mean of per-image maxima"},
  };
  return report;
}

void PgdConfig::validate() const {
  if (!(epsilon > 0.0)) fail(ErrorKind::InvalidConfig, "PGD epsilon must be > 0");
  if (!(step >= 0.0)) fail(ErrorKind::InvalidConfig, "PGD step must be >= 0");
}

template <typename Real>
AttackReport<Real> run_pgd_baseline(const ClassifierModel<Real>& model, const ImageBatch<Real>& batch,
                                    const PgdConfig& config) {
  check_batch(batch);
  config.validate();
  const auto eps = static_cast<Real>(config.epsilon);
  const auto step = static_cast<Real>(config.step);
  const NdArray<Real>& x0 = batch.data;
  NdArray<Real> x = x0;

  for (std::size_t k = 0; k < config.iterations; ++k) {
    Graph<Real> g;
    const NodeId input = g.input("x");
    const NodeId embedding = model.build_encoder(g, input, ParameterMode::frozen);
    const NodeId loss = g.softmax_cross_entropy(model.build_head(g, embedding, ParameterMode::frozen), batch.labels);
    g.forward({{"x", x}});
    const auto grads = g.backward(loss, NdArray<Real>::scalar(Real{1}));
    const NdArray<Real>& grad = grads.at("x");
    for (std::size_t p = 0; p < x.size(); ++p) {
      const Real sign = grad[p] > Real{0} ? Real{1} : (grad[p] < Real{0} ? Real{-1} : Real{0});
      Real v = x[p] + step * sign;
      v = std::clamp(v, std::max(x0[p] - eps, Real{0}), std::min(x0[p] + eps, Real{1}));
      // Rounding in x0 ± ε can leave |v − x0| one ulp above ε.
      while (v - x0[p] > eps) v = std::nextafter(v, x0[p]);
      while (x0[p] - v > eps) v = std::nextafter(v, x0[p]);
      x[p] = v;
    }
  }

  AttackReport<Real> report;
  report.adversarial = std::move(x);
  const NdArray<Real> benign_unit = normalize_rows(model.embed(batch.data));
  complete_report<Real>(model, batch, benign_unit, std::nullopt, report);
  for (ExampleResult& e : report.examples) e.iterations_used = config.iterations;
  report.metadata = {
      {"attack", "pgd"},
      {"mode", "untargeted"},
      {"epsilon", metrics::format_real(config.epsilon)},
      {"step", metrics::format_real(config.step)},
      {"success_convention", "prediction differs from the label; clean errors count as successes"},
      {"l2_convention", "mean of per-image norms"},
      {"linf_convention", "mean of per-image maxima"},
  };
  return report;
}

#define FREQATTACK_INSTANTIATE_ATTACK(Real)                                                                   \
  template struct AttackReport<Real>;                                                                        \
  template AttackReport<Real> merge_reports<Real>(std::vector<AttackReport<Real>>);                          \
  template Real cosine_sim<Real>(std::span<const Real>, std::span<const Real>);                              \
  template std::size_t select_dissimilar<Real>(std::span<const Real>, std::size_t);                          \
  template NodeId ssa_loss<Real>(Graph<Real>&, NodeId, NodeId, std::size_t, std::optional<std::size_t>,     \
                                 double, SsaTerms*);                                                         \
  template NodeId ssah_loss<Real>(Graph<Real>&, const NdArray<Real>&, NodeId, NodeId, double);               \
  template NdArray<Real> to_tanh_space<Real>(const NdArray<Real>&, double);                                  \
  template NdArray<Real> from_tanh_space<Real>(const NdArray<Real>&);                                        \
  template NdArray<Real> normalize_rows<Real>(const NdArray<Real>&);                                         \
  template AttackReport<Real> run_ssah<Real>(const ClassifierModel<Real>&, const ImageBatch<Real>&,          \
                                             const AttackConfig&);                                           \
  template AttackReport<Real> run_pgd_baseline<Real>(const ClassifierModel<Real>&, const ImageBatch<Real>&,  \
                                                     const PgdConfig&);

FREQATTACK_INSTANTIATE_ATTACK(float)
FREQATTACK_INSTANTIATE_ATTACK(double)

}  // namespace freqattack
