#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freqattack/graph.hpp"
#include "freqattack/io.hpp"
#include "freqattack/metrics.hpp"
#include "freqattack/model.hpp"
#include "freqattack/ndarray.hpp"

namespace freqattack {

enum class AttackMode { untargeted, targeted };
enum class Constraint { ssa_only, ssah };

struct AttackConfig {
  AttackMode mode = AttackMode::untargeted;
  std::size_t iterations = 150;
  double learning_rate = 1e-3;  // 0 disables the update
  double margin = 0.2;
  double lambda = 0.1;
  Constraint constraint = Constraint::ssah;
  // Targeted mode: in-batch index t of the example whose embedding (and label)
  // example i is pushed towards. One entry per example.
  std::vector<std::size_t> targets;
  double reparam_clamp = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t threads = 1;

  /// Throws InvalidConfig, BatchTooSmall, TargetIsSelf.
  void validate(std::size_t batch_size) const;

  /// λ actually applied: 0 for the SSA-only constraint.
  double effective_lambda() const { return constraint == Constraint::ssa_only ? 0.0 : lambda; }
};

struct ExampleResult {
  std::size_t label = 0;
  std::size_t clean_prediction = 0;
  std::size_t adversarial_prediction = 0;
  std::optional<std::size_t> target;  // in-batch index, targeted mode
  bool success = false;
  double initial_s_ii = 1.0;
  double final_s_ii = 1.0;
  double initial_s_target = 0.0;  // s_it (targeted) or min_{j≠i} s_ij at the start
  double final_s_target = 0.0;    // same quantity at the returned iterate
  std::size_t iterations_used = 0;
  std::size_t updates_applied = 0;  // iterations whose gradient was not identically zero
  metrics::ExampleMetrics metrics;
};

template <typename Real>
struct AttackReport {
  NdArray<Real> adversarial;
  std::vector<ExampleResult> examples;
  double asr = 0.0;
  double clean_accuracy = 0.0;
  // Settings that shape the result but are not part of AttackConfig's core
  // hyperparameters (Adam betas, success convention, ...).
  std::map<std::string, std::string> metadata;

  metrics::MetricsSummary summary() const;
};

/// Concatenates reports of consecutive chunks; ASR and clean accuracy are
/// recomputed over the union.
template <typename Real>
AttackReport<Real> merge_reports(std::vector<AttackReport<Real>> parts);

/// aᵀb / (‖a‖‖b‖) clamped to [−1, 1]. Throws ZeroVector, ShapeMismatch.
template <typename Real>
Real cosine_sim(std::span<const Real> a, std::span<const Real> b);

/// argmin over j ≠ i of row[j]; the smallest index wins ties. Throws BatchTooSmall.
template <typename Real>
std::size_t select_dissimilar(std::span<const Real> row, std::size_t i);

struct SpwWeights {
  double alpha = 0.0;
  double beta = 0.0;
};

SpwWeights spw_weights_untargeted(double s_ii, double s_min, double margin);
SpwWeights spw_weights_targeted(double s_ii, double s_it, double margin);

/// Scalars read from the similarity row while building the SSA term.
struct SsaTerms {
  double s_ii = 0.0;
  double s_target = 0.0;  // s_ij* (untargeted) or s_it
  std::size_t partner = 0;
  SpwWeights weights;
  double pre_hinge = 0.0;  // α·s_ii − β·s_target
};

/// Appends the SSA loss for example i to `graph`.
///
/// `adv_embedding` is a 1×d node; `benign_unit_t` holds the unit-normalised
/// benign embeddings transposed (d×N) and is embedded as a constant. The
/// similarity row is evaluated immediately (the graph must already have run
/// `forward`), the partner index and weights are chosen from it, and the
/// returned rank-0 node is relu(α·s′_ii − β·s′_partner) with α, β constants.
/// `target` selects targeted mode. Throws BatchTooSmall, TargetIsSelf.
template <typename Real>
NodeId ssa_loss(Graph<Real>& graph, NodeId adv_embedding, NodeId benign_unit_t, std::size_t i,
                std::optional<std::size_t> target, double margin, SsaTerms* terms = nullptr);

/// λ·D_lf(x, x′) + ssa, where `low_benign` = φ(x) (1×C×H×W constant) and
/// `adv_image` the 1×C×H×W node for x′. λ = 0 returns `ssa` unchanged.
template <typename Real>
NodeId ssah_loss(Graph<Real>& graph, const NdArray<Real>& low_benign, NodeId adv_image, NodeId ssa,
                 double lambda);

/// r = arctanh(2·clamp(x, ε_c, 1 − ε_c) − 1).
template <typename Real>
NdArray<Real> to_tanh_space(const NdArray<Real>& x, double clamp);

/// x′ = (tanh(r) + 1) / 2.
template <typename Real>
NdArray<Real> from_tanh_space(const NdArray<Real>& r);

/// For every example, a uniformly drawn in-batch index whose label differs
/// from its own (any other index when no such example exists). Deterministic
/// for a fixed seed. Throws BatchTooSmall.
std::vector<std::size_t> random_targets(std::span<const std::size_t> labels, std::uint64_t seed);

/// Unit-normalised rows of an N×d embedding matrix. Throws ZeroVector.
template <typename Real>
NdArray<Real> normalize_rows(const NdArray<Real>& embeddings);

/// SSA / SSAH optimisation of every example in `batch` (labels required).
/// Benign embeddings are computed once and frozen; each example owns its
/// tanh-space variable, Adam state and per-iteration graph. The final iterate
/// is returned. Untargeted success: prediction ≠ label (examples the model
/// already gets wrong count as successes); targeted: prediction = label of x_t.
template <typename Real>
AttackReport<Real> run_ssah(const ClassifierModel<Real>& model, const ImageBatch<Real>& batch,
                            const AttackConfig& config);

struct PgdConfig {
  double epsilon = 8.0 / 255.0;
  double step = 1.0 / 255.0;
  std::size_t iterations = 10;

  void validate() const;
};

/// Sign-gradient ascent on softmax cross-entropy, projected onto the ℓ∞ ball
/// of radius ε around x and onto [0,1] after every step.
template <typename Real>
AttackReport<Real> run_pgd_baseline(const ClassifierModel<Real>& model, const ImageBatch<Real>& batch,
                                    const PgdConfig& config);

}  // namespace freqattack
