#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "freqattack/graph.hpp"
#include "freqattack/io.hpp"
#include "freqattack/ndarray.hpp"

namespace freqattack {

enum class LayerKind { conv2d, relu, avgpool2d, flatten, affine };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;  // parameter prefix for conv2d / affine
  std::size_t in = 0;   // channels (conv2d) or features (affine)
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 0;  // avgpool2d
};

/// Encoder layer list plus the bias-free linear head (class_count × embedding_dim).
struct ModelSpec {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<LayerSpec> encoder;
  std::size_t embedding_dim = 64;
  std::size_t class_count = 10;

  /// Four blocks of (3×3 conv, padding 1, ReLU, 2×2 average pool), then one
  /// affine layer to the embedding.
  static ModelSpec desk_cnn(std::vector<std::size_t> widths = {32, 64, 128, 128},
                            std::size_t embedding_dim = 64, std::size_t class_count = 10);

  /// flatten → affine(inputs→hidden) → ReLU → affine(hidden→embedding), for
  /// inputs shaped N×inputs×1×1.
  static ModelSpec mlp(std::size_t inputs, std::size_t hidden, std::size_t embedding_dim,
                       std::size_t class_count);

  /// Throws ShapeMismatch when consecutive layers disagree or the encoder does
  /// not end in embedding_dim features.
  void validate() const;

  /// Parameter names and shapes in storage order; the head is last ("head.weight").
  std::vector<std::pair<std::string, Shape>> parameter_shapes() const;

  std::string describe() const;
};

enum class ParameterMode { trainable, frozen };

template <typename Real>
class ClassifierModel {
 public:
  using Parameters = std::vector<std::pair<std::string, NdArray<Real>>>;

  ClassifierModel(ModelSpec spec, Parameters parameters);

  /// He-style fan-in Gaussian weights, zero biases.
  static ClassifierModel initialized(const ModelSpec& spec, std::uint64_t seed);
  static ClassifierModel zeros(const ModelSpec& spec);

  const ModelSpec& spec() const noexcept { return spec_; }
  const Parameters& parameters() const noexcept { return parameters_; }
  Parameters& parameters() noexcept { return parameters_; }
  const NdArray<Real>& parameter(std::string_view name) const;
  NdArray<Real>& parameter(std::string_view name);
  const NdArray<Real>& head() const { return parameters_.back().second; }

  /// Appends the encoder to `graph`. Trainable parameters become named
  /// requires-grad inputs (bind them with `bindings()`); frozen ones are
  /// embedded as constants.
  NodeId build_encoder(Graph<Real>& graph, NodeId images, ParameterMode mode) const;
  NodeId build_head(Graph<Real>& graph, NodeId embedding, ParameterMode mode) const;

  typename Graph<Real>::Bindings bindings() const;

  /// Pre-head embeddings f(x), N×embedding_dim.
  NdArray<Real> embed(const NdArray<Real>& batch) const;
  /// N×class_count, entry (i, j) = w_jᵀ f(x_i).
  NdArray<Real> logits(const NdArray<Real>& batch) const;
  std::vector<std::size_t> predict(const NdArray<Real>& batch) const;

  template <typename Other>
  ClassifierModel<Other> cast() const {
    typename ClassifierModel<Other>::Parameters p;
    for (const auto& [name, value] : parameters_) p.emplace_back(name, value.template cast<Other>());
    return ClassifierModel<Other>(spec_, std::move(p));
  }

 private:
  NodeId param(Graph<Real>& graph, const std::string& name, ParameterMode mode) const;
  void check_input(const NdArray<Real>& batch) const;

  ModelSpec spec_;
  Parameters parameters_;
};

/// Index of the largest entry; the smallest index wins exact ties.
template <typename Real>
std::size_t argmax(std::span<const Real> values);

template <typename Real>
std::vector<std::size_t> argmax_rows(const NdArray<Real>& matrix);

struct TrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 3e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  bool cosine_schedule = true;

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

/// Softmax cross-entropy on the head logits, Adam updates, optional cosine
/// learning-rate decay per epoch. Deterministic for a fixed seed.
/// Throws EmptyDataset, DivergedTraining.
template <typename Real>
ClassifierModel<Real> train_classifier(const ImageBatch<Real>& train, const ImageBatch<Real>* test,
                                       const ModelSpec& spec, const TrainConfig& config,
                                       TrainReport* report = nullptr);

template <typename Real>
double accuracy(const ClassifierModel<Real>& model, const ImageBatch<Real>& batch);

/// "FQW1" | u32 count | per parameter: u32 name length, name, u32 rank,
/// rank × u32 extents, little-endian float32 values.
template <typename Real>
void save_weights(const ClassifierModel<Real>& model, const std::filesystem::path& path);

/// Throws IoFailure, BadMagic, ShapeMismatch (naming the offending parameter).
template <typename Real>
ClassifierModel<Real> load_weights(const std::filesystem::path& path, const ModelSpec& spec);

/// Named-array container in the weight-file layout, used for tensor dumps.
template <typename Real>
void save_arrays(const std::vector<std::pair<std::string, NdArray<Real>>>& arrays,
                 const std::filesystem::path& path);
template <typename Real>
std::vector<std::pair<std::string, NdArray<Real>>> load_arrays(const std::filesystem::path& path);

extern template class ClassifierModel<float>;
extern template class ClassifierModel<double>;

}  // namespace freqattack
