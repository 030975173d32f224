#include "freqattack/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

#include "freqattack/optim.hpp"

namespace freqattack {

// ---------------------------------------------------------------------------
// ModelSpec

namespace {

LayerSpec plain(LayerKind kind) {
  LayerSpec layer;
  layer.kind = kind;
  return layer;
}

LayerSpec pool(std::size_t window) {
  LayerSpec layer = plain(LayerKind::avgpool2d);
  layer.window = window;
  return layer;
}

LayerSpec affine(std::string name, std::size_t in, std::size_t out) {
  LayerSpec layer = plain(LayerKind::affine);
  layer.name = std::move(name);
  layer.in = in;
  layer.out = out;
  return layer;
}

LayerSpec conv3x3(std::string name, std::size_t in, std::size_t out) {
  LayerSpec layer = affine(std::move(name), in, out);
  layer.kind = LayerKind::conv2d;
  layer.kernel = 3;
  layer.padding = 1;
  return layer;
}

}  // namespace

ModelSpec ModelSpec::desk_cnn(std::vector<std::size_t> widths, std::size_t embedding_dim,
                              std::size_t class_count) {
  ModelSpec spec;
  spec.embedding_dim = embedding_dim;
  spec.class_count = class_count;
  std::size_t channels = spec.channels, side = spec.height;
  for (std::size_t b = 0; b < widths.size(); ++b) {
    const std::string name = "conv" + std::to_string(b + 1);
    spec.encoder.push_back(conv3x3(name, channels, widths[b]));
    spec.encoder.push_back(plain(LayerKind::relu));
    spec.encoder.push_back(pool(2));
    channels = widths[b];
    side /= 2;
  }
  spec.encoder.push_back(plain(LayerKind::flatten));
  spec.encoder.push_back(affine("embed", channels * side * side, embedding_dim));
  return spec;
}

ModelSpec ModelSpec::mlp(std::size_t inputs, std::size_t hidden, std::size_t embedding_dim,
                         std::size_t class_count) {
  ModelSpec spec;
  spec.channels = inputs;
  spec.height = 1;
  spec.width = 1;
  spec.embedding_dim = embedding_dim;
  spec.class_count = class_count;
  spec.encoder = {
      plain(LayerKind::flatten),
      affine("hidden", inputs, hidden),
      plain(LayerKind::relu),
      affine("embed", hidden, embedding_dim),
  };
  return spec;
}

void ModelSpec::validate() const {
  // Track the activation shape through the encoder.
  std::size_t c = channels, h = height, w = width;
  bool flat = false;
  auto mismatch = [](const LayerSpec& layer, const std::string& detail) {
    fail(ErrorKind::ShapeMismatch, "layer '" + (layer.name.empty() ? std::string("?") : layer.name) +
                                       "': " + detail);
  };
  for (const LayerSpec& layer : encoder) {
    switch (layer.kind) {
      case LayerKind::conv2d:
        if (flat || layer.in != c) mismatch(layer, "expects " + std::to_string(layer.in) + " channels");
        if (layer.kernel == 0 || layer.stride == 0 || h + 2 * layer.padding < layer.kernel ||
            w + 2 * layer.padding < layer.kernel) {
          mismatch(layer, "kernel does not fit");
        }
        h = (h + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        w = (w + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        c = layer.out;
        break;
      case LayerKind::relu:
        break;
      case LayerKind::avgpool2d:
        if (flat || layer.window == 0 || h % layer.window || w % layer.window) {
          mismatch(layer, "pool window does not tile the activation");
        }
        h /= layer.window;
        w /= layer.window;
        break;
      case LayerKind::flatten:
        c = c * h * w;
        h = w = 1;
        flat = true;
        break;
      case LayerKind::affine:
        if (!flat || layer.in != c) mismatch(layer, "expects " + std::to_string(layer.in) + " features, gets " + std::to_string(c));
        c = layer.out;
        break;
    }
  }
  if (!flat || c != embedding_dim) {
    fail(ErrorKind::ShapeMismatch, "encoder output (" + std::to_string(c) +
                                       ") must be a flat vector of embedding_dim = " + std::to_string(embedding_dim));
  }
  if (class_count < 2) fail(ErrorKind::InvalidConfig, "class_count must be >= 2");
}

std::vector<std::pair<std::string, Shape>> ModelSpec::parameter_shapes() const {
  std::vector<std::pair<std::string, Shape>> shapes;
  for (const LayerSpec& layer : encoder) {
    if (layer.kind == LayerKind::conv2d) {
      shapes.emplace_back(layer.name + ".weight", Shape{layer.out, layer.in, layer.kernel, layer.kernel});
      shapes.emplace_back(layer.name + ".bias", Shape{layer.out});
    } else if (layer.kind == LayerKind::affine) {
      shapes.emplace_back(layer.name + ".weight", Shape{layer.out, layer.in});
      shapes.emplace_back(layer.name + ".bias", Shape{layer.out});
    }
  }
  shapes.emplace_back("head.weight", Shape{class_count, embedding_dim});
  return shapes;
}

std::string ModelSpec::describe() const {
  std::ostringstream out;
  out << "input=" << channels << "x" << height << "x" << width;
  for (const LayerSpec& layer : encoder) {
    switch (layer.kind) {
      case LayerKind::conv2d:
        out << " conv" << layer.kernel << "x" << layer.kernel << "(" << layer.in << "->" << layer.out
            << ",s" << layer.stride << ",p" << layer.padding << ")";
        break;
      case LayerKind::relu: out << " relu"; break;
      case LayerKind::avgpool2d: out << " avgpool" << layer.window; break;
      case LayerKind::flatten: out << " flatten"; break;
      case LayerKind::affine: out << " affine(" << layer.in << "->" << layer.out << ")"; break;
    }
  }
  out << " head(" << embedding_dim << "->" << class_count << ")";
  return out.str();
}

// ---------------------------------------------------------------------------
// ClassifierModel

template <typename Real>
ClassifierModel<Real>::ClassifierModel(ModelSpec spec, Parameters parameters)
    : spec_(std::move(spec)), parameters_(std::move(parameters)) {
  spec_.validate();
  const auto expected = spec_.parameter_shapes();
  if (expected.size() != parameters_.size()) {
    fail(ErrorKind::ShapeMismatch, "model expects " + std::to_string(expected.size()) +
                                       " parameters, got " + std::to_string(parameters_.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, shape] = expected[i];
    if (parameters_[i].first != name || parameters_[i].second.shape() != shape) {
      fail(ErrorKind::ShapeMismatch, "parameter '" + parameters_[i].first + "' " +
                                         shape_string(parameters_[i].second.shape()) + " where '" +
                                         name + "' " + shape_string(shape) + " is expected");
    }
  }
}

template <typename Real>
ClassifierModel<Real> ClassifierModel<Real>::initialized(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Parameters params;
  for (const auto& [name, shape] : spec.parameter_shapes()) {
    NdArray<Real> value(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = shape_size(shape) / shape[0];
      // Head rows are compared by inner product, not passed through ReLU.
      const double gain = name == "head.weight" ? 1.0 : 2.0;
      std::normal_distribution<double> normal(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
      for (Real& v : value.data()) v = static_cast<Real>(normal(rng));
    }
    params.emplace_back(name, std::move(value));
  }
  return ClassifierModel(spec, std::move(params));
}

template <typename Real>
ClassifierModel<Real> ClassifierModel<Real>::zeros(const ModelSpec& spec) {
  Parameters params;
  for (const auto& [name, shape] : spec.parameter_shapes()) params.emplace_back(name, NdArray<Real>(shape));
  return ClassifierModel(spec, std::move(params));
}

template <typename Real>
const NdArray<Real>& ClassifierModel<Real>::parameter(std::string_view name) const {
  for (const auto& [n, value] : parameters_) {
    if (n == name) return value;
  }
  fail(ErrorKind::ShapeMismatch, "no parameter named '" + std::string(name) + "'");
}

template <typename Real>
NdArray<Real>& ClassifierModel<Real>::parameter(std::string_view name) {
  return const_cast<NdArray<Real>&>(std::as_const(*this).parameter(name));
}

template <typename Real>
NodeId ClassifierModel<Real>::param(Graph<Real>& graph, const std::string& name, ParameterMode mode) const {
  return mode == ParameterMode::trainable ? graph.input(name, true) : graph.constant(parameter(name));
}

template <typename Real>
NodeId ClassifierModel<Real>::build_encoder(Graph<Real>& graph, NodeId images, ParameterMode mode) const {
  NodeId x = images;
  for (const LayerSpec& layer : spec_.encoder) {
    switch (layer.kind) {
      case LayerKind::conv2d:
        x = graph.conv2d(x, param(graph, layer.name + ".weight", mode), param(graph, layer.name + ".bias", mode),
                         Conv2dParams{layer.stride, layer.padding});
        break;
      case LayerKind::relu: x = graph.relu(x); break;
      case LayerKind::avgpool2d: x = graph.avgpool2d(x, layer.window); break;
      case LayerKind::flatten: x = graph.flatten(x); break;
      case LayerKind::affine:
        x = graph.affine(x, param(graph, layer.name + ".weight", mode), param(graph, layer.name + ".bias", mode));
        break;
    }
  }
  return x;
}

template <typename Real>
NodeId ClassifierModel<Real>::build_head(Graph<Real>& graph, NodeId embedding, ParameterMode mode) const {
  return graph.affine(embedding, param(graph, "head.weight", mode));
}

template <typename Real>
typename Graph<Real>::Bindings ClassifierModel<Real>::bindings() const {
  typename Graph<Real>::Bindings b;
  for (const auto& [name, value] : parameters_) b.emplace(name, value);
  return b;
}

template <typename Real>
void ClassifierModel<Real>::check_input(const NdArray<Real>& batch) const {
  const Shape expected{spec_.channels, spec_.height, spec_.width};
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != expected) {
    fail(ErrorKind::ShapeMismatch, "model expects N×" + std::to_string(spec_.channels) + "×" +
                                       std::to_string(spec_.height) + "×" + std::to_string(spec_.width) +
                                       " input, got " + shape_string(batch.shape()));
  }
}

namespace {
constexpr std::size_t kInferenceChunk = 256;
}

template <typename Real>
NdArray<Real> ClassifierModel<Real>::embed(const NdArray<Real>& batch) const {
  check_input(batch);
  const std::size_t n = batch.extent(0), d = spec_.embedding_dim;
  NdArray<Real> out({n, d});
  for (std::size_t first = 0; first < n; first += kInferenceChunk) {
    const std::size_t count = std::min(kInferenceChunk, n - first);
    Graph<Real> g;
    const NodeId e = build_encoder(g, g.constant(slice_batch(batch, first, count)), ParameterMode::frozen);
    g.forward({});
    std::copy_n(g.value(e).raw(), count * d, out.raw() + first * d);
  }
  return out;
}

template <typename Real>
NdArray<Real> ClassifierModel<Real>::logits(const NdArray<Real>& batch) const {
  const NdArray<Real> e = embed(batch);
  Graph<Real> g;
  const NodeId z = build_head(g, g.constant(e), ParameterMode::frozen);
  g.forward({});
  return g.value(z);
}

template <typename Real>
std::vector<std::size_t> ClassifierModel<Real>::predict(const NdArray<Real>& batch) const {
  return argmax_rows(logits(batch));
}

template <typename Real>
std::size_t argmax(std::span<const Real> values) {
  if (values.empty()) fail(ErrorKind::EmptyInput, "argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t j = 1; j < values.size(); ++j) {
    if (values[j] > values[best]) best = j;
  }
  return best;
}

template <typename Real>
std::vector<std::size_t> argmax_rows(const NdArray<Real>& matrix) {
  if (matrix.rank() != 2) fail(ErrorKind::ShapeMismatch, "argmax_rows expects a matrix");
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < matrix.extent(0); ++r) out.push_back(argmax<Real>(matrix.slab(r)));
  return out;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::InvalidConfig, "epochs must be >= 1");
  if (batch_size < 1) fail(ErrorKind::InvalidConfig, "batch size must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorKind::InvalidConfig, "learning rate must be > 0");
  if (weight_decay < 0.0) fail(ErrorKind::InvalidConfig, "weight decay must be >= 0");
}

template <typename Real>
double accuracy(const ClassifierModel<Real>& model, const ImageBatch<Real>& batch) {
  if (batch.count() == 0) fail(ErrorKind::EmptyDataset, "accuracy of an empty batch");
  const auto predicted = model.predict(batch.data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == batch.labels.at(i);
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

template <typename Real>
ClassifierModel<Real> train_classifier(const ImageBatch<Real>& train, const ImageBatch<Real>* test,
                                       const ModelSpec& spec, const TrainConfig& config, TrainReport* report) {
  config.validate();
  spec.validate();
  if (train.count() == 0) fail(ErrorKind::EmptyDataset, "training set is empty");
  if (train.labels.size() != train.count()) fail(ErrorKind::EmptyDataset, "training set is unlabelled");
  for (std::size_t y : train.labels) {
    if (y >= spec.class_count) fail(ErrorKind::MalformedRecord, "label " + std::to_string(y) + " out of range");
  }

  ClassifierModel<Real> model = ClassifierModel<Real>::initialized(spec, config.seed);
  std::vector<AdamState<Real>> adam(model.parameters().size());
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.count());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainReport local;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double lr = config.learning_rate;
    if (config.cosine_schedule) {
      lr *= 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(config.epochs)));
    }
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - first);
      const ImageBatch<Real> mb = train.gather(std::span(order).subspan(first, count));

      Graph<Real> g;
      const NodeId images = g.constant(mb.data);
      const NodeId embedding = model.build_encoder(g, images, ParameterMode::trainable);
      const NodeId loss = g.softmax_cross_entropy(model.build_head(g, embedding, ParameterMode::trainable),
                                                  mb.labels);
      typename Graph<Real>::Gradients grads;
      try {
        g.forward(model.bindings());
        grads = g.backward(loss, NdArray<Real>::scalar(Real{1}));
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::NonFiniteEvaluation) {
          fail(ErrorKind::DivergedTraining, "epoch " + std::to_string(epoch + 1) + ": " + e.what());
        }
        throw;
      }
      loss_sum += static_cast<double>(g.value(loss).item());
      ++batches;

      for (std::size_t p = 0; p < model.parameters().size(); ++p) {
        auto& [name, value] = model.parameters()[p];
        NdArray<Real>& grad = grads.at(name);
        if (config.weight_decay > 0.0 && value.rank() > 1) {
          const auto decay = static_cast<Real>(config.weight_decay);
          for (std::size_t i = 0; i < value.size(); ++i) grad[i] += decay * value[i];
        }
        adam_step(adam[p], value, grad, static_cast<Real>(lr));
      }
    }
    local.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    if (!std::isfinite(local.epoch_loss.back())) fail(ErrorKind::DivergedTraining, "loss is not finite");
  }
  local.train_accuracy = accuracy(model, train);
  if (test != nullptr && test->count() > 0) local.test_accuracy = accuracy(model, *test);
  if (report != nullptr) *report = std::move(local);
  return model;
}

// ---------------------------------------------------------------------------
// Weight files

namespace {

constexpr char kMagic[4] = {'F', 'Q', 'W', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::IoFailure, source_ + " is truncated");
  }
  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename Real>
void save_arrays(const std::vector<std::pair<std::string, NdArray<Real>>>& arrays,
                 const std::filesystem::path& path) {
  std::string out(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, value] : arrays) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t e : value.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (Real v : value.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  // Write-then-rename so readers never observe a partial file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::IoFailure, "cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) fail(ErrorKind::IoFailure, "write error on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::IoFailure, "cannot move " + tmp.string() + " to " + path.string());
}

template <typename Real>
std::vector<std::pair<std::string, NdArray<Real>>> load_arrays(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::IoFailure, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::BadMagic, path.string() + " does not start with FQW1");
  }
  Reader in(bytes.substr(4), path.string());
  const std::uint32_t count = in.u32();
  std::vector<std::pair<std::string, NdArray<Real>>> arrays;
  for (std::uint32_t p = 0; p < count; ++p) {
    std::string name = in.text(in.u32());
    const std::uint32_t rank = in.u32();
    if (rank > 8) fail(ErrorKind::IoFailure, path.string() + ": implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(in.u32());
    const std::size_t n = shape_size(shape);
    if (n > bytes.size()) fail(ErrorKind::IoFailure, path.string() + " is truncated");
    std::vector<Real> values(n);
    for (Real& v : values) v = static_cast<Real>(std::bit_cast<float>(in.u32()));
    arrays.emplace_back(std::move(name), NdArray<Real>(std::move(shape), std::move(values)));
  }
  if (!in.done()) fail(ErrorKind::IoFailure, path.string() + " has trailing bytes");
  return arrays;
}

template <typename Real>
void save_weights(const ClassifierModel<Real>& model, const std::filesystem::path& path) {
  save_arrays(model.parameters(), path);
}

template <typename Real>
ClassifierModel<Real> load_weights(const std::filesystem::path& path, const ModelSpec& spec) {
  auto arrays = load_arrays<Real>(path);
  const auto expected = spec.parameter_shapes();
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, shape] = expected[i];
    if (i >= arrays.size()) fail(ErrorKind::ShapeMismatch, "weight file lacks parameter '" + name + "'");
    if (arrays[i].first != name) {
      fail(ErrorKind::ShapeMismatch, "weight file has '" + arrays[i].first + "' where '" + name + "' is expected");
    }
    if (arrays[i].second.shape() != shape) {
      fail(ErrorKind::ShapeMismatch, "layer '" + name + "' has shape " + shape_string(arrays[i].second.shape()) +
                                         " in file, " + shape_string(shape) + " in model");
    }
  }
  if (arrays.size() != expected.size()) {
    fail(ErrorKind::ShapeMismatch, "weight file has " + std::to_string(arrays.size()) + " parameters, model has " +
                                       std::to_string(expected.size()));
  }
  return ClassifierModel<Real>(spec, std::move(arrays));
}

#define FREQATTACK_INSTANTIATE_MODEL(Real)                                                                  \
  template class ClassifierModel<Real>;                                                                     \
  template std::size_t argmax<Real>(std::span<const Real>);                                                 \
  template std::vector<std::size_t> argmax_rows<Real>(const NdArray<Real>&);                                \
  template ClassifierModel<Real> train_classifier<Real>(const ImageBatch<Real>&, const ImageBatch<Real>*,   \
                                                        const ModelSpec&, const TrainConfig&, TrainReport*); \
  template double accuracy<Real>(const ClassifierModel<Real>&, const ImageBatch<Real>&);                    \
  template void save_weights<Real>(const ClassifierModel<Real>&, const std::filesystem::path&);             \
  template ClassifierModel<Real> load_weights<Real>(const std::filesystem::path&, const ModelSpec&);        \
  template void save_arrays<Real>(const std::vector<std::pair<std::string, NdArray<Real>>>&,                \
                                  const std::filesystem::path&);                                            \
  template std::vector<std::pair<std::string, NdArray<Real>>> load_arrays<Real>(const std::filesystem::path&);

FREQATTACK_INSTANTIATE_MODEL(float)
FREQATTACK_INSTANTIATE_MODEL(double)

}  // namespace freqattack
