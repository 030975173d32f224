#include "freqattack/graph.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "eigen_maps.hpp"
#include "freqattack/wavelet.hpp"

namespace freqattack {

std::string_view to_string(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::constant: return "constant";
    case OpKind::affine: return "affine";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::avgpool2d: return "avgpool2d";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::tanh: return "tanh";
    case OpKind::l2_normalize: return "l2-normalize";
    case OpKind::matmul: return "matmul";
    case OpKind::dwt_low_reconstruct: return "dwt-low-reconstruct";
    case OpKind::reduce_sum: return "reduce-sum";
    case OpKind::abs: return "abs";
    case OpKind::reshape: return "reshape";
    case OpKind::softmax_cross_entropy: return "softmax-cross-entropy";
  }
  return "unknown";
}

namespace {

using detail::as_matrix;
using detail::RowMatrix;

template <typename Real>
using VecMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
template <typename Real>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;

template <typename Real>
ConstVecMap<Real> as_vector(const Real* data, std::size_t n) {
  return ConstVecMap<Real>(data, static_cast<Eigen::Index>(n));
}
template <typename Real>
VecMap<Real> as_vector(Real* data, std::size_t n) {
  return VecMap<Real>(data, static_cast<Eigen::Index>(n));
}

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  fail(ErrorKind::ShapeMismatch, std::string(to_string(kind)) + ": " + detail);
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Conv2dParams& p) {
  if (x.size() != 4 || w.size() != 4) shape_error(OpKind::conv2d, "expects rank-4 input and weight");
  if (w[1] != x[1]) {
    shape_error(OpKind::conv2d, "weight expects " + std::to_string(w[1]) + " channels, input has " +
                                    std::to_string(x[1]));
  }
  if (p.stride == 0) shape_error(OpKind::conv2d, "stride must be >= 1");
  if (x[2] + 2 * p.padding < w[2] || x[3] + 2 * p.padding < w[3]) {
    shape_error(OpKind::conv2d, "kernel larger than padded input");
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], p.stride, p.padding, 0, 0};
  g.out_h = (g.height + 2 * g.pad - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kw) / g.stride + 1;
  return g;
}

template <typename Real>
void im2col(const ConvGeometry& g, const Real* image, Real* cols) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        Real* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          Real* dst = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, Real{0});
            continue;
          }
          const Real* src = image + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) ? Real{0}
                                                                           : src[x];
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im_add(const ConvGeometry& g, const Real* cols, Real* image) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const Real* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
          Real* dst = image + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          const Real* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(g.width)) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

std::size_t last_axis(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

template <typename Real>
NodeId Graph<Real>::push(Node<Real> node) {
  for (NodeId in : node.inputs) {
    if (in >= nodes_.size()) {
      fail(ErrorKind::ShapeMismatch, "operand " + std::to_string(in) + " does not exist");
    }
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

template <typename Real>
const Node<Real>& Graph<Real>::at(NodeId id) const {
  if (id >= nodes_.size()) fail(ErrorKind::ShapeMismatch, "node " + std::to_string(id) + " does not exist");
  return nodes_[id];
}

template <typename Real>
NodeId Graph<Real>::input(std::string name, bool requires_grad) {
  for (const Node<Real>& existing : nodes_) {
    if (existing.kind == OpKind::input && existing.name == name) {
      fail(ErrorKind::InvalidConfig, "input '" + name + "' declared twice");
    }
  }
  Node<Real> n;
  n.kind = OpKind::input;
  n.name = std::move(name);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::constant(Array value) {
  Node<Real> n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  n.evaluated = true;
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::affine(NodeId x, NodeId weight, std::optional<NodeId> bias) {
  Node<Real> n;
  n.kind = OpKind::affine;
  n.inputs = {x, weight};
  if (bias) n.inputs.push_back(*bias);
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, Conv2dParams params) {
  Node<Real> n;
  n.kind = OpKind::conv2d;
  n.inputs = {x, weight};
  if (bias) n.inputs.push_back(*bias);
  n.conv = params;
  return push(std::move(n));
}

#define FREQATTACK_UNARY(fn, op)            \
  template <typename Real>                  \
  NodeId Graph<Real>::fn(NodeId x) {        \
    Node<Real> n;                           \
    n.kind = OpKind::op;                    \
    n.inputs = {x};                         \
    return push(std::move(n));              \
  }

FREQATTACK_UNARY(relu, relu)
FREQATTACK_UNARY(tanh, tanh)
FREQATTACK_UNARY(l2_normalize, l2_normalize)
FREQATTACK_UNARY(dwt_low_reconstruct, dwt_low_reconstruct)
FREQATTACK_UNARY(reduce_sum, reduce_sum)
FREQATTACK_UNARY(abs, abs)
#undef FREQATTACK_UNARY

template <typename Real>
NodeId Graph<Real>::avgpool2d(NodeId x, std::size_t window) {
  Node<Real> n;
  n.kind = OpKind::avgpool2d;
  n.inputs = {x};
  n.window = window;
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::add(NodeId a, NodeId b) {
  Node<Real> n;
  n.kind = OpKind::add;
  n.inputs = {a, b};
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::mul(NodeId a, NodeId b) {
  Node<Real> n;
  n.kind = OpKind::mul;
  n.inputs = {a, b};
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::scale(NodeId x, Real factor, Real shift) {
  Node<Real> n;
  n.kind = OpKind::scale;
  n.inputs = {x};
  n.factor = factor;
  n.shift = shift;
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::matmul(NodeId a, NodeId b) {
  Node<Real> n;
  n.kind = OpKind::matmul;
  n.inputs = {a, b};
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::reshape(NodeId x, Shape target) {
  Node<Real> n;
  n.kind = OpKind::reshape;
  n.inputs = {x};
  n.target = std::move(target);
  return push(std::move(n));
}

template <typename Real>
NodeId Graph<Real>::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
  Node<Real> n;
  n.kind = OpKind::softmax_cross_entropy;
  n.inputs = {logits};
  n.labels = std::move(labels);
  return push(std::move(n));
}

template <typename Real>
const typename Graph<Real>::Array& Graph<Real>::value(NodeId id) const {
  const Node<Real>& n = at(id);
  if (!n.evaluated) fail(ErrorKind::ForwardNotRun, "node " + std::to_string(id) + " not evaluated");
  return n.value;
}

template <typename Real>
void Graph<Real>::forward(const Bindings& bindings) {
  for (Node<Real>& n : nodes_) {
    if (n.kind == OpKind::input) {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) fail(ErrorKind::UnboundInput, "input '" + n.name + "' is not bound");
      require_finite(it->second, "input '" + n.name + "' holds non-finite values");
      n.value = it->second;
      n.evaluated = true;
    } else if (n.kind != OpKind::constant) {
      n.evaluated = false;
    }
  }
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].evaluated) evaluate(id);
  }
  forward_run_ = true;
}

template <typename Real>
void Graph<Real>::forward_pending() {
  if (!forward_run_) fail(ErrorKind::ForwardNotRun, "forward_pending before forward");
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    Node<Real>& n = nodes_[id];
    if (n.evaluated) continue;
    if (n.kind == OpKind::input) {
      fail(ErrorKind::UnboundInput, "input '" + n.name + "' was added after forward");
    }
    evaluate(id);
  }
}

template <typename Real>
void Graph<Real>::evaluate(NodeId id) {
  Node<Real>& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Array& { return nodes_[n.inputs[k]].value; };
  const OpKind kind = n.kind;

  switch (kind) {
    case OpKind::input:
    case OpKind::constant:
      break;

    case OpKind::affine: {
      const Array& x = in(0);
      const Array& w = in(1);
      if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(1)) {
        shape_error(kind, "x " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
      }
      const std::size_t rows = x.extent(0), k = x.extent(1), m = w.extent(0);
      if (n.inputs.size() == 3 && in(2).shape() != Shape{m}) shape_error(kind, "bias length");
      Array y({rows, m});
      const auto wm = as_matrix(w.raw(), m, k);
      // Row-at-a-time keeps each example's result independent of the batch size.
      for (std::size_t r = 0; r < rows; ++r) {
        auto out = as_vector(y.raw() + r * m, m);
        out.noalias() = wm * as_vector(x.raw() + r * k, k);
        if (n.inputs.size() == 3) out += as_vector(in(2).raw(), m);
      }
      n.value = std::move(y);
      break;
    }

    case OpKind::conv2d: {
      const Array& x = in(0);
      const Array& w = in(1);
      const ConvGeometry g = conv_geometry(x.shape(), w.shape(), n.conv);
      if (n.inputs.size() == 3 && in(2).shape() != Shape{g.out_channels}) shape_error(kind, "bias length");
      Array y({g.batch, g.out_channels, g.out_h, g.out_w});
      AlignedVector<Real> cols(g.patch() * g.pixels());
      const auto wm = as_matrix(w.raw(), g.out_channels, g.patch());
      const auto cm = as_matrix(static_cast<const Real*>(cols.data()), g.patch(), g.pixels());
      for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(g, x.raw() + b * g.channels * g.height * g.width, cols.data());
        auto ym = as_matrix(y.raw() + b * g.out_channels * g.pixels(), g.out_channels, g.pixels());
        ym.noalias() = wm * cm;
        if (n.inputs.size() == 3) ym.colwise() += as_vector(in(2).raw(), g.out_channels);
      }
      n.value = std::move(y);
      break;
    }

    case OpKind::relu: {
      Array y = in(0);
      for (Real& v : y.data()) v = v > Real{0} ? v : Real{0};
      n.value = std::move(y);
      break;
    }

    case OpKind::tanh: {
      Array y = in(0);
      for (Real& v : y.data()) v = std::tanh(v);
      n.value = std::move(y);
      break;
    }

    case OpKind::abs: {
      Array y = in(0);
      for (Real& v : y.data()) v = std::abs(v);
      n.value = std::move(y);
      break;
    }

    case OpKind::scale: {
      Array y = in(0);
      for (Real& v : y.data()) v = n.factor * v + n.shift;
      n.value = std::move(y);
      break;
    }

    case OpKind::add:
    case OpKind::mul: {
      const Array& a = in(0);
      const Array& b = in(1);
      if (a.shape() != b.shape()) {
        shape_error(kind, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
      }
      Array y = a;
      for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = kind == OpKind::add ? y[i] + b[i] : y[i] * b[i];
      }
      n.value = std::move(y);
      break;
    }

    case OpKind::avgpool2d: {
      const Array& x = in(0);
      const std::size_t k = n.window;
      if (x.rank() != 4 || k == 0 || x.extent(2) % k != 0 || x.extent(3) % k != 0) {
        shape_error(kind, "window " + std::to_string(k) + " does not tile " + shape_string(x.shape()));
      }
      const std::size_t planes = x.extent(0) * x.extent(1), h = x.extent(2), w = x.extent(3);
      const std::size_t oh = h / k, ow = w / k;
      Array y({x.extent(0), x.extent(1), oh, ow});
      const Real inv = Real{1} / static_cast<Real>(k * k);
      for (std::size_t p = 0; p < planes; ++p) {
        const Real* src = x.raw() + p * h * w;
        Real* dst = y.raw() + p * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            Real acc{0};
            for (std::size_t i = 0; i < k; ++i) {
              for (std::size_t j = 0; j < k; ++j) acc += src[(oy * k + i) * w + ox * k + j];
            }
            dst[oy * ow + ox] = acc * inv;
          }
        }
      }
      n.value = std::move(y);
      break;
    }

    case OpKind::l2_normalize: {
      Array y = in(0);
      const std::size_t d = last_axis(y.shape());
      if (d == 0) shape_error(kind, "empty last axis");
      for (std::size_t r = 0; r < y.size() / d; ++r) {
        auto row = as_vector(y.raw() + r * d, d);
        const Real norm = row.norm();
        if (!(norm > Real{0})) fail(ErrorKind::ZeroVector, "l2-normalize of a zero vector");
        row /= norm;
      }
      n.value = std::move(y);
      break;
    }

    case OpKind::matmul: {
      const Array& a = in(0);
      const Array& b = in(1);
      if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
        shape_error(kind, shape_string(a.shape()) + " x " + shape_string(b.shape()));
      }
      Array y({a.extent(0), b.extent(1)});
      as_matrix(y.raw(), a.extent(0), b.extent(1)).noalias() =
          as_matrix(a.raw(), a.extent(0), a.extent(1)) * as_matrix(b.raw(), b.extent(0), b.extent(1));
      n.value = std::move(y);
      break;
    }

    case OpKind::dwt_low_reconstruct:
      n.value = wavelet::reconstruct_low(in(0));
      break;

    case OpKind::reduce_sum: {
      Real total{0};
      for (Real v : in(0).data()) total += v;
      n.value = Array::scalar(total);
      break;
    }

    case OpKind::reshape: {
      const Array& x = in(0);
      Shape target = n.target;
      if (target.empty()) {
        if (x.rank() == 0) shape_error(kind, "cannot flatten a scalar");
        target = {x.extent(0), x.size() / std::max<std::size_t>(x.extent(0), 1)};
      }
      if (shape_size(target) != x.size()) {
        shape_error(kind, shape_string(x.shape()) + " to " + shape_string(target));
      }
      n.value = x.reshaped(std::move(target));
      break;
    }

    case OpKind::softmax_cross_entropy: {
      const Array& z = in(0);
      if (z.rank() != 2 || z.extent(0) != n.labels.size() || z.extent(0) == 0) {
        shape_error(kind, "logits " + shape_string(z.shape()) + " with " +
                              std::to_string(n.labels.size()) + " labels");
      }
      const std::size_t rows = z.extent(0), classes = z.extent(1);
      Real total{0};
      for (std::size_t r = 0; r < rows; ++r) {
        if (n.labels[r] >= classes) shape_error(kind, "label out of range");
        const Real* row = z.raw() + r * classes;
        const Real peak = *std::max_element(row, row + classes);
        Real sum{0};
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - peak);
        total += std::log(sum) + peak - row[n.labels[r]];
      }
      n.value = Array::scalar(total / static_cast<Real>(rows));
      break;
    }
  }

  if (!n.value.all_finite()) {
    fail(ErrorKind::NonFiniteEvaluation,
         std::string(to_string(kind)) + " node " + std::to_string(id) + " produced non-finite values");
  }
  n.evaluated = true;
}

template <typename Real>
std::vector<NodeId> Graph<Real>::reverse_order(NodeId seed, const BackwardOptions& options) const {
  // Nodes that can both receive gradient from `seed` and pass it on.
  std::vector<char> live(seed + 1, 0);
  live[seed] = nodes_[seed].requires_grad;
  for (NodeId id = seed + 1; id-- > 0;) {
    if (!live[id]) continue;
    for (NodeId in : nodes_[id].inputs) {
      if (nodes_[in].requires_grad) live[in] = 1;
    }
  }

  std::vector<NodeId> order;
  if (!options.shuffle_seed) {
    for (NodeId id = seed + 1; id-- > 0;) {
      if (live[id]) order.push_back(id);
    }
    return order;
  }

  // Kahn's algorithm on reversed edges with a random choice among ready nodes.
  std::vector<std::size_t> pending(seed + 1, 0);
  for (NodeId id = 0; id <= seed; ++id) {
    if (!live[id]) continue;
    for (NodeId in : nodes_[id].inputs) {
      if (live[in]) ++pending[in];
    }
  }
  std::mt19937_64 rng(*options.shuffle_seed);
  std::vector<NodeId> ready;
  for (NodeId id = 0; id <= seed; ++id) {
    if (live[id] && pending[id] == 0) ready.push_back(id);
  }
  while (!ready.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, ready.size() - 1);
    const std::size_t k = pick(rng);
    const NodeId id = ready[k];
    ready[k] = ready.back();
    ready.pop_back();
    order.push_back(id);
    std::vector<NodeId> operands = nodes_[id].inputs;
    std::shuffle(operands.begin(), operands.end(), rng);
    for (NodeId in : operands) {
      if (live[in] && --pending[in] == 0) ready.push_back(in);
    }
  }
  return order;
}

template <typename Real>
typename Graph<Real>::Gradients Graph<Real>::backward(NodeId seed, const Array& seed_grad,
                                                      const BackwardOptions& options) {
  const Node<Real>& s = at(seed);
  if (!forward_run_ || !s.evaluated) fail(ErrorKind::ForwardNotRun, "backward before forward");
  if (seed_grad.shape() != s.value.shape()) {
    fail(ErrorKind::ShapeMismatch, "seed gradient " + shape_string(seed_grad.shape()) +
                                       " vs seed value " + shape_string(s.value.shape()));
  }
  for (NodeId id = 0; id <= seed; ++id) {
    Node<Real>& n = nodes_[id];
    if (!n.evaluated) fail(ErrorKind::ForwardNotRun, "node " + std::to_string(id) + " not evaluated");
    n.grad = n.requires_grad ? Array(n.value.shape()) : Array();
  }
  for (NodeId id = seed + 1; id < nodes_.size(); ++id) nodes_[id].grad = Array();

  if (nodes_[seed].requires_grad) nodes_[seed].grad = seed_grad;
  for (NodeId id : reverse_order(seed, options)) propagate(id);

  Gradients out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node<Real>& n = nodes_[id];
    if (n.kind != OpKind::input || !n.requires_grad) continue;
    Array g = id <= seed ? n.grad : Array(n.value.shape());
    require_finite(g, "gradient of input '" + n.name + "' is non-finite");
    out.emplace(n.name, std::move(g));
  }
  return out;
}

template <typename Real>
void Graph<Real>::propagate(NodeId id) {
  Node<Real>& n = nodes_[id];
  const Array& g = n.grad;
  auto operand = [&](std::size_t k) -> Node<Real>& { return nodes_[n.inputs[k]]; };
  auto wants = [&](std::size_t k) { return k < n.inputs.size() && operand(k).requires_grad; };

  switch (n.kind) {
    case OpKind::input:
    case OpKind::constant:
      break;

    case OpKind::affine: {
      const Array& x = operand(0).value;
      const Array& w = operand(1).value;
      const std::size_t rows = x.extent(0), k = x.extent(1), m = w.extent(0);
      const auto gm = as_matrix(g.raw(), rows, m);
      if (wants(0)) {
        for (std::size_t r = 0; r < rows; ++r) {
          as_vector(operand(0).grad.raw() + r * k, k).noalias() +=
              as_matrix(w.raw(), m, k).transpose() * as_vector(g.raw() + r * m, m);
        }
      }
      if (wants(1)) {
        as_matrix(operand(1).grad.raw(), m, k).noalias() += gm.transpose() * as_matrix(x.raw(), rows, k);
      }
      if (wants(2)) as_vector(operand(2).grad.raw(), m) += gm.colwise().sum().transpose();
      break;
    }

    case OpKind::conv2d: {
      const Array& x = operand(0).value;
      const Array& w = operand(1).value;
      const ConvGeometry geo = conv_geometry(x.shape(), w.shape(), n.conv);
      const std::size_t image = geo.channels * geo.height * geo.width;
      const std::size_t out_image = geo.out_channels * geo.pixels();
      AlignedVector<Real> cols(geo.patch() * geo.pixels());
      const auto wm = as_matrix(w.raw(), geo.out_channels, geo.patch());
      for (std::size_t b = 0; b < geo.batch; ++b) {
        const auto gm = as_matrix(g.raw() + b * out_image, geo.out_channels, geo.pixels());
        if (wants(0)) {
          as_matrix(cols.data(), geo.patch(), geo.pixels()).noalias() = wm.transpose() * gm;
          col2im_add(geo, cols.data(), operand(0).grad.raw() + b * image);
        }
        if (wants(1)) {
          im2col(geo, x.raw() + b * image, cols.data());
          as_matrix(operand(1).grad.raw(), geo.out_channels, geo.patch()).noalias() +=
              gm * as_matrix(static_cast<const Real*>(cols.data()), geo.patch(), geo.pixels()).transpose();
        }
        if (wants(2)) as_vector(operand(2).grad.raw(), geo.out_channels) += gm.rowwise().sum();
      }
      break;
    }

    case OpKind::relu: {
      if (!wants(0)) break;
      const Array& x = operand(0).value;
      Array& dx = operand(0).grad;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > Real{0}) dx[i] += g[i];
      }
      break;
    }

    case OpKind::tanh: {
      if (!wants(0)) break;
      Array& dx = operand(0).grad;
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (Real{1} - n.value[i] * n.value[i]);
      break;
    }

    case OpKind::abs: {
      if (!wants(0)) break;
      const Array& x = operand(0).value;
      Array& dx = operand(0).grad;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > Real{0}) dx[i] += g[i];
        else if (x[i] < Real{0}) dx[i] -= g[i];
      }
      break;
    }

    case OpKind::scale: {
      if (!wants(0)) break;
      Array& dx = operand(0).grad;
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += n.factor * g[i];
      break;
    }

    case OpKind::add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        Array& dx = operand(k).grad;
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      break;
    }

    case OpKind::mul: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const Array& other = operand(1 - k).value;
        Array& dx = operand(k).grad;
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * other[i];
      }
      break;
    }

    case OpKind::avgpool2d: {
      if (!wants(0)) break;
      Array& dx = operand(0).grad;
      const Shape& xs = dx.shape();
      const std::size_t k = n.window, h = xs[2], w = xs[3], oh = h / k, ow = w / k;
      const Real inv = Real{1} / static_cast<Real>(k * k);
      for (std::size_t p = 0; p < xs[0] * xs[1]; ++p) {
        const Real* src = g.raw() + p * oh * ow;
        Real* dst = dx.raw() + p * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) dst[y * w + x] += src[(y / k) * ow + x / k] * inv;
        }
      }
      break;
    }

    case OpKind::l2_normalize: {
      if (!wants(0)) break;
      const Array& x = operand(0).value;
      Array& dx = operand(0).grad;
      const std::size_t d = last_axis(x.shape());
      for (std::size_t r = 0; r < x.size() / d; ++r) {
        const auto y = as_vector(n.value.raw() + r * d, d);
        const auto gy = as_vector(g.raw() + r * d, d);
        const Real norm = as_vector(x.raw() + r * d, d).norm();
        as_vector(dx.raw() + r * d, d) += (gy - y * y.dot(gy)) / norm;
      }
      break;
    }

    case OpKind::matmul: {
      const Array& a = operand(0).value;
      const Array& b = operand(1).value;
      const std::size_t rows = a.extent(0), k = a.extent(1), cols = b.extent(1);
      const auto gm = as_matrix(g.raw(), rows, cols);
      if (wants(0)) {
        as_matrix(operand(0).grad.raw(), rows, k).noalias() += gm * as_matrix(b.raw(), k, cols).transpose();
      }
      if (wants(1)) {
        as_matrix(operand(1).grad.raw(), k, cols).noalias() += as_matrix(a.raw(), rows, k).transpose() * gm;
      }
      break;
    }

    case OpKind::dwt_low_reconstruct: {
      if (!wants(0)) break;
      const Array pulled = wavelet::phi_backward(g);
      Array& dx = operand(0).grad;
      for (std::size_t i = 0; i < pulled.size(); ++i) dx[i] += pulled[i];
      break;
    }

    case OpKind::reduce_sum: {
      if (!wants(0)) break;
      const Real seed = g.item();
      for (Real& v : operand(0).grad.data()) v += seed;
      break;
    }

    case OpKind::reshape: {
      if (!wants(0)) break;
      Array& dx = operand(0).grad;
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      break;
    }

    case OpKind::softmax_cross_entropy: {
      if (!wants(0)) break;
      const Array& z = operand(0).value;
      Array& dz = operand(0).grad;
      const std::size_t rows = z.extent(0), classes = z.extent(1);
      const Real seed = g.item() / static_cast<Real>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = z.raw() + r * classes;
        const Real peak = *std::max_element(row, row + classes);
        Real sum{0};
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - peak);
        for (std::size_t c = 0; c < classes; ++c) {
          const Real p = std::exp(row[c] - peak) / sum;
          dz[r * classes + c] += seed * (p - (c == n.labels[r] ? Real{1} : Real{0}));
        }
      }
      break;
    }
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace freqattack
