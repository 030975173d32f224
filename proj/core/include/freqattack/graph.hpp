#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "freqattack/ndarray.hpp"

namespace freqattack {

enum class OpKind {
  input,
  constant,
  affine,
  conv2d,
  relu,
  avgpool2d,
  add,
  mul,
  scale,
  tanh,
  l2_normalize,
  matmul,
  dwt_low_reconstruct,
  reduce_sum,
  abs,
  reshape,
  softmax_cross_entropy,
};

std::string_view to_string(OpKind kind) noexcept;

using NodeId = std::size_t;

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename Real>
struct Node {
  OpKind kind = OpKind::input;
  std::vector<NodeId> inputs;
  NdArray<Real> value;
  NdArray<Real> grad;
  bool evaluated = false;
  // True when some requires-grad input lies upstream; backward skips the rest.
  bool requires_grad = false;

  std::string name;  // input
  Real factor{1};    // scale: factor * x + shift
  Real shift{0};
  Conv2dParams conv;                // conv2d
  std::size_t window = 0;           // avgpool2d
  Shape target;                     // reshape; empty means flatten to [N, rest]
  std::vector<std::size_t> labels;  // softmax_cross_entropy
};

struct BackwardOptions {
  // When set, nodes are visited in a random (seeded) reverse topological order
  // instead of reverse creation order.
  std::optional<std::uint64_t> shuffle_seed;
};

/// Define-then-run reverse-mode differentiation record.
///
/// Nodes are appended in topological order (operands must already exist).
/// `forward` evaluates every node from named bindings; nodes appended later can
/// be evaluated incrementally with `forward_pending`, which lets a caller read
/// intermediate values (e.g. similarity scores) before finishing the graph.
///
/// Shapes are checked when a node is evaluated:
///   affine      x[N×K], weight[M×K], bias[M]     -> [N×M]
///   conv2d      x[N×C×H×W], weight[O×C×kh×kw], bias[O] -> [N×O×H'×W'] (explicit zero padding)
///   avgpool2d   non-overlapping window×window; H, W divisible by window
///   matmul      a[N×K], b[K×M]                    -> [N×M]
///   l2_normalize  unit ℓ2 norm along the last axis; zero rows raise ZeroVector
///   softmax_cross_entropy  logits[N×C] -> mean negative log-likelihood (rank 0)
template <typename Real>
class Graph {
 public:
  using Array = NdArray<Real>;
  using Bindings = std::map<std::string, Array, std::less<>>;
  using Gradients = std::map<std::string, Array, std::less<>>;

  NodeId input(std::string name, bool requires_grad = true);
  NodeId constant(Array value);

  NodeId affine(NodeId x, NodeId weight, std::optional<NodeId> bias = std::nullopt);
  NodeId conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, Conv2dParams params);
  NodeId relu(NodeId x);
  NodeId avgpool2d(NodeId x, std::size_t window);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, Real factor, Real shift = Real{0});
  NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, Real{-1})); }
  NodeId tanh(NodeId x);
  NodeId l2_normalize(NodeId x);
  NodeId matmul(NodeId a, NodeId b);
  NodeId dwt_low_reconstruct(NodeId x);
  NodeId reduce_sum(NodeId x);
  NodeId abs(NodeId x);
  NodeId reshape(NodeId x, Shape target);
  NodeId flatten(NodeId x) { return reshape(x, {}); }
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels);

  /// Evaluates every node. Throws UnboundInput, ShapeMismatch,
  /// NonFiniteEvaluation. Deterministic for fixed bindings.
  void forward(const Bindings& bindings);

  /// Evaluates nodes appended since the last forward using the same bindings.
  void forward_pending();

  /// Accumulates gradients from `seed` back to the inputs and returns them for
  /// every requires-grad input, keyed by name. Unreached inputs get zeros.
  Gradients backward(NodeId seed, const Array& seed_grad, const BackwardOptions& options = {});

  const Array& value(NodeId id) const;
  const Array& grad(NodeId id) const { return at(id).grad; }
  const Node<Real>& node(NodeId id) const { return at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  NodeId push(Node<Real> node);
  const Node<Real>& at(NodeId id) const;
  void evaluate(NodeId id);
  void propagate(NodeId id);
  std::vector<NodeId> reverse_order(NodeId seed, const BackwardOptions& options) const;

  std::vector<Node<Real>> nodes_;
  Bindings bindings_;
  bool forward_run_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace freqattack
