#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "sts/tensor.hpp"

namespace sts::ad {

using NodeId = std::size_t;

enum class OpKind {
  Input,
  Parameter,
  Conv2d,
  Dense,
  Relu,
  MaxPool2x2,
  Flatten,
  Softmax,
  Tanh,
  Affine,
  Add,
  Sub,
  Mul,
  L2NormLastAxis,
  Sum,
  Mean,
  AbsSum,
  Overlay,
  PairwiseDiff,
  SoftmaxCrossEntropy,
};

std::string_view op_name(OpKind kind);

/// Smoothing constant inside the L2 norm: sqrt(sum(d^2) + kNormEpsilon).
inline constexpr double kNormEpsilon = 1e-12;

struct Node {
  OpKind kind = OpKind::Input;
  std::string name;
  std::vector<NodeId> inputs;
  Shape shape;
  bool trainable = false;      // parameters updated by an optimizer
  bool differentiable = false;  // inputs whose gradient is reported
  bool requires_grad = false;   // derived: some path reaches a trainable/differentiable leaf
  // Op attributes.
  std::size_t x = 0, y = 0;     // Overlay window origin (column, row)
  std::size_t padding = 0;      // Conv2d
  double scale = 1.0, shift = 0.0;  // Affine
};

/// Define-then-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in topological order by the builder methods. Leaf
/// values are supplied with set_input() (or the named-binding overload of
/// forward()); parameters carry their value inside the graph. After
/// forward(), backward(loss) fills gradients for every node on a path to a
/// trainable parameter or a differentiable input.
///
/// A Graph owns its buffers and is not safe for concurrent use; build one
/// instance per thread.
template <typename T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;
  using Bindings = std::unordered_map<std::string, TensorT>;

  NodeId input(std::string name, Shape shape, bool differentiable = false);
  NodeId parameter(std::string name, TensorT value, bool trainable = true);

  /// Stride-1 convolution; `padding` zero rows/columns are added on every side.
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t padding = 0);
  NodeId dense(NodeId x, NodeId weight, NodeId bias);
  NodeId relu(NodeId x);
  /// 2x2 max-pool, stride 2; odd trailing rows/columns form partial windows.
  NodeId maxpool2x2(NodeId x);
  NodeId flatten(NodeId x);
  NodeId softmax(NodeId x);
  NodeId tanh(NodeId x);
  /// scale * x + shift, elementwise.
  NodeId affine(NodeId x, double scale, double shift);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId l2norm_last_axis(NodeId x);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId abs_sum(NodeId x);
  /// Blends `patch` ([3,s,s]) into every image of `images` ([N,3,H,W]) inside
  /// the window [x, x+s) x [y, y+s): out = (1 - a) * image + a * patch, where
  /// `alpha` is either a single value or an [s,s] per-pixel map.
  NodeId overlay(NodeId images, NodeId patch, NodeId alpha, std::size_t x, std::size_t y);
  /// Rows p_j - p_k for every ordered pair j != k of the [B,C] input.
  NodeId pairwise_diff(NodeId x);
  /// Mean over rows of -sum_c target_c * log_softmax(logits)_c.
  NodeId softmax_cross_entropy(NodeId logits, NodeId targets);

  void name_node(NodeId id, std::string name);

  void set_input(NodeId id, TensorT value);
  void forward();
  void forward(const Bindings& bindings);
  void backward(NodeId loss);

  const TensorT& value(NodeId id) const;
  const TensorT& value(std::string_view name) const;
  const TensorT& gradient(NodeId id) const;
  TensorT& parameter_value(NodeId id);

  /// Gradients of every trainable parameter and differentiable input, by name.
  std::map<std::string, TensorT> gradients() const;
  std::vector<NodeId> trainable_parameters() const;

  NodeId find(std::string_view name) const;
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  nlohmann::json to_json() const;

 private:
  struct Cache {
    AlignedVector<T> columns;          // conv2d im2col per image
    std::vector<std::uint32_t> argmax;  // maxpool source offsets
  };

  NodeId push(Node node);
  NodeId unary(OpKind kind, NodeId x, Shape shape);
  NodeId binary_elementwise(OpKind kind, NodeId a, NodeId b);
  void check_id(NodeId id) const;
  [[noreturn]] void fail(NodeId id, const std::string& what) const;

  void eval(NodeId id);
  void grad(NodeId id);

  std::vector<Node> nodes_;
  std::vector<TensorT> values_;
  std::vector<TensorT> grads_;
  std::vector<Cache> caches_;
  std::vector<bool> bound_;
  bool forward_done_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace sts::ad
