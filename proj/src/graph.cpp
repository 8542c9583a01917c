#include "sts/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace sts::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

bool is_scalar_like(const Shape& s) { return shape_size(s) == 1; }

// Output columns [first, last) whose kernel tap `k` lands inside a row of
// `width` input pixels when `pad` zeros sit on each side.
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad, std::size_t width,
                                                std::size_t out_width) {
  const std::size_t first = pad > k ? pad - k : 0;
  const std::size_t last = std::min(out_width, width + pad - k);
  return {std::min(first, last), last};
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Dense: return "dense";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool2x2: return "maxpool2x2";
    case OpKind::Flatten: return "flatten";
    case OpKind::Softmax: return "softmax";
    case OpKind::Tanh: return "tanh";
    case OpKind::Affine: return "affine";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::L2NormLastAxis: return "l2norm_last_axis";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::AbsSum: return "abs_sum";
    case OpKind::Overlay: return "overlay";
    case OpKind::PairwiseDiff: return "pairwise_diff";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Construction

template <typename T>
void Graph<T>::check_id(NodeId id) const {
  if (id >= nodes_.size()) {
    throw Error("graph", "unknown node id " + std::to_string(id));
  }
}

template <typename T>
void Graph<T>::fail(NodeId id, const std::string& what) const {
  const Node& n = nodes_.at(id);
  std::string label = "node " + std::to_string(id) + " (" + std::string(op_name(n.kind));
  if (!n.name.empty()) label += " '" + n.name + "'";
  throw Error("graph", label + "): " + what);
}

template <typename T>
NodeId Graph<T>::push(Node node) {
  for (NodeId in : node.inputs) {
    check_id(in);
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  nodes_.push_back(std::move(node));
  values_.emplace_back(nodes_.back().shape);
  grads_.emplace_back();
  caches_.emplace_back();
  bound_.push_back(false);
  forward_done_ = false;
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::input(std::string name, Shape shape, bool differentiable) {
  Node n;
  n.kind = OpKind::Input;
  n.name = std::move(name);
  n.shape = std::move(shape);
  n.differentiable = differentiable;
  n.requires_grad = differentiable;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::parameter(std::string name, TensorT value, bool trainable) {
  Node n;
  n.kind = OpKind::Parameter;
  n.name = std::move(name);
  n.shape = value.shape();
  n.trainable = trainable;
  n.requires_grad = trainable;
  NodeId id = push(std::move(n));
  values_[id] = std::move(value);
  bound_[id] = true;
  return id;
}

template <typename T>
NodeId Graph<T>::unary(OpKind kind, NodeId x, Shape shape) {
  Node n;
  n.kind = kind;
  n.inputs = {x};
  n.shape = std::move(shape);
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t padding) {
  check_id(x);
  check_id(weight);
  check_id(bias);
  const Shape& xs = nodes_[x].shape;
  const Shape& ws = nodes_[weight].shape;
  const Shape& bs = nodes_[bias].shape;
  if (xs.size() != 4 || ws.size() != 4 || bs.size() != 1 || ws[1] != xs[1] ||
      ws[2] != ws[3] || bs[0] != ws[0] || ws[2] > xs[2] + 2 * padding ||
      ws[3] > xs[3] + 2 * padding) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) +
                             " (conv2d): shape mismatch: input " + shape_string(xs) +
                             ", weight " + shape_string(ws) + ", bias " + shape_string(bs));
  }
  Node n;
  n.kind = OpKind::Conv2d;
  n.inputs = {x, weight, bias};
  n.padding = padding;
  n.shape = {xs[0], ws[0], xs[2] + 2 * padding - ws[2] + 1, xs[3] + 2 * padding - ws[3] + 1};
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::dense(NodeId x, NodeId weight, NodeId bias) {
  check_id(x);
  check_id(weight);
  check_id(bias);
  const Shape& xs = nodes_[x].shape;
  const Shape& ws = nodes_[weight].shape;
  const Shape& bs = nodes_[bias].shape;
  if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1 || ws[0] != xs[1] || bs[0] != ws[1]) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) +
                             " (dense): shape mismatch: input " + shape_string(xs) +
                             ", weight " + shape_string(ws) + ", bias " + shape_string(bs));
  }
  Node n;
  n.kind = OpKind::Dense;
  n.inputs = {x, weight, bias};
  n.shape = {xs[0], ws[1]};
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::relu(NodeId x) {
  check_id(x);
  return unary(OpKind::Relu, x, nodes_[x].shape);
}

template <typename T>
NodeId Graph<T>::maxpool2x2(NodeId x) {
  check_id(x);
  const Shape& xs = nodes_[x].shape;
  if (xs.size() != 4) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) + " (maxpool2x2): needs [N,C,H,W], got " +
                             shape_string(xs));
  }
  return unary(OpKind::MaxPool2x2, x, {xs[0], xs[1], (xs[2] + 1) / 2, (xs[3] + 1) / 2});
}

template <typename T>
NodeId Graph<T>::flatten(NodeId x) {
  check_id(x);
  const Shape& xs = nodes_[x].shape;
  if (xs.empty()) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) + " (flatten): scalar input");
  }
  return unary(OpKind::Flatten, x, {xs[0], shape_size(xs) / xs[0]});
}

template <typename T>
NodeId Graph<T>::softmax(NodeId x) {
  check_id(x);
  if (nodes_[x].shape.empty()) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) + " (softmax): scalar input");
  }
  return unary(OpKind::Softmax, x, nodes_[x].shape);
}

template <typename T>
NodeId Graph<T>::tanh(NodeId x) {
  check_id(x);
  return unary(OpKind::Tanh, x, nodes_[x].shape);
}

template <typename T>
NodeId Graph<T>::affine(NodeId x, double scale, double shift) {
  check_id(x);
  NodeId id = unary(OpKind::Affine, x, nodes_[x].shape);
  nodes_[id].scale = scale;
  nodes_[id].shift = shift;
  return id;
}

template <typename T>
NodeId Graph<T>::binary_elementwise(OpKind kind, NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  const Shape& as = nodes_[a].shape;
  const Shape& bs = nodes_[b].shape;
  if (as != bs && !is_scalar_like(bs)) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) + " (" +
                             std::string(op_name(kind)) + "): shape mismatch " +
                             shape_string(as) + " vs " + shape_string(bs));
  }
  Node n;
  n.kind = kind;
  n.inputs = {a, b};
  n.shape = as;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::add(NodeId a, NodeId b) {
  return binary_elementwise(OpKind::Add, a, b);
}
template <typename T>
NodeId Graph<T>::sub(NodeId a, NodeId b) {
  return binary_elementwise(OpKind::Sub, a, b);
}
template <typename T>
NodeId Graph<T>::mul(NodeId a, NodeId b) {
  return binary_elementwise(OpKind::Mul, a, b);
}

template <typename T>
NodeId Graph<T>::l2norm_last_axis(NodeId x) {
  check_id(x);
  Shape s = nodes_[x].shape;
  if (s.empty()) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) + " (l2norm_last_axis): scalar input");
  }
  s.pop_back();
  return unary(OpKind::L2NormLastAxis, x, s);
}

template <typename T>
NodeId Graph<T>::sum(NodeId x) {
  check_id(x);
  return unary(OpKind::Sum, x, {});
}
template <typename T>
NodeId Graph<T>::mean(NodeId x) {
  check_id(x);
  return unary(OpKind::Mean, x, {});
}
template <typename T>
NodeId Graph<T>::abs_sum(NodeId x) {
  check_id(x);
  return unary(OpKind::AbsSum, x, {});
}

template <typename T>
NodeId Graph<T>::overlay(NodeId images, NodeId patch, NodeId alpha, std::size_t x, std::size_t y) {
  check_id(images);
  check_id(patch);
  check_id(alpha);
  const Shape& is = nodes_[images].shape;
  const Shape& ps = nodes_[patch].shape;
  const Shape& as = nodes_[alpha].shape;
  const std::string where = "node " + std::to_string(nodes_.size()) + " (overlay): ";
  if (is.size() != 4 || ps.size() != 3 || ps[0] != is[1] || ps[1] != ps[2]) {
    throw Error("shape", where + "images " + shape_string(is) + " incompatible with patch " +
                             shape_string(ps));
  }
  const std::size_t s = ps[1];
  if (!(is_scalar_like(as) || (as.size() == 2 && as[0] == s && as[1] == s))) {
    throw Error("shape", where + "alpha " + shape_string(as) + " must be scalar or [s,s]");
  }
  if (x + s > is[3] || y + s > is[2]) {
    throw Error("bounds", where + "patch of size " + std::to_string(s) + " at (" +
                              std::to_string(x) + "," + std::to_string(y) +
                              ") exceeds image " + shape_string(is));
  }
  Node n;
  n.kind = OpKind::Overlay;
  n.inputs = {images, patch, alpha};
  n.shape = is;
  n.x = x;
  n.y = y;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::pairwise_diff(NodeId x) {
  check_id(x);
  const Shape& xs = nodes_[x].shape;
  if (xs.size() != 2 || xs[0] < 2) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) +
                             " (pairwise_diff): needs [B,C] with B >= 2, got " + shape_string(xs));
  }
  return unary(OpKind::PairwiseDiff, x, {xs[0] * (xs[0] - 1), xs[1]});
}

template <typename T>
NodeId Graph<T>::softmax_cross_entropy(NodeId logits, NodeId targets) {
  check_id(logits);
  check_id(targets);
  const Shape& ls = nodes_[logits].shape;
  if (ls.size() != 2 || nodes_[targets].shape != ls) {
    throw Error("shape", "node " + std::to_string(nodes_.size()) +
                             " (softmax_cross_entropy): logits " + shape_string(ls) +
                             " vs targets " + shape_string(nodes_[targets].shape));
  }
  Node n;
  n.kind = OpKind::SoftmaxCrossEntropy;
  n.inputs = {logits, targets};
  n.shape = {};
  return push(std::move(n));
}

template <typename T>
void Graph<T>::name_node(NodeId id, std::string name) {
  check_id(id);
  nodes_[id].name = std::move(name);
}

// ---------------------------------------------------------------------------
// Access

template <typename T>
NodeId Graph<T>::find(std::string_view name) const {
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return i;
  }
  throw Error("graph", "no node named '" + std::string(name) + "'");
}

template <typename T>
void Graph<T>::set_input(NodeId id, TensorT value) {
  check_id(id);
  if (nodes_[id].kind != OpKind::Input) fail(id, "set_input on a non-input node");
  if (value.shape() != nodes_[id].shape) {
    fail(id, "shape mismatch: bound " + shape_string(value.shape()) + ", declared " +
                 shape_string(nodes_[id].shape));
  }
  values_[id] = std::move(value);
  bound_[id] = true;
  forward_done_ = false;
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(NodeId id) const {
  check_id(id);
  return values_[id];
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(std::string_view name) const {
  return values_[find(name)];
}

template <typename T>
const BasicTensor<T>& Graph<T>::gradient(NodeId id) const {
  check_id(id);
  if (!nodes_[id].requires_grad) fail(id, "node does not require a gradient");
  return grads_[id];
}

template <typename T>
BasicTensor<T>& Graph<T>::parameter_value(NodeId id) {
  check_id(id);
  if (nodes_[id].kind != OpKind::Parameter) fail(id, "not a parameter");
  forward_done_ = false;
  return values_[id];
}

template <typename T>
std::vector<NodeId> Graph<T>::trainable_parameters() const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind == OpKind::Parameter && nodes_[i].trainable) out.push_back(i);
  }
  return out;
}

template <typename T>
std::map<std::string, BasicTensor<T>> Graph<T>::gradients() const {
  std::map<std::string, TensorT> out;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.trainable || n.differentiable) {
      out.emplace(n.name.empty() ? "#" + std::to_string(i) : n.name, grads_[i]);
    }
  }
  return out;
}

template <typename T>
nlohmann::json Graph<T>::to_json() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    nlohmann::json j{{"id", i},
                     {"op", std::string(op_name(n.kind))},
                     {"inputs", n.inputs},
                     {"shape", n.shape}};
    if (!n.name.empty()) j["name"] = n.name;
    if (n.trainable) j["trainable"] = true;
    if (n.differentiable) j["differentiable"] = true;
    nodes.push_back(std::move(j));
  }
  return {{"nodes", std::move(nodes)}};
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
void Graph<T>::forward(const Bindings& bindings) {
  for (const auto& [name, tensor] : bindings) set_input(find(name), tensor);
  forward();
}

template <typename T>
void Graph<T>::forward() {
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.kind == OpKind::Input || n.kind == OpKind::Parameter) {
      if (!bound_[id]) fail(id, "input not bound");
      continue;
    }
    eval(id);
    if (!values_[id].all_finite()) fail(id, "non-finite value produced");
  }
  forward_done_ = true;
}

template <typename T>
void Graph<T>::eval(NodeId id) {
  const Node& n = nodes_[id];
  TensorT& out = values_[id];
  out.resize(n.shape);
  T* o = out.raw();
  auto in = [&](std::size_t k) -> const TensorT& { return values_[n.inputs[k]]; };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
      return;

    case OpKind::Conv2d: {
      const TensorT& x = in(0);
      const TensorT& w = in(1);
      const TensorT& b = in(2);
      const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t Cout = w.dim(0), K = w.dim(2);
      const std::size_t Ho = n.shape[2], Wo = n.shape[3], P = Ho * Wo;
      const std::size_t rows = Cin * K * K, pad = n.padding;
      auto& cols = caches_[id].columns;
      cols.resize(N * rows * P);
      ConstMapMat<T> wm(w.raw(), Cout, rows);
      for (std::size_t img = 0; img < N; ++img) {
        const T* src = x.raw() + img * Cin * H * W;
        T* col = cols.data() + img * rows * P;
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t ky = 0; ky < K; ++ky)
            for (std::size_t kx = 0; kx < K; ++kx) {
              T* dst = col + ((ci * K + ky) * K + kx) * P;
              if (pad == 0) {
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const T* s = src + (ci * H + oy + ky) * W + kx;
                  std::copy(s, s + Wo, dst + oy * Wo);
                }
                continue;
              }
              const auto [ox0, ox1] = valid_range(kx, pad, W, Wo);
              for (std::size_t oy = 0; oy < Ho; ++oy) {
                T* d = dst + oy * Wo;
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
                  std::fill(d, d + Wo, T{0});
                  continue;
                }
                std::fill(d, d + ox0, T{0});
                std::fill(d + ox1, d + Wo, T{0});
                const T* s = src + (ci * H + static_cast<std::size_t>(iy)) * W + ox0 + kx - pad;
                std::copy(s, s + (ox1 - ox0), d + ox0);
              }
            }
        MapMat<T> om(o + img * Cout * P, Cout, P);
        om.noalias() = wm * ConstMapMat<T>(col, rows, P);
        for (std::size_t co = 0; co < Cout; ++co) om.row(co).array() += b[co];
      }
      return;
    }

    case OpKind::Dense: {
      const TensorT& x = in(0);
      const TensorT& w = in(1);
      const TensorT& b = in(2);
      const std::size_t N = x.dim(0), D = x.dim(1), O = w.dim(1);
      MapMat<T> om(o, N, O);
      om.noalias() = ConstMapMat<T>(x.raw(), N, D) * ConstMapMat<T>(w.raw(), D, O);
      om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.raw(), O);
      return;
    }

    case OpKind::Relu: {
      const T* x = in(0).raw();
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = x[i] > T{0} ? x[i] : T{0};
      return;
    }

    case OpKind::MaxPool2x2: {
      const TensorT& x = in(0);
      const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t Ho = n.shape[2], Wo = n.shape[3];
      auto& arg = caches_[id].argmax;
      arg.resize(out.size());
      std::size_t k = 0;
      for (std::size_t p = 0; p < NC; ++p) {
        const std::size_t base = p * H * W;
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox, ++k) {
            const std::size_t y0 = 2 * oy, x0 = 2 * ox;
            const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
            std::size_t best = base + y0 * W + x0;
            const std::size_t cand[3] = {base + y0 * W + x1, base + y1 * W + x0, base + y1 * W + x1};
            for (std::size_t c : cand)
              if (x[c] > x[best]) best = c;
            o[k] = x[best];
            arg[k] = static_cast<std::uint32_t>(best);
          }
      }
      return;
    }

    case OpKind::Flatten:
      std::copy(in(0).raw(), in(0).raw() + out.size(), o);
      return;

    case OpKind::Softmax: {
      const T* x = in(0).raw();
      const std::size_t C = n.shape.back(), rows = out.size() / C;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * C;
        T* orow = o + r * C;
        const T m = *std::max_element(xr, xr + C);
        T total = 0;
        for (std::size_t c = 0; c < C; ++c) total += orow[c] = std::exp(xr[c] - m);
        for (std::size_t c = 0; c < C; ++c) orow[c] /= total;
      }
      return;
    }

    case OpKind::Tanh: {
      const T* x = in(0).raw();
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::tanh(x[i]);
      return;
    }

    case OpKind::Affine: {
      const T* x = in(0).raw();
      const T a = static_cast<T>(n.scale), c = static_cast<T>(n.shift);
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = a * x[i] + c;
      return;
    }

    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const T* a = in(0).raw();
      const T* b = in(1).raw();
      const bool bcast = in(1).size() == 1 && out.size() != 1;
      for (std::size_t i = 0; i < out.size(); ++i) {
        const T bv = bcast ? b[0] : b[i];
        o[i] = n.kind == OpKind::Add ? a[i] + bv : n.kind == OpKind::Sub ? a[i] - bv : a[i] * bv;
      }
      return;
    }

    case OpKind::L2NormLastAxis: {
      const T* x = in(0).raw();
      const std::size_t D = nodes_[n.inputs[0]].shape.back(), rows = out.size();
      for (std::size_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::size_t d = 0; d < D; ++d) acc += x[r * D + d] * x[r * D + d];
        o[r] = std::sqrt(acc + static_cast<T>(kNormEpsilon));
      }
      return;
    }

    case OpKind::Sum:
    case OpKind::Mean:
    case OpKind::AbsSum: {
      const TensorT& x = in(0);
      T acc = 0;
      for (T v : x.data()) acc += n.kind == OpKind::AbsSum ? std::abs(v) : v;
      o[0] = n.kind == OpKind::Mean ? acc / static_cast<T>(x.size()) : acc;
      return;
    }

    case OpKind::Overlay: {
      const TensorT& img = in(0);
      const TensorT& patch = in(1);
      const TensorT& alpha = in(2);
      std::copy(img.raw(), img.raw() + out.size(), o);
      const std::size_t N = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
      const std::size_t s = patch.dim(1);
      const bool scalar_alpha = alpha.size() == 1;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t py = 0; py < s; ++py) {
            const std::size_t row = ((i * C + c) * H + n.y + py) * W + n.x;
            for (std::size_t px = 0; px < s; ++px) {
              const T a = scalar_alpha ? alpha[0] : alpha[py * s + px];
              o[row + px] = (T{1} - a) * img[row + px] + a * patch[(c * s + py) * s + px];
            }
          }
      return;
    }

    case OpKind::PairwiseDiff: {
      const T* x = in(0).raw();
      const std::size_t B = nodes_[n.inputs[0]].shape[0], C = n.shape[1];
      std::size_t r = 0;
      for (std::size_t j = 0; j < B; ++j)
        for (std::size_t k = 0; k < B; ++k) {
          if (k == j) continue;
          for (std::size_t c = 0; c < C; ++c) o[r * C + c] = x[j * C + c] - x[k * C + c];
          ++r;
        }
      return;
    }

    case OpKind::SoftmaxCrossEntropy: {
      const T* z = in(0).raw();
      const T* t = in(1).raw();
      const std::size_t N = nodes_[n.inputs[0]].shape[0], C = nodes_[n.inputs[0]].shape[1];
      auto& prob = caches_[id].columns;
      prob.resize(N * C);
      T loss = 0;
      for (std::size_t r = 0; r < N; ++r) {
        const T* zr = z + r * C;
        const T m = *std::max_element(zr, zr + C);
        T total = 0;
        for (std::size_t c = 0; c < C; ++c) total += prob[r * C + c] = std::exp(zr[c] - m);
        const T lse = m + std::log(total);
        for (std::size_t c = 0; c < C; ++c) {
          prob[r * C + c] /= total;
          loss += t[r * C + c] * (lse - zr[c]);
        }
      }
      o[0] = loss / static_cast<T>(N);
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
void Graph<T>::backward(NodeId loss) {
  check_id(loss);
  if (!forward_done_) fail(loss, "backward called before forward");
  if (values_[loss].size() != 1) {
    fail(loss, "loss must be scalar, got shape " + shape_string(nodes_[loss].shape));
  }
  for (NodeId id = 0; id <= loss; ++id) {
    if (nodes_[id].requires_grad) {
      grads_[id].resize(nodes_[id].shape);
      grads_[id].fill(T{0});
    }
  }
  if (!nodes_[loss].requires_grad) return;
  grads_[loss][0] = T{1};
  for (NodeId id = loss + 1; id-- > 0;) {
    if (nodes_[id].requires_grad && !nodes_[id].inputs.empty()) grad(id);
  }
}

template <typename T>
void Graph<T>::grad(NodeId id) {
  const Node& n = nodes_[id];
  const TensorT& out = values_[id];
  const TensorT& g = grads_[id];
  const T* go = g.raw();
  auto in = [&](std::size_t k) -> const TensorT& { return values_[n.inputs[k]]; };
  auto needs = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
  auto gin = [&](std::size_t k) -> T* { return grads_[n.inputs[k]].raw(); };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
      return;

    case OpKind::Conv2d: {
      const TensorT& x = in(0);
      const TensorT& w = in(1);
      const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t Cout = w.dim(0), K = w.dim(2);
      const std::size_t Ho = n.shape[2], Wo = n.shape[3], P = Ho * Wo;
      const std::size_t rows = Cin * K * K, pad = n.padding;
      const auto& cols = caches_[id].columns;
      ConstMapMat<T> wm(w.raw(), Cout, rows);
      AlignedVector<T> dcol(needs(0) ? rows * P : 0);
      for (std::size_t img = 0; img < N; ++img) {
        ConstMapMat<T> gm(go + img * Cout * P, Cout, P);
        const T* col = cols.data() + img * rows * P;
        if (needs(1)) {
          MapMat<T>(gin(1), Cout, rows).noalias() += gm * ConstMapMat<T>(col, rows, P).transpose();
        }
        if (needs(2)) {
          T* gb = gin(2);
          for (std::size_t co = 0; co < Cout; ++co) gb[co] += gm.row(co).sum();
        }
        if (needs(0)) {
          MapMat<T>(dcol.data(), rows, P).noalias() = wm.transpose() * gm;
          T* dst = gin(0) + img * Cin * H * W;
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                const T* src = dcol.data() + ((ci * K + ky) * K + kx) * P;
                const auto [ox0, ox1] = valid_range(kx, pad, W, Wo);
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  T* d = dst + (ci * H + static_cast<std::size_t>(iy)) * W;
                  const T* s = src + oy * Wo;
                  for (std::size_t ox = ox0; ox < ox1; ++ox) d[ox + kx - pad] += s[ox];
                }
              }
        }
      }
      return;
    }

    case OpKind::Dense: {
      const TensorT& x = in(0);
      const TensorT& w = in(1);
      const std::size_t N = x.dim(0), D = x.dim(1), O = w.dim(1);
      ConstMapMat<T> gm(go, N, O);
      if (needs(0)) {
        MapMat<T>(gin(0), N, D).noalias() += gm * ConstMapMat<T>(w.raw(), D, O).transpose();
      }
      if (needs(1)) {
        MapMat<T>(gin(1), D, O).noalias() += ConstMapMat<T>(x.raw(), N, D).transpose() * gm;
      }
      if (needs(2)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gin(2), O) += gm.colwise().sum();
      }
      return;
    }

    case OpKind::Relu: {
      if (!needs(0)) return;
      const T* x = in(0).raw();
      T* gx = gin(0);
      for (std::size_t i = 0; i < out.size(); ++i)
        if (x[i] > T{0}) gx[i] += go[i];
      return;
    }

    case OpKind::MaxPool2x2: {
      if (!needs(0)) return;
      const auto& arg = caches_[id].argmax;
      T* gx = gin(0);
      for (std::size_t k = 0; k < out.size(); ++k) gx[arg[k]] += go[k];
      return;
    }

    case OpKind::Flatten: {
      if (!needs(0)) return;
      T* gx = gin(0);
      for (std::size_t i = 0; i < out.size(); ++i) gx[i] += go[i];
      return;
    }

    case OpKind::Softmax: {
      if (!needs(0)) return;
      const T* y = out.raw();
      T* gx = gin(0);
      const std::size_t C = n.shape.back(), rows = out.size() / C;
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += go[r * C + c] * y[r * C + c];
        for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += y[r * C + c] * (go[r * C + c] - dot);
      }
      return;
    }

    case OpKind::Tanh: {
      if (!needs(0)) return;
      const T* y = out.raw();
      T* gx = gin(0);
      for (std::size_t i = 0; i < out.size(); ++i) gx[i] += go[i] * (T{1} - y[i] * y[i]);
      return;
    }

    case OpKind::Affine: {
      if (!needs(0)) return;
      const T a = static_cast<T>(n.scale);
      T* gx = gin(0);
      for (std::size_t i = 0; i < out.size(); ++i) gx[i] += a * go[i];
      return;
    }

    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const T* a = in(0).raw();
      const T* b = in(1).raw();
      const bool bcast = in(1).size() == 1 && out.size() != 1;
      if (needs(0)) {
        T* ga = gin(0);
        for (std::size_t i = 0; i < out.size(); ++i)
          ga[i] += n.kind == OpKind::Mul ? go[i] * (bcast ? b[0] : b[i]) : go[i];
      }
      if (needs(1)) {
        T* gb = gin(1);
        for (std::size_t i = 0; i < out.size(); ++i) {
          const T d = n.kind == OpKind::Add ? go[i] : n.kind == OpKind::Sub ? -go[i] : go[i] * a[i];
          gb[bcast ? 0 : i] += d;
        }
      }
      return;
    }

    case OpKind::L2NormLastAxis: {
      if (!needs(0)) return;
      const T* x = in(0).raw();
      T* gx = gin(0);
      const std::size_t D = nodes_[n.inputs[0]].shape.back();
      for (std::size_t r = 0; r < out.size(); ++r) {
        const T scale = go[r] / out[r];
        for (std::size_t d = 0; d < D; ++d) gx[r * D + d] += scale * x[r * D + d];
      }
      return;
    }

    case OpKind::Sum:
    case OpKind::Mean:
    case OpKind::AbsSum: {
      if (!needs(0)) return;
      const TensorT& x = in(0);
      T* gx = gin(0);
      const T base = n.kind == OpKind::Mean ? go[0] / static_cast<T>(x.size()) : go[0];
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (n.kind == OpKind::AbsSum) {
          gx[i] += x[i] > T{0} ? base : x[i] < T{0} ? -base : T{0};
        } else {
          gx[i] += base;
        }
      }
      return;
    }

    case OpKind::Overlay: {
      const TensorT& img = in(0);
      const TensorT& patch = in(1);
      const TensorT& alpha = in(2);
      const std::size_t N = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
      const std::size_t s = patch.dim(1);
      const bool scalar_alpha = alpha.size() == 1;
      if (needs(0)) {
        T* gi = gin(0);
        for (std::size_t i = 0; i < out.size(); ++i) gi[i] += go[i];
      }
      T* gi = needs(0) ? gin(0) : nullptr;
      T* gp = needs(1) ? gin(1) : nullptr;
      T* ga = needs(2) ? gin(2) : nullptr;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t py = 0; py < s; ++py) {
            const std::size_t row = ((i * C + c) * H + n.y + py) * W + n.x;
            for (std::size_t px = 0; px < s; ++px) {
              const std::size_t ai = scalar_alpha ? 0 : py * s + px;
              const std::size_t pi = (c * s + py) * s + px;
              const T a = alpha[ai];
              const T gv = go[row + px];
              if (gi) gi[row + px] -= a * gv;
              if (gp) gp[pi] += a * gv;
              if (ga) ga[ai] += gv * (patch[pi] - img[row + px]);
            }
          }
      return;
    }

    case OpKind::PairwiseDiff: {
      if (!needs(0)) return;
      T* gx = gin(0);
      const std::size_t B = nodes_[n.inputs[0]].shape[0], C = n.shape[1];
      std::size_t r = 0;
      for (std::size_t j = 0; j < B; ++j)
        for (std::size_t k = 0; k < B; ++k) {
          if (k == j) continue;
          for (std::size_t c = 0; c < C; ++c) {
            gx[j * C + c] += go[r * C + c];
            gx[k * C + c] -= go[r * C + c];
          }
          ++r;
        }
      return;
    }

    case OpKind::SoftmaxCrossEntropy: {
      const T* z = in(0).raw();
      const T* t = in(1).raw();
      const std::size_t N = nodes_[n.inputs[0]].shape[0], C = nodes_[n.inputs[0]].shape[1];
      const auto& prob = caches_[id].columns;
      const T scale = go[0] / static_cast<T>(N);
      if (needs(0)) {
        T* gz = gin(0);
        for (std::size_t r = 0; r < N; ++r) {
          T mass = 0;
          for (std::size_t c = 0; c < C; ++c) mass += t[r * C + c];
          for (std::size_t c = 0; c < C; ++c)
            gz[r * C + c] += scale * (prob[r * C + c] * mass - t[r * C + c]);
        }
      }
      if (needs(1)) {
        T* gt = gin(1);
        for (std::size_t r = 0; r < N; ++r) {
          const T* zr = z + r * C;
          const T m = *std::max_element(zr, zr + C);
          T total = 0;
          for (std::size_t c = 0; c < C; ++c) total += std::exp(zr[c] - m);
          const T lse = m + std::log(total);
          for (std::size_t c = 0; c < C; ++c) gt[r * C + c] += scale * (lse - zr[c]);
        }
      }
      return;
    }
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace sts::ad
