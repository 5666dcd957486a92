#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cmkt/tensor.hpp"

namespace cmkt {

class Graph;

// Handle to a node on a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor2D& value() const;
  const Tensor2D& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  // Value of a 1x1 node.
  double scalar() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse sweep
// over the tape is a valid topological order for backpropagation.
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::uint32_t self)>;

  Var constant(Tensor2D value);
  Var leaf(Tensor2D value);
  Var input(Tensor2D value) { return value.requires_grad ? leaf(std::move(value)) : constant(std::move(value)); }

  // Records an op result. `backward` runs only if some input requires grad.
  Var record(Tensor2D value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor2D value, std::span<const Var> inputs, Backward backward);

  const Tensor2D& value(std::uint32_t id) const { return nodes_[id].value; }
  const Tensor2D& grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of node `id`, allocated (zeroed) on first use.
  Tensor2D& grad_buffer(std::uint32_t id);

  // Seeds d(out)/d(out) = 1 for a 1x1 node and sweeps the tape.
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor2D value;
    Tensor2D grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

using ParameterTable = std::map<std::string, Tensor2D>;
using GradTable = std::map<std::string, Tensor2D>;

// Binds named parameters onto a graph on first use, and reads their gradients
// back after a backward sweep.
class ParamBinder {
 public:
  ParamBinder(Graph& graph, const ParameterTable& params, bool trainable = true)
      : graph_(&graph), params_(&params), trainable_(trainable) {}

  Var operator()(const std::string& name);
  bool has(const std::string& name) const { return params_->count(name) != 0; }
  Graph& graph() { return *graph_; }

  // Gradients of every bound parameter; unbound parameters are absent.
  GradTable grads() const;

 private:
  Graph* graph_;
  const ParameterTable* params_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

namespace ad {

Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// x (n x m) + bias (1 x m) broadcast over rows.
Var add_row(Var x, Var bias);
Var linear(Var x, Var weight, Var bias);
Var relu(Var x);
Var swish(Var x);
Var exp(Var x);

Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var log_softmax_cols(Var x);
// Column vector (n x 1) of row-wise cosine similarities, eps added to each norm.
Var cosine_rows(Var a, Var b, double eps = 1e-8);

Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const int> ids);

Var sum(Var x);                   // 1x1
Var dot(Var a, Var b);            // sum(a .* b), 1x1
Var entropy_sum(Var p, double eps = 1e-30);  // sum(p .* log(max(p, eps)))

// Stacks `kernel` consecutive rows with the given stride into one row:
// output row t = [x(t*stride), ..., x(t*stride+kernel-1)], no padding.
Var strided_windows(Var x, std::size_t kernel, std::size_t stride);
// Per-channel convolution along rows with zero "same" padding.
// weight: kernel x channels, bias: 1 x channels.
Var depthwise_conv_same(Var x, Var weight, Var bias);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace ad

}  // namespace cmkt
